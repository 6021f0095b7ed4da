//! Acceptance suite: one test per release criterion, numbered. The heavy
//! criteria (7, 8, 3, 11) share a single two-pass `repro` pipeline run in a
//! temp workdir; everything else is self-contained and fast.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use lavic::adapters::{attach, AdapterConfig, Side};
use lavic::checkpoint::{load_archive, vlm_from_archive, Stage};
use lavic::cli::cmd_repro;
use lavic::config::{LmConfig, RunConfig, Variant, VisionConfig};
use lavic::corpus::{Example, Item, Utterance};
use lavic::error::Error;
use lavic::eval::{hit_ratio_at_1, mean_hr, valid_ratio, MetricsReport};
use lavic::gradcheck::check_gradients;
use lavic::image::Raster;
use lavic::model::{randn, side_digest, Scope, SeqElem, TrainSeq, Vlm};
use lavic::recommend::{
    build_recommendation_prompt, PrecomputedSlots, Prediction, PromptElem, PromptMode, SlotSource,
};
use lavic::retrieval::{assemble_slate, build_bm25_index, tokenize_text, CandidateSlate};
use lavic::vision::encode_item;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pass(n: u32, what: &str, detail: String) {
    eprintln!("criterion {n:02} PASS — {what}: {detail}");
}

// ---------------------------------------------------------------------------
// shared two-pass repro pipeline (criteria 3, 7, 8, 11)

struct ReproArtifacts {
    workdir: PathBuf,
    reports: Vec<MetricsReport>,
    first_csv: Vec<u8>,
    second_csv: Vec<u8>,
    first_slates: Vec<(u64, Vec<u8>)>,
    second_slates: Vec<(u64, Vec<u8>)>,
    first_elapsed: Duration,
    total_elapsed: Duration,
    // kept so the tempdir outlives every test
    _dir: tempfile::TempDir,
}

fn ablation_config(workdir: PathBuf) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.workdir = workdir;
    cfg.data.n_items = 80;
    cfg.data.n_convs = 1200;
    cfg
}

fn read_slates(cfg: &RunConfig) -> Vec<(u64, Vec<u8>)> {
    cfg.eval_seeds
        .iter()
        .map(|&s| {
            let p = cfg.workdir.join(format!("slates_{s}.jsonl"));
            (s, std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display())))
        })
        .collect()
}

fn repro() -> &'static ReproArtifacts {
    static ART: OnceLock<ReproArtifacts> = OnceLock::new();
    ART.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let cfg = ablation_config(dir.path().join("work"));
        let t0 = Instant::now();
        let reports = cmd_repro(&cfg).expect("first repro run");
        let first_elapsed = t0.elapsed();
        let report_path = cfg.workdir.join("report.csv");
        let first_csv = std::fs::read(&report_path).expect("report.csv");
        let first_slates = read_slates(&cfg);
        cmd_repro(&cfg).expect("second repro run");
        let total_elapsed = t0.elapsed();
        let second_csv = std::fs::read(&report_path).expect("report.csv");
        let second_slates = read_slates(&cfg);
        ReproArtifacts {
            workdir: cfg.workdir,
            reports,
            first_csv,
            second_csv,
            first_slates,
            second_slates,
            first_elapsed,
            total_elapsed,
            _dir: dir,
        }
    })
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_token_budget_law() {
    let t0 = Instant::now();
    // toy scale: actual encodings obey the 5 / 5*(R+1) budget
    let cfg = RunConfig::default();
    let vlm = Vlm::init(&cfg.vision, &cfg.lm, 11);
    let img = Raster::filled(cfg.data.image_side, [200, 40, 40]);
    let set = encode_item(&vlm, &img).unwrap();
    let r = cfg.vision.r();
    assert_eq!(set.compact().nrows(), 5);
    assert_eq!(set.full_concat().nrows(), 5 * (r + 1));
    // production constants: R=576 patches per sub-image
    let slots = PrecomputedSlots {
        compact: HashMap::new(),
        full: HashMap::new(),
        r: 576,
    };
    assert_eq!(slots.token_count(PromptMode::Compact), 5);
    assert_eq!(slots.token_count(PromptMode::EntireTokens), 2885);
    assert!(t0.elapsed() < Duration::from_secs(1));
    pass(1, "token budget", format!("compact 5, full {} (toy R={r}), 2885:5 at R=576", 5 * (r + 1)));
}

#[test]
fn criterion_02_production_scale_overflow() {
    let t0 = Instant::now();
    // slot source that refuses to materialize anything: the builder must
    // reject from counts alone
    struct Phantom;
    impl SlotSource for Phantom {
        fn token_count(&self, mode: PromptMode) -> usize {
            match mode {
                PromptMode::EntireTokens => 5 * 577,
                PromptMode::Compact => 5,
                PromptMode::TextOnly => 0,
            }
        }
        fn elements(&self, _: &str, _: PromptMode) -> lavic::Result<Vec<PromptElem>> {
            panic!("length check must come before slot materialization");
        }
    }
    let example = Example {
        conv_id: "C00001".into(),
        turn: 2,
        context: vec![Utterance {
            speaker: lavic::corpus::Speaker::Seeker,
            text: "looking for a lamp in red".into(),
        }],
        ground_truth_item: "IT00000001".into(),
    };
    let candidates: Vec<String> = (0..10).map(|j| format!("IT0000000{j}")).collect();
    let titles: HashMap<String, String> =
        candidates.iter().map(|c| (c.clone(), "lamp".to_string())).collect();
    let slate = CandidateSlate {
        example_ref: example.example_ref(),
        candidates,
        ground_truth_index: 1,
        swapped: false,
    };
    match build_recommendation_prompt(
        &example,
        &slate,
        &titles,
        &Phantom,
        PromptMode::EntireTokens,
        4096,
        false,
    ) {
        Err(Error::ContextOverflow { len, limit }) => {
            assert!(len > 28_850, "len {len}");
            assert_eq!(limit, 4096);
            assert!(t0.elapsed() < Duration::from_secs(1));
            pass(2, "production-scale overflow", format!("{len} tokens vs limit {limit}"));
        }
        other => panic!("expected context overflow, got {other:?}"),
    }
}

#[test]
fn criterion_03_stage_isolation_digests() {
    let art = repro();
    let load = |sub: &str| {
        let dir = art.workdir.join("checkpoints").join(sub);
        vlm_from_archive(&load_archive(&dir).unwrap()).unwrap()
    };
    let stage0 = load(Stage::Stage0.dir_name());
    let distilled = load(Stage::Distilled.dir_name());
    // stage 1 trained vision adapters only: LM bytes identical
    assert_eq!(
        side_digest(&stage0.params, Side::Lm, None),
        side_digest(&distilled.params, Side::Lm, None),
        "LM changed during distillation"
    );
    // stage 2 trained LM adapters only: the vision side (base + adapters) of
    // every tuned checkpoint matches its source model byte for byte
    for variant in Variant::ALL {
        let tuned = load(&format!("{}/{}", Stage::Tuned.dir_name(), variant.tag()));
        let source = if variant == Variant::Full { &distilled } else { &stage0 };
        assert_eq!(
            side_digest(&tuned.params, Side::Vision, tuned.vision_lora.as_ref()),
            side_digest(&source.params, Side::Vision, source.vision_lora.as_ref()),
            "vision changed during tuning ({})",
            variant.tag()
        );
    }
    pass(3, "stage isolation", "LM frozen through stage 1, vision frozen through stage 2".into());
}

#[test]
fn criterion_04_zero_init_adapter_transparency() {
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let base = Vlm::init(&cfg.vision, &cfg.lm, 7);
    let mut adapted = base.clone();
    let cands = adapted.params.adapter_candidates();
    let vd = side_digest(&adapted.params, Side::Vision, None);
    adapted.vision_lora = Some(
        attach(AdapterConfig::from_settings(&cfg.adapter, Side::Vision), &cands, vd, 1).unwrap(),
    );
    let ld = side_digest(&adapted.params, Side::Lm, None);
    adapted.lm_lora = Some(
        attach(AdapterConfig::from_settings(&cfg.adapter, Side::Lm), &cands, ld, 2).unwrap(),
    );
    let patches = randn(&mut ChaCha8Rng::seed_from_u64(9), 4, 192, 0.5);
    let elems = vec![
        SeqElem::Token(lavic::vocab::BOS),
        SeqElem::Token(104),
        SeqElem::Cls(&patches),
        SeqElem::Token(105),
    ];
    let a = base.logits(&elems).unwrap();
    let b = adapted.logits(&elems).unwrap();
    assert_eq!(a.dim(), b.dim());
    let mut max_abs = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x, y, "logit drift with zero-initialized adapters");
        max_abs = max_abs.max((x - y).abs());
    }
    assert!(t0.elapsed() < Duration::from_secs(10));
    pass(4, "adapter transparency", format!("max |Δlogit| = {max_abs} (exact)"));
}

#[test]
fn criterion_05_distillation_efficacy() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.workdir = dir.path().join("work");
    cfg.data.n_items = 200;
    cfg.data.n_convs = 10;
    // a briefly pretrained base keeps compact-sequence PPL high, which is
    // exactly the gap stage 1 is supposed to close
    cfg.pretrain.epochs = 3;
    cfg.pretrain.warmup_epochs = 3;
    cfg.pretrain.copy_examples = 50;
    lavic::cli::cmd_gen_data(&cfg).unwrap();
    let vlm = lavic::cli::cmd_pretrain(&cfg).unwrap();

    let catalog = lavic::corpus::load_catalog(&cfg.workdir.join("items.jsonl")).unwrap();
    let mut data = Vec::with_capacity(catalog.len());
    for item in &catalog {
        let img = Raster::load_ppm(&cfg.workdir.join(&item.image_path)).unwrap();
        let patches = lavic::vision::sub_image_patches(&img, &cfg.vision).unwrap();
        let desc = lavic::distill::generate_description(
            &vlm,
            item,
            &patches,
            cfg.distill.max_desc_tokens,
            "acceptance",
        )
        .unwrap();
        data.push(lavic::distill::DistillItem { item: item.clone(), patches, desc });
    }

    let mut ratios = Vec::new();
    for seed in [0u64, 1, 2] {
        let mut m = vlm.clone();
        let vd = side_digest(&m.params, Side::Vision, None);
        m.vision_lora = Some(
            attach(
                AdapterConfig::from_settings(&cfg.adapter, Side::Vision),
                &m.params.adapter_candidates(),
                vd,
                seed + 100,
            )
            .unwrap(),
        );
        let out = lavic::distill::distill_train(&mut m, &data, &cfg.distill, seed).unwrap();
        ratios.push(out.trace[out.selected_epoch] / out.trace[0]);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(
        mean <= 0.8,
        "mean selected/initial PPL ratio {mean:.3} (per-seed {ratios:?})"
    );
    assert!(t0.elapsed() < Duration::from_secs(600), "took {:?}", t0.elapsed());
    pass(
        5,
        "distillation efficacy",
        format!("mean held-out PPL ratio {mean:.3} over 3 seeds ({:?})", t0.elapsed()),
    );
}

#[test]
fn criterion_06_gradient_correctness() {
    let t0 = Instant::now();
    // micro stack: R = 1 patch per sub-image, width 8 end to end
    let vcfg = VisionConfig { vision_side: 4, patch_side: 4, d_vis: 8, layers: 1, heads: 2 };
    let lcfg = LmConfig { d_lm: 8, layers: 1, heads: 2, context_limit: 64, tied_head: false };
    let mut vlm = Vlm::init(&vcfg, &lcfg, 31);
    // nonzero adapters on both sides so every factor tensor gets a real grad
    let cands = vlm.params.adapter_candidates();
    let vd = side_digest(&vlm.params, Side::Vision, None);
    let mut vst = attach(
        AdapterConfig { rank: 2, alpha: 4.0, dropout: 0.0, side: Side::Vision },
        &cands,
        vd,
        5,
    )
    .unwrap();
    for f in vst.entries.values_mut() {
        f.up = randn(&mut ChaCha8Rng::seed_from_u64(6), 2, f.up.ncols(), 0.05);
    }
    vlm.vision_lora = Some(vst);
    let ld = side_digest(&vlm.params, Side::Lm, None);
    let mut lst = attach(
        AdapterConfig { rank: 2, alpha: 4.0, dropout: 0.0, side: Side::Lm },
        &cands,
        ld,
        7,
    )
    .unwrap();
    for f in lst.entries.values_mut() {
        f.up = randn(&mut ChaCha8Rng::seed_from_u64(8), 2, f.up.ncols(), 0.05);
    }
    vlm.lm_lora = Some(lst);

    let patches = randn(&mut ChaCha8Rng::seed_from_u64(2), 1, 48, 0.5);
    let batch = vec![TrainSeq {
        elems: vec![
            SeqElem::Token(lavic::vocab::BOS),
            SeqElem::Cls(&patches),
            SeqElem::Token(114),
            SeqElem::Token(101),
            SeqElem::Token(lavic::vocab::EOS),
        ],
        target: 2..5,
    }];
    let report = check_gradients(&vlm, &batch, Scope::All, 3, 1e-4, 1e-3, 0).unwrap();
    assert!(report.max_rel_err < 1e-3);
    assert!(t0.elapsed() < Duration::from_secs(60), "took {:?}", t0.elapsed());
    pass(
        6,
        "gradient check",
        format!(
            "{} tensors, {} elements, max rel err {:.2e}",
            report.checked_tensors, report.checked_elements, report.max_rel_err
        ),
    );
}

#[test]
fn criterion_07_ablation_ordering() {
    let art = repro();
    for r in &art.reports {
        assert!(r.n_examples >= 100, "{} seed {}: only {} test examples", r.variant.tag(), r.seed, r.n_examples);
    }
    for v in Variant::ALL {
        let n = art.reports.iter().filter(|r| r.variant == v).count();
        assert_eq!(n, 3, "{} ran {n} seeds", v.tag());
    }
    let full = mean_hr(&art.reports, Variant::Full).unwrap();
    let no_images = mean_hr(&art.reports, Variant::NoImages).unwrap();
    let no_distill = mean_hr(&art.reports, Variant::NoDistill).unwrap();
    assert!(
        full > no_images + 0.10,
        "full {full:.3} must beat no_images {no_images:.3} by > 0.10"
    );
    assert!(
        full >= no_distill,
        "full {full:.3} must be >= no_distill {no_distill:.3}"
    );
    assert!(
        (no_images - 0.25).abs() <= 0.05,
        "no_images {no_images:.3} should sit at the 1-in-4 guessing ceiling"
    );
    assert!(
        art.first_elapsed < Duration::from_secs(1800),
        "pipeline took {:?}",
        art.first_elapsed
    );
    pass(
        7,
        "ablation ordering",
        format!(
            "mean HR@1 full {full:.3} > no_images {no_images:.3} (+0.10), full >= no_distill {no_distill:.3}; {:?}",
            art.first_elapsed
        ),
    );
}

#[test]
fn criterion_08_slate_protocol() {
    let art = repro();
    let t0 = Instant::now();
    // sweep every slate the pipeline wrote, all eval seeds
    let mut total = 0usize;
    for (seed, bytes) in &art.first_slates {
        let slates: Vec<CandidateSlate> = serde_json::Deserializer::from_slice(bytes)
            .into_iter()
            .collect::<Result<_, _>>()
            .unwrap();
        assert!(!slates.is_empty());
        for s in &slates {
            s.validate(10).unwrap(); // 10 candidates, all distinct, gt in range
            assert_eq!(
                s.candidates.iter().filter(|c| *c == &s.candidates[s.ground_truth_index]).count(),
                1,
                "seed {seed}: ground truth appears more than once"
            );
        }
        total += slates.len();
    }
    // per-seed determinism: both pipeline passes wrote identical slate files
    assert_eq!(art.first_slates, art.second_slates, "slate order not reproducible");
    // swap rule: a ground truth ranked outside the top 10 replaces the
    // lowest-ranked candidate and nothing else
    let ranked: Vec<(String, f64)> =
        (0..20).map(|i| (format!("I{i:03}"), (20 - i) as f64)).collect();
    let ex = Example {
        conv_id: "C00001".into(),
        turn: 2,
        context: vec![],
        ground_truth_item: "I015".into(),
    };
    let s = assemble_slate(&ex, &ranked, 10, 3).unwrap();
    assert!(s.swapped);
    assert!(s.candidates.contains(&"I015".to_string()));
    assert!(!s.candidates.contains(&"I009".to_string()));
    for i in 0..9 {
        assert!(s.candidates.contains(&format!("I{i:03}")));
    }
    let in_top = Example { ground_truth_item: "I002".into(), ..ex.clone() };
    assert!(!assemble_slate(&in_top, &ranked, 10, 3).unwrap().swapped);
    assert!(t0.elapsed() < Duration::from_secs(10));
    pass(8, "slate protocol", format!("{total} slates swept across {} seeds", art.first_slates.len()));
}

#[test]
fn criterion_09_bm25_oracle_equivalence() {
    let t0 = Instant::now();
    // brute force written from the BM25 formula directly, no shared code
    fn brute(titles: &[Vec<String>], query: &[String], d: usize, k1: f64, b: f64) -> f64 {
        let n = titles.len() as f64;
        let avgdl = titles.iter().map(|t| t.len()).sum::<usize>() as f64 / n;
        let mut total = 0.0;
        for q in query {
            let df = titles.iter().filter(|t| t.contains(q)).count() as f64;
            let tf = titles[d].iter().filter(|w| *w == q).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            total += idf * tf * (k1 + 1.0)
                / (tf + k1 * (1.0 - b + b * titles[d].len() as f64 / avgdl));
        }
        total
    }
    let vocab = ["red", "blue", "shoe", "hat", "lamp", "desk", "old", "new", "big"];
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut checked = 0usize;
    for _ in 0..50 {
        let n_docs = rng.gen_range(2..=25);
        let cat: Vec<Item> = (0..n_docs)
            .map(|i| {
                let len = rng.gen_range(1..=6);
                let words: Vec<&str> =
                    (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect();
                Item { item_id: format!("I{i:03}"), title: words.join(" "), image_path: String::new() }
            })
            .collect();
        let query: Vec<String> = (0..rng.gen_range(1..=4))
            .map(|_| vocab[rng.gen_range(0..vocab.len())].to_string())
            .collect();
        let idx = build_bm25_index(&cat, 1.5, 0.75).unwrap();
        let titles: Vec<Vec<String>> = cat.iter().map(|i| tokenize_text(&i.title)).collect();
        for d in 0..cat.len() {
            let ours = idx.score(&query, d);
            let theirs = brute(&titles, &query, d, 1.5, 0.75);
            assert!((ours - theirs).abs() < 1e-9, "doc {d}: {ours} vs {theirs}");
            checked += 1;
        }
    }
    assert!(t0.elapsed() < Duration::from_secs(10));
    pass(9, "BM25 oracle", format!("50 instances, {checked} document scores within 1e-9"));
}

#[test]
fn criterion_10_metric_oracles() {
    let t0 = Instant::now();
    // hand-labeled fixture: 6 examples -> 3 hits, 1 valid miss, 2 invalid
    let slate = |i: usize, gt: &str| {
        let mut candidates: Vec<String> = (0..10).map(|j| format!("X{i:04}0000{j}")).collect();
        candidates[3] = gt.to_string();
        CandidateSlate {
            example_ref: format!("C{i:05}:2:{gt}"),
            candidates,
            ground_truth_index: 3,
            swapped: false,
        }
    };
    let pred = |i: usize, gt: &str, matched: Option<&str>, raw: &str| Prediction {
        example_ref: format!("C{i:05}:2:{gt}"),
        raw_output: raw.into(),
        matched_item: matched.map(String::from),
        valid: matched.is_some(),
    };
    let gts = ["AAAAAAAAA0", "AAAAAAAAA1", "AAAAAAAAA2", "AAAAAAAAA3", "AAAAAAAAA4", "AAAAAAAAA5"];
    let slates: Vec<CandidateSlate> = gts.iter().enumerate().map(|(i, g)| slate(i, g)).collect();
    let preds = vec![
        pred(0, gts[0], Some(gts[0]), gts[0]),
        pred(1, gts[1], Some(gts[1]), gts[1]),
        pred(2, gts[2], Some(gts[2]), gts[2]),
        // names a real candidate, just not the right one: valid, not a hit
        pred(3, gts[3], Some("X000300001"), "X000300001"),
        // free text naming nothing exactly: invalid
        pred(4, gts[4], None, "no idea"),
        pred(5, gts[5], None, "the item AAAAAAAAA5 is nice"),
    ];
    assert_eq!(hit_ratio_at_1(&preds, &slates).unwrap(), 3.0 / 6.0);
    assert_eq!(valid_ratio(&preds).unwrap(), 4.0 / 6.0);
    assert!(t0.elapsed() < Duration::from_secs(1));
    pass(10, "metric oracles", "HR@1 = 3/6 and VR = 4/6 on the hand-labeled fixture".into());
}

#[test]
fn criterion_11_reproducibility() {
    let art = repro();
    assert!(!art.first_csv.is_empty());
    assert_eq!(
        art.first_csv, art.second_csv,
        "two identically-configured pipeline runs wrote different report.csv"
    );
    assert!(
        art.total_elapsed < 2 * Duration::from_secs(1800),
        "two passes took {:?}",
        art.total_elapsed
    );
    pass(
        11,
        "reproducibility",
        format!(
            "report.csv byte-identical across two runs ({} bytes, total {:?})",
            art.first_csv.len(),
            art.total_elapsed
        ),
    );
}
