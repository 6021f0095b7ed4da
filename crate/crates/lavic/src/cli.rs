//! Command-line pipeline: gen-data, pretrain, distill, retrieve, tune, eval,
//! repro. Every step is seeded and idempotent; outputs are written atomically.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::adapters::{attach, AdapterConfig, Side};
use crate::checkpoint::{archive_from_vlm, load_archive, save_archive, Stage};
use crate::config::{derive_seed, RunConfig, Variant};
use crate::corpus::{
    default_filter_oracle, expand_examples, filter_recommendation_dialogues, load_catalog,
    load_conversations, read_jsonl, split_dataset, synth::color_rgb, synth::generate_synthetic,
    write_jsonl, Example, Item,
};
use crate::distill::{
    distill_train, generate_description, pretrain, DescriptionRecord, DistillItem, PretrainItem,
};
use crate::error::{Error, Result};
use crate::eval::{
    precompute_slots, predict_set, report_csv, run_ablation, variant_mode, write_plots,
    MetricsReport,
};
use crate::image::Raster;
use crate::model::{side_digest, Vlm};
use crate::recommend::titles_of;
use crate::retrieval::{
    assemble_slate, bm25_rank, build_bm25_index, embed_rank, CandidateSlate, LmMeanEncoder,
};
use crate::vision::sub_image_patches;

/// Write via a sibling temp file + rename so readers never see partial data.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Exclusive workdir lock; two pipeline commands must not interleave writes.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<WorkdirLock> {
        std::fs::create_dir_all(workdir)
            .map_err(|e| Error::io(workdir.display().to_string(), e))?;
        let path = workdir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(WorkdirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} exists: another command is using this workdir (delete it if stale)",
                path.display()
            ))),
            Err(e) => Err(Error::io(path.display().to_string(), e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Parser, Debug)]
#[command(name = "lavic", version, about = "Two-stage visually-aware recommender pipeline")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::ALL
        .into_iter()
        .find(|v| v.tag() == s)
        .ok_or_else(|| {
            let tags: Vec<&str> = Variant::ALL.iter().map(|v| v.tag()).collect();
            format!("unknown variant {s:?}; expected one of {}", tags.join(", "))
        })
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate the synthetic catalog, images, and conversations.
    GenData,
    /// Stage 0: joint pretraining of the full model.
    Pretrain,
    /// Stage 1: self-distill compact visual tokens (LM frozen).
    Distill,
    /// Rank the catalog and write candidate slates.
    Retrieve,
    /// Stage 2: tune LM adapters on slates (vision frozen).
    Tune {
        #[arg(long, value_parser = parse_variant, default_value = "full")]
        variant: Variant,
    },
    /// Score the tuned model on the test split.
    Eval {
        #[arg(long, value_parser = parse_variant, default_value = "full")]
        variant: Variant,
    },
    /// Full deterministic pipeline: all variants x all eval seeds.
    Repro,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(w) = cli.workdir {
        cfg.workdir = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let _lock = WorkdirLock::acquire(&cfg.workdir)?;
    match cli.cmd {
        Cmd::GenData => cmd_gen_data(&cfg),
        Cmd::Pretrain => cmd_pretrain(&cfg).map(|_| ()),
        Cmd::Distill => cmd_distill(&cfg).map(|_| ()),
        Cmd::Retrieve => cmd_retrieve(&cfg),
        Cmd::Tune { variant } => cmd_tune(&cfg, variant).map(|_| ()),
        Cmd::Eval { variant } => cmd_eval(&cfg, variant).map(|_| ()),
        Cmd::Repro => cmd_repro(&cfg).map(|_| ()),
    }
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Prerequisite(format!(
            "{} not found; run `lavic {produced_by}` first",
            path.display()
        )))
    }
}

fn items_path(cfg: &RunConfig) -> PathBuf {
    cfg.workdir.join("items.jsonl")
}

fn convs_path(cfg: &RunConfig) -> PathBuf {
    cfg.workdir.join("convs.jsonl")
}

fn stage_dir(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.workdir.join("checkpoints").join(stage.dir_name())
}

fn tuned_dir(cfg: &RunConfig, variant: Variant) -> PathBuf {
    stage_dir(cfg, Stage::Tuned).join(variant.tag())
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let (items, convs) = generate_synthetic(
        &cfg.data,
        &cfg.workdir.join("images"),
        derive_seed(cfg.seed, "data"),
    )?;
    write_jsonl(&items_path(cfg), &items)?;
    write_jsonl(&convs_path(cfg), &convs)?;
    eprintln!("wrote {} items, {} conversations", items.len(), convs.len());
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<(Vec<Item>, HashMap<String, Raster>)> {
    require(&items_path(cfg), "gen-data")?;
    require(&convs_path(cfg), "gen-data")?;
    let catalog = load_catalog(&items_path(cfg))?;
    let mut images = HashMap::new();
    for item in &catalog {
        let img = Raster::load_ppm(&cfg.workdir.join(&item.image_path))?;
        images.insert(item.item_id.clone(), img);
    }
    Ok((catalog, images))
}

/// Most frequent named color among pixels that sit closer to that color than
/// to the light background.
fn dominant_color(img: &Raster, names: &[String]) -> Result<String> {
    let bg = [235u8, 235, 235];
    let dist = |a: [u8; 3], b: [u8; 3]| -> i64 {
        (0..3)
            .map(|i| (a[i] as i64 - b[i] as i64).pow(2))
            .sum()
    };
    let palette: Vec<[u8; 3]> = names.iter().map(|n| color_rgb(n)).collect::<Result<_>>()?;
    let mut counts = vec![0usize; names.len()];
    for y in 0..img.side {
        for x in 0..img.side {
            let px = img.get(x, y);
            let (best, d) = palette
                .iter()
                .enumerate()
                .map(|(i, c)| (i, dist(px, *c)))
                .min_by_key(|&(_, d)| d)
                .unwrap();
            if d < dist(px, bg) {
                counts[best] += 1;
            }
        }
    }
    let (best, n) = counts
        .iter()
        .enumerate()
        .max_by_key(|&(i, c)| (*c, std::cmp::Reverse(i)))
        .unwrap();
    if *n == 0 {
        return Err(Error::Integrity(
            "image has no pixels matching any configured color".into(),
        ));
    }
    Ok(names[best].clone())
}

fn pretrain_items(
    cfg: &RunConfig,
    catalog: &[Item],
    images: &HashMap<String, Raster>,
) -> Result<Vec<PretrainItem>> {
    catalog
        .iter()
        .map(|item| {
            let img = &images[&item.item_id];
            let color = dominant_color(img, &cfg.data.colors)?;
            let shape = item.title.split_whitespace().next().unwrap_or("thing");
            Ok(PretrainItem {
                item: item.clone(),
                patches: sub_image_patches(img, &cfg.vision)?,
                // color first: its opening character is predicted straight
                // off the last visual slot, the shortest grounding path
                caption: format!("{color} {shape}"),
                query: format!("looking for a {} in {color}", item.title),
            })
        })
        .collect()
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Vlm> {
    let (catalog, images) = load_corpus(cfg)?;
    let items = pretrain_items(cfg, &catalog, &images)?;
    let mut vlm = Vlm::init(&cfg.vision, &cfg.lm, derive_seed(cfg.seed, "init"));
    let losses = pretrain(&mut vlm, &items, &cfg.pretrain, cfg.seed)?;
    for (i, l) in losses.iter().enumerate() {
        eprintln!("pretrain epoch {i}: loss {l:.4}");
    }
    save_archive(
        &archive_from_vlm(&vlm, Stage::Stage0, cfg.seed, cfg, None),
        &stage_dir(cfg, Stage::Stage0),
    )?;
    Ok(vlm)
}

fn load_stage(cfg: &RunConfig, stage: Stage, produced_by: &str) -> Result<Vlm> {
    let dir = match stage {
        Stage::Tuned => unreachable!("tuned checkpoints are per-variant"),
        s => stage_dir(cfg, s),
    };
    require(&dir.join("manifest.json"), produced_by)?;
    crate::checkpoint::vlm_from_archive(&load_archive(&dir)?)
}

pub fn cmd_distill(cfg: &RunConfig) -> Result<Vlm> {
    let mut vlm = load_stage(cfg, Stage::Stage0, "pretrain")?;
    let (catalog, images) = load_corpus(cfg)?;
    let mut data = Vec::with_capacity(catalog.len());
    let mut records: Vec<DescriptionRecord> = Vec::with_capacity(catalog.len());
    for item in &catalog {
        let patches = sub_image_patches(&images[&item.item_id], &cfg.vision)?;
        let desc = generate_description(&vlm, item, &patches, cfg.distill.max_desc_tokens, "stage0")?;
        records.push(desc.clone());
        data.push(DistillItem {
            item: item.clone(),
            patches,
            desc,
        });
    }
    write_jsonl(&cfg.workdir.join("descriptions.jsonl"), &records)?;
    let base_digest = side_digest(&vlm.params, Side::Vision, None);
    vlm.vision_lora = Some(attach(
        AdapterConfig::from_settings(&cfg.adapter, Side::Vision),
        &vlm.params.adapter_candidates(),
        base_digest,
        derive_seed(cfg.seed, "vision-adapters"),
    )?);
    let outcome = distill_train(&mut vlm, &data, &cfg.distill, derive_seed(cfg.seed, "distill"))?;
    let mut trace_csv = String::from("epoch,heldout_ppl\n");
    for (i, p) in outcome.trace.iter().enumerate() {
        trace_csv.push_str(&format!("{i},{p:.6}\n"));
    }
    write_atomic(&cfg.workdir.join("distill_trace.csv"), trace_csv.as_bytes())?;
    eprintln!(
        "distill: selected epoch {} of {}",
        outcome.selected_epoch,
        outcome.trace.len() - 1
    );
    save_archive(
        &archive_from_vlm(
            &vlm,
            Stage::Distilled,
            cfg.seed,
            cfg,
            Some(outcome.selected_epoch),
        ),
        &stage_dir(cfg, Stage::Distilled),
    )?;
    Ok(vlm)
}

fn read_trace(path: &Path) -> Result<Vec<f64>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, line)| {
            line.rsplit(',')
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or(Error::Parse {
                    line: i + 2,
                    msg: format!("{}: bad trace row {line:?}", path.display()),
                })
        })
        .collect()
}

/// Recommendation examples: filtered dialogues expanded to (context, gt) pairs.
fn all_examples(cfg: &RunConfig, catalog: &[Item]) -> Result<Vec<Example>> {
    let convs = load_conversations(&convs_path(cfg))?;
    let kept = filter_recommendation_dialogues(&convs, default_filter_oracle(catalog))?;
    let mut out = Vec::new();
    for c in &kept {
        c.validate_against_catalog(catalog)?;
        out.extend(expand_examples(c));
    }
    if out.is_empty() {
        return Err(Error::Prerequisite(
            "no recommendation examples survived filtering; run `lavic gen-data` first".into(),
        ));
    }
    Ok(out)
}

fn rank_examples(
    cfg: &RunConfig,
    catalog: &[Item],
    examples: &[Example],
    vlm_for_embed: Option<&Vlm>,
) -> Result<HashMap<String, Vec<(String, f64)>>> {
    let mut rankings = HashMap::new();
    let index = build_bm25_index(catalog, cfg.retrieval.k1, cfg.retrieval.b)?;
    for e in examples {
        let query: Vec<&str> = e.context.iter().map(|u| u.text.as_str()).collect();
        let query = query.join("\n");
        let ranked = match cfg.retrieval.retriever.as_str() {
            "bm25" => bm25_rank(&index, &query, catalog.len()),
            "embed" => {
                let vlm = vlm_for_embed.ok_or_else(|| {
                    Error::Prerequisite(
                        "embedding retriever needs a stage-0 model; run `lavic pretrain` first"
                            .into(),
                    )
                })?;
                embed_rank(&LmMeanEncoder { vlm }, catalog, &query, catalog.len())
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown retriever {other:?}; expected bm25 or embed"
                )))
            }
        };
        rankings.insert(e.example_ref(), ranked);
    }
    Ok(rankings)
}

pub fn cmd_retrieve(cfg: &RunConfig) -> Result<()> {
    let (catalog, _) = load_corpus(cfg)?;
    let examples = all_examples(cfg, &catalog)?;
    let vlm = if cfg.retrieval.retriever == "embed" {
        Some(load_stage(cfg, Stage::Stage0, "pretrain")?)
    } else {
        None
    };
    let rankings = rank_examples(cfg, &catalog, &examples, vlm.as_ref())?;
    let slate_seed = derive_seed(cfg.seed, &format!("slates:{}", cfg.seed));
    let mut slates = Vec::with_capacity(examples.len());
    for e in &examples {
        slates.push(assemble_slate(e, &rankings[&e.example_ref()], cfg.retrieval.k, slate_seed)?);
    }
    let swapped = slates.iter().filter(|s| s.swapped).count();
    write_jsonl(&cfg.workdir.join("slates.jsonl"), &slates)?;
    eprintln!(
        "wrote {} slates ({} needed a ground-truth swap)",
        slates.len(),
        swapped
    );
    Ok(())
}

fn paired_with_slates(
    examples: &[Example],
    by_ref: &HashMap<String, CandidateSlate>,
) -> Result<Vec<(Example, CandidateSlate)>> {
    examples
        .iter()
        .map(|e| {
            by_ref
                .get(&e.example_ref())
                .map(|s| (e.clone(), s.clone()))
                .ok_or_else(|| {
                    Error::Prerequisite(format!(
                        "no slate for {}; run `lavic retrieve` first",
                        e.example_ref()
                    ))
                })
        })
        .collect()
}

pub fn cmd_tune(cfg: &RunConfig, variant: Variant) -> Result<Vlm> {
    let base = load_stage(cfg, Stage::Stage0, "pretrain")?;
    let distilled = load_stage(cfg, Stage::Distilled, "distill")?;
    let (catalog, images) = load_corpus(cfg)?;
    let slates_path = cfg.workdir.join("slates.jsonl");
    require(&slates_path, "retrieve")?;
    let slates: Vec<CandidateSlate> = read_jsonl(&slates_path)?;
    for s in &slates {
        s.validate(cfg.retrieval.k)?;
    }
    let by_ref: HashMap<String, CandidateSlate> =
        slates.into_iter().map(|s| (s.example_ref.clone(), s)).collect();

    let examples = all_examples(cfg, &catalog)?;
    let (train, val, _) = split_dataset(&examples, derive_seed(cfg.seed, "split"))?;
    let train_pairs = paired_with_slates(&train, &by_ref)?;
    let val_pairs = paired_with_slates(&val, &by_ref)?;

    let titles = titles_of(&catalog);
    let slots = precompute_slots(&base, &distilled, &catalog, &images)?;
    let store = match variant {
        Variant::Full => &slots.distilled,
        _ => &slots.undistilled,
    };
    let mut vlm = match variant {
        Variant::Full => distilled,
        _ => base,
    };
    let lm_digest = side_digest(&vlm.params, Side::Lm, None);
    vlm.lm_lora = Some(attach(
        AdapterConfig::from_settings(&cfg.adapter, Side::Lm),
        &vlm.params.adapter_candidates(),
        lm_digest,
        derive_seed(cfg.seed, &format!("lm-adapters:{}", variant.tag())),
    )?);
    let outcome = crate::recommend::tune_train(
        &mut vlm,
        &train_pairs,
        &val_pairs,
        &titles,
        store,
        variant_mode(variant),
        &cfg.tune,
        derive_seed(cfg.seed, &format!("tune:{}", variant.tag())),
    )?;
    eprintln!(
        "tune {}: epoch {} selected, val HR@1 {:.3}, {} overflow skips",
        variant.tag(),
        outcome.selected_epoch,
        outcome.val_hr_at_1,
        outcome.skipped_overflow
    );
    save_archive(
        &archive_from_vlm(&vlm, Stage::Tuned, cfg.seed, cfg, Some(outcome.selected_epoch)),
        &tuned_dir(cfg, variant),
    )?;
    Ok(vlm)
}

pub fn cmd_eval(cfg: &RunConfig, variant: Variant) -> Result<MetricsReport> {
    let dir = tuned_dir(cfg, variant);
    require(&dir.join("manifest.json"), &format!("tune --variant {}", variant.tag()))?;
    let vlm = crate::checkpoint::vlm_from_archive(&load_archive(&dir)?)?;
    let base = load_stage(cfg, Stage::Stage0, "pretrain")?;
    let distilled = load_stage(cfg, Stage::Distilled, "distill")?;
    let (catalog, images) = load_corpus(cfg)?;
    let slates_path = cfg.workdir.join("slates.jsonl");
    require(&slates_path, "retrieve")?;
    let slates: Vec<CandidateSlate> = read_jsonl(&slates_path)?;
    let by_ref: HashMap<String, CandidateSlate> =
        slates.into_iter().map(|s| (s.example_ref.clone(), s)).collect();
    let examples = all_examples(cfg, &catalog)?;
    let (_, _, test) = split_dataset(&examples, derive_seed(cfg.seed, "split"))?;
    let test_pairs = paired_with_slates(&test, &by_ref)?;

    let titles = titles_of(&catalog);
    let slots = precompute_slots(&base, &distilled, &catalog, &images)?;
    let store = match variant {
        Variant::Full => &slots.distilled,
        _ => &slots.undistilled,
    };
    let (preds, skipped) = predict_set(
        &vlm,
        &test_pairs,
        &titles,
        store,
        variant_mode(variant),
        cfg.tune.max_new_tokens,
    )?;
    let test_slates: Vec<CandidateSlate> = test_pairs.iter().map(|(_, s)| s.clone()).collect();
    let report = MetricsReport {
        variant,
        seed: cfg.seed,
        hr_at_1: crate::eval::hit_ratio_at_1(&preds, &test_slates)?,
        valid_ratio: crate::eval::valid_ratio(&preds)?,
        n_examples: preds.len(),
        skipped_overflow: skipped,
    };
    write_jsonl(&cfg.workdir.join("predictions.jsonl"), &preds)?;
    write_atomic(
        &cfg.workdir.join("report.csv"),
        report_csv(std::slice::from_ref(&report)).as_bytes(),
    )?;
    let trace = read_trace(&cfg.workdir.join("distill_trace.csv")).ok();
    write_plots(&cfg.workdir, trace.as_deref(), std::slice::from_ref(&report))?;
    println!("{}", report_csv(std::slice::from_ref(&report)));
    Ok(report)
}

/// Reuse a saved checkpoint when its recorded seed matches; otherwise rebuild.
fn stage_or_rebuild(
    cfg: &RunConfig,
    stage: Stage,
    rebuild: impl FnOnce(&RunConfig) -> Result<Vlm>,
) -> Result<Vlm> {
    let dir = stage_dir(cfg, stage);
    if dir.join("manifest.json").exists() {
        if let Ok(archive) = load_archive(&dir) {
            if archive.manifest.seed == cfg.seed {
                return crate::checkpoint::vlm_from_archive(&archive);
            }
        }
    }
    rebuild(cfg)
}

pub fn cmd_repro(cfg: &RunConfig) -> Result<Vec<MetricsReport>> {
    if !items_path(cfg).exists() || !convs_path(cfg).exists() {
        cmd_gen_data(cfg)?;
    }
    let base = stage_or_rebuild(cfg, Stage::Stage0, cmd_pretrain)?;
    let distilled = stage_or_rebuild(cfg, Stage::Distilled, cmd_distill)?;
    let (catalog, images) = load_corpus(cfg)?;
    let examples = all_examples(cfg, &catalog)?;
    let (train, val, test) = split_dataset(&examples, derive_seed(cfg.seed, "split"))?;
    let outcome = run_ablation(
        &base, &distilled, &catalog, &images, &train, &val, &test, cfg,
    )?;
    for (variant, seed, e) in &outcome.failures {
        eprintln!("variant {} seed {seed} failed: {e}", variant.tag());
    }
    for (seed, slates) in &outcome.slates {
        write_jsonl(&cfg.workdir.join(format!("slates_{seed}.jsonl")), slates)?;
    }
    for (variant, seed, preds) in &outcome.predictions {
        write_jsonl(
            &cfg.workdir
                .join(format!("predictions_{}_{seed}.jsonl", variant.tag())),
            preds,
        )?;
    }
    let mut reports = outcome.reports;
    reports.sort_by_key(|r| {
        (
            Variant::ALL.iter().position(|v| *v == r.variant).unwrap(),
            r.seed,
        )
    });
    write_atomic(&cfg.workdir.join("report.csv"), report_csv(&reports).as_bytes())?;
    let trace = read_trace(&cfg.workdir.join("distill_trace.csv")).ok();
    write_plots(&cfg.workdir, trace.as_deref(), &reports)?;
    print!("{}", report_csv(&reports));
    Ok(reports)
}
