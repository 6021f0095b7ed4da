//! Metrics (HR@1, VR), the four-variant ablation harness, the CSV report,
//! and small SVG plots.

use std::collections::HashMap;
use std::path::Path;

use crate::adapters::{attach, AdapterConfig, Side};
use crate::config::{derive_seed, RunConfig, Variant};
use crate::corpus::{Example, Item};
use crate::error::{Error, Result};
use crate::image::Raster;
use crate::model::{side_digest, Vlm};
use crate::recommend::{
    predict, titles_of, tune_train, PrecomputedSlots, Prediction, PromptMode,
};
use crate::retrieval::{assemble_slate, bm25_rank, build_bm25_index, CandidateSlate};
use crate::vision::encode_item;

/// Fraction of predictions whose matched item equals the slate's ground
/// truth; invalid predictions are misses. Predictions and slates must align
/// one-to-one by example_ref.
pub fn hit_ratio_at_1(predictions: &[Prediction], slates: &[CandidateSlate]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != slates.len() {
        return Err(Error::Integrity(format!(
            "{} predictions vs {} slates",
            predictions.len(),
            slates.len()
        )));
    }
    let by_ref: HashMap<&str, &CandidateSlate> =
        slates.iter().map(|s| (s.example_ref.as_str(), s)).collect();
    let mut hits = 0usize;
    for p in predictions {
        let slate = by_ref.get(p.example_ref.as_str()).ok_or_else(|| {
            Error::Integrity(format!("prediction {} has no slate", p.example_ref))
        })?;
        if p.matched_item.as_deref() == Some(slate.ground_truth()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// Fraction of outputs that exactly named one candidate.
pub fn valid_ratio(predictions: &[Prediction]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Integrity("no predictions to score".into()));
    }
    Ok(predictions.iter().filter(|p| p.valid).count() as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub variant: Variant,
    pub seed: u64,
    pub hr_at_1: f64,
    pub valid_ratio: f64,
    pub n_examples: usize,
    pub skipped_overflow: usize,
}

pub fn report_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("variant,seed,hr_at_1,valid_ratio,n,skipped_overflow\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{}\n",
            r.variant.tag(),
            r.seed,
            r.hr_at_1,
            r.valid_ratio,
            r.n_examples,
            r.skipped_overflow
        ));
    }
    out
}

pub fn mean_hr(reports: &[MetricsReport], variant: Variant) -> Option<f64> {
    let vals: Vec<f64> = reports
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| r.hr_at_1)
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn variant_mode(v: Variant) -> PromptMode {
    match v {
        Variant::Full | Variant::NoDistill => PromptMode::Compact,
        Variant::NoImages => PromptMode::TextOnly,
        Variant::EntireTokens => PromptMode::EntireTokens,
    }
}

/// Per-item visual token stores for the ablation variants.
/// `distilled` compact rows come from the stage-1 vision stack; `undistilled`
/// compact and full rows from the stage-0 stack.
pub struct VariantSlots {
    pub distilled: PrecomputedSlots,
    pub undistilled: PrecomputedSlots,
}

pub fn precompute_slots(
    base: &Vlm,
    distilled: &Vlm,
    catalog: &[Item],
    images: &HashMap<String, Raster>,
) -> Result<VariantSlots> {
    let r = base.vcfg.r();
    let mut d_compact = HashMap::new();
    let mut u_compact = HashMap::new();
    let mut u_full = HashMap::new();
    for item in catalog {
        let img = images.get(&item.item_id).ok_or_else(|| {
            Error::Prerequisite(format!("no image loaded for item {}", item.item_id))
        })?;
        let d = encode_item(distilled, img)?;
        let u = encode_item(base, img)?;
        d_compact.insert(item.item_id.clone(), d.compact());
        u_compact.insert(item.item_id.clone(), u.compact());
        u_full.insert(item.item_id.clone(), u.full_concat());
    }
    Ok(VariantSlots {
        distilled: PrecomputedSlots {
            compact: d_compact,
            full: u_full.clone(),
            r,
        },
        undistilled: PrecomputedSlots {
            compact: u_compact,
            full: u_full,
            r,
        },
    })
}

pub struct AblationOutcome {
    pub reports: Vec<MetricsReport>,
    pub predictions: Vec<(Variant, u64, Vec<Prediction>)>,
    /// Test slates per seed (shared across variants).
    pub slates: Vec<(u64, Vec<CandidateSlate>)>,
    /// (variant, seed, error) for variants that failed without aborting others.
    pub failures: Vec<(Variant, u64, String)>,
}

fn paired_slates(
    examples: &[Example],
    rankings: &HashMap<String, Vec<(String, f64)>>,
    k: usize,
    slate_seed: u64,
) -> Result<Vec<(Example, CandidateSlate)>> {
    examples
        .iter()
        .map(|e| {
            let ranked = &rankings[&e.example_ref()];
            Ok((e.clone(), assemble_slate(e, ranked, k, slate_seed)?))
        })
        .collect()
}

/// Run every ablation variant over every eval seed: fresh LM adapters,
/// stage-2 tuning, then test-set prediction and metrics.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &Vlm,
    distilled: &Vlm,
    catalog: &[Item],
    images: &HashMap<String, Raster>,
    train: &[Example],
    val: &[Example],
    test: &[Example],
    cfg: &RunConfig,
) -> Result<AblationOutcome> {
    let titles = titles_of(catalog);
    let slots = precompute_slots(base, distilled, catalog, images)?;
    let index = build_bm25_index(catalog, cfg.retrieval.k1, cfg.retrieval.b)?;
    let mut rankings: HashMap<String, Vec<(String, f64)>> = HashMap::new();
    for e in train.iter().chain(val).chain(test) {
        let query: Vec<String> = e.context.iter().map(|u| u.text.clone()).collect();
        rankings.insert(
            e.example_ref(),
            bm25_rank(&index, &query.join("\n"), catalog.len()),
        );
    }

    let mut reports = Vec::new();
    let mut predictions = Vec::new();
    let mut slates_out = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.eval_seeds {
        let slate_seed = derive_seed(cfg.seed, &format!("slates:{seed}"));
        let train_pairs = paired_slates(train, &rankings, cfg.retrieval.k, slate_seed)?;
        let val_pairs = paired_slates(val, &rankings, cfg.retrieval.k, slate_seed)?;
        let test_pairs = paired_slates(test, &rankings, cfg.retrieval.k, slate_seed)?;
        slates_out.push((seed, test_pairs.iter().map(|(_, s)| s.clone()).collect()));
        for variant in Variant::ALL {
            match run_variant(
                variant,
                seed,
                base,
                distilled,
                &titles,
                &slots,
                &train_pairs,
                &val_pairs,
                &test_pairs,
                cfg,
            ) {
                Ok((report, preds)) => {
                    reports.push(report);
                    predictions.push((variant, seed, preds));
                }
                Err(e) => failures.push((variant, seed, e.to_string())),
            }
        }
    }
    Ok(AblationOutcome {
        reports,
        predictions,
        slates: slates_out,
        failures,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_variant(
    variant: Variant,
    seed: u64,
    base: &Vlm,
    distilled: &Vlm,
    titles: &HashMap<String, String>,
    slots: &VariantSlots,
    train_pairs: &[(Example, CandidateSlate)],
    val_pairs: &[(Example, CandidateSlate)],
    test_pairs: &[(Example, CandidateSlate)],
    cfg: &RunConfig,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let mode = variant_mode(variant);
    let store = match variant {
        Variant::Full => &slots.distilled,
        _ => &slots.undistilled,
    };
    let mut vlm = match variant {
        Variant::Full => distilled.clone(),
        _ => base.clone(),
    };
    let adapter_seed = derive_seed(seed, &format!("lm-adapters:{}", variant.tag()));
    let lm_digest = side_digest(&vlm.params, Side::Lm, None);
    vlm.lm_lora = Some(attach(
        AdapterConfig::from_settings(&cfg.adapter, Side::Lm),
        &vlm.params.adapter_candidates(),
        lm_digest,
        adapter_seed,
    )?);
    let tune_seed = derive_seed(seed, &format!("tune:{}", variant.tag()));
    let outcome = tune_train(
        &mut vlm,
        train_pairs,
        val_pairs,
        titles,
        store,
        mode,
        &cfg.tune,
        tune_seed,
    )?;
    let (preds, eval_skipped) =
        predict_set(&vlm, test_pairs, titles, store, mode, cfg.tune.max_new_tokens)?;
    let skipped = outcome.skipped_overflow + eval_skipped;
    let test_slates: Vec<CandidateSlate> =
        test_pairs.iter().map(|(_, s)| s.clone()).collect();
    let report = MetricsReport {
        variant,
        seed,
        hr_at_1: hit_ratio_at_1(&preds, &test_slates)?,
        valid_ratio: valid_ratio(&preds)?,
        n_examples: preds.len(),
        skipped_overflow: skipped,
    };
    Ok((report, preds))
}

/// Predict every (example, slate) pair. Overflowing prompts become invalid
/// predictions and are counted, not fatal.
pub fn predict_set(
    vlm: &Vlm,
    pairs: &[(Example, CandidateSlate)],
    titles: &HashMap<String, String>,
    slots: &dyn crate::recommend::SlotSource,
    mode: PromptMode,
    max_new: usize,
) -> Result<(Vec<Prediction>, usize)> {
    let mut preds = Vec::with_capacity(pairs.len());
    let mut skipped = 0usize;
    for (example, slate) in pairs {
        match predict(vlm, example, slate, titles, slots, mode, max_new) {
            Ok(p) => preds.push(p),
            Err(Error::ContextOverflow { .. }) => {
                skipped += 1;
                preds.push(Prediction {
                    example_ref: example.example_ref(),
                    raw_output: String::new(),
                    matched_item: None,
                    valid: false,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok((preds, skipped))
}

/// Minimal line plot of held-out PPL per epoch.
pub fn ppl_curve_svg(trace: &[f64]) -> String {
    let (w, h, pad) = (480.0, 280.0, 40.0);
    let max = trace.iter().cloned().fold(f64::MIN, f64::max).max(1e-9);
    let min = trace.iter().cloned().fold(f64::MAX, f64::min);
    let span = (max - min).max(1e-9);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (trace.len().max(2) - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - min) / span;
    let points: Vec<String> = trace
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{:.1},{:.1}", x(i), y(*v)))
        .collect();
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\
         <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\
         <text x=\"{}\" y=\"20\" font-size=\"13\">held-out perplexity by epoch \
         (min {:.3} at epoch {})</text></svg>\n",
        points.join(" "),
        pad,
        min,
        crate::distill::select_checkpoint(trace),
    )
}

/// Bar chart of mean HR@1 per variant.
pub fn hr_bars_svg(reports: &[MetricsReport]) -> String {
    let (w, h, pad) = (480.0, 280.0, 40.0);
    let mut bars = String::new();
    let variants: Vec<Variant> = Variant::ALL
        .into_iter()
        .filter(|v| mean_hr(reports, *v).is_some())
        .collect();
    let bw = (w - 2.0 * pad) / variants.len().max(1) as f64;
    for (i, v) in variants.iter().enumerate() {
        let hr = mean_hr(reports, *v).unwrap();
        let bh = (h - 2.0 * pad) * hr;
        bars.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"steelblue\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{} {:.2}</text>",
            pad + i as f64 * bw + 4.0,
            h - pad - bh,
            bw - 8.0,
            bh,
            pad + i as f64 * bw + 4.0,
            h - pad + 14.0,
            v.tag(),
            hr
        ));
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>{bars}\
         <text x=\"{pad}\" y=\"20\" font-size=\"13\">mean HR@1 per variant</text></svg>\n"
    )
}

pub fn write_plots(dir: &Path, trace: Option<&[f64]>, reports: &[MetricsReport]) -> Result<()> {
    if let Some(t) = trace {
        crate::cli::write_atomic(&dir.join("ppl_curve.svg"), ppl_curve_svg(t).as_bytes())?;
    }
    if !reports.is_empty() {
        crate::cli::write_atomic(&dir.join("hr_bars.svg"), hr_bars_svg(reports).as_bytes())?;
    }
    Ok(())
}
