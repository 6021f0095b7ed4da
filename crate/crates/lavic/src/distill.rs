//! Stage 1 — visual knowledge distillation — plus the stage-0 joint
//! pretraining that stands in for the off-the-shelf pretrained VLM the
//! production recipe starts from.
//!
//! Stage 0 jointly trains the whole stack (vision tower, projector, LM) on
//! four synthetic tasks: captioning from all patch tokens, captioning from
//! the compact CLS slots, single-candidate slate echo (copy the listed ID),
//! and group slate selection with compact slots. Stage 1 then freezes
//! the LM, generates a description per item from the full token set, and
//! trains vision-side adapters until the LM reproduces that description from
//! only the 5 CLS embeddings; the checkpoint with the lowest held-out
//! perplexity wins.

use std::collections::HashMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::Side;
use crate::config::{derive_seed, DistillConfig, PretrainConfig};
use crate::corpus::{Example, Item, Speaker, Utterance};
use crate::error::{Error, Result};
use crate::lm::{generate_greedy, perplexity};
use crate::model::{
    batch_loss_and_grads, side_digest, Scope, SeqElem, Sgd, TrainSeq, Vlm,
};
use crate::recommend::{
    build_recommendation_prompt, LiveSlots, PromptMode,
};
use crate::retrieval::CandidateSlate;
use crate::vocab::{detokenize_lossy, tokenize, BOS, EOS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub item_id: String,
    pub description: String,
    pub generator_tag: String,
}

/// Title field is padded so the visual slots land at the same absolute
/// positions for every item; the toy LM only learns position-keyed attention,
/// so a scaffold whose slot offsets vary with title length is unreadable.
fn desc_head(title: &str) -> String {
    format!("item: {title:<12}\nlook: ")
}

/// Generation prompt: title text plus all 5*(R+1) visual tokens. The
/// description follows the final visual token directly: its first character
/// is then predicted from the last slot's own residual stream, so grounding
/// does not have to wait for an attention circuit to form.
pub fn build_description_prompt<'a>(
    item: &Item,
    patches: &'a [Array2<f64>],
) -> Vec<SeqElem<'a>> {
    let mut elems = vec![SeqElem::Token(BOS)];
    for t in tokenize(&desc_head(&item.title)) {
        elems.push(SeqElem::Token(t));
    }
    for p in patches {
        elems.push(SeqElem::Full(p));
    }
    elems
}

/// Greedy-decode a description from the full-token prompt.
pub fn generate_description(
    vlm: &Vlm,
    item: &Item,
    patches: &[Array2<f64>],
    max_desc_tokens: usize,
    generator_tag: &str,
) -> Result<DescriptionRecord> {
    let prompt = build_description_prompt(item, patches);
    let out = generate_greedy(vlm, &prompt, max_desc_tokens)?;
    let description = detokenize_lossy(&out);
    if description.trim().is_empty() {
        return Err(Error::Numeric(format!(
            "degenerate model: empty description for item {}",
            item.item_id
        )));
    }
    Ok(DescriptionRecord {
        item_id: item.item_id.clone(),
        description,
        generator_tag: generator_tag.to_string(),
    })
}

/// Distillation sequence: same text scaffold, but only the 5 CLS slots
/// (computed live so vision gradients flow), then the cached description as
/// the target.
pub fn build_distill_example<'a>(
    item: &Item,
    desc: &DescriptionRecord,
    patches: &'a [Array2<f64>],
) -> Result<TrainSeq<'a>> {
    if desc.description.trim().is_empty() {
        return Err(Error::Schema(format!(
            "empty description for item {}",
            item.item_id
        )));
    }
    let mut elems = vec![SeqElem::Token(BOS)];
    for t in tokenize(&desc_head(&item.title)) {
        elems.push(SeqElem::Token(t));
    }
    for p in patches {
        elems.push(SeqElem::Cls(p));
    }
    let start = elems.len();
    for t in tokenize(&desc.description) {
        elems.push(SeqElem::Token(t));
    }
    elems.push(SeqElem::Token(EOS));
    let end = elems.len();
    Ok(TrainSeq {
        elems,
        target: start..end,
    })
}

/// Argmin of held-out PPL; ties go to the earliest epoch.
pub fn select_checkpoint(trace: &[f64]) -> usize {
    assert!(!trace.is_empty());
    let mut best = 0;
    for (i, v) in trace.iter().enumerate() {
        if *v < trace[best] {
            best = i;
        }
    }
    best
}

/// One item's training inputs for stage 1.
pub struct DistillItem {
    pub item: Item,
    pub patches: Vec<Array2<f64>>,
    pub desc: DescriptionRecord,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    /// Held-out PPL per epoch; index 0 is before any training step.
    pub trace: Vec<f64>,
    pub selected_epoch: usize,
}

/// Train vision adapters so the frozen LM regenerates each description from
/// compact slots. The LM is digest-checked every epoch.
pub fn distill_train(
    vlm: &mut Vlm,
    data: &[DistillItem],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<DistillOutcome> {
    if vlm.vision_lora.is_none() {
        return Err(Error::Prerequisite(
            "vision adapters must be attached before distillation".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::Schema("no items to distill".into()));
    }
    let lm_before = side_digest(&vlm.params, Side::Lm, None);

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "distill"));
    order.shuffle(&mut rng);
    let heldout_n = cfg.heldout_size.min((data.len() / 5).max(1));
    let (heldout_idx, train_idx) = order.split_at(heldout_n);

    let heldout_ppl = |vlm: &Vlm| -> Result<f64> {
        let seqs: Vec<TrainSeq> = heldout_idx
            .iter()
            .map(|&i| build_distill_example(&data[i].item, &data[i].desc, &data[i].patches))
            .collect::<Result<_>>()?;
        perplexity(vlm, &seqs)
    };

    let mut trace = vec![heldout_ppl(vlm)?];
    let mut snapshots = vec![vlm.vision_lora.clone().unwrap()];
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    for _epoch in 0..cfg.epochs {
        let mut idx = train_idx.to_vec();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<TrainSeq> = chunk
                .iter()
                .map(|&i| build_distill_example(&data[i].item, &data[i].desc, &data[i].patches))
                .collect::<Result<_>>()?;
            let dropout_seed = rng.gen();
            let (_, grads) =
                batch_loss_and_grads(vlm, &batch, Scope::VisionAdapters, Some(dropout_seed))?;
            opt.step(vlm, &grads);
        }
        if side_digest(&vlm.params, Side::Lm, None) != lm_before {
            return Err(Error::FrozenViolation(
                "LM parameters changed during distillation".into(),
            ));
        }
        trace.push(heldout_ppl(vlm)?);
        snapshots.push(vlm.vision_lora.clone().unwrap());
    }
    let selected_epoch = select_checkpoint(&trace);
    vlm.vision_lora = Some(snapshots[selected_epoch].clone());
    Ok(DistillOutcome {
        trace,
        selected_epoch,
    })
}

/// One item's stage-0 inputs. `caption` is the image-grounded target text
/// ("a red circle"); `query` is a seeker-style request line used for the
/// selection task.
pub struct PretrainItem {
    pub item: Item,
    pub patches: Vec<Array2<f64>>,
    pub caption: String,
    pub query: String,
}

fn random_id(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    (0..10)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
        .collect()
}

/// Stage 0: joint pretraining of all base parameters. Returns the mean
/// training loss per epoch.
pub fn pretrain(
    vlm: &mut Vlm,
    items: &[PretrainItem],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if items.len() < 4 {
        return Err(Error::Schema("stage 0 needs at least 4 items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain"));

    // ambiguity groups: items sharing a title, distinguishable only visually
    let mut by_title: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, p) in items.iter().enumerate() {
        by_title.entry(p.item.title.as_str()).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = items
        .iter()
        .map(|p| by_title[p.item.title.as_str()].clone())
        .collect();

    // task tags: 0 full-token caption, 1 compact-slot caption,
    // 2 single-candidate echo, 3 group selection with compact slots,
    // 4 text-only selection (teaches the slotless layout: emit a valid
    // same-title candidate ID even when nothing disambiguates the group),
    // 5 text-only selection over distinct titles (deterministic answer:
    // teaches copying from whichever candidate block matches the query,
    // the variable-position skill that 3 and 4 build on)
    let mut schedule: Vec<(u8, usize)> = Vec::new();
    schedule.extend((0..items.len()).map(|i| (0u8, i)));
    schedule.extend((0..items.len()).map(|i| (1u8, i)));
    schedule.extend((0..cfg.copy_examples).map(|i| (2u8, i)));
    schedule.extend((0..items.len()).map(|i| (3u8, i)));
    schedule.extend((0..items.len()).map(|i| (4u8, i)));
    schedule.extend((0..items.len()).map(|i| (5u8, i)));

    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
        .with_vision_lr_mult(cfg.vision_lr_mult);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        schedule.shuffle(&mut rng);
        // warmup phase: captions and echo only; see PretrainConfig
        let active: Vec<(u8, usize)> = if epoch < cfg.warmup_epochs {
            schedule
                .iter()
                .copied()
                .filter(|&(t, _)| t < 3 || t == 5)
                .collect()
        } else {
            schedule.clone()
        };
        // after warmup the vision side is held fixed: selection gradients
        // through half-gated candidates otherwise collapse the slot colors
        let scope = if epoch < cfg.warmup_epochs {
            Scope::All
        } else {
            Scope::LmBase
        };
        let mut total = 0.0;
        for &(task, i) in &active {
            // Selection candidates carry fresh random IDs every pass, so an
            // (utterance -> catalog ID) lookup table can never form; the only
            // strategy that drives the selection loss down is matching the
            // queried color against each candidate's visual slots and copying
            // the matching candidate's ID off the list. Task 2 is the
            // single-candidate curriculum rung: same slate format, so the
            // copy circuit it builds engages directly in task 3.
            let loss = match task {
                0 | 1 => {
                    let p = &items[i];
                    let mut elems = if task == 0 {
                        build_description_prompt(&p.item, &p.patches)
                    } else {
                        compact_caption_prompt(&p.item, &p.patches)
                    };
                    let start = elems.len();
                    for t in tokenize(&p.caption) {
                        elems.push(SeqElem::Token(t));
                    }
                    elems.push(SeqElem::Token(EOS));
                    let end = elems.len();
                    let seq = TrainSeq {
                        elems,
                        target: start..end,
                    };
                    let (loss, grads) =
                        batch_loss_and_grads(vlm, &[seq], scope, None)?;
                    opt.step(vlm, &grads);
                    loss
                }
                2 => {
                    let j = rng.gen_range(0..items.len());
                    selection_step(vlm, &mut opt, items, vec![j], j, PromptMode::Compact, scope, &mut rng)?
                }
                3 => {
                    // the ambiguity group plus off-title distractors: gating
                    // must match the query title *and* the queried color
                    // against each candidate's slots
                    let mut cand_idx = groups[i].clone();
                    while cand_idx.len() < groups[i].len().max(4) + 2 {
                        let j = rng.gen_range(0..items.len());
                        if !cand_idx.contains(&j) {
                            cand_idx.push(j);
                        }
                    }
                    selection_step(vlm, &mut opt, items, cand_idx, i, PromptMode::Compact, scope, &mut rng)?
                }
                4 => {
                    let mut cand_idx = groups[i].clone();
                    while cand_idx.len() < 4 {
                        let j = rng.gen_range(0..items.len());
                        if !cand_idx.contains(&j) {
                            cand_idx.push(j);
                        }
                    }
                    selection_step(vlm, &mut opt, items, cand_idx, i, PromptMode::TextOnly, scope, &mut rng)?
                }
                _ => {
                    let n_titles = by_title.len();
                    let mut cand_idx = vec![i];
                    let mut seen = vec![items[i].item.title.as_str()];
                    while cand_idx.len() < 4.min(n_titles) {
                        let j = rng.gen_range(0..items.len());
                        let t = items[j].item.title.as_str();
                        if !seen.contains(&t) {
                            seen.push(t);
                            cand_idx.push(j);
                        }
                    }
                    selection_step(vlm, &mut opt, items, cand_idx, i, PromptMode::TextOnly, scope, &mut rng)?
                }
            };
            total += loss;
        }
        losses.push(total / active.len() as f64);
        // DIAG: temporary emergence telemetry
        if std::env::var("LAVIC_DIAG").is_ok() {
            let mut caps = String::new();
            for p in items.iter().take(4) {
                let prompt = build_description_prompt(&p.item, &p.patches);
                let out = generate_greedy(vlm, &prompt, 24)?;
                caps.push_str(&format!(" {:?}/{}", detokenize_lossy(&out), p.caption));
            }
            eprintln!("epoch {epoch} loss {:.4}:{caps}", losses.last().unwrap());
        }
    }
    Ok(losses)
}

/// Caption scaffold over the 5 live CLS slots, so slot contents are readable
/// by the LM before any selection pressure is applied.
fn compact_caption_prompt<'a>(item: &Item, patches: &'a [Array2<f64>]) -> Vec<SeqElem<'a>> {
    let mut elems = vec![SeqElem::Token(BOS)];
    for t in tokenize(&desc_head(&item.title)) {
        elems.push(SeqElem::Token(t));
    }
    for p in patches {
        elems.push(SeqElem::Cls(p));
    }
    elems
}

/// One SGD step on a slate-selection example whose candidates are `cand_idx`
/// (must contain `gt`), each under a fresh random ID.
fn selection_step(
    vlm: &mut Vlm,
    opt: &mut Sgd,
    items: &[PretrainItem],
    mut cand_idx: Vec<usize>,
    gt: usize,
    mode: PromptMode,
    scope: Scope,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    cand_idx.shuffle(rng);
    let ids: Vec<String> = cand_idx.iter().map(|_| random_id(rng)).collect();
    let gt_index = cand_idx.iter().position(|&j| j == gt).unwrap();
    let titles: HashMap<String, String> = cand_idx
        .iter()
        .zip(&ids)
        .map(|(&j, id)| (id.clone(), items[j].item.title.clone()))
        .collect();
    let live = LiveSlots {
        patches: cand_idx
            .iter()
            .zip(&ids)
            .map(|(&j, id)| (id.clone(), items[j].patches.clone()))
            .collect(),
        r: vlm.vcfg.r(),
    };
    let example = Example {
        conv_id: format!("P{gt:05}"),
        turn: 2,
        context: vec![Utterance {
            speaker: Speaker::Seeker,
            text: items[gt].query.clone(),
        }],
        ground_truth_item: ids[gt_index].clone(),
    };
    let slate = CandidateSlate {
        example_ref: format!("P{gt:05}:2:{}", ids[gt_index]),
        candidates: ids,
        ground_truth_index: gt_index,
        swapped: false,
    };
    let prompt = build_recommendation_prompt(
        &example,
        &slate,
        &titles,
        &live,
        mode,
        vlm.lcfg.context_limit,
        true,
    )?;
    let (loss, grads) = batch_loss_and_grads(vlm, &[prompt.train_seq()], scope, None)?;
    opt.step(vlm, &grads);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LmConfig, VisionConfig};

    fn toy_item() -> Item {
        Item {
            item_id: "IT00000001".into(),
            title: "circle 00".into(),
            image_path: "images/IT00000001.ppm".into(),
        }
    }

    fn toy_patches(r: usize, pdim: usize) -> Vec<Array2<f64>> {
        (0..5)
            .map(|i| Array2::from_elem((r, pdim), i as f64 * 0.1))
            .collect()
    }

    #[test]
    fn description_prompt_has_full_slot_count() {
        // toy R=4 -> 5 sub-images x (4+1) tokens = 25 visual tokens
        let patches = toy_patches(4, 192);
        let prompt = build_description_prompt(&toy_item(), &patches);
        let visual: usize = prompt
            .iter()
            .map(|e| match e {
                SeqElem::Full(p) => p.nrows() + 1,
                SeqElem::Cls(_) => 1,
                _ => 0,
            })
            .sum();
        assert_eq!(visual, 25);
    }

    #[test]
    fn title_bytes_appear_verbatim() {
        let patches = toy_patches(4, 192);
        let prompt = build_description_prompt(&toy_item(), &patches);
        let text: String = detokenize_lossy(
            &prompt
                .iter()
                .filter_map(|e| match e {
                    SeqElem::Token(t) if *t < 256 => Some(*t),
                    _ => None,
                })
                .collect::<Vec<_>>(),
        );
        assert!(text.contains("circle 00"));
    }

    #[test]
    fn distill_example_has_five_slots_and_clean_target() {
        let patches = toy_patches(4, 192);
        let desc = DescriptionRecord {
            item_id: "IT00000001".into(),
            description: "a red circle".into(),
            generator_tag: "t".into(),
        };
        let seq = build_distill_example(&toy_item(), &desc, &patches).unwrap();
        let slots = seq
            .elems
            .iter()
            .filter(|e| matches!(e, SeqElem::Cls(_)))
            .count();
        assert_eq!(slots, 5);
        for idx in seq.target.clone() {
            assert!(matches!(seq.elems[idx], SeqElem::Token(_)));
        }
        // target covers the description bytes plus EOS
        assert_eq!(seq.target.len(), "a red circle".len() + 1);
    }

    #[test]
    fn compact_scaffold_is_five_r_tokens_shorter() {
        let r = 4;
        let patches = toy_patches(r, 192);
        let full = build_description_prompt(&toy_item(), &patches);
        let desc = DescriptionRecord {
            item_id: "IT00000001".into(),
            description: "x".into(),
            generator_tag: "t".into(),
        };
        let compact = build_distill_example(&toy_item(), &desc, &patches).unwrap();
        let len = |elems: &[SeqElem]| elems.iter().map(SeqElem::len).sum::<usize>();
        let compact_prompt_len = len(&compact.elems[..compact.target.start]);
        assert_eq!(len(&full) - compact_prompt_len, 5 * r);
    }

    #[test]
    fn checkpoint_selection_rules() {
        assert_eq!(select_checkpoint(&[5.0, 3.1, 3.0, 3.0, 3.2]), 2);
        assert_eq!(select_checkpoint(&[5.0, 4.0, 3.0, 2.0]), 3);
        assert_eq!(select_checkpoint(&[1.0]), 0);
    }

    #[test]
    fn empty_description_rejected_everywhere() {
        let patches = toy_patches(4, 192);
        let desc = DescriptionRecord {
            item_id: "IT00000001".into(),
            description: "   ".into(),
            generator_tag: "t".into(),
        };
        assert!(build_distill_example(&toy_item(), &desc, &patches).is_err());
    }

    #[test]
    fn adapters_steer_frozen_lm_after_joint_warmup() {
        // Two micro items share a title but differ in patches and target
        // description, so the LM can only separate them by reading the CLS
        // slots. After joint warmup, fresh vision adapters must steer a third
        // image from the "blue" region to a "red" target with the LM frozen.
        let vcfg = VisionConfig {
            vision_side: 4,
            patch_side: 4,
            d_vis: 16,
            layers: 2,
            heads: 4,
        };
        let lcfg = LmConfig {
            d_lm: 32,
            layers: 2,
            heads: 4,
            context_limit: 128,
            tied_head: false,
        };
        let mut vlm = Vlm::init(&vcfg, &lcfg, 31);
        let item = |id: &str| Item {
            item_id: id.into(),
            title: "circle 00".into(),
            image_path: "x.ppm".into(),
        };
        let rec = |id: &str, d: &str| DescriptionRecord {
            item_id: id.into(),
            description: d.into(),
            generator_tag: "t".into(),
        };
        let pa: Vec<Array2<f64>> = vec![Array2::from_elem((1, 48), 0.9)];
        let pb: Vec<Array2<f64>> = vec![Array2::from_elem((1, 48), -0.9)];
        let (ia, ib) = (item("IT00000001"), item("IT00000002"));
        let (da, db) = (rec("IT00000001", "red red"), rec("IT00000002", "blue blue"));
        let mut opt = Sgd::new(0.2, 0.9, 0.0);
        let mut joint = f64::INFINITY;
        for _ in 0..3000 {
            let sa = build_distill_example(&ia, &da, &pa).unwrap();
            let sb = build_distill_example(&ib, &db, &pb).unwrap();
            let (l, grads) = batch_loss_and_grads(&vlm, &[sa, sb], Scope::All, None).unwrap();
            opt.step(&mut vlm, &grads);
            joint = l;
            if l < 0.02 {
                break;
            }
        }
        assert!(joint < 0.02, "joint warmup stuck at {joint}");

        let digest = side_digest(&vlm.params, Side::Vision, None);
        vlm.vision_lora = Some(
            crate::adapters::attach(
                crate::adapters::AdapterConfig {
                    rank: 4,
                    alpha: 8.0,
                    dropout: 0.0,
                    side: Side::Vision,
                },
                &vlm.params.adapter_candidates(),
                digest,
                5,
            )
            .unwrap(),
        );
        let pc: Vec<Array2<f64>> = vec![Array2::from_elem((1, 48), -0.5)];
        let ic = item("IT00000003");
        let dc = rec("IT00000003", "red red");
        let lm_before = side_digest(&vlm.params, Side::Lm, None);
        let mut opt2 = Sgd::new(0.2, 0.9, 0.0);
        let mut start = None;
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            let sc = build_distill_example(&ic, &dc, &pc).unwrap();
            let (l, grads) =
                batch_loss_and_grads(&vlm, &[sc], Scope::VisionAdapters, None).unwrap();
            start.get_or_insert(l);
            opt2.step(&mut vlm, &grads);
            last = l;
            if l < 0.05 {
                break;
            }
        }
        assert!(start.unwrap() > 2.0 * last, "adapters barely moved the loss");
        assert!(last < 0.05, "adapter training stuck at {last}");
        assert_eq!(side_digest(&vlm.params, Side::Lm, None), lm_before);
    }
}
