//! Stage 2: recommendation prompts over a 10-candidate slate, LM-side
//! adapter tuning toward the ground-truth item ID, and greedy prediction.
//!
//! Prompt construction is length-checked from token counts *before* any
//! visual embedding is materialized, so an infeasible configuration (e.g.
//! all patch tokens for 10 candidates at production scale) fails fast with a
//! context-overflow error instead of allocating gigabytes.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::Side;
use crate::config::{derive_seed, TuneConfig};
use crate::corpus::{Example, Item, Speaker};
use crate::error::{Error, Result};
use crate::lm::generate_greedy;
use crate::model::{batch_loss_and_grads, side_digest, Scope, SeqElem, Sgd, TrainSeq, Vlm};
use crate::retrieval::CandidateSlate;
use crate::vocab::{detokenize_lossy, tokenize, BOS, EOS};

/// How candidate visuals enter the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// 5 compact CLS embeddings per candidate.
    Compact,
    /// No visual slots at all.
    TextOnly,
    /// All 5*(R+1) projected tokens per candidate.
    EntireTokens,
}

/// One element of an owned prompt sequence.
#[derive(Debug, Clone)]
pub enum PromptElem {
    Token(u16),
    /// Precomputed embedding rows injected as constants.
    Rows(Array2<f64>),
    /// Patches of one sub-image whose projected CLS is computed on the tape
    /// (stage-0 joint training needs vision gradients).
    ClsPatches(Array2<f64>),
}

impl PromptElem {
    pub fn token_len(&self) -> usize {
        match self {
            PromptElem::Token(_) => 1,
            PromptElem::Rows(a) => a.nrows(),
            PromptElem::ClsPatches(_) => 1,
        }
    }
}

/// Supplies per-candidate visual elements. `token_count` must be answerable
/// without touching image data so the builder can length-check first.
pub trait SlotSource {
    fn token_count(&self, mode: PromptMode) -> usize;
    fn elements(&self, item_id: &str, mode: PromptMode) -> Result<Vec<PromptElem>>;
}

/// Precomputed (frozen-vision) embeddings, used for stage-2 tuning and eval.
pub struct PrecomputedSlots {
    /// item_id -> (5, d_lm) compact rows
    pub compact: HashMap<String, Array2<f64>>,
    /// item_id -> (5*(R+1), d_lm) full rows
    pub full: HashMap<String, Array2<f64>>,
    /// patches per sub-image
    pub r: usize,
}

impl SlotSource for PrecomputedSlots {
    fn token_count(&self, mode: PromptMode) -> usize {
        match mode {
            PromptMode::Compact => 5,
            PromptMode::TextOnly => 0,
            PromptMode::EntireTokens => 5 * (self.r + 1),
        }
    }

    fn elements(&self, item_id: &str, mode: PromptMode) -> Result<Vec<PromptElem>> {
        let map = match mode {
            PromptMode::Compact => &self.compact,
            PromptMode::EntireTokens => &self.full,
            PromptMode::TextOnly => return Ok(vec![]),
        };
        let rows = map.get(item_id).ok_or_else(|| {
            Error::Prerequisite(format!("no precomputed visual tokens for item {item_id}"))
        })?;
        Ok(vec![PromptElem::Rows(rows.clone())])
    }
}

/// Live patches; compact slots are computed on the tape so vision gradients
/// flow (stage-0 pretraining).
pub struct LiveSlots {
    /// item_id -> 5 patch matrices
    pub patches: HashMap<String, Vec<Array2<f64>>>,
    pub r: usize,
}

impl SlotSource for LiveSlots {
    fn token_count(&self, mode: PromptMode) -> usize {
        match mode {
            PromptMode::Compact => 5,
            PromptMode::TextOnly => 0,
            PromptMode::EntireTokens => 5 * (self.r + 1),
        }
    }

    fn elements(&self, item_id: &str, mode: PromptMode) -> Result<Vec<PromptElem>> {
        if mode == PromptMode::TextOnly {
            return Ok(vec![]);
        }
        if mode == PromptMode::EntireTokens {
            return Err(Error::Config(
                "live slot source only supports compact mode".into(),
            ));
        }
        let patches = self.patches.get(item_id).ok_or_else(|| {
            Error::Prerequisite(format!("no patches for item {item_id}"))
        })?;
        Ok(patches.iter().map(|p| PromptElem::ClsPatches(p.clone())).collect())
    }
}

#[derive(Debug, Clone)]
pub struct RecommendationPrompt {
    pub elems: Vec<PromptElem>,
    /// Element range of the ground-truth ID + EOS (empty at inference).
    pub target: Range<usize>,
    /// Element ranges of the candidate blocks, in slate order.
    pub candidate_ranges: Vec<Range<usize>>,
}

impl RecommendationPrompt {
    pub fn as_seq(&self) -> Vec<SeqElem<'_>> {
        self.elems
            .iter()
            .map(|e| match e {
                PromptElem::Token(t) => SeqElem::Token(*t),
                PromptElem::Rows(a) => SeqElem::Const(a),
                PromptElem::ClsPatches(p) => SeqElem::Cls(p),
            })
            .collect()
    }

    pub fn token_len(&self) -> usize {
        self.elems.iter().map(PromptElem::token_len).sum()
    }

    pub fn visual_token_count(&self) -> usize {
        self.elems
            .iter()
            .map(|e| match e {
                PromptElem::Token(_) => 0,
                PromptElem::Rows(a) => a.nrows(),
                PromptElem::ClsPatches(_) => 1,
            })
            .sum()
    }

    pub fn train_seq(&self) -> TrainSeq<'_> {
        TrainSeq {
            elems: self.as_seq(),
            target: self.target.clone(),
        }
    }
}

const INSTRUCTION: &str = "answer with the id of the matching item only.\n";
const SEEKER_MARK: &str = "<submission> ";
const RECOMMENDER_MARK: &str = "<comment> ";
const CANDIDATES_HEADER: &str = "candidates:\n";
const ANSWER_CUE: &str = "answer: ";

/// Column-aligned layout. A model this small learns position-keyed attention
/// long before content-keyed copying, so the dialog region and every
/// candidate field are padded to fixed widths: candidate k's ID then sits at
/// a deterministic offset in every prompt and "copy the matching ID" is
/// addressable positionally. Longer dialogs/titles degrade gracefully (no
/// truncation, alignment just shifts).
const DIALOG_FIELD: usize = 64;
const TITLE_FIELD: usize = 12;

fn pad_to(s: &mut String, width: usize) {
    while s.len() < width {
        s.push(' ');
    }
}

fn push_text(elems: &mut Vec<PromptElem>, text: &str) {
    for t in tokenize(text) {
        elems.push(PromptElem::Token(t));
    }
}

fn dialog_text(example: &Example) -> String {
    let mut out = String::new();
    for u in &example.context {
        let mark = match u.speaker {
            Speaker::Seeker => SEEKER_MARK,
            Speaker::Recommender => RECOMMENDER_MARK,
        };
        out.push_str(mark);
        out.push_str(&u.text);
        out.push('\n');
    }
    out
}

/// Build the slate prompt. `titles` maps item_id -> title for every
/// candidate. With `with_target`, the ground-truth ID and EOS are appended
/// and covered by `target`.
pub fn build_recommendation_prompt(
    example: &Example,
    slate: &CandidateSlate,
    titles: &HashMap<String, String>,
    slots: &dyn SlotSource,
    mode: PromptMode,
    context_limit: usize,
    with_target: bool,
) -> Result<RecommendationPrompt> {
    let mut dialog = dialog_text(example);
    pad_to(&mut dialog, DIALOG_FIELD);
    // length pre-check from byte/slot counts only
    let mut text_len = 1 + INSTRUCTION.len() + dialog.len() + CANDIDATES_HEADER.len();
    let per_item_slots = slots.token_count(mode);
    for id in &slate.candidates {
        let title = titles.get(id).ok_or_else(|| {
            Error::Integrity(format!("candidate {id} has no catalog title"))
        })?;
        let block_text = format!("- {id} {title:<w$} ", w = TITLE_FIELD);
        text_len += block_text.len() + per_item_slots + 1; // trailing newline
    }
    text_len += ANSWER_CUE.len();
    if with_target {
        text_len += example.ground_truth_item.len() + 1; // id + EOS
    }
    if text_len > context_limit {
        return Err(Error::ContextOverflow {
            len: text_len,
            limit: context_limit,
        });
    }

    let mut elems = vec![PromptElem::Token(BOS)];
    push_text(&mut elems, INSTRUCTION);
    push_text(&mut elems, &dialog);
    push_text(&mut elems, CANDIDATES_HEADER);
    let mut candidate_ranges = Vec::with_capacity(slate.candidates.len());
    for id in &slate.candidates {
        let start = elems.len();
        let title = &titles[id];
        push_text(&mut elems, &format!("- {id} {title:<w$} ", w = TITLE_FIELD));
        for slot in slots.elements(id, mode)? {
            elems.push(slot);
        }
        push_text(&mut elems, "\n");
        candidate_ranges.push(start..elems.len());
    }
    push_text(&mut elems, ANSWER_CUE);
    let target = if with_target {
        let start = elems.len();
        push_text(&mut elems, &example.ground_truth_item);
        elems.push(PromptElem::Token(EOS));
        start..elems.len()
    } else {
        let n = elems.len();
        n..n
    };
    Ok(RecommendationPrompt {
        elems,
        target,
        candidate_ranges,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_ref: String,
    pub raw_output: String,
    pub matched_item: Option<String>,
    pub valid: bool,
}

/// Greedy decode and exact-match the trimmed output against the slate.
pub fn predict(
    vlm: &Vlm,
    example: &Example,
    slate: &CandidateSlate,
    titles: &HashMap<String, String>,
    slots: &dyn SlotSource,
    mode: PromptMode,
    max_new: usize,
) -> Result<Prediction> {
    let prompt = build_recommendation_prompt(
        example,
        slate,
        titles,
        slots,
        mode,
        vlm.lcfg.context_limit.saturating_sub(max_new),
        false,
    )?;
    let seq = prompt.as_seq();
    let out = generate_greedy(vlm, &seq, max_new)?;
    let raw_output = detokenize_lossy(&out);
    let trimmed = raw_output.trim();
    let matched_item = slate
        .candidates
        .iter()
        .find(|c| c.as_str() == trimmed)
        .cloned();
    Ok(Prediction {
        example_ref: example.example_ref(),
        valid: matched_item.is_some(),
        matched_item,
        raw_output,
    })
}

pub fn titles_of(catalog: &[Item]) -> HashMap<String, String> {
    catalog
        .iter()
        .map(|i| (i.item_id.clone(), i.title.clone()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    /// Examples skipped because the prompt would overflow the context.
    pub skipped_overflow: usize,
    pub selected_epoch: usize,
    pub val_hr_at_1: f64,
    pub train_losses: Vec<f64>,
}

/// Stage 2: train LM-side adapters to emit the ground-truth ID, vision
/// frozen. Checkpoint selection across epochs by validation HR@1 (ties:
/// lower validation loss).
pub fn tune_train(
    vlm: &mut Vlm,
    train: &[(Example, CandidateSlate)],
    val: &[(Example, CandidateSlate)],
    titles: &HashMap<String, String>,
    slots: &dyn SlotSource,
    mode: PromptMode,
    cfg: &TuneConfig,
    seed: u64,
) -> Result<TuneOutcome> {
    if vlm.lm_lora.is_none() {
        return Err(Error::Prerequisite(
            "LM adapters must be attached before tuning".into(),
        ));
    }
    let vision_before = side_digest(&vlm.params, Side::Vision, vlm.vision_lora.as_ref());
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "tune-order"));
    let mut skipped_overflow = 0usize;
    let mut best: Option<(f64, f64, usize, crate::adapters::AdapterState)> = None;
    let mut train_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        if cfg.max_train_examples > 0 {
            order.truncate(cfg.max_train_examples);
        }
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for &idx in &order {
            let (example, slate) = &train[idx];
            slate.validate(slate.candidates.len())?;
            if slate.ground_truth() != example.ground_truth_item {
                return Err(Error::Integrity(format!(
                    "slate for {} does not carry its ground truth",
                    example.example_ref()
                )));
            }
            let prompt = match build_recommendation_prompt(
                example,
                slate,
                titles,
                slots,
                mode,
                vlm.lcfg.context_limit,
                true,
            ) {
                Ok(p) => p,
                Err(Error::ContextOverflow { .. }) => {
                    skipped_overflow += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let seq = prompt.train_seq();
            let dropout_seed = rng.gen();
            let (loss, grads) =
                batch_loss_and_grads(vlm, &[seq], Scope::LmAdapters, Some(dropout_seed))?;
            opt.step(vlm, &grads);
            epoch_loss += loss;
            steps += 1;
        }
        train_losses.push(if steps > 0 { epoch_loss / steps as f64 } else { 0.0 });

        let (val_hr, val_loss) = validate(vlm, val, titles, slots, mode, cfg)?;
        let better = match &best {
            None => true,
            Some((hr, loss, _, _)) => {
                val_hr > *hr || (val_hr == *hr && val_loss < *loss)
            }
        };
        if better {
            best = Some((val_hr, val_loss, epoch, vlm.lm_lora.clone().unwrap()));
        }
    }
    let (val_hr_at_1, _, selected_epoch, adapters) = best.unwrap();
    vlm.lm_lora = Some(adapters);
    let vision_after = side_digest(&vlm.params, Side::Vision, vlm.vision_lora.as_ref());
    if vision_before != vision_after {
        return Err(Error::FrozenViolation(
            "vision parameters changed during stage-2 tuning".into(),
        ));
    }
    Ok(TuneOutcome {
        skipped_overflow,
        selected_epoch,
        val_hr_at_1,
        train_losses,
    })
}

/// Cap on validation examples scored per epoch; enough for checkpoint
/// selection without dominating runtime.
const VAL_CAP: usize = 48;

fn validate(
    vlm: &Vlm,
    val: &[(Example, CandidateSlate)],
    titles: &HashMap<String, String>,
    slots: &dyn SlotSource,
    mode: PromptMode,
    cfg: &TuneConfig,
) -> Result<(f64, f64)> {
    let subset = &val[..val.len().min(VAL_CAP)];
    if subset.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut hits = 0usize;
    let mut loss = 0.0;
    let mut scored = 0usize;
    for (example, slate) in subset {
        match predict(vlm, example, slate, titles, slots, mode, cfg.max_new_tokens) {
            Ok(p) => {
                if p.matched_item.as_deref() == Some(example.ground_truth_item.as_str()) {
                    hits += 1;
                }
            }
            Err(Error::ContextOverflow { .. }) => continue,
            Err(e) => return Err(e),
        }
        let prompt = build_recommendation_prompt(
            example,
            slate,
            titles,
            slots,
            mode,
            vlm.lcfg.context_limit,
            true,
        )?;
        let (nll, _) = crate::lm::sequence_nll(vlm, &prompt.train_seq())?;
        loss += nll;
        scored += 1;
    }
    if scored == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((hits as f64 / scored as f64, loss / scored as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;

    fn example() -> Example {
        Example {
            conv_id: "C00001".into(),
            turn: 2,
            context: vec![Utterance {
                speaker: Speaker::Seeker,
                text: "looking for a circle 00 in red".into(),
            }],
            ground_truth_item: "IT00000001".into(),
        }
    }

    fn slate(k: usize, gt_index: usize) -> CandidateSlate {
        let candidates: Vec<String> = (0..k).map(|j| format!("IT0000000{j}")).collect();
        CandidateSlate {
            example_ref: example().example_ref(),
            candidates,
            ground_truth_index: gt_index,
            swapped: false,
        }
    }

    fn titles(k: usize) -> HashMap<String, String> {
        (0..k)
            .map(|j| (format!("IT0000000{j}"), "circle 00".to_string()))
            .collect()
    }

    fn fake_slots(k: usize, r: usize, d: usize) -> PrecomputedSlots {
        let mut compact = HashMap::new();
        let mut full = HashMap::new();
        for j in 0..k {
            let id = format!("IT0000000{j}");
            compact.insert(id.clone(), Array2::from_elem((5, d), j as f64));
            full.insert(id, Array2::from_elem((5 * (r + 1), d), j as f64));
        }
        PrecomputedSlots { compact, full, r }
    }

    #[test]
    fn compact_mode_has_fifty_visual_tokens() {
        let slots = fake_slots(10, 4, 8);
        let p = build_recommendation_prompt(
            &example(),
            &slate(10, 1),
            &titles(10),
            &slots,
            PromptMode::Compact,
            4096,
            true,
        )
        .unwrap();
        assert_eq!(p.visual_token_count(), 50);
        assert_eq!(p.candidate_ranges.len(), 10);
    }

    #[test]
    fn text_only_mode_has_no_visual_tokens() {
        let slots = fake_slots(10, 4, 8);
        let p = build_recommendation_prompt(
            &example(),
            &slate(10, 1),
            &titles(10),
            &slots,
            PromptMode::TextOnly,
            4096,
            false,
        )
        .unwrap();
        assert_eq!(p.visual_token_count(), 0);
        assert!(p.target.is_empty());
    }

    #[test]
    fn candidate_ranges_tile_the_candidate_region() {
        let slots = fake_slots(10, 4, 8);
        let p = build_recommendation_prompt(
            &example(),
            &slate(10, 1),
            &titles(10),
            &slots,
            PromptMode::Compact,
            4096,
            true,
        )
        .unwrap();
        for w in p.candidate_ranges.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        // each block: id bytes, title bytes, exactly one 5-row slot element
        for (range, id) in p.candidate_ranges.iter().zip(&slate(10, 1).candidates) {
            let block = &p.elems[range.clone()];
            let slot_rows: usize = block
                .iter()
                .map(|e| match e {
                    PromptElem::Rows(a) => a.nrows(),
                    _ => 0,
                })
                .sum();
            assert_eq!(slot_rows, 5);
            let text: String = detokenize_lossy(
                &block
                    .iter()
                    .filter_map(|e| match e {
                        PromptElem::Token(t) if *t < 256 => Some(*t),
                        _ => None,
                    })
                    .collect::<Vec<_>>(),
            );
            assert!(text.contains(id.as_str()), "{text}");
        }
    }

    /// Production-scale constants must be rejected before any embedding is
    /// materialized: the slot source panics if asked for data.
    #[test]
    fn paper_scale_entire_tokens_overflows_without_materializing() {
        struct Phantom;
        impl SlotSource for Phantom {
            fn token_count(&self, mode: PromptMode) -> usize {
                match mode {
                    PromptMode::EntireTokens => 5 * 577,
                    PromptMode::Compact => 5,
                    PromptMode::TextOnly => 0,
                }
            }
            fn elements(&self, _: &str, _: PromptMode) -> Result<Vec<PromptElem>> {
                panic!("builder must length-check before fetching slots");
            }
        }
        match build_recommendation_prompt(
            &example(),
            &slate(10, 1),
            &titles(10),
            &Phantom,
            PromptMode::EntireTokens,
            4096,
            false,
        ) {
            Err(Error::ContextOverflow { len, limit }) => {
                assert!(len > 28_850);
                assert_eq!(limit, 4096);
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn prediction_matching_rules() {
        let s = slate(10, 1);
        let classify = |raw: &str| {
            let trimmed = raw.trim();
            s.candidates.iter().find(|c| c.as_str() == trimmed).cloned()
        };
        assert_eq!(classify("IT00000001\n"), Some("IT00000001".into()));
        assert_eq!(classify("the best item is IT00000001"), None);
        assert_eq!(classify("ZZ00000001"), None);
    }

    #[test]
    fn tune_requires_attached_adapters() {
        let cfg = crate::config::RunConfig::default();
        let mut vlm = Vlm::init(&cfg.vision, &cfg.lm, 1);
        let slots = fake_slots(10, 4, 64);
        let err = tune_train(
            &mut vlm,
            &[],
            &[],
            &titles(10),
            &slots,
            PromptMode::Compact,
            &cfg.tune,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Prerequisite(_)));
    }
}
