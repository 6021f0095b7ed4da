//! Shared model machinery: parameter containers for the vision tower,
//! projector and decoder LM, tape binding, transformer forward passes over
//! mixed token/visual-slot sequences, gradient collection, and plain SGD.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterState, Side};
use crate::config::{LmConfig, VisionConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use crate::vocab::VOCAB_SIZE;

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// One pre-LN transformer block (used by both the vision tower and the LM).
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl Block {
    fn init(rng: &mut ChaCha8Rng, d: usize) -> Block {
        let hidden = 4 * d;
        Block {
            ln1_g: Array2::ones((1, d)),
            ln1_b: Array2::zeros((1, d)),
            wq: randn(rng, d, d, 0.02),
            bq: Array2::zeros((1, d)),
            wk: randn(rng, d, d, 0.02),
            bk: Array2::zeros((1, d)),
            wv: randn(rng, d, d, 0.02),
            bv: Array2::zeros((1, d)),
            wo: randn(rng, d, d, 0.02),
            bo: Array2::zeros((1, d)),
            ln2_g: Array2::ones((1, d)),
            ln2_b: Array2::zeros((1, d)),
            w1: randn(rng, d, hidden, 0.02),
            b1: Array2::zeros((1, hidden)),
            w2: randn(rng, hidden, d, 0.02),
            b2: Array2::zeros((1, d)),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f(format!("{prefix}.ln1_g"), &self.ln1_g);
        f(format!("{prefix}.ln1_b"), &self.ln1_b);
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.bq"), &self.bq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.bk"), &self.bk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.bv"), &self.bv);
        f(format!("{prefix}.wo"), &self.wo);
        f(format!("{prefix}.bo"), &self.bo);
        f(format!("{prefix}.ln2_g"), &self.ln2_g);
        f(format!("{prefix}.ln2_b"), &self.ln2_b);
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.ln1_g"), &mut self.ln1_g);
        f(format!("{prefix}.ln1_b"), &mut self.ln1_b);
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.bq"), &mut self.bq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.bk"), &mut self.bk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.bv"), &mut self.bv);
        f(format!("{prefix}.wo"), &mut self.wo);
        f(format!("{prefix}.bo"), &mut self.bo);
        f(format!("{prefix}.ln2_g"), &mut self.ln2_g);
        f(format!("{prefix}.ln2_b"), &mut self.ln2_b);
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

/// Vision tower + projector parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionParams {
    pub patch_w: Array2<f64>, // (3*patch^2, d_vis)
    pub patch_b: Array2<f64>,
    pub cls: Array2<f64>, // (1, d_vis)
    pub pos: Array2<f64>, // (R+1, d_vis)
    pub blocks: Vec<Block>,
    pub ln_f_g: Array2<f64>,
    pub ln_f_b: Array2<f64>,
    pub proj1: Array2<f64>, // (d_vis, d_lm)
    pub proj1_b: Array2<f64>,
    pub proj2: Array2<f64>, // (d_lm, d_lm)
    pub proj2_b: Array2<f64>,
    /// Final LN over projected tokens. Keeps slot embeddings on the token
    /// embedding scale: without it SGD inflates a common-mode "visual bias"
    /// direction until per-image differences vanish under the LM's pre-LN.
    pub proj_ln_g: Array2<f64>,
    pub proj_ln_b: Array2<f64>,
}

/// Decoder LM parameters over the byte vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub tok_emb: Array2<f64>, // (260, d_lm)
    pub pos: Array2<f64>,     // (context_limit, d_lm)
    pub blocks: Vec<Block>,
    pub ln_f_g: Array2<f64>,
    pub ln_f_b: Array2<f64>,
    /// Untied output head; absent when `tied_head` is set.
    pub head: Option<Array2<f64>>, // (d_lm, 260)
    pub head_b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub vision: VisionParams,
    pub lm: LmParams,
}

impl ModelParams {
    pub fn init(vcfg: &VisionConfig, lcfg: &LmConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_dim = 3 * vcfg.patch_side * vcfg.patch_side;
        let r = vcfg.r();
        let vision = VisionParams {
            patch_w: randn(&mut rng, patch_dim, vcfg.d_vis, 0.02),
            patch_b: Array2::zeros((1, vcfg.d_vis)),
            cls: randn(&mut rng, 1, vcfg.d_vis, 0.02),
            pos: randn(&mut rng, r + 1, vcfg.d_vis, 0.02),
            blocks: (0..vcfg.layers).map(|_| Block::init(&mut rng, vcfg.d_vis)).collect(),
            ln_f_g: Array2::ones((1, vcfg.d_vis)),
            ln_f_b: Array2::zeros((1, vcfg.d_vis)),
            proj1: randn(&mut rng, vcfg.d_vis, lcfg.d_lm, 0.02),
            proj1_b: Array2::zeros((1, lcfg.d_lm)),
            proj2: randn(&mut rng, lcfg.d_lm, lcfg.d_lm, 0.02),
            proj2_b: Array2::zeros((1, lcfg.d_lm)),
            proj_ln_g: Array2::from_elem((1, lcfg.d_lm), 0.02),
            proj_ln_b: Array2::zeros((1, lcfg.d_lm)),
        };
        let lm = LmParams {
            tok_emb: randn(&mut rng, VOCAB_SIZE, lcfg.d_lm, 0.02),
            pos: randn(&mut rng, lcfg.context_limit, lcfg.d_lm, 0.02),
            blocks: (0..lcfg.layers).map(|_| Block::init(&mut rng, lcfg.d_lm)).collect(),
            ln_f_g: Array2::ones((1, lcfg.d_lm)),
            ln_f_b: Array2::zeros((1, lcfg.d_lm)),
            head: if lcfg.tied_head {
                None
            } else {
                Some(randn(&mut rng, lcfg.d_lm, VOCAB_SIZE, 0.02))
            },
            head_b: Array2::zeros((1, VOCAB_SIZE)),
        };
        ModelParams { vision, lm }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        let v = &self.vision;
        f("vision.patch_w".into(), &v.patch_w);
        f("vision.patch_b".into(), &v.patch_b);
        f("vision.cls".into(), &v.cls);
        f("vision.pos".into(), &v.pos);
        for (i, b) in v.blocks.iter().enumerate() {
            b.visit(&format!("vision.block{i}"), f);
        }
        f("vision.ln_f_g".into(), &v.ln_f_g);
        f("vision.ln_f_b".into(), &v.ln_f_b);
        f("vision.proj1".into(), &v.proj1);
        f("vision.proj1_b".into(), &v.proj1_b);
        f("vision.proj2".into(), &v.proj2);
        f("vision.proj2_b".into(), &v.proj2_b);
        f("vision.proj_ln_g".into(), &v.proj_ln_g);
        f("vision.proj_ln_b".into(), &v.proj_ln_b);
        let l = &self.lm;
        f("lm.tok_emb".into(), &l.tok_emb);
        f("lm.pos".into(), &l.pos);
        for (i, b) in l.blocks.iter().enumerate() {
            b.visit(&format!("lm.block{i}"), f);
        }
        f("lm.ln_f_g".into(), &l.ln_f_g);
        f("lm.ln_f_b".into(), &l.ln_f_b);
        if let Some(head) = &l.head {
            f("lm.head".into(), head);
        }
        f("lm.head_b".into(), &l.head_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        let v = &mut self.vision;
        f("vision.patch_w".into(), &mut v.patch_w);
        f("vision.patch_b".into(), &mut v.patch_b);
        f("vision.cls".into(), &mut v.cls);
        f("vision.pos".into(), &mut v.pos);
        for (i, b) in v.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("vision.block{i}"), f);
        }
        f("vision.ln_f_g".into(), &mut v.ln_f_g);
        f("vision.ln_f_b".into(), &mut v.ln_f_b);
        f("vision.proj1".into(), &mut v.proj1);
        f("vision.proj1_b".into(), &mut v.proj1_b);
        f("vision.proj2".into(), &mut v.proj2);
        f("vision.proj2_b".into(), &mut v.proj2_b);
        f("vision.proj_ln_g".into(), &mut v.proj_ln_g);
        f("vision.proj_ln_b".into(), &mut v.proj_ln_b);
        let l = &mut self.lm;
        f("lm.tok_emb".into(), &mut l.tok_emb);
        f("lm.pos".into(), &mut l.pos);
        for (i, b) in l.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("lm.block{i}"), f);
        }
        f("lm.ln_f_g".into(), &mut l.ln_f_g);
        f("lm.ln_f_b".into(), &mut l.ln_f_b);
        if let Some(head) = &mut l.head {
            f("lm.head".into(), head);
        }
        f("lm.head_b".into(), &mut l.head_b);
    }

    /// `(name, d_in, d_out)` of every square-ish weight matrix that can
    /// receive an adapter.
    pub fn adapter_candidates(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, arr| {
            let is_matrix = arr.nrows() > 1 && arr.ncols() > 1;
            if is_matrix {
                out.push((name, arr.nrows(), arr.ncols()));
            }
        });
        out
    }
}

/// Hex SHA-256 over (name, shape, f64-LE bytes) of the given tensors.
pub fn digest_tensors<'a>(tensors: impl Iterator<Item = (String, &'a Array2<f64>)>) -> String {
    let mut entries: Vec<(String, &Array2<f64>)> = tensors.collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = Sha256::new();
    for (name, arr) in entries {
        h.update(name.as_bytes());
        h.update((arr.nrows() as u64).to_le_bytes());
        h.update((arr.ncols() as u64).to_le_bytes());
        for v in arr.iter() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// Digest of one side's base tensors plus (optionally) its adapters.
pub fn side_digest(params: &ModelParams, side: Side, adapters: Option<&AdapterState>) -> String {
    let prefix = match side {
        Side::Vision => "vision.",
        Side::Lm => "lm.",
    };
    let mut entries: Vec<(String, &Array2<f64>)> = Vec::new();
    params.visit(&mut |name, arr| {
        if name.starts_with(prefix) {
            entries.push((name, arr));
        }
    });
    if let Some(st) = adapters {
        entries.extend(st.trainable_parameters());
    }
    digest_tensors(entries.into_iter())
}

/// Which parameters receive gradients in a given stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Evaluation only.
    Frozen,
    /// Joint pretraining: every base tensor.
    All,
    /// Late pretraining: LM base tensors only, vision held fixed so
    /// selection pressure cannot corrupt slot representations.
    LmBase,
    /// Stage 1: vision-side adapter factors only.
    VisionAdapters,
    /// Stage 2: LM-side adapter factors only.
    LmAdapters,
}

impl Scope {
    pub fn trainable(&self, name: &str) -> bool {
        match self {
            Scope::Frozen => false,
            Scope::All => !name.starts_with("lora."),
            Scope::LmBase => name.starts_with("lm."),
            Scope::VisionAdapters => name.starts_with("lora.vision."),
            Scope::LmAdapters => name.starts_with("lora.lm."),
        }
    }
}

/// Name -> tape leaf for one forward pass.
pub struct Bound {
    map: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn maybe(&self, name: &str) -> Option<Var> {
        self.map.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }
}

pub fn bind(
    tape: &mut Tape,
    params: &ModelParams,
    vision_lora: Option<&AdapterState>,
    lm_lora: Option<&AdapterState>,
    scope: Scope,
) -> Bound {
    let mut map = HashMap::new();
    params.visit(&mut |name, arr| {
        let v = tape.leaf(arr.clone(), scope.trainable(&name));
        map.insert(name, v);
    });
    for st in [vision_lora, lm_lora].into_iter().flatten() {
        for (name, arr) in st.trainable_parameters() {
            let v = tape.leaf(arr.clone(), scope.trainable(&name));
            map.insert(name, v);
        }
    }
    Bound { map }
}

/// Adapter lookup plus dropout state for one forward pass.
pub struct LoraCtx<'a> {
    pub vision: Option<&'a AdapterState>,
    pub lm: Option<&'a AdapterState>,
    /// `Some` only during training; dropout masks are drawn from this rng.
    pub dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> LoraCtx<'a> {
    pub fn eval(vision: Option<&'a AdapterState>, lm: Option<&'a AdapterState>) -> Self {
        LoraCtx {
            vision,
            lm,
            dropout_rng: None,
        }
    }

    pub fn train(
        vision: Option<&'a AdapterState>,
        lm: Option<&'a AdapterState>,
        dropout_seed: u64,
    ) -> Self {
        LoraCtx {
            vision,
            lm,
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        }
    }

    fn state_for(&self, name: &str) -> Option<&'a AdapterState> {
        if name.starts_with("vision.") {
            self.vision
        } else {
            self.lm
        }
    }
}

/// `x @ W + b`, with the low-rank delta added when `name` is adapted.
fn linear(
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    name: &str,
    bias_name: &str,
    lora: &mut LoraCtx,
) -> Var {
    let w = bound.get(name);
    let mut y = tape.matmul(x, w);
    y = tape.add_row(y, bound.get(bias_name));
    if let Some(st) = lora.state_for(name) {
        if st.factors(name).is_some() {
            let down = bound.get(&format!("lora.{name}.down"));
            let up = bound.get(&format!("lora.{name}.up"));
            let p = st.cfg.dropout;
            let xin = match (&mut lora.dropout_rng, p > 0.0) {
                (Some(rng), true) => {
                    use rand::Rng;
                    let shape = tape.data(x).dim();
                    let keep = 1.0 / (1.0 - p);
                    let mask = Array2::from_shape_fn(shape, |_| {
                        if rng.gen::<f64>() < p {
                            0.0
                        } else {
                            keep
                        }
                    });
                    tape.dropout(x, mask)
                }
                _ => x,
            };
            let mid = tape.matmul(xin, down);
            let delta = tape.matmul(mid, up);
            y = tape.add_scaled(y, delta, st.scaling());
        }
    }
    y
}

fn block_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<&Array2<f64>>,
    lora: &mut LoraCtx,
) -> Var {
    let h = {
        let g = bound.get(&format!("{prefix}.ln1_g"));
        let b = bound.get(&format!("{prefix}.ln1_b"));
        tape.layer_norm(x, g, b)
    };
    let q = linear(tape, bound, h, &format!("{prefix}.wq"), &format!("{prefix}.bq"), lora);
    let k = linear(tape, bound, h, &format!("{prefix}.wk"), &format!("{prefix}.bk"), lora);
    let v = linear(tape, bound, h, &format!("{prefix}.wv"), &format!("{prefix}.bv"), lora);
    let d = tape.data(q).ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let qh = tape.slice_cols(q, i * dh, (i + 1) * dh);
        let kh = tape.slice_cols(k, i * dh, (i + 1) * dh);
        let vh = tape.slice_cols(v, i * dh, (i + 1) * dh);
        let kt = tape.transpose(kh);
        let mut s = tape.matmul(qh, kt);
        s = tape.scale(s, scale);
        if let Some(m) = mask {
            s = tape.add_const(s, m);
        }
        let a = tape.softmax_rows(s);
        outs.push(tape.matmul(a, vh));
    }
    let o = tape.concat_cols(&outs);
    let o = linear(tape, bound, o, &format!("{prefix}.wo"), &format!("{prefix}.bo"), lora);
    let x = tape.add(x, o);
    let h2 = {
        let g = bound.get(&format!("{prefix}.ln2_g"));
        let b = bound.get(&format!("{prefix}.ln2_b"));
        tape.layer_norm(x, g, b)
    };
    let m = linear(tape, bound, h2, &format!("{prefix}.w1"), &format!("{prefix}.b1"), lora);
    let m = tape.gelu(m);
    let m = linear(tape, bound, m, &format!("{prefix}.w2"), &format!("{prefix}.b2"), lora);
    tape.add(x, m)
}

/// Vision tower over one sub-image's flattened patches `(R, 3*patch^2)`.
/// Returns R+1 contextual embeddings, CLS at row 0.
pub fn vision_forward(
    tape: &mut Tape,
    bound: &Bound,
    vcfg: &VisionConfig,
    patches: &Array2<f64>,
    lora: &mut LoraCtx,
) -> Var {
    let r = patches.nrows();
    let p = tape.constant(patches.clone());
    let pw = bound.get("vision.patch_w");
    let mut x = tape.matmul(p, pw);
    x = tape.add_row(x, bound.get("vision.patch_b"));
    let cls = bound.get("vision.cls");
    let mut tokens = tape.concat_rows(&[cls, x]);
    let pos = bound.get("vision.pos");
    let pos_slice = tape.slice_rows(pos, 0, r + 1);
    tokens = tape.add(tokens, pos_slice);
    for i in 0..vcfg.layers {
        tokens = block_forward(
            tape,
            bound,
            &format!("vision.block{i}"),
            tokens,
            vcfg.heads,
            None,
            lora,
        );
    }
    let g = bound.get("vision.ln_f_g");
    let b = bound.get("vision.ln_f_b");
    tape.layer_norm(tokens, g, b)
}

/// Two-layer projector from vision width into LM width.
pub fn project_forward(tape: &mut Tape, bound: &Bound, x: Var, lora: &mut LoraCtx) -> Var {
    let h = linear(tape, bound, x, "vision.proj1", "vision.proj1_b", lora);
    let h = tape.gelu(h);
    let h = linear(tape, bound, h, "vision.proj2", "vision.proj2_b", lora);
    let g = bound.get("vision.proj_ln_g");
    let b = bound.get("vision.proj_ln_b");
    tape.layer_norm(h, g, b)
}

/// One element of a mixed input sequence as fed to the LM.
pub enum SeqElem<'a> {
    Token(u16),
    /// Precomputed visual embedding rows (k, d_lm), injected as constants.
    Const(&'a Array2<f64>),
    /// Projected CLS (row 0) of this sub-image, computed on the tape.
    Cls(&'a Array2<f64>),
    /// All R+1 projected tokens of this sub-image, computed on the tape.
    Full(&'a Array2<f64>),
}

impl SeqElem<'_> {
    pub fn len(&self) -> usize {
        match self {
            SeqElem::Token(_) => 1,
            SeqElem::Const(a) => a.nrows(),
            SeqElem::Cls(_) => 1,
            SeqElem::Full(a) => a.nrows() + 1,
        }
    }
}

fn causal_mask(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| if j > i { -1e30 } else { 0.0 })
}

/// Full LM forward over a mixed sequence; returns per-position logits.
pub fn lm_forward(
    tape: &mut Tape,
    bound: &Bound,
    vcfg: &VisionConfig,
    lcfg: &LmConfig,
    elems: &[SeqElem],
    lora: &mut LoraCtx,
) -> Result<Var> {
    let total: usize = elems.iter().map(SeqElem::len).sum();
    if total > lcfg.context_limit {
        return Err(Error::ContextOverflow {
            len: total,
            limit: lcfg.context_limit,
        });
    }
    let tok_emb = bound.get("lm.tok_emb");
    let mut segments: Vec<Var> = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    let flush = |tape: &mut Tape, pending: &mut Vec<usize>, segments: &mut Vec<Var>| {
        if !pending.is_empty() {
            segments.push(tape.gather_rows(tok_emb, pending));
            pending.clear();
        }
    };
    for e in elems {
        match e {
            SeqElem::Token(id) => pending.push(*id as usize),
            SeqElem::Const(rows) => {
                flush(tape, &mut pending, &mut segments);
                segments.push(tape.constant((*rows).clone()));
            }
            SeqElem::Cls(patches) => {
                flush(tape, &mut pending, &mut segments);
                let enc = vision_forward(tape, bound, vcfg, patches, lora);
                let projected = project_forward(tape, bound, enc, lora);
                segments.push(tape.slice_rows(projected, 0, 1));
            }
            SeqElem::Full(patches) => {
                flush(tape, &mut pending, &mut segments);
                let enc = vision_forward(tape, bound, vcfg, patches, lora);
                segments.push(project_forward(tape, bound, enc, lora));
            }
        }
    }
    flush(tape, &mut pending, &mut segments);
    let mut x = if segments.len() == 1 {
        segments[0]
    } else {
        tape.concat_rows(&segments)
    };
    let pos = bound.get("lm.pos");
    let pos_slice = tape.slice_rows(pos, 0, total);
    x = tape.add(x, pos_slice);
    let mask = causal_mask(total);
    for i in 0..lcfg.layers {
        x = block_forward(tape, bound, &format!("lm.block{i}"), x, lcfg.heads, Some(&mask), lora);
    }
    let g = bound.get("lm.ln_f_g");
    let b = bound.get("lm.ln_f_b");
    x = tape.layer_norm(x, g, b);
    let logits = match bound.maybe("lm.head") {
        Some(head) => tape.matmul(x, head),
        None => {
            let wt = tape.transpose(tok_emb);
            tape.matmul(x, wt)
        }
    };
    Ok(tape.add_row(logits, bound.get("lm.head_b")))
}

/// The full two-tower model plus whatever adapters are attached.
#[derive(Debug, Clone)]
pub struct Vlm {
    pub vcfg: VisionConfig,
    pub lcfg: LmConfig,
    pub params: ModelParams,
    pub vision_lora: Option<AdapterState>,
    pub lm_lora: Option<AdapterState>,
}

impl Vlm {
    pub fn init(vcfg: &VisionConfig, lcfg: &LmConfig, seed: u64) -> Vlm {
        Vlm {
            vcfg: vcfg.clone(),
            lcfg: lcfg.clone(),
            params: ModelParams::init(vcfg, lcfg, seed),
            vision_lora: None,
            lm_lora: None,
        }
    }

    /// Eval-mode logits over a mixed sequence; adapters applied, no dropout.
    pub fn logits(&self, elems: &[SeqElem]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let bound = bind(
            &mut tape,
            &self.params,
            self.vision_lora.as_ref(),
            self.lm_lora.as_ref(),
            Scope::Frozen,
        );
        let mut lora = LoraCtx::eval(self.vision_lora.as_ref(), self.lm_lora.as_ref());
        let logits = lm_forward(&mut tape, &bound, &self.vcfg, &self.lcfg, elems, &mut lora)?;
        tape.check_finite(logits, "lm logits")?;
        Ok(tape.data(logits).clone())
    }
}

/// One training sequence: mixed elements plus the half-open target range.
pub struct TrainSeq<'a> {
    pub elems: Vec<SeqElem<'a>>,
    pub target: Range<usize>,
}

impl TrainSeq<'_> {
    /// (logit row, target token) pairs for the loss. Only valid when every
    /// target element is a single token and no slot sits in the span.
    pub fn loss_pairs(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        if self.target.is_empty() {
            return Err(Error::Schema("empty target span".into()));
        }
        if self.target.start == 0 {
            return Err(Error::Schema("target span cannot start at element 0".into()));
        }
        // element index -> flat position
        let mut flat = Vec::with_capacity(self.elems.len());
        let mut pos = 0;
        for e in &self.elems {
            flat.push(pos);
            pos += e.len();
        }
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for idx in self.target.clone() {
            match &self.elems[idx] {
                SeqElem::Token(id) => {
                    rows.push(flat[idx] - 1);
                    targets.push(*id as usize);
                }
                _ => {
                    return Err(Error::Schema(
                        "visual slot inside target span".into(),
                    ))
                }
            }
        }
        Ok((rows, targets))
    }
}

pub type GradStore = HashMap<String, Array2<f64>>;

/// Mean loss over a batch plus gradients for the scope's trainable tensors.
/// `dropout_seed` switches the adapters' dropout path on (training mode).
pub fn batch_loss_and_grads(
    vlm: &Vlm,
    batch: &[TrainSeq],
    scope: Scope,
    dropout_seed: Option<u64>,
) -> Result<(f64, GradStore)> {
    assert!(!batch.is_empty());
    let mut tape = Tape::new();
    let bound = bind(
        &mut tape,
        &vlm.params,
        vlm.vision_lora.as_ref(),
        vlm.lm_lora.as_ref(),
        scope,
    );
    let mut lora = match dropout_seed {
        Some(seed) => LoraCtx::train(vlm.vision_lora.as_ref(), vlm.lm_lora.as_ref(), seed),
        None => LoraCtx::eval(vlm.vision_lora.as_ref(), vlm.lm_lora.as_ref()),
    };
    let mut losses = Vec::with_capacity(batch.len());
    for seq in batch {
        let logits = lm_forward(&mut tape, &bound, &vlm.vcfg, &vlm.lcfg, &seq.elems, &mut lora)?;
        let (rows, targets) = seq.loss_pairs()?;
        losses.push(tape.nll_mean(logits, &rows, &targets));
    }
    let mut loss = losses[0];
    for l in &losses[1..] {
        loss = tape.add(loss, *l);
    }
    if losses.len() > 1 {
        loss = tape.scale(loss, 1.0 / losses.len() as f64);
    }
    tape.check_finite(loss, "training loss")?;
    tape.backward(loss);
    let mut grads = GradStore::new();
    for name in bound.names() {
        if scope.trainable(name) {
            if let Some(g) = tape.grad(bound.get(name)) {
                grads.insert(name.clone(), g.clone());
            }
        }
    }
    Ok((tape.scalar(loss), grads))
}

/// Plain SGD with momentum and decoupled weight decay. `vision_lr_mult`
/// scales the step for vision-tower base tensors: their gradients arrive an
/// order of magnitude smaller than the LM's (every path to the loss runs
/// through the projector and the frozen-scale slot positions), so a shared
/// rate either starves the tower or destabilizes the LM.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub vision_lr_mult: f64,
    velocity: HashMap<String, Array2<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd {
            lr,
            momentum,
            weight_decay,
            vision_lr_mult: 1.0,
            velocity: HashMap::new(),
        }
    }

    pub fn with_vision_lr_mult(mut self, mult: f64) -> Sgd {
        self.vision_lr_mult = mult;
        self
    }

    fn update(&mut self, name: &str, w: &mut Array2<f64>, g: &Array2<f64>) {
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(w.dim()));
        *v *= self.momentum;
        *v += g;
        if self.weight_decay > 0.0 {
            *v += &(&*w * self.weight_decay);
        }
        let lr = if name.starts_with("vision.") {
            self.lr * self.vision_lr_mult
        } else {
            self.lr
        };
        *w -= &(&*v * lr);
    }

    /// Apply one step to every gradient in the store. Base parameters and
    /// adapter factors are matched by name; anything unmatched is a bug.
    pub fn step(&mut self, vlm: &mut Vlm, grads: &GradStore) {
        let mut remaining: std::collections::HashSet<&str> =
            grads.keys().map(String::as_str).collect();
        let Vlm {
            params,
            vision_lora,
            lm_lora,
            ..
        } = vlm;
        params.visit_mut(&mut |name, w| {
            if let Some(g) = grads.get(&name) {
                remaining.remove(name.as_str());
                self.update(&name, w, g);
            }
        });
        for st in [vision_lora.as_mut(), lm_lora.as_mut()].into_iter().flatten() {
            for (name, w) in st.trainable_parameters_mut() {
                if let Some(g) = grads.get(&name) {
                    remaining.remove(name.as_str());
                    self.update(&name, w, g);
                }
            }
        }
        assert!(remaining.is_empty(), "unmatched gradients: {remaining:?}");
    }
}
