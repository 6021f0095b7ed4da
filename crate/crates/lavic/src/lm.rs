//! Inference-side language model operations: next-token distributions,
//! sequence likelihood, greedy decoding, and perplexity.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{SeqElem, TrainSeq, Vlm};
use crate::tensor::{log_softmax_entry, softmax_rows};
use crate::vocab::EOS;

/// Per-position next-token distributions (each row sums to 1).
pub fn forward_distributions(vlm: &Vlm, elems: &[SeqElem]) -> Result<Array2<f64>> {
    Ok(softmax_rows(&vlm.logits(elems)?))
}

/// Mean negative log-likelihood over a sequence's target span, plus the
/// number of scored tokens.
pub fn sequence_nll(vlm: &Vlm, seq: &TrainSeq) -> Result<(f64, usize)> {
    let logits = vlm.logits(&seq.elems)?;
    let (rows, targets) = seq.loss_pairs()?;
    let mut total = 0.0;
    for (&r, &t) in rows.iter().zip(&targets) {
        total -= log_softmax_entry(&logits.row(r).to_owned(), t);
    }
    Ok((total / rows.len() as f64, rows.len()))
}

/// Token-weighted perplexity over a set of sequences.
pub fn perplexity(vlm: &Vlm, seqs: &[TrainSeq]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in seqs {
        let (mean, n) = sequence_nll(vlm, seq)?;
        total += mean * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Schema("perplexity over zero tokens".into()));
    }
    Ok((total / count as f64).exp())
}

/// Greedy decode: repeatedly append the argmax token (lowest id on ties),
/// stopping at EOS or after `max_new` tokens. EOS is not included in the
/// returned tokens. The context must fit the worst case up front.
pub fn generate_greedy(vlm: &Vlm, prompt: &[SeqElem], max_new: usize) -> Result<Vec<u16>> {
    let prompt_len: usize = prompt.iter().map(SeqElem::len).sum();
    if prompt_len + max_new > vlm.lcfg.context_limit {
        return Err(Error::ContextOverflow {
            len: prompt_len + max_new,
            limit: vlm.lcfg.context_limit,
        });
    }
    let emb = embed_prompt(vlm, prompt)?;
    let mut dec = Decoder::prefill(vlm, emb);
    let mut out = Vec::new();
    for _ in 0..max_new {
        let best = dec.argmax();
        if best == EOS {
            break;
        }
        out.push(best);
        dec.step(best);
    }
    Ok(out)
}

// ---- fast eval-mode forward (no tape, KV-cached) --------------------------
//
// Mirrors the tape forward exactly: pre-LN blocks, additive -1e30 causal
// mask, adapter deltas in eval mode (no dropout). Used only where gradients
// are not needed; a unit test pins it token-for-token to the tape path.

fn eval_ln(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.sum() / d;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d;
        let is = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - m) * is);
    }
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * g[[0, j]] + b[[0, j]];
        }
    }
    out
}

fn eval_gelu(x: &mut Array2<f64>) {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    x.mapv_inplace(|v| 0.5 * v * (1.0 + (C * (v + 0.044715 * v * v * v)).tanh()));
}

fn eval_linear(vlm: &Vlm, x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>, name: &str) -> Array2<f64> {
    let mut y = x.dot(w);
    y += &b.row(0);
    let state = if name.starts_with("vision.") {
        vlm.vision_lora.as_ref()
    } else {
        vlm.lm_lora.as_ref()
    };
    if let Some(st) = state {
        if let Some(f) = st.factors(name) {
            y.scaled_add(st.scaling(), &x.dot(&f.down).dot(&f.up));
        }
    }
    y
}

fn eval_attend(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize, causal: bool) -> Array2<f64> {
    use ndarray::s;
    let (n, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((n, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t()) * scale;
        if causal {
            // the query at local row i sits at absolute position i + offset
            let offset = k.nrows() - n;
            for i in 0..n {
                for j in i + offset + 1..k.nrows() {
                    scores[[i, j]] += -1e30;
                }
            }
        }
        let a = softmax_rows(&scores);
        out.slice_mut(cols).assign(&a.dot(&vh));
    }
    out
}

/// One pre-LN block over `x`, attending to `kv_x` (== `x` for self-contained
/// passes; the cached prefix during decoding). When `cache` is given, the
/// computed keys/values are appended to it and attention runs over the cache.
fn eval_block(
    vlm: &Vlm,
    x: &Array2<f64>,
    blk: &crate::model::Block,
    prefix: &str,
    heads: usize,
    causal: bool,
    cache: Option<&mut (Array2<f64>, Array2<f64>)>,
) -> Array2<f64> {
    let h = eval_ln(x, &blk.ln1_g, &blk.ln1_b);
    let q = eval_linear(vlm, &h, &blk.wq, &blk.bq, &format!("{prefix}.wq"));
    let k = eval_linear(vlm, &h, &blk.wk, &blk.bk, &format!("{prefix}.wk"));
    let v = eval_linear(vlm, &h, &blk.wv, &blk.bv, &format!("{prefix}.wv"));
    let o = match cache {
        Some((ck, cv)) => {
            ck.append(ndarray::Axis(0), k.view()).unwrap();
            cv.append(ndarray::Axis(0), v.view()).unwrap();
            eval_attend(&q, ck, cv, heads, causal)
        }
        None => eval_attend(&q, &k, &v, heads, causal),
    };
    let o = eval_linear(vlm, &o, &blk.wo, &blk.bo, &format!("{prefix}.wo"));
    let x = x + &o;
    let h2 = eval_ln(&x, &blk.ln2_g, &blk.ln2_b);
    let mut m = eval_linear(vlm, &h2, &blk.w1, &blk.b1, &format!("{prefix}.w1"));
    eval_gelu(&mut m);
    let m = eval_linear(vlm, &m, &blk.w2, &blk.b2, &format!("{prefix}.w2"));
    x + &m
}

/// Projected visual rows `(R+1, d_lm)` for one sub-image, eval mode.
fn eval_visual_rows(vlm: &Vlm, patches: &Array2<f64>) -> Array2<f64> {
    let vp = &vlm.params.vision;
    let r = patches.nrows();
    let mut x = patches.dot(&vp.patch_w);
    x += &vp.patch_b.row(0);
    let mut tokens = Array2::zeros((r + 1, x.ncols()));
    tokens.row_mut(0).assign(&vp.cls.row(0));
    tokens.slice_mut(ndarray::s![1.., ..]).assign(&x);
    tokens += &vp.pos.slice(ndarray::s![..r + 1, ..]);
    for (i, blk) in vp.blocks.iter().enumerate() {
        tokens = eval_block(vlm, &tokens, blk, &format!("vision.block{i}"), vlm.vcfg.heads, false, None);
    }
    let enc = eval_ln(&tokens, &vp.ln_f_g, &vp.ln_f_b);
    let mut h = eval_linear(vlm, &enc, &vp.proj1, &vp.proj1_b, "vision.proj1");
    eval_gelu(&mut h);
    let h = eval_linear(vlm, &h, &vp.proj2, &vp.proj2_b, "vision.proj2");
    eval_ln(&h, &vp.proj_ln_g, &vp.proj_ln_b)
}

/// Input embedding rows for a mixed prompt (no positional rows yet).
fn embed_prompt(vlm: &Vlm, elems: &[SeqElem]) -> Result<Array2<f64>> {
    let total: usize = elems.iter().map(SeqElem::len).sum();
    if total > vlm.lcfg.context_limit {
        return Err(Error::ContextOverflow {
            len: total,
            limit: vlm.lcfg.context_limit,
        });
    }
    let d = vlm.lcfg.d_lm;
    let mut out = Array2::zeros((total, d));
    let mut row = 0usize;
    for e in elems {
        match e {
            SeqElem::Token(t) => {
                out.row_mut(row).assign(&vlm.params.lm.tok_emb.row(*t as usize));
                row += 1;
            }
            SeqElem::Const(rows) => {
                out.slice_mut(ndarray::s![row..row + rows.nrows(), ..]).assign(rows);
                row += rows.nrows();
            }
            SeqElem::Cls(patches) => {
                let vis = eval_visual_rows(vlm, patches);
                out.row_mut(row).assign(&vis.row(0));
                row += 1;
            }
            SeqElem::Full(patches) => {
                let vis = eval_visual_rows(vlm, patches);
                out.slice_mut(ndarray::s![row..row + vis.nrows(), ..]).assign(&vis);
                row += vis.nrows();
            }
        }
    }
    Ok(out)
}

/// Incremental greedy decoder over the eval-mode forward with per-layer
/// key/value caches.
pub struct Decoder<'a> {
    vlm: &'a Vlm,
    caches: Vec<(Array2<f64>, Array2<f64>)>,
    t: usize,
    last_logits: Array2<f64>,
}

impl<'a> Decoder<'a> {
    pub fn prefill(vlm: &'a Vlm, emb: Array2<f64>) -> Decoder<'a> {
        let n = emb.nrows();
        let d = vlm.lcfg.d_lm;
        let mut x = emb;
        x += &vlm.params.lm.pos.slice(ndarray::s![..n, ..]);
        let mut caches: Vec<(Array2<f64>, Array2<f64>)> =
            (0..vlm.lcfg.layers).map(|_| (Array2::zeros((0, d)), Array2::zeros((0, d)))).collect();
        for (i, blk) in vlm.params.lm.blocks.iter().enumerate() {
            x = eval_block(vlm, &x, blk, &format!("lm.block{i}"), vlm.lcfg.heads, true, Some(&mut caches[i]));
        }
        let last = x.slice(ndarray::s![n - 1..n, ..]).to_owned();
        let last_logits = Self::head(vlm, &last);
        Decoder { vlm, caches, t: n, last_logits }
    }

    fn head(vlm: &Vlm, x_last: &Array2<f64>) -> Array2<f64> {
        let l = &vlm.params.lm;
        let normed = eval_ln(x_last, &l.ln_f_g, &l.ln_f_b);
        let mut logits = match &l.head {
            Some(h) => normed.dot(h),
            None => normed.dot(&l.tok_emb.t()),
        };
        logits += &l.head_b.row(0);
        logits
    }

    /// Argmax of the current next-token logits, lowest id on ties.
    pub fn argmax(&self) -> u16 {
        let row = self.last_logits.row(0);
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best as u16
    }

    /// Feed one token and advance the caches.
    pub fn step(&mut self, tok: u16) {
        let l = &self.vlm.params.lm;
        let mut x = l.tok_emb.row(tok as usize).insert_axis(ndarray::Axis(0)).to_owned();
        x += &l.pos.row(self.t);
        for (i, blk) in l.blocks.iter().enumerate() {
            x = eval_block(self.vlm, &x, blk, &format!("lm.block{i}"), self.vlm.lcfg.heads, true, Some(&mut self.caches[i]));
        }
        self.t += 1;
        self.last_logits = Self::head(self.vlm, &x);
    }
}
