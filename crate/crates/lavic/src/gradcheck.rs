//! Central finite-difference verification of the analytic gradients.
//! Every trainable tensor under the given scope is probed at a handful of
//! sampled elements; training must refuse to trust a tape that fails this.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{batch_loss_and_grads, Scope, TrainSeq, Vlm};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked_tensors: usize,
    pub checked_elements: usize,
    pub max_rel_err: f64,
}

fn perturb(vlm: &mut Vlm, name: &str, r: usize, c: usize, delta: f64) {
    let mut found = false;
    vlm.params.visit_mut(&mut |n, arr| {
        if n == name {
            arr[[r, c]] += delta;
            found = true;
        }
    });
    for st in [vlm.vision_lora.as_mut(), vlm.lm_lora.as_mut()]
        .into_iter()
        .flatten()
    {
        for (n, arr) in st.trainable_parameters_mut() {
            if n == name {
                arr[[r, c]] += delta;
                found = true;
            }
        }
    }
    assert!(found, "no tensor named {name}");
}

fn loss_only(vlm: &Vlm, batch: &[TrainSeq], scope: Scope) -> Result<f64> {
    // scope only gates which grads are collected; the loss value is scope-free
    Ok(batch_loss_and_grads(vlm, batch, scope, None)?.0)
}

/// Compare analytic gradients against central differences. `samples` elements
/// are probed per tensor (all of them for smaller tensors).
pub fn check_gradients(
    vlm: &Vlm,
    batch: &[TrainSeq],
    scope: Scope,
    samples: usize,
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = batch_loss_and_grads(vlm, batch, scope, None)?;
    if grads.is_empty() {
        return Err(Error::Schema("no trainable tensors under this scope".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    let mut max_rel = 0.0f64;
    let mut checked_elements = 0;
    for name in &names {
        let g = &grads[name.as_str()];
        let (rows, cols) = g.dim();
        let total = rows * cols;
        let picks: Vec<usize> = if total <= samples {
            (0..total).collect()
        } else {
            (0..samples).map(|_| rng.gen_range(0..total)).collect()
        };
        for idx in picks {
            let (r, c) = (idx / cols, idx % cols);
            let mut plus = vlm.clone();
            perturb(&mut plus, name, r, c, step);
            let mut minus = vlm.clone();
            perturb(&mut minus, name, r, c, -step);
            let numeric = (loss_only(&plus, batch, scope)?
                - loss_only(&minus, batch, scope)?)
                / (2.0 * step);
            let analytic = g[[r, c]];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / denom;
            if rel > tol {
                return Err(Error::Numeric(format!(
                    "gradient mismatch in {name}[{r},{c}]: analytic {analytic}, \
                     numeric {numeric}, rel err {rel:.3e} > {tol:.1e}"
                )));
            }
            max_rel = max_rel.max(rel);
            checked_elements += 1;
        }
    }
    Ok(GradCheckReport {
        checked_tensors: names.len(),
        checked_elements,
        max_rel_err: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{attach, AdapterConfig, Side};
    use crate::config::{LmConfig, VisionConfig};
    use crate::model::{side_digest, SeqElem};
    use crate::vocab::{BOS, EOS};
    use ndarray::Array2;

    fn micro_vlm() -> Vlm {
        // R = 1 per sub-image, width 8 throughout
        let vcfg = VisionConfig {
            vision_side: 4,
            patch_side: 4,
            d_vis: 8,
            layers: 1,
            heads: 2,
        };
        let lcfg = LmConfig {
            d_lm: 8,
            layers: 1,
            heads: 2,
            context_limit: 64,
            tied_head: false,
        };
        Vlm::init(&vcfg, &lcfg, 23)
    }

    fn mixed_batch(patches: &Array2<f64>) -> Vec<TrainSeq<'_>> {
        vec![TrainSeq {
            elems: vec![
                SeqElem::Token(BOS),
                SeqElem::Cls(patches),
                SeqElem::Token(114),
                SeqElem::Token(101),
                SeqElem::Token(EOS),
            ],
            target: 2..5,
        }]
    }

    #[test]
    fn full_stack_gradients_match_finite_differences() {
        let vlm = micro_vlm();
        let patches = crate::model::randn(
            &mut ChaCha8Rng::seed_from_u64(2),
            1,
            48,
            0.5,
        );
        let batch = mixed_batch(&patches);
        let report =
            check_gradients(&vlm, &batch, Scope::All, 4, 1e-4, 1e-3, 0).unwrap();
        assert!(report.checked_tensors > 30);
        assert!(report.max_rel_err < 1e-3);
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut vlm = micro_vlm();
        // give the up-factors nonzero values so their partners get real gradients
        let cands = vlm.params.adapter_candidates();
        let vd = side_digest(&vlm.params, Side::Vision, None);
        let mut vst = attach(
            AdapterConfig {
                rank: 2,
                alpha: 4.0,
                dropout: 0.0,
                side: Side::Vision,
            },
            &cands,
            vd,
            3,
        )
        .unwrap();
        for f in vst.entries.values_mut() {
            f.up = crate::model::randn(&mut ChaCha8Rng::seed_from_u64(4), 2, f.up.ncols(), 0.05);
        }
        vlm.vision_lora = Some(vst);
        let patches = crate::model::randn(&mut ChaCha8Rng::seed_from_u64(5), 1, 48, 0.5);
        let batch = mixed_batch(&patches);
        let report =
            check_gradients(&vlm, &batch, Scope::VisionAdapters, 3, 1e-4, 1e-3, 1).unwrap();
        // wq, wv, proj1, proj2 adapted -> 8 factor tensors
        assert_eq!(report.checked_tensors, 8);
    }
}
