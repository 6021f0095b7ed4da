//! Low-rank adapters over selected weight matrices, with freeze/unfreeze
//! bookkeeping. Stage 1 trains the vision-side set, stage 2 the LM-side set;
//! base tensors are never mutated and effective weights are computed on the
//! fly in the forward pass.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::AdapterSettings;
use crate::error::{Error, Result};

/// Which side of the model a config targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Vision,
    Lm,
}

#[derive(Debug, Clone)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub side: Side,
}

impl AdapterConfig {
    pub fn from_settings(s: &AdapterSettings, side: Side) -> Self {
        AdapterConfig {
            rank: s.rank,
            alpha: s.alpha,
            dropout: s.dropout,
            side,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Does a base matrix with this name receive an adapter?
    /// Vision side: attention q/v projections plus both projector layers.
    /// LM side: attention q/v projections only (output head excluded).
    pub fn targets(&self, name: &str) -> bool {
        match self.side {
            Side::Vision => {
                name.starts_with("vision.")
                    && (name.ends_with(".wq")
                        || name.ends_with(".wv")
                        || name == "vision.proj1"
                        || name == "vision.proj2")
            }
            Side::Lm => {
                name.starts_with("lm.") && (name.ends_with(".wq") || name.ends_with(".wv"))
            }
        }
    }
}

/// One adapted matrix: `down` is the random input-side factor, `up` is the
/// zero-initialized output-side factor, so the initial delta is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub down: Array2<f64>, // (d_in, r)
    pub up: Array2<f64>,   // (r, d_out)
}

#[derive(Debug, Clone)]
pub struct AdapterState {
    pub cfg: AdapterConfig,
    pub entries: BTreeMap<String, LoraFactors>,
    /// Digest of the base side at attach time, for later freeze checks.
    pub base_digest: String,
}

impl AdapterState {
    pub fn scaling(&self) -> f64 {
        self.cfg.scaling()
    }

    pub fn factors(&self, target: &str) -> Option<&LoraFactors> {
        self.entries.get(target)
    }

    /// Exactly the adapter factors; base weights are never included.
    pub fn trainable_parameters(&self) -> impl Iterator<Item = (String, &Array2<f64>)> {
        self.entries.iter().flat_map(|(name, f)| {
            [
                (format!("lora.{name}.down"), &f.down),
                (format!("lora.{name}.up"), &f.up),
            ]
        })
    }

    pub fn trainable_parameters_mut(
        &mut self,
    ) -> impl Iterator<Item = (String, &mut Array2<f64>)> {
        self.entries.iter_mut().flat_map(|(name, f)| {
            [
                (format!("lora.{name}.down"), &mut f.down),
                (format!("lora.{name}.up"), &mut f.up),
            ]
        })
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .values()
            .map(|f| f.down.len() + f.up.len())
            .sum()
    }
}

/// Attach fresh adapters to every matching base matrix.
/// `matrices` supplies `(name, d_in, d_out)` for each base weight;
/// `base_digest` is the digest of the side being adapted.
pub fn attach(
    cfg: AdapterConfig,
    matrices: &[(String, usize, usize)],
    base_digest: String,
    seed: u64,
) -> Result<AdapterState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = BTreeMap::new();
    for (name, d_in, d_out) in matrices {
        if !cfg.targets(name) {
            continue;
        }
        let down = crate::model::randn(&mut rng, *d_in, cfg.rank, 0.02);
        let up = Array2::zeros((cfg.rank, *d_out));
        entries.insert(name.clone(), LoraFactors { down, up });
    }
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "adapter target selector for {:?} matched no matrices",
            cfg.side
        )));
    }
    Ok(AdapterState {
        cfg,
        entries,
        base_digest,
    })
}

/// True iff the frozen side's digest is unchanged.
pub fn verify_frozen(digest_before: &str, digest_after: &str) -> bool {
    digest_before == digest_after
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(side: Side) -> AdapterConfig {
        AdapterConfig {
            rank: 8,
            alpha: 32.0,
            dropout: 0.1,
            side,
        }
    }

    #[test]
    fn scaling_is_alpha_over_rank() {
        assert_eq!(cfg(Side::Lm).scaling(), 4.0);
    }

    #[test]
    fn vision_targets() {
        let c = cfg(Side::Vision);
        assert!(c.targets("vision.block0.wq"));
        assert!(c.targets("vision.block1.wv"));
        assert!(c.targets("vision.proj1"));
        assert!(!c.targets("vision.block0.wk"));
        assert!(!c.targets("lm.block0.wq"));
    }

    #[test]
    fn lm_targets_exclude_head() {
        let c = cfg(Side::Lm);
        assert!(c.targets("lm.block3.wq"));
        assert!(!c.targets("lm.head"));
        assert!(!c.targets("vision.proj1"));
    }

    #[test]
    fn attach_zero_up_and_counts() {
        let mats = vec![
            ("lm.block0.wq".to_string(), 64, 64),
            ("lm.block0.wv".to_string(), 64, 64),
            ("lm.head".to_string(), 64, 260),
        ];
        let st = attach(cfg(Side::Lm), &mats, "d".into(), 0).unwrap();
        assert_eq!(st.entries.len(), 2);
        assert!(st.entries.values().all(|f| f.up.iter().all(|v| *v == 0.0)));
        // sum over targets of r * (d_in + d_out)
        assert_eq!(st.trainable_scalar_count(), 2 * 8 * (64 + 64));
    }

    #[test]
    fn attach_empty_target_set_errors() {
        let mats = vec![("lm.block0.wk".to_string(), 64, 64)];
        assert!(attach(cfg(Side::Lm), &mats, "d".into(), 0).is_err());
    }
}
