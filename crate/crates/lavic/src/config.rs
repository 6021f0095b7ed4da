//! Flat run configuration. One TOML file drives every stage; unknown keys
//! are rejected so a typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ablation variants of the stage-2 recommendation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Compact CLS tokens from the distilled vision stack.
    Full,
    /// Text-only prompt, no visual slots.
    NoImages,
    /// Compact CLS tokens from the undistilled (stage-0) vision stack.
    NoDistill,
    /// All 5x(R+1) projected tokens per candidate.
    EntireTokens,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoImages,
        Variant::NoDistill,
        Variant::EntireTokens,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoImages => "no_images",
            Variant::NoDistill => "no_distill",
            Variant::EntireTokens => "entire_tokens",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_items: usize,
    /// Ambiguity group size m; titles are identical within a group.
    pub group_size: usize,
    pub n_convs: usize,
    pub image_side: usize,
    pub min_pixel_diff: usize,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_items: 200,
            group_size: 4,
            n_convs: 1000,
            image_side: 32,
            min_pixel_diff: 64,
            colors: ["red", "green", "blue", "yellow", "purple", "orange", "teal", "pink"]
                .map(String::from)
                .to_vec(),
            shapes: ["circle", "square", "triangle", "diamond", "cross"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub vision_side: usize,
    pub patch_side: usize,
    pub d_vis: usize,
    pub layers: usize,
    pub heads: usize,
}

impl VisionConfig {
    /// Patches per sub-image.
    pub fn r(&self) -> usize {
        let per_side = self.vision_side / self.patch_side;
        per_side * per_side
    }
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            vision_side: 16,
            patch_side: 8,
            d_vis: 64,
            layers: 2,
            heads: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_limit: usize,
    pub tied_head: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_lm: 64,
            layers: 4,
            heads: 4,
            context_limit: 1024,
            tied_head: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSettings {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        AdapterSettings {
            rank: 8,
            alpha: 32.0,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Single-candidate slate-echo examples per epoch; teaches copying a
    /// listed ID into the answer before multi-candidate selection is asked.
    pub copy_examples: usize,
    /// Epochs of captions + echo only, before the selection tasks join.
    /// Selection gradients are uninformative until the copy circuit exists,
    /// and selection prompts are the most expensive steps in the mix.
    pub warmup_epochs: usize,
    /// Step multiplier for vision-tower base tensors, whose gradients are an
    /// order of magnitude smaller than the LM side's.
    pub vision_lr_mult: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 40,
            copy_examples: 200,
            warmup_epochs: 14,
            vision_lr_mult: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_desc_tokens: usize,
    pub heldout_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 4,
            epochs: 5,
            max_desc_tokens: 128,
            heldout_size: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Cap on training examples per epoch (runtime budget); 0 means all.
    pub max_train_examples: usize,
    pub max_new_tokens: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 1,
            epochs: 1,
            max_train_examples: 256,
            max_new_tokens: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub retriever: String,
    pub k1: f64,
    pub b: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 10,
            retriever: "bm25".into(),
            k1: 1.5,
            b: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub workdir: PathBuf,
    pub seed: u64,
    pub eval_seeds: Vec<u64>,
    pub data: DataConfig,
    pub vision: VisionConfig,
    pub lm: LmConfig,
    pub adapter: AdapterSettings,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub tune: TuneConfig,
    pub retrieval: RetrievalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workdir: PathBuf::from("work"),
            seed: 0,
            eval_seeds: vec![0, 1, 2],
            data: DataConfig::default(),
            vision: VisionConfig::default(),
            lm: LmConfig::default(),
            adapter: AdapterSettings::default(),
            pretrain: PretrainConfig::default(),
            distill: DistillConfig::default(),
            tune: TuneConfig::default(),
            retrieval: RetrievalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.data.group_size < 2 {
            return fail("data.group_size must be >= 2".into());
        }
        if self.data.n_items % self.data.group_size != 0 {
            return fail(format!(
                "data.group_size {} does not divide data.n_items {}",
                self.data.group_size, self.data.n_items
            ));
        }
        if self.data.image_side % 2 != 0 {
            return fail("data.image_side must be even".into());
        }
        if self.vision.vision_side % self.vision.patch_side != 0 {
            return fail("vision.patch_side must divide vision.vision_side".into());
        }
        if self.vision.d_vis % self.vision.heads != 0 || self.lm.d_lm % self.lm.heads != 0 {
            return fail("model width must be divisible by head count".into());
        }
        if self.adapter.rank < 1 {
            return fail("adapter.rank must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.adapter.dropout) {
            return fail("adapter.dropout must be in [0, 1)".into());
        }
        if self.distill.epochs == 0 || self.distill.epochs > 5 {
            return fail("distill.epochs must be in 1..=5".into());
        }
        for (name, v) in [
            ("pretrain.learning_rate", self.pretrain.learning_rate),
            ("distill.learning_rate", self.distill.learning_rate),
            ("tune.learning_rate", self.tune.learning_rate),
        ] {
            if v <= 0.0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.eval_seeds.is_empty() {
            return fail("eval_seeds must not be empty".into());
        }
        if self.data.colors.len() < self.data.group_size {
            return fail("need at least group_size distinct colors".into());
        }
        Ok(())
    }
}

/// Stable named sub-seed so every stage draws from its own stream.
pub fn derive_seed(global: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<RunConfig>("bogus_key = 3").unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn group_size_must_divide() {
        let mut cfg = RunConfig::default();
        cfg.data.n_items = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn sub_seeds_differ_by_tag() {
        assert_ne!(derive_seed(1, "data"), derive_seed(1, "init"));
        assert_eq!(derive_seed(1, "data"), derive_seed(1, "data"));
    }
}
