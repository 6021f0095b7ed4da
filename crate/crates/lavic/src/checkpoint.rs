//! Checkpoint archive: a JSON manifest next to a flat binary tensor file.
//! Tensors are stored as little-endian f32 with a shape header; the manifest
//! records a per-tensor digest so corruption is detected on load, and the
//! serialization is canonical so save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterConfig, AdapterState, LoraFactors, Side};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Vlm};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage0,
    Distilled,
    Tuned,
}

impl Stage {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Stage::Stage0 => "stage0",
            Stage::Distilled => "distilled",
            Stage::Tuned => "tuned",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub side: Side,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub base_digest: String,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub seed: u64,
    pub config: RunConfig,
    pub adapters: Vec<AdapterMeta>,
    pub selected_epoch: Option<usize>,
    /// name -> sha256 of that tensor's stored bytes (header + f32 data)
    pub digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

fn tensor_bytes(name: &str, arr: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + name.len() + arr.len() * 4);
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(arr.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(arr.ncols() as u64).to_le_bytes());
    for v in arr.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn sha_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn save_archive(archive: &Archive, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = archive.manifest.clone();
    manifest.digests.clear();
    let mut blob = Vec::new();
    for (name, arr) in &archive.tensors {
        let bytes = tensor_bytes(name, arr);
        manifest.digests.insert(name.clone(), sha_hex(&bytes));
        blob.extend_from_slice(&bytes);
    }
    crate::cli::write_atomic(&dir.join(TENSORS_FILE), &blob)?;
    let mut json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Schema(format!("manifest serialization: {e}")))?;
    json.push(b'\n');
    crate::cli::write_atomic(&dir.join(MANIFEST_FILE), &json)
}

pub fn load_archive(dir: &Path) -> Result<Archive> {
    let mpath = dir.join(MANIFEST_FILE);
    let mtext =
        std::fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&mtext)
        .map_err(|e| Error::Corrupt(format!("{}: {e}", mpath.display())))?;
    let tpath = dir.join(TENSORS_FILE);
    let blob = std::fs::read(&tpath).map_err(|e| Error::io(tpath.display().to_string(), e))?;
    let mut tensors = BTreeMap::new();
    let mut pos = 0usize;
    let corrupt = |msg: &str| Error::Corrupt(format!("{}: {msg}", tpath.display()));
    fn take<'a>(blob: &'a [u8], pos: &mut usize, n: usize) -> Option<&'a [u8]> {
        let s = blob.get(*pos..*pos + n)?;
        *pos += n;
        Some(s)
    }
    while pos < blob.len() {
        let trunc = || corrupt("truncated tensor entry");
        let entry_start = pos;
        let name_len =
            u32::from_le_bytes(take(&blob, &mut pos, 4).ok_or_else(trunc)?.try_into().unwrap())
                as usize;
        let name = String::from_utf8(take(&blob, &mut pos, name_len).ok_or_else(trunc)?.to_vec())
            .map_err(|_| corrupt("tensor name is not utf-8"))?;
        let rows =
            u64::from_le_bytes(take(&blob, &mut pos, 8).ok_or_else(trunc)?.try_into().unwrap())
                as usize;
        let cols =
            u64::from_le_bytes(take(&blob, &mut pos, 8).ok_or_else(trunc)?.try_into().unwrap())
                as usize;
        let need = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(trunc)?;
        let data = take(&blob, &mut pos, need).ok_or_else(trunc)?;
        let expected = manifest
            .digests
            .get(&name)
            .ok_or_else(|| corrupt(&format!("tensor {name} missing from manifest")))?;
        if sha_hex(&blob[entry_start..pos]) != *expected {
            return Err(corrupt(&format!("digest mismatch for tensor {name}")));
        }
        let mut arr = Array2::zeros((rows, cols));
        for (i, chunk) in data.chunks_exact(4).enumerate() {
            arr[[i / cols.max(1), i % cols.max(1)]] =
                f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        tensors.insert(name, arr);
    }
    for name in manifest.digests.keys() {
        if !tensors.contains_key(name) {
            return Err(corrupt(&format!("manifest lists {name} but blob lacks it")));
        }
    }
    Ok(Archive { manifest, tensors })
}

fn adapter_meta(st: &AdapterState) -> AdapterMeta {
    AdapterMeta {
        side: st.cfg.side,
        rank: st.cfg.rank,
        alpha: st.cfg.alpha,
        dropout: st.cfg.dropout,
        base_digest: st.base_digest.clone(),
        targets: st.entries.keys().cloned().collect(),
    }
}

pub fn archive_from_vlm(
    vlm: &Vlm,
    stage: Stage,
    seed: u64,
    config: &RunConfig,
    selected_epoch: Option<usize>,
) -> Archive {
    let mut tensors = BTreeMap::new();
    vlm.params.visit(&mut |name, arr| {
        tensors.insert(name, arr.clone());
    });
    let mut adapters = Vec::new();
    for st in [vlm.vision_lora.as_ref(), vlm.lm_lora.as_ref()]
        .into_iter()
        .flatten()
    {
        adapters.push(adapter_meta(st));
        for (name, arr) in st.trainable_parameters() {
            tensors.insert(name, arr.clone());
        }
    }
    Archive {
        manifest: Manifest {
            stage,
            seed,
            config: config.clone(),
            adapters,
            selected_epoch,
            digests: BTreeMap::new(),
        },
        tensors,
    }
}

pub fn vlm_from_archive(archive: &Archive) -> Result<Vlm> {
    let cfg = &archive.manifest.config;
    let mut params = ModelParams::init(&cfg.vision, &cfg.lm, 0);
    let mut missing = Vec::new();
    params.visit_mut(&mut |name, arr| match archive.tensors.get(&name) {
        Some(t) if t.dim() == arr.dim() => *arr = t.clone(),
        Some(t) => missing.push(format!("{name}: shape {:?} != {:?}", t.dim(), arr.dim())),
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(Error::Corrupt(format!(
            "archive does not match config: {}",
            missing.join("; ")
        )));
    }
    let mut vlm = Vlm {
        vcfg: cfg.vision.clone(),
        lcfg: cfg.lm.clone(),
        params,
        vision_lora: None,
        lm_lora: None,
    };
    for meta in &archive.manifest.adapters {
        let mut entries = BTreeMap::new();
        for target in &meta.targets {
            let down = archive
                .tensors
                .get(&format!("lora.{target}.down"))
                .ok_or_else(|| Error::Corrupt(format!("missing adapter factor for {target}")))?
                .clone();
            let up = archive
                .tensors
                .get(&format!("lora.{target}.up"))
                .ok_or_else(|| Error::Corrupt(format!("missing adapter factor for {target}")))?
                .clone();
            entries.insert(target.clone(), LoraFactors { down, up });
        }
        let st = AdapterState {
            cfg: AdapterConfig {
                rank: meta.rank,
                alpha: meta.alpha,
                dropout: meta.dropout,
                side: meta.side,
            },
            entries,
            base_digest: meta.base_digest.clone(),
        };
        match meta.side {
            Side::Vision => vlm.vision_lora = Some(st),
            Side::Lm => vlm.lm_lora = Some(st),
        }
    }
    Ok(vlm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::attach;
    use crate::model::side_digest;

    fn sample_vlm() -> Vlm {
        let cfg = RunConfig::default();
        let mut small = cfg.clone();
        small.vision.d_vis = 8;
        small.vision.heads = 2;
        small.vision.layers = 1;
        small.lm.d_lm = 8;
        small.lm.heads = 2;
        small.lm.layers = 1;
        small.lm.context_limit = 64;
        let mut vlm = Vlm::init(&small.vision, &small.lm, 9);
        let digest = side_digest(&vlm.params, Side::Vision, None);
        let st = attach(
            AdapterConfig {
                rank: 2,
                alpha: 4.0,
                dropout: 0.0,
                side: Side::Vision,
            },
            &vlm.params.adapter_candidates(),
            digest,
            1,
        )
        .unwrap();
        vlm.vision_lora = Some(st);
        vlm
    }

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.vision.d_vis = 8;
        cfg.vision.heads = 2;
        cfg.vision.layers = 1;
        cfg.lm.d_lm = 8;
        cfg.lm.heads = 2;
        cfg.lm.layers = 1;
        cfg.lm.context_limit = 64;
        cfg
    }

    #[test]
    fn save_load_save_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let vlm = sample_vlm();
        let cfg = small_config();
        let a = archive_from_vlm(&vlm, Stage::Stage0, 9, &cfg, None);
        let p1 = dir.path().join("a");
        save_archive(&a, &p1).unwrap();
        let loaded = load_archive(&p1).unwrap();
        let p2 = dir.path().join("b");
        save_archive(&loaded, &p2).unwrap();
        for f in [MANIFEST_FILE, TENSORS_FILE] {
            assert_eq!(
                std::fs::read(p1.join(f)).unwrap(),
                std::fs::read(p2.join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn tampering_detected() {
        let dir = tempfile::tempdir().unwrap();
        let vlm = sample_vlm();
        let a = archive_from_vlm(&vlm, Stage::Distilled, 1, &small_config(), Some(2));
        save_archive(&a, dir.path()).unwrap();
        let tpath = dir.path().join(TENSORS_FILE);
        let mut bytes = std::fs::read(&tpath).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        std::fs::write(&tpath, bytes).unwrap();
        match load_archive(dir.path()) {
            Err(Error::Corrupt(_)) => {}
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn vlm_round_trip_preserves_everything_to_f32() {
        let vlm = sample_vlm();
        let cfg = small_config();
        let a = archive_from_vlm(&vlm, Stage::Stage0, 9, &cfg, None);
        let back = vlm_from_archive(&a).unwrap();
        let mut n = 0;
        vlm.params.visit(&mut |name, arr| {
            let mut got = None;
            back.params.visit(&mut |n2, a2| {
                if n2 == name {
                    got = Some(a2.clone());
                }
            });
            let got = got.unwrap();
            for (x, y) in arr.iter().zip(got.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
            n += 1;
        });
        assert!(n > 20);
        assert!(back.vision_lora.is_some());
        assert_eq!(
            back.vision_lora.as_ref().unwrap().entries.len(),
            vlm.vision_lora.as_ref().unwrap().entries.len()
        );
    }

    #[test]
    fn stage_tags() {
        assert_eq!(
            serde_json::to_string(&Stage::Distilled).unwrap(),
            "\"distilled\""
        );
    }
}
