//! Binary training checkpoints.
//!
//! Layout: magic `DTGS`, format version (u32 LE), header length (u64 LE),
//! JSON header, then the arrays listed in the header as raw little-endian
//! f64 values in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::retinex::EnhancerParams;
use crate::scene::{Gaussian3D, ImageRgb};
use crate::schedule::SupervisionState;

pub const MAGIC: &[u8; 4] = b"DTGS";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Number of completed iterations.
    pub t: usize,
    pub gaussians: Vec<Gaussian3D>,
    pub enhancers: Vec<EnhancerParams>,
    pub adam: AdamState,
    pub supervision: Vec<SupervisionState>,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EnhancerMeta {
    grid_w: usize,
    grid_h: usize,
    exposure_target: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SupervisionMeta {
    width: usize,
    height: usize,
    iteration: usize,
    t_transition: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    t: usize,
    num_gaussians: usize,
    num_views: usize,
    enhancers: Vec<EnhancerMeta>,
    supervision: Vec<SupervisionMeta>,
    adam_step: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    rng_seed: u64,
    /// Decimal string, u128 does not fit a JSON number.
    rng_word_pos: String,
    config: serde_json::Value,
    config_hash: String,
    arrays: Vec<ArrayEntry>,
}

/// Hex SHA-256 of the compact JSON form of `config`.
pub fn config_hash(config: &serde_json::Value) -> String {
    let text = serde_json::to_string(config).expect("json value serializes");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    fn arrays(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        out.push((
            "gaussians".to_string(),
            self.gaussians.iter().flat_map(|g| g.to_array()).collect(),
        ));
        for (i, e) in self.enhancers.iter().enumerate() {
            let mut v = e.grid.clone();
            v.push(e.gamma_raw);
            out.push((format!("enhancer_{i}"), v));
        }
        out.push(("adam_m".to_string(), self.adam.m.clone()));
        out.push(("adam_v".to_string(), self.adam.v.clone()));
        for (i, s) in self.supervision.iter().enumerate() {
            out.push((format!("gt_{i}"), s.gt_current.data.clone()));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays = self.arrays();
        let header = Header {
            version: FORMAT_VERSION,
            t: self.t,
            num_gaussians: self.gaussians.len(),
            num_views: self.enhancers.len(),
            enhancers: self
                .enhancers
                .iter()
                .map(|e| EnhancerMeta {
                    grid_w: e.grid_w,
                    grid_h: e.grid_h,
                    exposure_target: e.exposure_target,
                })
                .collect(),
            supervision: self
                .supervision
                .iter()
                .map(|s| SupervisionMeta {
                    width: s.gt_current.width,
                    height: s.gt_current.height,
                    iteration: s.iteration,
                    t_transition: s.t_transition,
                })
                .collect(),
            adam_step: self.adam.step,
            adam_beta1: self.adam.beta1,
            adam_beta2: self.adam.beta2,
            adam_eps: self.adam.eps,
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng_word_pos.to_string(),
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            arrays: arrays
                .iter()
                .map(|(name, v)| ArrayEntry {
                    name: name.clone(),
                    len: v.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        let payload: usize = arrays.iter().map(|(_, v)| v.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &arrays {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::CheckpointVersion("missing DTGS magic".into()));
        }
        let take = |range: std::ops::Range<usize>| {
            bytes
                .get(range)
                .ok_or_else(|| Error::CheckpointCorrupt("file truncated".into()))
        };
        let version = u32::from_le_bytes(take(4..8)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion(format!(
                "found version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(take(8..16)?.try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .ok_or_else(|| Error::CheckpointCorrupt("header length overflow".into()))?;
        let header: Header =
            serde_json::from_slice(take(16..hend)?).map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;

        let mut pos = hend;
        let mut arrays = std::collections::HashMap::new();
        for entry in &header.arrays {
            let end = entry
                .len
                .checked_mul(8)
                .and_then(|n| n.checked_add(pos))
                .ok_or_else(|| Error::CheckpointCorrupt("array length overflow".into()))?;
            let raw = take(pos..end)?;
            let v: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.insert(entry.name.as_str(), v);
            pos = end;
        }
        if pos != bytes.len() {
            return Err(Error::CheckpointCorrupt(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let mut get = |name: &str, len: usize| -> Result<Vec<f64>> {
            let v = arrays
                .remove(name)
                .ok_or_else(|| Error::CheckpointCorrupt(format!("missing array {name}")))?;
            if v.len() != len {
                return Err(Error::CheckpointCorrupt(format!(
                    "array {name} has {} values, expected {len}",
                    v.len()
                )));
            }
            Ok(v)
        };

        let n = header.num_gaussians;
        let gaussians = get("gaussians", n * Gaussian3D::NUM_PARAMS)?
            .chunks_exact(Gaussian3D::NUM_PARAMS)
            .map(Gaussian3D::from_slice)
            .collect();
        if header.enhancers.len() != header.num_views {
            return Err(Error::CheckpointCorrupt("enhancer count does not match view count".into()));
        }
        let mut enhancers = Vec::with_capacity(header.num_views);
        for (i, m) in header.enhancers.iter().enumerate() {
            let mut v = get(&format!("enhancer_{i}"), m.grid_w * m.grid_h + 1)?;
            let gamma_raw = v.pop().unwrap();
            enhancers.push(EnhancerParams {
                grid_w: m.grid_w,
                grid_h: m.grid_h,
                grid: v,
                gamma_raw,
                exposure_target: m.exposure_target,
            });
        }
        let total: usize = n * Gaussian3D::NUM_PARAMS + enhancers.iter().map(|e| e.num_trainable()).sum::<usize>();
        let adam = AdamState {
            m: get("adam_m", total)?,
            v: get("adam_v", total)?,
            step: header.adam_step,
            beta1: header.adam_beta1,
            beta2: header.adam_beta2,
            eps: header.adam_eps,
        };
        let mut supervision = Vec::with_capacity(header.supervision.len());
        for (i, m) in header.supervision.iter().enumerate() {
            supervision.push(SupervisionState {
                gt_current: ImageRgb {
                    width: m.width,
                    height: m.height,
                    data: get(&format!("gt_{i}"), 3 * m.width * m.height)?,
                },
                iteration: m.iteration,
                t_transition: m.t_transition,
            });
        }
        if let Some(name) = arrays.keys().next() {
            return Err(Error::CheckpointCorrupt(format!("unexpected array {name}")));
        }
        let rng_word_pos = header
            .rng_word_pos
            .parse()
            .map_err(|_| Error::CheckpointCorrupt("rng_word_pos".into()))?;
        if config_hash(&header.config) != header.config_hash {
            log::warn!("checkpoint config hash does not match its stored config");
        }
        Ok(Self {
            t: header.t,
            gaussians,
            enhancers,
            adam,
            supervision,
            rng_seed: header.rng_seed,
            rng_word_pos,
            config: header.config,
        })
    }

    /// True when `config` hashes to the same value as the stored config.
    pub fn config_matches(&self, config: &serde_json::Value) -> bool {
        config_hash(config) == config_hash(&self.config)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. When `expected_config` is given and differs from the
/// stored one a warning is logged; loading still succeeds.
pub fn load_checkpoint(path: &Path, expected_config: Option<&serde_json::Value>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(cfg) = expected_config {
        if !ckpt.config_matches(cfg) {
            log::warn!("{}: config hash differs from the current run config", path.display());
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gaussians: Vec<Gaussian3D> = (0..5)
            .map(|_| {
                let v: Vec<f64> = (0..14).map(|_| rng.random_range(-2.0..2.0)).collect();
                Gaussian3D::from_slice(&v)
            })
            .collect();
        let mut enhancers = vec![EnhancerParams::identity(4, 3, 0.4), EnhancerParams::identity(2, 2, 0.45)];
        enhancers[0].grid.iter_mut().for_each(|v| *v = rng.random());
        enhancers[1].gamma_raw = 0.1 + f64::EPSILON;
        let total = 5 * 14 + 13 + 5;
        let mut adam = AdamState::new(total);
        adam.m.iter_mut().for_each(|v| *v = rng.random::<f64>() * 1e-7);
        adam.v.iter_mut().for_each(|v| *v = rng.random::<f64>() * 1e-13);
        adam.step = 42;
        let gt = ImageRgb::from_fn(3, 2, |_, _| [rng.random(), rng.random(), rng.random()]);
        let supervision = vec![
            SupervisionState {
                gt_current: gt.clone(),
                iteration: 7,
                t_transition: 8000,
            },
            SupervisionState::new(&gt, 8000),
        ];
        Checkpoint {
            t: 42,
            gaussians,
            enhancers,
            adam,
            supervision,
            rng_seed: 99,
            rng_word_pos: (1u128 << 70) + 5,
            config: serde_json::json!({"iters": 100, "lr": 1.6e-3}),
        }
    }

    #[test]
    fn round_trip_bit_identical() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/ckpt.dtgs");
        save_checkpoint(&path, &c).unwrap();
        let back = load_checkpoint(&path, Some(&c.config)).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.adam.m.iter().zip(&c.adam.m) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes().unwrap());
    }

    #[test]
    fn bad_magic_is_version_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CheckpointVersion(_))));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CheckpointVersion(_))));
    }

    #[test]
    fn truncation_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [6, 12, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CheckpointCorrupt(_))), "cut {cut}");
        }
    }

    #[test]
    fn config_mismatch_is_not_fatal() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.dtgs");
        save_checkpoint(&path, &c).unwrap();
        let other = serde_json::json!({"iters": 5});
        let back = load_checkpoint(&path, Some(&other)).unwrap();
        assert!(!back.config_matches(&other));
        assert!(back.config_matches(&c.config));
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DTGS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(header["num_gaussians"], 5);
        assert_eq!(header["version"], FORMAT_VERSION);
        let payload: u64 = header["arrays"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| a["len"].as_u64().unwrap() * 8)
            .sum();
        assert_eq!(bytes.len(), 16 + hlen + payload as usize);
    }
}
