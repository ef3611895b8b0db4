//! On-disk checkpoints.
//!
//! A checkpoint is a directory holding
//!
//! * `manifest.txt`: `key = value` lines (format version, model kind and
//!   shape, class prior, seed, epoch, one `param.<name>` line per tensor);
//! * `params.bin`: every parameter in flat-list order as little-endian `f32`;
//! * `state.bin` (training checkpoints only): exact `f64` parameters, Adam
//!   moments, RNG position and early-stopping counters, used for resuming.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::models::{Likelihood, ModelConfig, ModelKind, ModelParams, PriorY};

pub const CHECKPOINT_VERSION: u32 = 1;
const STATE_MAGIC: &[u8; 8] = b"GMDGMST1";

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";
pub const STATE_FILE: &str = "state.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub prior: Vec<f64>,
    pub seed: u64,
    pub epoch: usize,
    pub params: Vec<(String, Vec<usize>)>,
}

impl Manifest {
    pub fn for_model(model: &ModelParams, seed: u64, epoch: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            prior: model.prior.probs(),
            seed,
            epoch,
            params: model.layer_shapes(),
        }
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x");
        let mut lines = vec![
            format!("version = {}", self.version),
            format!("kind = {}", self.config.kind),
            format!("input_dim = {}", self.config.input_dim),
            format!("classes = {}", self.config.classes),
            format!("z_dim = {}", self.config.z_dim),
            format!(
                "hidden = {}",
                self.config
                    .hidden
                    .iter()
                    .map(|h| h.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            format!("likelihood = {}", self.config.likelihood),
            format!(
                "prior = {}",
                self.prior.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",")
            ),
            format!("seed = {}", self.seed),
            format!("epoch = {}", self.epoch),
            format!(
                "param_count = {}",
                self.params
                    .iter()
                    .map(|(_, s)| s.iter().product::<usize>())
                    .sum::<usize>()
            ),
        ];
        lines.extend(
            self.params
                .iter()
                .map(|(name, shape)| format!("param.{name} = {}", join(shape))),
        );
        lines.join("\n") + "\n"
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        let mut params = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let bad = |detail: String| Error::Parse {
                path: path.to_path_buf(),
                offset,
                detail,
            };
            if !line.trim().is_empty() {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
                let (k, v) = (k.trim(), v.trim());
                if let Some(name) = k.strip_prefix("param.") {
                    let shape = v
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| bad(format!("shape {v:?}: {e}")))?;
                    params.push((name.to_string(), shape));
                } else {
                    kv.insert(k.to_string(), v.to_string());
                }
            }
            offset += line.len() as u64 + 1;
        }
        let get = |k: &str| {
            kv.get(k).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                offset: 0,
                detail: format!("manifest is missing {k:?}"),
            })
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: 0,
                detail: format!("{k}: {e}"),
            })
        };
        let version = num("version")? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint {} has version {version}; this build reads version {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        let list = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    offset: 0,
                    detail: format!("{k}: {e}"),
                })
        };
        Ok(Self {
            version,
            config: ModelConfig {
                kind: get("kind")?.parse::<ModelKind>()?,
                input_dim: num("input_dim")? as usize,
                classes: num("classes")? as usize,
                z_dim: num("z_dim")? as usize,
                hidden: list("hidden")?.into_iter().map(|h| h as usize).collect(),
                likelihood: get("likelihood")?.parse::<Likelihood>()?,
            },
            prior: list("prior")?,
            seed: num("seed")?,
            epoch: num("epoch")? as usize,
            params,
        })
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub adam_t: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub best_val_elbo: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl TrainState {
    pub fn capture_rng(rng: &ChaCha8Rng) -> ([u8; 32], u64, u128) {
        (rng.get_seed(), rng.get_stream(), rng.get_word_pos())
    }

    pub fn restore_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(128 + 8 * 3 * self.params.len());
        b.extend_from_slice(STATE_MAGIC);
        for v in [
            self.epoch as u64,
            self.adam_t,
            self.rng_stream,
            self.best_epoch as u64,
            self.epochs_since_best as u64,
        ] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&self.rng_seed);
        b.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        b.extend_from_slice(&self.best_val_elbo.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in self.params.iter().chain(&self.adam_m).chain(&self.adam_v) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                offset: pos as u64,
                detail: "truncated training state".into(),
            })?;
            pos += n;
            Ok(s)
        };
        if take(8)? != STATE_MAGIC {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: 0,
                detail: "bad training-state magic".into(),
            });
        }
        let mut u64s = [0u64; 5];
        for v in &mut u64s {
            *v = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        }
        let rng_seed: [u8; 32] = take(32)?.try_into().expect("32 bytes");
        let rng_word_pos = u128::from_le_bytes(take(16)?.try_into().expect("16 bytes"));
        let best_val_elbo = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut read_vec = || -> Result<Vec<f64>> {
            let raw = take(8 * n)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let params = read_vec()?;
        let adam_m = read_vec()?;
        let adam_v = read_vec()?;
        Ok(Self {
            epoch: u64s[0] as usize,
            adam_t: u64s[1],
            rng_stream: u64s[2],
            best_epoch: u64s[3] as usize,
            epochs_since_best: u64s[4] as usize,
            rng_seed,
            rng_word_pos,
            best_val_elbo,
            params,
            adam_m,
            adam_v,
        })
    }
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    dir.with_file_name(name)
}

/// Writes a checkpoint directory, replacing any previous one at `dir`.
/// Files go to a staging directory that is renamed into place.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &ModelParams,
    seed: u64,
    epoch: usize,
    state: Option<&TrainState>,
) -> Result<()> {
    let dir = dir.as_ref();
    let staging = sibling(dir, ".partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let blob: Vec<u8> = model
        .store
        .flatten()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    write_atomic(staging.join(PARAMS_FILE), &blob)?;
    if let Some(s) = state {
        write_atomic(staging.join(STATE_FILE), &s.to_bytes())?;
    }
    write_atomic(
        staging.join(MANIFEST_FILE),
        Manifest::for_model(model, seed, epoch).to_text().as_bytes(),
    )?;
    let old = sibling(dir, ".old");
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text, &path)
}

/// Loads the model stored in `dir` from the `f32` parameter blob.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelParams, Manifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let prior = PriorY::from_probs(&manifest.prior)?;
    // Initial values are overwritten below; the generator only fixes shapes.
    let mut model = ModelParams::new(manifest.config.clone(), prior, &mut ChaCha8Rng::seed_from_u64(0))?;
    if model.layer_shapes() != manifest.params {
        return Err(Error::Config(format!(
            "checkpoint {} lists parameter shapes that do not match a {} model with this configuration",
            dir.display(),
            manifest.config.kind
        )));
    }
    let path = dir.join(PARAMS_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if blob.len() != 4 * model.store.numel() {
        return Err(Error::Parse {
            path,
            offset: blob.len() as u64,
            detail: format!("expected {} bytes of f32 parameters", 4 * model.store.numel()),
        });
    }
    let flat: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    model.store.assign_flat(&flat)?;
    Ok((model, manifest))
}

pub fn load_state(dir: impl AsRef<Path>) -> Result<TrainState> {
    let path = dir.as_ref().join(STATE_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    TrainState::from_bytes(&bytes, &path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(kind: ModelKind) -> ModelParams {
        let config = ModelConfig {
            kind,
            input_dim: 6,
            classes: 3,
            z_dim: 2,
            hidden: vec![5],
            likelihood: Likelihood::Bernoulli,
        };
        ModelParams::new(
            config,
            PriorY::from_probs(&[0.5, 0.25, 0.25]).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(ModelKind::GmDgm);
        save_checkpoint(dir.path().join("ck"), &m, 42, 7, None).unwrap();
        let (back, manifest) = load_checkpoint(dir.path().join("ck")).unwrap();
        assert_eq!(manifest.seed, 42);
        assert_eq!(manifest.epoch, 7);
        assert_eq!(manifest.config, m.config);
        for (a, b) in back.store.flatten().iter().zip(m.store.flatten()) {
            assert_eq!(*a, b as f32 as f64);
        }
        let text = fs::read_to_string(dir.path().join("ck").join(MANIFEST_FILE)).unwrap();
        assert!(text.starts_with("version = 1\nkind = gmdgm\n"));
        assert!(text.contains("param.prior_z.weight = 3x4"));
        assert_eq!(
            fs::metadata(dir.path().join("ck").join(PARAMS_FILE)).unwrap().len() as usize,
            4 * m.store.numel()
        );
    }

    #[test]
    fn overwrite_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("ck");
        save_checkpoint(&ck, &model(ModelKind::M2), 1, 1, None).unwrap();
        save_checkpoint(&ck, &model(ModelKind::M2), 1, 2, None).unwrap();
        assert_eq!(read_manifest(&ck).unwrap().epoch, 2);
        assert!(!sibling(&ck, ".partial").exists() && !sibling(&ck, ".old").exists());
        let p = ck.join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("version = 1", "version = 9");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_checkpoint(&ck), Err(Error::Config(_))));
    }

    #[test]
    fn state_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rand::Rng::random(&mut rng);
        let (seed, stream, pos) = TrainState::capture_rng(&rng);
        let s = TrainState {
            epoch: 3,
            adam_t: 77,
            rng_seed: seed,
            rng_stream: stream,
            rng_word_pos: pos,
            best_val_elbo: -123.456,
            best_epoch: 2,
            epochs_since_best: 1,
            params: vec![0.1, -0.2, 1e-300],
            adam_m: vec![1.0, 2.0, 3.0],
            adam_v: vec![4.0, 5.0, 6.0],
        };
        let m = model(ModelKind::M2);
        save_checkpoint(dir.path().join("ck"), &m, 5, 3, Some(&s)).unwrap();
        let back = load_state(dir.path().join("ck")).unwrap();
        assert_eq!(back, s);
        let mut r2 = back.restore_rng();
        assert_eq!(rand::Rng::random::<u64>(&mut r2), rand::Rng::random::<u64>(&mut rng));
    }
}
