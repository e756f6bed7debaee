//! Source trajectory cache: the inverted latents `x^src_0..=x^src_T` and the
//! source-conditioned noise predictions used at every forward step.
//!
//! On disk a cache is a directory holding `meta.json`, `latents.npy`
//! (`[T + 1, ...]`) and `noises.npy` (`[T, ...]`). Directories are written
//! under a temporary name and renamed into place, so readers never see a
//! partial cache.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ndarray::{Axis, IxDyn};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PicError, Result};
use crate::guidance::GuidedDenoiser;
use crate::prompt::PromptEmbedding;
use crate::schedule::{forward_step, DiffusionSchedule, LatentState};
use crate::tensor::{self, Tensor};

pub const CACHE_SCHEMA_VERSION: u32 = 1;
const META: &str = "meta.json";
const LATENTS: &str = "latents.npy";
const NOISES: &str = "noises.npy";

/// Content key of an inversion: everything the trajectory depends on.
pub fn cache_key(
    x0: &Tensor,
    prompt_fingerprint: &str,
    sched: &DiffusionSchedule,
    guidance_scale: f64,
    model: &str,
) -> String {
    let mut h = Sha256::new();
    h.update(tensor::fingerprint(x0));
    h.update(prompt_fingerprint);
    h.update(sched.fingerprint());
    h.update(guidance_scale.to_le_bytes());
    h.update(model);
    hex::encode(h.finalize())
}

#[derive(Debug)]
pub struct TrajectoryCache {
    latents: Vec<Tensor>,
    noises: Vec<Tensor>,
    prompt_fingerprint: String,
    schedule: DiffusionSchedule,
    guidance_scale: f64,
    model: String,
    terminal: OnceLock<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheMeta {
    schema_version: u32,
    fingerprint: String,
    num_steps: usize,
    latent_shape: Vec<usize>,
    prompt_fingerprint: String,
    guidance_scale: f64,
    model: String,
    schedule: DiffusionSchedule,
}

impl TrajectoryCache {
    pub fn new(
        latents: Vec<Tensor>,
        noises: Vec<Tensor>,
        prompt_fingerprint: String,
        schedule: DiffusionSchedule,
        guidance_scale: f64,
    ) -> Result<Self> {
        let steps = schedule.num_steps();
        if latents.len() != steps + 1 || noises.len() != steps {
            return Err(PicError::Validation(format!(
                "a {steps}-step cache needs {} latents and {steps} noises, got {} and {}",
                steps + 1,
                latents.len(),
                noises.len()
            )));
        }
        for t in latents.iter().chain(&noises) {
            tensor::ensure_same_shape(&latents[0], t)?;
        }
        Ok(TrajectoryCache {
            latents,
            noises,
            prompt_fingerprint,
            schedule,
            guidance_scale,
            model: String::new(),
            terminal: OnceLock::new(),
        })
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    /// `T`.
    pub fn num_steps(&self) -> usize {
        self.noises.len()
    }

    /// `x^src_t`. Panics outside `0..=T`.
    pub fn latent(&self, t: usize) -> &Tensor {
        &self.latents[t]
    }

    /// `eps(x^src_t, t, y^src)` for `t < T`. Panics outside that range.
    pub fn noise(&self, t: usize) -> &Tensor {
        &self.noises[t]
    }

    pub fn latents(&self) -> &[Tensor] {
        &self.latents
    }

    pub fn noises(&self) -> &[Tensor] {
        &self.noises
    }

    pub fn latent_shape(&self) -> &[usize] {
        self.latents[0].shape()
    }

    pub fn prompt_fingerprint(&self) -> &str {
        &self.prompt_fingerprint
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn guidance_scale(&self) -> f64 {
        self.guidance_scale
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn fingerprint(&self) -> String {
        cache_key(
            &self.latents[0],
            &self.prompt_fingerprint,
            &self.schedule,
            self.guidance_scale,
            &self.model,
        )
    }

    /// Source noise at `t = T`, which the forward loop never evaluates.
    /// Computed on first use from `x^src_T` and memoized; the flag is true when
    /// this call ran the model.
    pub fn terminal_noise(
        &self,
        y_src: &PromptEmbedding,
        model: &GuidedDenoiser<'_>,
    ) -> Result<(&Tensor, bool)> {
        if let Some(eps) = self.terminal.get() {
            return Ok((eps, false));
        }
        if y_src.fingerprint() != self.prompt_fingerprint {
            return Err(PicError::Validation(
                "source prompt differs from the one the cache was inverted with".into(),
            ));
        }
        if model.scale() != self.guidance_scale {
            return Err(PicError::Validation(format!(
                "guidance scale {} differs from the cached {}",
                model.scale(),
                self.guidance_scale
            )));
        }
        let steps = self.num_steps();
        let eps = model.predict(&self.latents[steps], self.schedule.timestep(steps)?, y_src)?;
        if !tensor::all_finite(&eps) {
            return Err(PicError::numerical(
                steps,
                "terminal",
                "non-finite noise prediction",
            ));
        }
        tensor::ensure_same_shape(&self.latents[steps], &eps)?;
        let _ = self.terminal.set(eps);
        Ok((self.terminal.get().expect("just set"), true))
    }

    /// Re-runs the forward step over the stored noises at the given steps and
    /// checks the stored latents are reproduced bitwise.
    pub fn verify_replay(&self, steps: impl IntoIterator<Item = usize>) -> Result<()> {
        for t in steps {
            if t >= self.num_steps() {
                return Err(PicError::StepIndex {
                    index: t,
                    num_steps: self.num_steps(),
                    context: "replay check",
                });
            }
            let next = forward_step(
                &LatentState::new(self.latents[t].clone(), t),
                &self.noises[t],
                &self.schedule,
            )?;
            if !tensor::bitwise_eq(&next.data, &self.latents[t + 1]) {
                return Err(PicError::Validation(format!(
                    "replay of step {t} does not reproduce the stored latent"
                )));
            }
        }
        Ok(())
    }

    pub fn verify_replay_all(&self) -> Result<()> {
        self.verify_replay(0..self.num_steps())
    }

    fn meta(&self) -> CacheMeta {
        CacheMeta {
            schema_version: CACHE_SCHEMA_VERSION,
            fingerprint: self.fingerprint(),
            num_steps: self.num_steps(),
            latent_shape: self.latent_shape().to_vec(),
            prompt_fingerprint: self.prompt_fingerprint.clone(),
            guidance_scale: self.guidance_scale,
            model: self.model.clone(),
            schedule: self.schedule.clone(),
        }
    }

    fn write_files(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| PicError::io(dir, e))?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        fs::write(dir.join(META), meta).map_err(|e| PicError::io(dir.join(META), e))?;
        write_stack(&dir.join(LATENTS), &self.latents, self.latent_shape())?;
        write_stack(&dir.join(NOISES), &self.noises, self.latent_shape())?;
        Ok(())
    }

    /// Writes the cache to `dir` atomically.
    ///
    /// Returns `false` without writing when `dir` already holds a cache with
    /// the same fingerprint. A different fingerprint is an error unless
    /// `force` is set, in which case the old directory is replaced.
    pub fn save(&self, dir: &Path, force: bool) -> Result<bool> {
        let fp = self.fingerprint();
        if dir.exists() {
            match read_meta(dir) {
                Ok(meta) if meta.fingerprint == fp => return Ok(false),
                Ok(meta) if !force => {
                    return Err(PicError::FingerprintMismatch {
                        path: dir.to_path_buf(),
                        existing: meta.fingerprint,
                        requested: fp,
                    })
                }
                Err(e) if !force => return Err(e),
                _ => {}
            }
        }
        let parent = dir
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| PicError::io(parent, e))?;
        let tmp = tempfile::Builder::new()
            .prefix(".pic-cache-")
            .tempdir_in(parent)
            .map_err(|e| PicError::io(parent, e))?;
        self.write_files(tmp.path())?;
        let staged = tmp.keep();
        if dir.exists() {
            if force {
                fs::remove_dir_all(dir).map_err(|e| PicError::io(dir, e))?;
            } else {
                // Lost a race against an identical writer.
                let _ = fs::remove_dir_all(&staged);
                return Ok(false);
            }
        }
        if let Err(e) = fs::rename(&staged, dir) {
            let _ = fs::remove_dir_all(&staged);
            if dir.exists() && read_meta(dir).is_ok_and(|m| m.fingerprint == fp) {
                return Ok(false);
            }
            return Err(PicError::io(dir, e));
        }
        Ok(true)
    }

    /// Loads and validates a cache directory, including a bitwise replay
    /// check over every step.
    pub fn load(dir: &Path) -> Result<Self> {
        let corrupt = |detail: String| PicError::CorruptCache {
            path: dir.to_path_buf(),
            detail,
        };
        let meta = read_meta(dir)?;
        if meta.schema_version != CACHE_SCHEMA_VERSION {
            return Err(corrupt(format!(
                "unsupported schema version {}",
                meta.schema_version
            )));
        }
        meta.schedule
            .validate()
            .map_err(|e| corrupt(e.to_string()))?;
        let latents = read_stack(&dir.join(LATENTS), meta.num_steps + 1, &meta.latent_shape)
            .map_err(|e| corrupt(e.to_string()))?;
        let noises = read_stack(&dir.join(NOISES), meta.num_steps, &meta.latent_shape)
            .map_err(|e| corrupt(e.to_string()))?;
        let cache = TrajectoryCache::new(
            latents,
            noises,
            meta.prompt_fingerprint,
            meta.schedule,
            meta.guidance_scale,
        )
        .map_err(|e| corrupt(e.to_string()))?
        .with_model(meta.model);
        if cache.fingerprint() != meta.fingerprint {
            return Err(corrupt("stored fingerprint does not match contents".into()));
        }
        cache
            .verify_replay_all()
            .map_err(|e| corrupt(e.to_string()))?;
        Ok(cache)
    }
}

fn read_meta(dir: &Path) -> Result<CacheMeta> {
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|e| PicError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| PicError::CorruptCache {
        path: dir.to_path_buf(),
        detail: e.to_string(),
    })
}

fn write_stack(path: &Path, items: &[Tensor], shape: &[usize]) -> Result<()> {
    let mut full = vec![items.len()];
    full.extend_from_slice(shape);
    let flat: Vec<f64> = items.iter().flat_map(|t| t.iter().copied()).collect();
    let arr = Tensor::from_shape_vec(IxDyn(&full), flat)
        .map_err(|e| PicError::Validation(e.to_string()))?;
    write_npy(path, &arr).map_err(|e| PicError::Serde(format!("{}: {e}", path.display())))
}

fn read_stack(path: &Path, count: usize, shape: &[usize]) -> Result<Vec<Tensor>> {
    let arr: Tensor =
        read_npy(path).map_err(|e| PicError::Serde(format!("{}: {e}", path.display())))?;
    let mut want = vec![count];
    want.extend_from_slice(shape);
    if arr.shape() != want.as_slice() {
        return Err(PicError::ShapeMismatch {
            expected: want,
            actual: arr.shape().to_vec(),
        });
    }
    if !tensor::all_finite(&arr) {
        return Err(PicError::Validation(format!(
            "{} has non-finite values",
            path.display()
        )));
    }
    Ok(arr.axis_iter(Axis(0)).map(|v| v.to_owned()).collect())
}

/// Content-addressed cache directories under one root.
#[derive(Debug, Clone)]
pub struct CacheStore {
    root: PathBuf,
}

/// Environment variable overriding the default cache root.
pub const CACHE_DIR_ENV: &str = "PIC_CACHE_DIR";

impl CacheStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CacheStore { root: root.into() }
    }

    /// `$PIC_CACHE_DIR`, falling back to `fallback`.
    pub fn from_env(fallback: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(v) if !v.is_empty() => CacheStore::new(PathBuf::from(v)),
            _ => CacheStore::new(fallback),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(key)
    }

    pub fn lookup(&self, key: &str) -> Result<Option<TrajectoryCache>> {
        let dir = self.path_for(key);
        if !dir.exists() {
            return Ok(None);
        }
        TrajectoryCache::load(&dir).map(Some)
    }
}
