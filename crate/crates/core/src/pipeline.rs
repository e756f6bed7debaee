//! End-to-end commands: configuration, backbone loading, inversion with an
//! on-disk cache, edits, ablations, sweeps, evaluation and the toy suite.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::codec::PixelCodec;
use crate::adapters::text::HashTextEncoder;
use crate::adapters::{
    build_target_prompt, caption_source, encode_prompt, Captioner, Concurrency, CountingDenoiser,
    Denoiser, LatentCodec, TaskSpec, TextEncoder,
};
use crate::cache::{cache_key, CacheStore, TrajectoryCache};
use crate::correction::{run_edit, CallLedger, EditConfig, EditInputs, Variant, GAMMA_SWEEP};
use crate::error::{PicError, Result};
use crate::evaluation::{
    self, ColorKeyDetector, Detector, ImagePair, MetricTools, MetricsReport, NullDetector,
    PatchAffinityEncoder, SidecarDetector, ToyClip,
};
use crate::guidance::GuidedDenoiser;
use crate::integrations::{GuidanceConfig, InjectionConfig, Integration};
use crate::prompt::{plan_from_prompts, EditKind, InterpolationPlan, PromptEmbedding};
use crate::schedule::{invert_source, DiffusionSchedule, ScheduleKind};
use crate::toy::{
    self, AttentionToyDenoiser, GaussianDenoiser, PatchAdapter, SuiteOptions, SuiteReport,
    ToyAblation,
};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Which metrics `evaluate` computes, and how BD finds the object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricToggles {
    /// `sidecar`, `none`, or `color:RRGGBB`.
    pub detector: String,
    pub mask_margin: usize,
    pub vit_patch: u32,
    pub clip_dim: usize,
}

impl Default for MetricToggles {
    fn default() -> Self {
        MetricToggles {
            detector: "sidecar".into(),
            mask_margin: evaluation::DEFAULT_MASK_MARGIN,
            vit_patch: 8,
            clip_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gamma: f64,
    pub tau: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub variant: Variant,
    /// `toy`, `toy-attention`, or a model identifier.
    pub backbone: String,
    pub train_steps: usize,
    pub schedule: ScheduleKind,
    /// Square working resolution of the codec.
    pub resolution: u32,
    pub text_context: usize,
    pub text_dim: usize,
    /// `none`, `ptp`, `pnp` or `p2p`; parameters live in the matching table.
    pub integration: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_prompt: Option<String>,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
    pub ptp: InjectionConfig,
    pub pnp: InjectionConfig,
    pub p2p: GuidanceConfig,
    pub metrics: MetricToggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EditConfig::default();
        RunConfig {
            gamma: e.gamma,
            tau: e.tau,
            beta: None,
            steps: e.num_steps,
            guidance_scale: e.guidance_scale,
            seed: 0,
            variant: Variant::Pic,
            backbone: "toy".into(),
            train_steps: 1000,
            schedule: ScheduleKind::ScaledLinear,
            resolution: 32,
            text_context: 16,
            text_dim: 8,
            integration: "none".into(),
            preset: None,
            source_prompt: None,
            inputs: Vec::new(),
            output_dir: PathBuf::from("pic-out"),
            cache_dir: None,
            workers: 0,
            task: None,
            ptp: InjectionConfig::prompt_to_prompt(),
            pnp: InjectionConfig::plug_and_play(),
            p2p: GuidanceConfig::default(),
            metrics: MetricToggles::default(),
        }
    }
}

/// A named task with its initial mixing weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub task: TaskSpec,
    pub beta: f64,
}

pub fn presets() -> Vec<Preset> {
    let replace = |name, from: &str, to: &str| Preset {
        name,
        task: TaskSpec::Replace {
            from: from.into(),
            to: to.into(),
        },
        beta: EditKind::Replacement.default_beta(),
    };
    vec![
        replace("dog-cat", "dog", "cat"),
        replace("cat-dog", "cat", "dog"),
        replace("horse-zebra", "horse", "zebra"),
        replace("zebra-horse", "zebra", "horse"),
        // textually a substitution, but an added phrase to the model
        Preset {
            beta: EditKind::Insertion.default_beta(),
            ..replace("tree-palm", "tree", "palm tree")
        },
        Preset {
            name: "dog-glasses",
            task: TaskSpec::Insert {
                anchor: "dog".into(),
                phrase: "with glasses".into(),
            },
            beta: EditKind::Insertion.default_beta(),
        },
    ]
}

pub fn preset(name: &str) -> Result<Preset> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| {
            let names: Vec<_> = presets().iter().map(|p| p.name).collect();
            PicError::Config(format!(
                "unknown preset {name:?} (known: {})",
                names.join(", ")
            ))
        })
}

/// Command-line values that override the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub gamma: Option<f64>,
    pub tau: Option<usize>,
    pub beta: Option<f64>,
    pub steps: Option<usize>,
    pub guidance_scale: Option<f64>,
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub backbone: Option<String>,
    pub integration: Option<String>,
    pub preset: Option<String>,
    pub source_prompt: Option<String>,
    pub inputs: Vec<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub resolution: Option<u32>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PicError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PicError::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PicError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = o.$f.clone() { self.$f = v; })*};
        }
        set!(
            gamma,
            tau,
            steps,
            guidance_scale,
            seed,
            variant,
            backbone,
            integration,
            output_dir,
            resolution
        );
        if o.beta.is_some() {
            self.beta = o.beta;
        }
        if o.preset.is_some() {
            self.preset = o.preset.clone();
        }
        if o.source_prompt.is_some() {
            self.source_prompt = o.source_prompt.clone();
        }
        if o.cache_dir.is_some() {
            self.cache_dir = o.cache_dir.clone();
        }
        if !o.inputs.is_empty() {
            self.inputs = o.inputs.clone();
        }
    }

    pub fn edit_config(&self) -> EditConfig {
        EditConfig {
            gamma: self.gamma,
            tau: self.tau,
            beta: self.beta,
            num_steps: self.steps,
            guidance_scale: self.guidance_scale,
            seed: self.seed,
            variant: self.variant,
        }
    }

    pub fn integration(&self) -> Result<Integration> {
        Ok(match Integration::from_key(&self.integration)? {
            Integration::None => Integration::None,
            Integration::Ptp(_) => Integration::Ptp(self.ptp),
            Integration::Pnp(_) => Integration::Pnp(self.pnp),
            Integration::P2p(_) => Integration::P2p(self.p2p),
        })
    }

    /// The task and the preset's mixing weight, if a preset was named.
    pub fn task(&self) -> Result<(TaskSpec, Option<f64>)> {
        match (&self.task, &self.preset) {
            (Some(t), _) => Ok((t.clone(), None)),
            (None, Some(name)) => {
                let p = preset(name)?;
                Ok((p.task, Some(p.beta)))
            }
            (None, None) => Err(PicError::Config(
                "no task: set `preset` or a [task] table".into(),
            )),
        }
    }

    /// Checks values and that every input exists.
    pub fn validate(&self) -> Result<()> {
        self.edit_config().validate()?;
        self.integration()?.validate()?;
        if self.train_steps < self.steps {
            return Err(PicError::Config(format!(
                "train_steps {} < steps {}",
                self.train_steps, self.steps
            )));
        }
        if self.resolution < 8 {
            return Err(PicError::Config("resolution must be at least 8".into()));
        }
        for p in &self.inputs {
            if !p.is_file() {
                return Err(PicError::Validation(format!(
                    "input {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).unwrap_or_default();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::build(self.train_steps, self.steps, self.schedule)
    }

    pub fn cache_store(&self) -> CacheStore {
        match &self.cache_dir {
            Some(d) => CacheStore::new(d),
            None => CacheStore::from_env(self.output_dir.join("cache")),
        }
    }
}

/// Every model the pipeline needs.
pub struct Backbone {
    pub encoder: Box<dyn TextEncoder>,
    pub codec: Box<dyn LatentCodec>,
    pub denoiser: Box<dyn Denoiser>,
    pub captioner: Option<Box<dyn Captioner>>,
}

const TOY_ATTENTION_PATCH: usize = 4;

pub fn load_backbone(cfg: &RunConfig) -> Result<Backbone> {
    let res = cfg.resolution as usize;
    let encoder = HashTextEncoder::new(cfg.text_context, cfg.text_dim, cfg.seed)?;
    let codec = PixelCodec::new(cfg.resolution, cfg.resolution)?;
    let denoiser: Box<dyn Denoiser> = match cfg.backbone.as_str() {
        "toy" => Box::new(GaussianDenoiser::new(toy::image_world(res, res, cfg.text_context, cfg.text_dim, cfg.seed)?)),
        "toy-attention" => {
            let p = TOY_ATTENTION_PATCH;
            if !res.is_multiple_of(p) {
                return Err(PicError::Config(format!("toy-attention needs a resolution divisible by {p}")));
            }
            let tokens = (res / p) * (res / p);
            let inner = AttentionToyDenoiser::random(tokens, 3 * p * p, 8, cfg.text_context, cfg.text_dim, cfg.seed);
            Box::new(PatchAdapter::new(inner, res, res, p)?)
        }
        other => {
            return Err(PicError::ModelUnavailable(format!(
                "backbone {other:?} needs external weights, which this build cannot load; use `toy` or `toy-attention`"
            )))
        }
    };
    Ok(Backbone {
        encoder: Box::new(encoder),
        codec: Box::new(codec),
        denoiser,
        captioner: None,
    })
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| PicError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8())
}

/// Writes a PNG under a temporary name and renames it into place.
pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| PicError::io(dir, e))?;
    let tmp = tempfile::Builder::new()
        .prefix(".pic-img-")
        .suffix(".png")
        .tempfile_in(dir)
        .map_err(|e| PicError::io(dir, e))?;
    img.save_with_format(tmp.path(), image::ImageFormat::Png)?;
    tmp.persist(path).map_err(|e| PicError::io(path, e.error))?;
    Ok(())
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| PicError::io(dir, e))?;
    let text = serde_json::to_string_pretty(value)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| PicError::io(dir, e))?;
    std::io::Write::write_all(&mut tmp, text.as_bytes()).map_err(|e| PicError::io(path, e))?;
    tmp.persist(path).map_err(|e| PicError::io(path, e.error))?;
    Ok(())
}

/// Images side by side on a white background with a 2 px gutter.
pub fn contact_sheet(images: &[RgbImage]) -> RgbImage {
    let gap = 2u32;
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w =
        images.iter().map(|i| i.width()).sum::<u32>() + gap * images.len().saturating_sub(1) as u32;
    let mut sheet = RgbImage::from_pixel(w.max(1), h.max(1), image::Rgb([255, 255, 255]));
    let mut x = 0;
    for img in images {
        image::imageops::replace(&mut sheet, img, x as i64, 0);
        x += img.width() + gap;
    }
    sheet
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// Prompts, plan and cache for one source image.
pub struct Prepared {
    pub source_prompt: String,
    pub target_prompt: String,
    pub y_src: PromptEmbedding,
    pub y_tgt: PromptEmbedding,
    pub null: PromptEmbedding,
    pub plan: InterpolationPlan,
    pub cache: TrajectoryCache,
    pub cache_path: PathBuf,
    pub cache_hit: bool,
    pub source_latent_image: RgbImage,
    pub warnings: Vec<String>,
    pub invert_ms: f64,
    pub forward_model_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertOutcome {
    pub schema_version: u32,
    pub input: PathBuf,
    pub cache_path: PathBuf,
    pub fingerprint: String,
    pub cache_hit: bool,
    /// Inner model calls spent on this invocation.
    pub model_calls: usize,
    pub source_prompt: String,
}

struct Inverted {
    cache: TrajectoryCache,
    path: PathBuf,
    hit: bool,
    model_calls: usize,
    millis: f64,
}

fn invert_cached(
    cfg: &RunConfig,
    backbone: &Backbone,
    x0: &crate::tensor::Tensor,
    y_src: &PromptEmbedding,
    null: &PromptEmbedding,
    sched: &DiffusionSchedule,
    force: bool,
) -> Result<Inverted> {
    let store = cfg.cache_store();
    let key = cache_key(
        x0,
        &y_src.fingerprint(),
        sched,
        cfg.guidance_scale,
        backbone.denoiser.name(),
    );
    let path = store.path_for(&key);
    if !force {
        if let Some(cache) = store.lookup(&key)? {
            return Ok(Inverted {
                cache,
                path,
                hit: true,
                model_calls: 0,
                millis: 0.0,
            });
        }
    }
    let start = Instant::now();
    let counting = CountingDenoiser::new(backbone.denoiser.as_ref());
    let model = GuidedDenoiser::new(&counting, null, cfg.guidance_scale)?;
    let cache = invert_source(x0, y_src, &model, sched)?.with_model(backbone.denoiser.name());
    cache.save(&path, force)?;
    Ok(Inverted {
        cache,
        path,
        hit: false,
        model_calls: counting.calls(),
        millis: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn source_prompt(cfg: &RunConfig, backbone: &Backbone, image: &RgbImage) -> Result<String> {
    caption_source(
        image,
        cfg.source_prompt.as_deref(),
        backbone.captioner.as_deref(),
    )
}

/// Inverts each input (or reuses its cache).
pub fn cmd_invert(cfg: &RunConfig, force: bool) -> Result<Vec<InvertOutcome>> {
    cfg.validate()?;
    if cfg.inputs.is_empty() {
        return Err(PicError::Validation("no input images".into()));
    }
    let backbone = load_backbone(cfg)?;
    let sched = cfg.schedule()?;
    let null = encode_prompt("", backbone.encoder.as_ref())?.embedding;
    cfg.inputs
        .iter()
        .map(|input| {
            let img = load_image(input)?;
            let p_src = source_prompt(cfg, &backbone, &img)?;
            let y_src = encode_prompt(&p_src, backbone.encoder.as_ref())?.embedding;
            let x0 = backbone.codec.encode(&img)?;
            let inv = invert_cached(cfg, &backbone, &x0, &y_src, &null, &sched, force)?;
            Ok(InvertOutcome {
                schema_version: MANIFEST_SCHEMA_VERSION,
                input: input.clone(),
                fingerprint: inv.cache.fingerprint(),
                cache_path: inv.path,
                cache_hit: inv.hit,
                model_calls: inv.model_calls,
                source_prompt: p_src,
            })
        })
        .collect()
}

fn prepare(
    cfg: &RunConfig,
    backbone: &Backbone,
    sched: &DiffusionSchedule,
    input: &Path,
) -> Result<Prepared> {
    let img = load_image(input)?;
    let p_src = source_prompt(cfg, backbone, &img)?;
    let (task, preset_beta) = cfg.task()?;
    let p_tgt = build_target_prompt(&p_src, &task)?;
    let enc = backbone.encoder.as_ref();
    let mut warnings = Vec::new();
    let src = encode_prompt(&p_src, enc)?;
    let tgt = encode_prompt(&p_tgt, enc)?;
    for (which, e) in [("source", &src), ("target", &tgt)] {
        if e.truncated > 0 {
            warnings.push(format!(
                "{which} prompt truncated by {} tokens",
                e.truncated
            ));
        }
    }
    let null = encode_prompt("", enc)?.embedding;
    let mut plan = plan_from_prompts(&p_src, &p_tgt, enc.tokenizer(), cfg.steps)?;
    if let Some(b) = cfg.beta.or(preset_beta) {
        plan.beta = b;
    }
    let x0 = backbone.codec.encode(&img)?;
    let source_latent_image = backbone.codec.decode(&x0)?;
    let inv = invert_cached(cfg, backbone, &x0, &src.embedding, &null, sched, false)?;
    Ok(Prepared {
        source_prompt: p_src,
        target_prompt: p_tgt,
        y_src: src.embedding,
        y_tgt: tgt.embedding,
        null,
        plan,
        cache: inv.cache,
        cache_path: inv.path,
        cache_hit: inv.hit,
        source_latent_image,
        warnings,
        invert_ms: inv.millis,
        forward_model_calls: inv.model_calls,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub invert_ms: f64,
    pub edit_ms: f64,
    pub decode_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditManifest {
    pub schema_version: u32,
    pub input: PathBuf,
    pub output: PathBuf,
    pub config: RunConfig,
    pub edit: EditConfig,
    pub integration: Integration,
    pub backbone: String,
    pub resize_policy: String,
    pub source_prompt: String,
    pub target_prompt: String,
    pub plan: InterpolationPlan,
    pub cache_fingerprint: String,
    pub cache_path: PathBuf,
    pub cache_hit: bool,
    pub ledger: CallLedger,
    /// Inner model calls actually executed by this run, inversion included.
    pub model_calls: usize,
    pub timings: Timings,
    pub warnings: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn edit_one(
    cfg: &RunConfig,
    backbone: &Backbone,
    sched: &DiffusionSchedule,
    prep: &Prepared,
    edit: &EditConfig,
    integration: &Integration,
    input: &Path,
    output: PathBuf,
) -> Result<(EditManifest, RgbImage)> {
    let counting = CountingDenoiser::new(backbone.denoiser.as_ref());
    let model = GuidedDenoiser::new(&counting, &prep.null, edit.guidance_scale)?;
    let inputs = EditInputs {
        cache: &prep.cache,
        y_src: &prep.y_src,
        y_tgt: &prep.y_tgt,
        plan: &prep.plan,
        model: &model,
        sched,
    };
    let start = Instant::now();
    let out = run_edit(&inputs, edit, integration)?;
    let edit_ms = start.elapsed().as_secs_f64() * 1e3;
    let start = Instant::now();
    let img = backbone.codec.decode(&out.latent)?;
    let decode_ms = start.elapsed().as_secs_f64() * 1e3;
    let manifest = EditManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        input: input.to_path_buf(),
        output,
        config: cfg.clone(),
        edit: *edit,
        integration: *integration,
        backbone: backbone.denoiser.name().to_string(),
        resize_policy: backbone.codec.resize_policy(),
        source_prompt: prep.source_prompt.clone(),
        target_prompt: prep.target_prompt.clone(),
        plan: edit.apply_to(&prep.plan),
        cache_fingerprint: prep.cache.fingerprint(),
        cache_path: prep.cache_path.clone(),
        cache_hit: prep.cache_hit,
        ledger: out.ledger,
        model_calls: counting.calls(),
        timings: Timings {
            invert_ms: prep.invert_ms,
            edit_ms,
            decode_ms,
        },
        warnings: prep.warnings.clone(),
    };
    Ok((manifest, img))
}

fn write_result(manifest: &EditManifest, img: &RgbImage) -> Result<()> {
    save_png(img, &manifest.output)?;
    save_json(manifest, &manifest.output.with_extension("json"))
}

fn pool(cfg: &RunConfig, backbone: &Backbone) -> Result<rayon::ThreadPool> {
    let threads = match backbone.denoiser.concurrency() {
        Concurrency::Exclusive => 1,
        Concurrency::Shared => cfg.workers,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PicError::Config(e.to_string()))
}

/// Edits every input with the configured variant and integration.
pub fn cmd_edit(cfg: &RunConfig) -> Result<Vec<EditManifest>> {
    cfg.validate()?;
    if cfg.inputs.is_empty() {
        return Err(PicError::Validation("no input images".into()));
    }
    let backbone = load_backbone(cfg)?;
    let sched = cfg.schedule()?;
    let integration = cfg.integration()?;
    let edit = cfg.edit_config();
    let run = |input: &PathBuf| -> Result<EditManifest> {
        let prep = prepare(cfg, &backbone, &sched, input)?;
        let output = cfg
            .output_dir
            .join(format!("{}_{}.png", stem(input), edit.variant));
        let (mut manifest, img) = edit_one(
            cfg,
            &backbone,
            &sched,
            &prep,
            &edit,
            &integration,
            input,
            output,
        )?;
        manifest.model_calls += prep.forward_model_calls;
        write_result(&manifest, &img)?;
        Ok(manifest)
    };
    pool(cfg, &backbone)?.install(|| cfg.inputs.par_iter().map(run).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationManifest {
    pub schema_version: u32,
    pub input: PathBuf,
    pub runs: Vec<EditManifest>,
    pub sheet: PathBuf,
    /// Inversions executed for this image (one cache serves all variants).
    pub inversions: usize,
    /// Surrogate-metric check on the toy two-domain scenario (toy backbones).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_ordering: Option<ToyOrdering>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyOrdering {
    pub ablation: ToyAblation,
    pub ordering_holds: bool,
    pub alignment_gap: f64,
}

pub const TOY_ABLATION_SEEDS: u64 = 100;

/// All four variants on every input, sharing one inversion per image.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationManifest>> {
    cfg.validate()?;
    if cfg.inputs.is_empty() {
        return Err(PicError::Validation("no input images".into()));
    }
    let backbone = load_backbone(cfg)?;
    let sched = cfg.schedule()?;
    let integration = cfg.integration()?;
    let toy_ordering = if cfg.backbone.starts_with("toy") {
        let scn = toy::TwoDomainScenario::coupled(cfg.steps)?;
        let edit = EditConfig {
            guidance_scale: 1.0,
            ..cfg.edit_config()
        };
        let ablation =
            toy::toy_ablation(&scn, &edit, &sched, cfg.seed..cfg.seed + TOY_ABLATION_SEEDS)?;
        Some(ToyOrdering {
            ordering_holds: ablation.ordering_holds(),
            alignment_gap: ablation.alignment_gap(),
            ablation,
        })
    } else {
        None
    };
    cfg.inputs
        .iter()
        .map(|input| {
            let prep = prepare(cfg, &backbone, &sched, input)?;
            let mut runs = Vec::new();
            let mut images = vec![prep.source_latent_image.clone()];
            for variant in Variant::ALL {
                let edit = EditConfig {
                    variant,
                    ..cfg.edit_config()
                };
                let output = cfg
                    .output_dir
                    .join(format!("{}_{}.png", stem(input), variant));
                let (m, img) = edit_one(
                    cfg,
                    &backbone,
                    &sched,
                    &prep,
                    &edit,
                    &integration,
                    input,
                    output,
                )?;
                write_result(&m, &img)?;
                images.push(img);
                runs.push(m);
            }
            let sheet = cfg.output_dir.join(format!("{}_ablation.png", stem(input)));
            save_png(&contact_sheet(&images), &sheet)?;
            let manifest = AblationManifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                input: input.clone(),
                runs,
                sheet,
                inversions: usize::from(!prep.cache_hit),
                toy_ordering: toy_ordering.clone(),
            };
            save_json(
                &manifest,
                &cfg.output_dir
                    .join(format!("{}_ablation.json", stem(input))),
            )?;
            Ok(manifest)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub schema_version: u32,
    pub input: PathBuf,
    pub gammas: Vec<f64>,
    pub runs: Vec<EditManifest>,
    pub sheet: PathBuf,
}

/// One edit per correction weight in `gammas` (the standard grid when empty),
/// plus a contact sheet.
pub fn cmd_sweep(cfg: &RunConfig, gammas: &[f64]) -> Result<Vec<SweepManifest>> {
    cfg.validate()?;
    if cfg.inputs.is_empty() {
        return Err(PicError::Validation("no input images".into()));
    }
    let gammas: Vec<f64> = if gammas.is_empty() {
        GAMMA_SWEEP.to_vec()
    } else {
        gammas.to_vec()
    };
    let backbone = load_backbone(cfg)?;
    let sched = cfg.schedule()?;
    let integration = cfg.integration()?;
    cfg.inputs
        .iter()
        .map(|input| {
            let prep = prepare(cfg, &backbone, &sched, input)?;
            let mut runs = Vec::new();
            let mut images = vec![prep.source_latent_image.clone()];
            for &gamma in &gammas {
                let edit = EditConfig {
                    gamma,
                    ..cfg.edit_config()
                };
                let output = cfg
                    .output_dir
                    .join(format!("{}_gamma{gamma:.2}.png", stem(input)));
                let (m, img) = edit_one(
                    cfg,
                    &backbone,
                    &sched,
                    &prep,
                    &edit,
                    &integration,
                    input,
                    output,
                )?;
                write_result(&m, &img)?;
                images.push(img);
                runs.push(m);
            }
            let sheet = cfg.output_dir.join(format!("{}_sweep.png", stem(input)));
            save_png(&contact_sheet(&images), &sheet)?;
            let manifest = SweepManifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                input: input.clone(),
                gammas: gammas.clone(),
                runs,
                sheet,
            };
            save_json(
                &manifest,
                &cfg.output_dir.join(format!("{}_sweep.json", stem(input))),
            )?;
            Ok(manifest)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateRequest {
    pub task: String,
    pub source_dir: PathBuf,
    pub translated_dir: PathBuf,
    pub target_prompt: String,
    /// Object label handed to the detector.
    pub label: String,
    pub output_dir: PathBuf,
}

pub fn detector_from_key(key: &str) -> Result<Box<dyn Detector>> {
    if let Some(hex_color) = key.strip_prefix("color:") {
        let v = u32::from_str_radix(hex_color.trim_start_matches('#'), 16)
            .map_err(|_| PicError::Config(format!("bad colour {hex_color:?}")))?;
        return Ok(Box::new(ColorKeyDetector {
            color: [(v >> 16) as u8, (v >> 8) as u8, v as u8],
            tolerance: 8,
        }));
    }
    match key {
        "sidecar" => Ok(Box::new(SidecarDetector)),
        "none" => Ok(Box::new(NullDetector)),
        other => Err(PicError::ModelUnavailable(format!(
            "detector {other:?} is not available; use sidecar, none or color:RRGGBB"
        ))),
    }
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| PicError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| PicError::io(dir, e))?.path();
        let is_image = path.extension().and_then(|e| e.to_str()).is_some_and(|e| {
            ["png", "jpg", "jpeg"]
                .iter()
                .any(|x| e.eq_ignore_ascii_case(x))
        });
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if path.is_file() && is_image && !name.contains(".mask.") {
            out.insert(stem(&path), path);
        }
    }
    Ok(out)
}

/// Scores source/translated pairs matched by file stem. Unpaired files are
/// listed in the report and skipped.
pub fn cmd_evaluate(cfg: &RunConfig, req: &EvaluateRequest) -> Result<MetricsReport> {
    let sources = list_images(&req.source_dir)?;
    let translated = list_images(&req.translated_dir)?;
    let mut pairs = Vec::new();
    let mut unpaired = Vec::new();
    for (id, src_path) in &sources {
        match translated.get(id) {
            Some(tgt_path) => pairs.push(ImagePair {
                id: id.clone(),
                source: load_image(src_path)?,
                translated: load_image(tgt_path)?,
                source_path: Some(src_path.clone()),
            }),
            None => unpaired.push(evaluation::Skipped {
                id: id.clone(),
                reason: "no translated image".into(),
            }),
        }
    }
    for id in translated.keys().filter(|id| !sources.contains_key(*id)) {
        unpaired.push(evaluation::Skipped {
            id: id.clone(),
            reason: "no source image".into(),
        });
    }
    if pairs.is_empty() {
        log::warn!("no image pairs to evaluate");
    }
    let detector = detector_from_key(&cfg.metrics.detector)?;
    let embedder = ToyClip::new(cfg.metrics.clip_dim, cfg.seed)?;
    let structure = PatchAffinityEncoder {
        patch: cfg.metrics.vit_patch,
        ..Default::default()
    };
    let tools = MetricTools {
        detector: detector.as_ref(),
        embedder: &embedder,
        structure: &structure,
        margin: cfg.metrics.mask_margin,
    };
    let mut report = evaluation::evaluate_pairs(
        &req.task,
        &pairs,
        &req.target_prompt,
        &req.label,
        &tools,
        &cfg.fingerprint(),
    );
    report.skipped.extend(unpaired);
    fs::create_dir_all(&req.output_dir).map_err(|e| PicError::io(&req.output_dir, e))?;
    save_json(
        &report,
        &req.output_dir.join(format!("{}.metrics.json", req.task)),
    )?;
    let csv_path = req.output_dir.join(format!("{}.metrics.csv", req.task));
    let file = fs::File::create(&csv_path).map_err(|e| PicError::io(&csv_path, e))?;
    report.write_csv(file)?;
    Ok(report)
}

pub fn cmd_toy_verify(opts: &SuiteOptions, output: Option<&Path>) -> Result<SuiteReport> {
    let report = toy::run_invariant_suite(opts)?;
    if let Some(path) = output {
        save_json(&report, path)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_toml_round_trip() {
        let mut c = RunConfig {
            beta: Some(0.25),
            preset: Some("dog-cat".into()),
            task: Some(TaskSpec::Insert {
                anchor: "dog".into(),
                phrase: "with glasses".into(),
            }),
            ..Default::default()
        };
        c.inputs.push("a.png".into());
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flat_keys_and_overrides() {
        let mut c =
            RunConfig::from_toml("gamma = 2.0\ntau = 10\nsteps = 20\nguidance_scale = 1.0\n")
                .unwrap();
        assert_eq!((c.gamma, c.tau, c.steps), (2.0, 10, 20));
        c.apply(&Overrides {
            gamma: Some(0.5),
            ..Default::default()
        });
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.tau, 10);
        assert!(RunConfig::from_toml("gama = 1.0").is_err());
    }

    #[test]
    fn presets_cover_the_six_tasks() {
        assert_eq!(presets().len(), 6);
        assert_eq!(preset("dog-glasses").unwrap().beta, 0.8);
        assert_eq!(preset("tree-palm").unwrap().beta, 0.8);
        assert_eq!(preset("horse-zebra").unwrap().beta, 0.3);
        assert!(preset("cat-lion").is_err());
    }

    #[test]
    fn unknown_backbone_is_unavailable() {
        let c = RunConfig {
            backbone: "sd-v1.4".into(),
            ..Default::default()
        };
        assert!(matches!(
            load_backbone(&c),
            Err(PicError::ModelUnavailable(_))
        ));
    }
}
