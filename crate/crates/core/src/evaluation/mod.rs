//! Edit-quality metrics: target alignment (CS), background distance (BD) and
//! structure distance (SD), plus report aggregation.

pub mod detect;
pub mod embed;
pub mod mask;
pub mod perceptual;

use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PicError, Result};
pub use detect::{
    ColorKeyDetector, Detection, DetectionSource, Detector, NullDetector, SidecarDetector,
};
pub use embed::{
    cosine, frobenius_distance, select_task_images, JointEmbedder, PatchAffinityEncoder,
    StructureEncoder, ToyClip,
};
pub use mask::Mask;
pub use perceptual::perceptual_distance;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Pixels added around a detection before taking its complement.
pub const DEFAULT_MASK_MARGIN: usize = 2;

pub fn clip_similarity(
    image: &RgbImage,
    prompt: &str,
    embedder: &dyn JointEmbedder,
) -> Result<f64> {
    let i = embedder.embed_image(image)?;
    let t = embedder.embed_text(prompt)?;
    if i.len() != t.len() {
        return Err(PicError::ShapeMismatch {
            expected: vec![t.len()],
            actual: vec![i.len()],
        });
    }
    Ok(cosine(&i, &t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundRegion {
    Mask,
    Box,
    /// No usable detection; scored on the whole image.
    FullImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundScore {
    pub value: f64,
    pub region: BackgroundRegion,
}

impl BackgroundScore {
    pub fn flagged(&self) -> bool {
        self.region == BackgroundRegion::FullImage
    }
}

/// Perceptual distance restricted to the background of the source image.
pub fn background_distance(
    src: &RgbImage,
    tgt: &RgbImage,
    detector: &dyn Detector,
    src_path: Option<&Path>,
    label: &str,
    margin: usize,
) -> Result<BackgroundScore> {
    let full = |region| -> Result<BackgroundScore> {
        let value = perceptual_distance(src, tgt, None)?.ok_or_else(|| {
            PicError::Validation("image too small for the perceptual distance".into())
        })?;
        Ok(BackgroundScore { value, region })
    };
    let Some(det) = detector.detect(src, src_path, label)? else {
        return full(BackgroundRegion::FullImage);
    };
    let background = det.object.dilate(margin).complement();
    match perceptual_distance(src, tgt, Some(&background))? {
        Some(value) => Ok(BackgroundScore {
            value,
            region: match det.source {
                DetectionSource::Mask => BackgroundRegion::Mask,
                DetectionSource::Box => BackgroundRegion::Box,
            },
        }),
        None => full(BackgroundRegion::FullImage),
    }
}

pub fn structure_distance(
    src: &RgbImage,
    tgt: &RgbImage,
    encoder: &dyn StructureEncoder,
) -> Result<f64> {
    if src.dimensions() != tgt.dimensions() {
        return Err(PicError::Validation("image sizes differ".into()));
    }
    frobenius_distance(&encoder.self_attention(src)?, &encoder.self_attention(tgt)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub cs: f64,
    pub bd: f64,
    pub sd: f64,
    pub bd_region: BackgroundRegion,
    /// True when BD fell back to the whole image.
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub cs: f64,
    pub bd: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub task: String,
    pub per_image: Vec<ImageMetrics>,
    /// `None` for an empty report.
    pub averages: Option<Averages>,
    pub skipped: Vec<Skipped>,
    pub config_fingerprint: String,
}

impl MetricsReport {
    pub fn new(
        task: impl Into<String>,
        per_image: Vec<ImageMetrics>,
        skipped: Vec<Skipped>,
        config_fingerprint: impl Into<String>,
    ) -> Self {
        let averages = Self::mean(&per_image);
        MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            task: task.into(),
            per_image,
            averages,
            skipped,
            config_fingerprint: config_fingerprint.into(),
        }
    }

    fn mean(rows: &[ImageMetrics]) -> Option<Averages> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(Averages {
            cs: rows.iter().map(|r| r.cs).sum::<f64>() / n,
            bd: rows.iter().map(|r| r.bd).sum::<f64>() / n,
            sd: rows.iter().map(|r| r.sd).sum::<f64>() / n,
        })
    }

    /// Recomputes the averages from the rows and compares exactly.
    pub fn averages_consistent(&self) -> bool {
        Self::mean(&self.per_image) == self.averages
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.per_image {
            w.serialize(CsvRow {
                task: &self.task,
                id: &row.id,
                cs: row.cs,
                bd: row.bd,
                sd: row.sd,
                bd_region: row.bd_region,
                flagged: row.flagged,
            })
            .map_err(|e| PicError::Serde(e.to_string()))?;
        }
        w.flush().map_err(|e| PicError::io("csv output", e))?;
        Ok(())
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    task: &'a str,
    id: &'a str,
    cs: f64,
    bd: f64,
    sd: f64,
    bd_region: BackgroundRegion,
    flagged: bool,
}

/// Task rows by CS/BD/SD columns, with a cross-task average row.
pub fn summary_table(reports: &[MetricsReport]) -> String {
    let mut s = format!(
        "{:<28} {:>8} {:>8} {:>8} {:>6}\n",
        "task", "CS", "BD", "SD", "n"
    );
    let mut avgs = Vec::new();
    for r in reports {
        match r.averages {
            Some(a) => {
                s.push_str(&format!(
                    "{:<28} {:>8.3} {:>8.3} {:>8.3} {:>6}\n",
                    r.task,
                    a.cs,
                    a.bd,
                    a.sd,
                    r.per_image.len()
                ));
                avgs.push(a);
            }
            None => s.push_str(&format!(
                "{:<28} {:>8} {:>8} {:>8} {:>6}\n",
                r.task, "-", "-", "-", 0
            )),
        }
    }
    if !avgs.is_empty() {
        let n = avgs.len() as f64;
        s.push_str(&format!(
            "{:<28} {:>8.3} {:>8.3} {:>8.3}\n",
            "Average",
            avgs.iter().map(|a| a.cs).sum::<f64>() / n,
            avgs.iter().map(|a| a.bd).sum::<f64>() / n,
            avgs.iter().map(|a| a.sd).sum::<f64>() / n
        ));
    }
    s
}

/// One source/translated pair to score.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub id: String,
    pub source: RgbImage,
    pub translated: RgbImage,
    pub source_path: Option<PathBuf>,
}

pub struct MetricTools<'a> {
    pub detector: &'a dyn Detector,
    pub embedder: &'a dyn JointEmbedder,
    pub structure: &'a dyn StructureEncoder,
    pub margin: usize,
}

fn score_pair(
    pair: &ImagePair,
    target_prompt: &str,
    label: &str,
    tools: &MetricTools<'_>,
) -> Result<ImageMetrics> {
    if pair.source.dimensions() != pair.translated.dimensions() {
        return Err(PicError::Validation(format!(
            "source {:?} and translated {:?} sizes differ",
            pair.source.dimensions(),
            pair.translated.dimensions()
        )));
    }
    let cs = clip_similarity(&pair.translated, target_prompt, tools.embedder)?;
    let bd = background_distance(
        &pair.source,
        &pair.translated,
        tools.detector,
        pair.source_path.as_deref(),
        label,
        tools.margin,
    )?;
    let sd = structure_distance(&pair.source, &pair.translated, tools.structure)?;
    Ok(ImageMetrics {
        id: pair.id.clone(),
        cs,
        bd: bd.value,
        sd,
        bd_region: bd.region,
        flagged: bd.flagged(),
    })
}

/// Scores every pair in parallel. Pairs whose metrics fail are listed as
/// skipped rather than aborting the report.
pub fn evaluate_pairs(
    task: &str,
    pairs: &[ImagePair],
    target_prompt: &str,
    label: &str,
    tools: &MetricTools<'_>,
    config_fingerprint: &str,
) -> MetricsReport {
    let results: Vec<(String, Result<ImageMetrics>)> = pairs
        .par_iter()
        .map(|p| (p.id.clone(), score_pair(p, target_prompt, label, tools)))
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok(m) => rows.push(m),
            Err(e) => skipped.push(Skipped {
                id,
                reason: e.to_string(),
            }),
        }
    }
    MetricsReport::new(task, rows, skipped, config_fingerprint)
}
