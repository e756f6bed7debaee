//! Object detectors used to locate the edited object for background scoring.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::mask::Mask;
use crate::error::{PicError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionSource {
    Mask,
    Box,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Object pixels.
    pub object: Mask,
    pub source: DetectionSource,
}

pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    /// Locates `label` in `image`; `path` is the file the image came from,
    /// when known. `None` means nothing was found.
    fn detect(
        &self,
        image: &RgbImage,
        path: Option<&Path>,
        label: &str,
    ) -> Result<Option<Detection>>;
}

/// Never finds anything; every background score falls back to the full image.
#[derive(Debug, Clone, Default)]
pub struct NullDetector;

impl Detector for NullDetector {
    fn name(&self) -> &str {
        "none"
    }
    fn detect(
        &self,
        _image: &RgbImage,
        _path: Option<&Path>,
        _label: &str,
    ) -> Result<Option<Detection>> {
        Ok(None)
    }
}

/// Treats pixels close to a key colour as the object. Handy for synthetic
/// fixtures.
#[derive(Debug, Clone)]
pub struct ColorKeyDetector {
    pub color: [u8; 3],
    pub tolerance: u8,
}

impl Detector for ColorKeyDetector {
    fn name(&self) -> &str {
        "color-key"
    }

    fn detect(
        &self,
        image: &RgbImage,
        _path: Option<&Path>,
        _label: &str,
    ) -> Result<Option<Detection>> {
        let object = Mask::from_fn(image.width() as usize, image.height() as usize, |x, y| {
            let p = image.get_pixel(x as u32, y as u32);
            (0..3).all(|c| p[c].abs_diff(self.color[c]) <= self.tolerance)
        });
        Ok((!object.is_empty()).then_some(Detection {
            object,
            source: DetectionSource::Mask,
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxFile {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Reads precomputed detections stored next to each image: `<stem>.mask.png`
/// (non-black pixels are the object) or `<stem>.box.json` with a half-open
/// pixel box. Masks win when both exist.
#[derive(Debug, Clone, Default)]
pub struct SidecarDetector;

impl SidecarDetector {
    fn sidecar(path: &Path, suffix: &str) -> PathBuf {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        path.with_file_name(format!("{stem}{suffix}"))
    }
}

impl Detector for SidecarDetector {
    fn name(&self) -> &str {
        "sidecar"
    }

    fn detect(
        &self,
        image: &RgbImage,
        path: Option<&Path>,
        _label: &str,
    ) -> Result<Option<Detection>> {
        let Some(path) = path else { return Ok(None) };
        let (w, h) = (image.width() as usize, image.height() as usize);
        let mask_path = Self::sidecar(path, ".mask.png");
        if mask_path.exists() {
            let m = image::open(&mask_path)?.to_luma8();
            if (m.width() as usize, m.height() as usize) != (w, h) {
                return Err(PicError::Validation(format!(
                    "{} does not match the image size",
                    mask_path.display()
                )));
            }
            let object = Mask::from_fn(w, h, |x, y| m.get_pixel(x as u32, y as u32)[0] > 0);
            return Ok((!object.is_empty()).then_some(Detection {
                object,
                source: DetectionSource::Mask,
            }));
        }
        let box_path = Self::sidecar(path, ".box.json");
        if box_path.exists() {
            let text =
                std::fs::read_to_string(&box_path).map_err(|e| PicError::io(&box_path, e))?;
            let b: BoxFile = serde_json::from_str(&text)?;
            let object = Mask::from_box(w, h, b.x0, b.y0, b.x1, b.y1);
            return Ok((!object.is_empty()).then_some(Detection {
                object,
                source: DetectionSource::Box,
            }));
        }
        Ok(None)
    }
}
