//! Pixel-space codec for toy mode: the latent is the image itself, scaled to
//! `[-1, 1]` and laid out channel-first.

use image::{imageops::FilterType, RgbImage};

use super::LatentCodec;
use crate::error::{PicError, Result};
use crate::tensor::{self, Tensor};

pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut out = tensor::zeros(&[3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p[c] as f64 / 127.5 - 1.0;
        }
    }
    out
}

pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(PicError::Validation(format!(
            "expected a [3, H, W] latent, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = ((t[[c, y as usize, x as usize]] + 1.0) * 127.5).round();
            p[c] = v.clamp(0.0, 255.0) as u8;
        }
    }
    Ok(img)
}

#[derive(Debug, Clone)]
pub struct PixelCodec {
    width: u32,
    height: u32,
}

impl PixelCodec {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(PicError::Config("codec resolution must be non-zero".into()));
        }
        Ok(PixelCodec { width, height })
    }
}

impl LatentCodec for PixelCodec {
    fn name(&self) -> &str {
        "pixel"
    }

    fn latent_shape(&self) -> Vec<usize> {
        vec![3, self.height as usize, self.width as usize]
    }

    fn encode(&self, image: &RgbImage) -> Result<Tensor> {
        if image.dimensions() == (self.width, self.height) {
            return Ok(image_to_tensor(image));
        }
        let resized = image::imageops::resize(image, self.width, self.height, FilterType::Triangle);
        Ok(image_to_tensor(&resized))
    }

    fn decode(&self, latent: &Tensor) -> Result<RgbImage> {
        let want = self.latent_shape();
        if latent.shape() != want.as_slice() {
            return Err(PicError::ShapeMismatch {
                expected: want,
                actual: latent.shape().to_vec(),
            });
        }
        tensor_to_image(latent)
    }

    fn resize_policy(&self) -> String {
        format!("triangle resize to {}x{}", self.width, self.height)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_round_trip() {
        let img = RgbImage::from_fn(5, 4, |x, y| {
            image::Rgb([(x * 50) as u8, (y * 60) as u8, 255])
        });
        let codec = PixelCodec::new(5, 4).unwrap();
        let back = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn wrong_channel_count() {
        let codec = PixelCodec::new(2, 2).unwrap();
        assert!(codec.decode(&tensor::zeros(&[4, 2, 2])).is_err());
        assert!(tensor_to_image(&tensor::zeros(&[1, 2, 2])).is_err());
    }
}
