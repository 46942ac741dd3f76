//! Sliding-window whole-image prediction.
//!
//! Valid mode classifies the patch around every center `(r, c)` with
//! `16 ≤ r, c < 240` of a 256×256 image, in row-major order, giving a
//! 224×224 mask whose `(0, 0)` corresponds to image `(16, 16)`. Padded mode
//! zero-pads the image by 16 pixels per side first and predicts all 256×256
//! pixels.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{load_mask, to_level, write_gray_png, write_rgb_png, BinaryMask, FundusImage};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::par;
use crate::tensor::{Real, Tensor};
use crate::{CHANNELS, PATCH_CENTER, PATCH_SIZE, VALID_EXTENT, WORKING_SIZE};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    #[default]
    Valid,
    Padded,
}

impl InferenceMode {
    pub fn extent(self) -> usize {
        match self {
            InferenceMode::Valid => VALID_EXTENT,
            InferenceMode::Padded => WORKING_SIZE,
        }
    }

    /// Image coordinate of mask `(0, 0)`.
    pub fn origin(self) -> (usize, usize) {
        match self {
            InferenceMode::Valid => (PATCH_CENTER, PATCH_CENTER),
            InferenceMode::Padded => (0, 0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::Valid => "valid",
            InferenceMode::Padded => "padded",
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(InferenceMode::Valid),
            "padded" => Ok(InferenceMode::Padded),
            other => Err(Error::InvalidConfig(format!("unknown inference mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMask {
    pub mode: InferenceMode,
    pub mask: BinaryMask,
    /// Softmax probability of the exudate class, same extent as `mask`.
    pub probability: Tensor,
}

impl PredictionMask {
    pub fn origin(&self) -> (usize, usize) {
        self.mode.origin()
    }
}

/// Exudate probability from a pair of logits. A pixel is exudate iff this
/// exceeds 0.5, which is the argmax rule with ties going to background.
pub fn exudate_probability(logits: &[Real]) -> Real {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

/// Copies the 32×32×3 window centered on `(row, col)` of an `[H, W, 3]`
/// slice into `dst`.
fn gather_patch(src: &[Real], width: usize, row: usize, col: usize, dst: &mut Vec<Real>) {
    let (top, left) = (row - PATCH_CENTER, col - PATCH_CENTER);
    for r in top..top + PATCH_SIZE {
        let start = (r * width + left) * CHANNELS;
        dst.extend_from_slice(&src[start..start + PATCH_SIZE * CHANNELS]);
    }
}

fn zero_pad(img: &Tensor, pad: usize) -> Tensor {
    let s = img.shape();
    let (h, w) = (s[0], s[1]);
    let pw = w + 2 * pad;
    let mut out = vec![0.0; (h + 2 * pad) * pw * CHANNELS];
    for r in 0..h {
        let dst = ((r + pad) * pw + pad) * CHANNELS;
        out[dst..dst + w * CHANNELS].copy_from_slice(&img.as_slice()[r * w * CHANNELS..(r + 1) * w * CHANNELS]);
    }
    Tensor::from_parts(vec![h + 2 * pad, pw, CHANNELS], out)
}

/// Classifies every center of a 256×256 image. Results do not depend on
/// `batch` or on the model's execution policy.
pub fn predict_image(img: &FundusImage, model: &Model, mode: InferenceMode, batch: usize) -> Result<PredictionMask> {
    if (img.height(), img.width()) != (WORKING_SIZE, WORKING_SIZE) {
        return Err(Error::ExtentMismatch(format!(
            "{}: prediction needs a 256×256 image, got {}×{}",
            img.id,
            img.height(),
            img.width()
        )));
    }
    if batch == 0 {
        return Err(Error::InvalidConfig("inference batch must be >= 1".into()));
    }
    let source = match mode {
        InferenceMode::Valid => img.pixels.clone(),
        InferenceMode::Padded => zero_pad(&img.pixels, PATCH_CENTER),
    };
    let width = source.shape()[1];
    let extent = mode.extent();
    let total = extent * extent;
    let chunks = total.div_ceil(batch);
    let src = source.as_slice();
    let results = par::map_range(model.exec(), chunks, |chunk| -> Result<Vec<Real>> {
        let lo = chunk * batch;
        let hi = (lo + batch).min(total);
        let mut x = Vec::with_capacity((hi - lo) * PATCH_SIZE * PATCH_SIZE * CHANNELS);
        for k in lo..hi {
            // mask (i, j) ↔ center (i + 16, j + 16) in the (padded) source
            let (i, j) = (k / extent, k % extent);
            gather_patch(src, width, i + PATCH_CENTER, j + PATCH_CENTER, &mut x);
        }
        let x = Tensor::from_parts(vec![hi - lo, PATCH_SIZE, PATCH_SIZE, CHANNELS], x);
        let logits = model.predict(&x)?;
        Ok(logits.as_slice().chunks_exact(2).map(exudate_probability).collect())
    });
    let mut probability = Vec::with_capacity(total);
    for r in results {
        probability.extend(r?);
    }
    let probability = Tensor::new(vec![extent, extent], probability)?;
    let mask = BinaryMask::new(
        extent,
        extent,
        probability.as_slice().iter().map(|&p| (p > 0.5) as u8).collect(),
    )?;
    Ok(PredictionMask { mode, mask, probability })
}

/// Output file names for an input stem: `{stem}_{mode}_{mask|overlay|prob}.png`.
pub fn output_paths(dir: &Path, stem: &str, mode: InferenceMode) -> [PathBuf; 3] {
    let m = mode.as_str();
    [
        dir.join(format!("{stem}_{m}_mask.png")),
        dir.join(format!("{stem}_{m}_overlay.png")),
        dir.join(format!("{stem}_{m}_prob.png")),
    ]
}

/// Mask as an 8-bit grayscale PNG: 0 for background, 255 for exudate.
pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    write_gray_png(
        path,
        mask.height(),
        mask.width(),
        mask.as_slice().iter().map(|&v| v * 255).collect(),
    )
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    Ok(load_mask(path)?.mask)
}

pub fn write_probability(pm: &PredictionMask, path: &Path) -> Result<()> {
    let e = pm.mask.height();
    write_gray_png(path, e, e, pm.probability.as_slice().iter().map(|&p| to_level(p)).collect())
}

/// Highlight color painted over predicted exudate pixels.
pub const OVERLAY_COLOR: [u8; 3] = [0, 255, 0];

/// The image region covered by the prediction (cropped in valid mode) with
/// exudate pixels painted in [`OVERLAY_COLOR`].
pub fn overlay(img: &FundusImage, pm: &PredictionMask, path: &Path) -> Result<()> {
    let e = pm.mask.height();
    let (top, left) = pm.origin();
    let mut out = Vec::with_capacity(e * e * CHANNELS);
    for i in 0..e {
        for j in 0..e {
            if pm.mask.get(i, j) == 1 {
                out.extend_from_slice(&OVERLAY_COLOR);
            } else {
                for ch in 0..CHANNELS {
                    out.push(to_level(img.pixels.at(&[i + top, j + left, ch])));
                }
            }
        }
    }
    write_rgb_png(path, e, e, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::rng::Rng;

    fn constant_model(bias: [Real; 2]) -> Model {
        let mut model = Model::new(ModelConfig::tiny(), &Rng::new(0)).unwrap();
        let last = model.layers().len() - 1;
        let dense = &mut model.layers_mut()[last];
        assert_eq!(dense.kind(), "dense");
        for p in dense.params_mut() {
            if p.name == "weight" {
                p.value.fill(0.0);
            } else {
                p.value = Tensor::new(vec![2], bias.to_vec()).unwrap();
            }
        }
        model
    }

    fn image(seed: u64) -> FundusImage {
        let t = Rng::new(seed).uniform_tensor(&[256, 256, 3], 0.0, 1.0).unwrap();
        FundusImage::new("img", t).unwrap()
    }

    #[test]
    fn constant_model_gives_constant_mask() {
        let img = image(1);
        let pm = predict_image(&img, &constant_model([0.0, 1.0]), InferenceMode::Valid, 512).unwrap();
        assert_eq!(pm.mask.extent(), (224, 224));
        assert_eq!(pm.mask.count_ones(), 224 * 224);
        assert_eq!(exudate_probability(&[0.5, 0.5]), 0.5);
    }

    #[test]
    fn rejects_wrong_extent_and_zero_batch() {
        let model = constant_model([0.0, 0.0]);
        let small = FundusImage::new("s", Tensor::zeros(&[64, 64, 3])).unwrap();
        assert!(predict_image(&small, &model, InferenceMode::Valid, 8).is_err());
        assert!(predict_image(&image(0), &model, InferenceMode::Valid, 0).is_err());
    }

    #[test]
    fn zero_pad_places_image_in_center() {
        let t = Tensor::new(vec![1, 2, 3], (1..=6).map(|v| v as Real).collect()).unwrap();
        let p = zero_pad(&t, 1);
        assert_eq!(p.shape(), &[3, 4, 3]);
        assert_eq!(p.at(&[1, 1, 0]), 1.0);
        assert_eq!(p.at(&[1, 2, 2]), 6.0);
        assert_eq!(p.at(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BinaryMask::zeros(224, 224);
        m.set(3, 7, true);
        m.set(223, 0, true);
        let path = dir.path().join("m.png");
        write_mask(&m, &path).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
        let (_, _, raw) = crate::dataset::read_gray_png(&path).unwrap();
        assert_eq!(raw[3 * 224 + 7], 255);
        assert_eq!(raw[0], 0);
    }

    #[test]
    fn all_zero_mask_is_black() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.png");
        write_mask(&BinaryMask::zeros(224, 224), &path).unwrap();
        let (h, w, raw) = crate::dataset::read_gray_png(&path).unwrap();
        assert_eq!((h, w), (224, 224));
        assert!(raw.iter().all(|&v| v == 0));
    }

    #[test]
    fn overlay_paints_exudates() {
        let dir = tempfile::tempdir().unwrap();
        let img = image(2);
        let mut mask = BinaryMask::zeros(224, 224);
        mask.set(0, 0, true);
        let pm = PredictionMask {
            mode: InferenceMode::Valid,
            probability: mask.to_tensor(),
            mask,
        };
        let path = dir.path().join("o.png");
        overlay(&img, &pm, &path).unwrap();
        let rgb = image::open(&path).unwrap().to_rgb8();
        assert_eq!(rgb.dimensions(), (224, 224));
        assert_eq!(rgb.get_pixel(0, 0).0, OVERLAY_COLOR);
        let want: Vec<u8> = (0..3).map(|ch| to_level(img.pixels.at(&[16, 17, ch]))).collect();
        assert_eq!(rgb.get_pixel(1, 0).0.to_vec(), want);
    }
}
