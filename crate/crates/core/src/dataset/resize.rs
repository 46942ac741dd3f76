use crate::error::Result;
use crate::tensor::{Real, Tensor};
use crate::WORKING_SIZE;

use super::{from_level, to_level, BinaryMask, FundusImage, GroundTruthMask};

/// Source coordinate and weight pairs along one axis, using pixel-center
/// alignment: `src = (dst + 0.5)·in/out − 0.5`, clamped to the edge.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, Real)> {
    let scale = input as Real / output as Real;
    (0..output)
        .map(|d| {
            let s = ((d as Real + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as Real);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, s - lo as Real)
        })
        .collect()
}

fn nearest_index(d: usize, input: usize, output: usize) -> usize {
    // floor((d + 0.5)·in/out) in exact integer arithmetic
    (((2 * d + 1) * input) / (2 * output)).min(input - 1)
}

/// Bilinear resize of an `[H, W, C]` tensor.
pub fn resize_bilinear(pixels: &Tensor, height: usize, width: usize) -> Tensor {
    let s = pixels.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    if (h, w) == (height, width) {
        return pixels.clone();
    }
    let rows = bilinear_taps(h, height);
    let cols = bilinear_taps(w, width);
    let src = pixels.as_slice();
    let at = |r: usize, col: usize, ch: usize| src[(r * w + col) * c + ch];
    let mut out = Vec::with_capacity(height * width * c);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            for ch in 0..c {
                let top = at(r0, c0, ch) * (1.0 - fx) + at(r0, c1, ch) * fx;
                let bottom = at(r1, c0, ch) * (1.0 - fx) + at(r1, c1, ch) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::from_parts(vec![height, width, c], out)
}

pub fn resize_nearest(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    if mask.extent() == (height, width) {
        return mask.clone();
    }
    let mut out = BinaryMask::zeros(height, width);
    for r in 0..height {
        let sr = nearest_index(r, mask.height(), height);
        for c in 0..width {
            let sc = nearest_index(c, mask.width(), width);
            out.set(r, c, mask.get(sr, sc) == 1);
        }
    }
    out
}

/// Bilinear resize to 256×256, rounded to 8-bit levels so patches can be
/// stored losslessly as bytes.
pub fn resize_to_working(img: &FundusImage) -> Result<FundusImage> {
    let resized = resize_bilinear(&img.pixels, WORKING_SIZE, WORKING_SIZE);
    let quantized = resized.map(|v| from_level(to_level(v)))?;
    Ok(FundusImage {
        id: img.id.clone(),
        pixels: quantized,
        original: img.original,
    })
}

/// Nearest-neighbor resize to 256×256; the result stays binary.
pub fn resize_mask(mask: &GroundTruthMask) -> GroundTruthMask {
    GroundTruthMask {
        id: mask.id.clone(),
        mask: resize_nearest(&mask.mask, WORKING_SIZE, WORKING_SIZE),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn working_size_input_is_unchanged() {
        let mut rng = Rng::new(1);
        let data = (0..256 * 256 * 3).map(|_| from_level(rng.below(256) as u8)).collect();
        let img = FundusImage::new("a", Tensor::new(vec![256, 256, 3], data).unwrap()).unwrap();
        assert!(resize_to_working(&img).unwrap().pixels.bit_eq(&img.pixels));
    }

    #[test]
    fn constant_image_stays_constant() {
        let v = from_level(77);
        let img = FundusImage::new("a", Tensor::full(&[512, 512, 3], v)).unwrap();
        let out = resize_to_working(&img).unwrap();
        assert_eq!(out.pixels.shape(), &[256, 256, 3]);
        assert!(out.pixels.as_slice().iter().all(|&p| p == v));
        assert_eq!(out.original, (512, 512));
    }

    #[test]
    fn bilinear_downscale_by_two_averages_pairs() {
        // 4 → 2 samples at source 0.5 and 2.5
        let t = Tensor::new(vec![1, 4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = resize_bilinear(&t, 1, 2);
        assert_eq!(r.as_slice(), &[0.5, 2.5]);
    }

    #[test]
    fn nearest_mapping_matches_formula() {
        for (input, output) in [(512, 256), (300, 256), (256, 512), (1000, 256)] {
            for d in 0..output {
                let want = (((d as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1);
                assert_eq!(nearest_index(d, input, output), want);
            }
        }
    }

    #[test]
    fn single_pixel_mask_stays_binary() {
        for (r, c) in [(0, 0), (101, 57), (100, 100), (511, 511), (250, 3)] {
            let mut m = BinaryMask::zeros(512, 512);
            m.set(r, c, true);
            let gt = GroundTruthMask { id: "m".into(), mask: m };
            let out = resize_mask(&gt);
            assert_eq!(out.mask.extent(), (256, 256));
            assert!(out.mask.as_slice().iter().all(|&v| v <= 1));
            // 512→256 samples odd source indices only
            let expected = usize::from(r % 2 == 1 && c % 2 == 1);
            assert_eq!(out.mask.count_ones(), expected);
        }
    }
}
