//! Generated fundus-like data for smoke tests, demos and benchmarks.
//!
//! Backgrounds are dark reddish-brown with mild noise; lesions are bright
//! yellow discs. The two classes are linearly separable at the patch center.

use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::{CHANNELS, PATCH_CENTER, PATCH_SIZE};

use super::{from_level, to_level, BinaryMask, Class, FundusImage, GroundTruthMask, PatchRecord, PatchSet, Provenance};

const BACKGROUND: [Real; 3] = [0.35, 0.15, 0.05];
const LESION: [Real; 3] = [0.95, 0.85, 0.25];
const NOISE: Real = 0.04;

fn background_pixel(rng: &mut Rng) -> [Real; 3] {
    let mut p = BACKGROUND;
    for v in &mut p {
        *v = (*v + rng.uniform(-NOISE, NOISE)).clamp(0.0, 1.0);
    }
    p
}

/// `count` patches alternating background / exudate; exudate patches carry
/// a yellow disc of radius 3–6 over the center pixel.
pub fn blob_patches(count: usize, seed: u64) -> PatchSet {
    let mut rng = Rng::new(seed);
    let records = (0..count)
        .map(|i| {
            let label = if i % 2 == 0 { Class::Background } else { Class::Exudate };
            let radius = 3.0 + 3.0 * rng.next_f64() as Real;
            let (dy, dx) = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
            let mut pixels = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE * CHANNELS);
            for r in 0..PATCH_SIZE {
                for c in 0..PATCH_SIZE {
                    let mut p = background_pixel(&mut rng);
                    let d2 = (r as Real - PATCH_CENTER as Real - dy).powi(2)
                        + (c as Real - PATCH_CENTER as Real - dx).powi(2);
                    if label == Class::Exudate && d2 <= radius * radius {
                        p = LESION;
                    }
                    pixels.extend(p.iter().map(|&v| to_level(v)));
                }
            }
            PatchRecord {
                pixels,
                label,
                source: 0,
                center: (PATCH_CENTER as u16, PATCH_CENTER as u16),
            }
        })
        .collect();
    PatchSet {
        records,
        sources: vec![format!("synthetic-{seed}")],
        provenance: Provenance {
            seed,
            per_class: count / 2,
            warnings: Vec::new(),
        },
    }
}

/// A `size×size` image with `lesions` yellow discs and its exact mask.
pub fn fundus_pair(id: &str, size: usize, lesions: usize, seed: u64) -> (FundusImage, GroundTruthMask) {
    let mut rng = Rng::new(seed);
    let discs: Vec<(Real, Real, Real)> = (0..lesions)
        .map(|_| {
            let margin = size as Real * 0.15;
            (
                rng.uniform(margin, size as Real - margin),
                rng.uniform(margin, size as Real - margin),
                rng.uniform(2.0, size as Real / 40.0 + 3.0),
            )
        })
        .collect();
    let mut data = Vec::with_capacity(size * size * CHANNELS);
    let mut mask = BinaryMask::zeros(size, size);
    for r in 0..size {
        for c in 0..size {
            let inside = discs
                .iter()
                .any(|&(cy, cx, rad)| (r as Real - cy).powi(2) + (c as Real - cx).powi(2) <= rad * rad);
            let p = if inside { LESION } else { background_pixel(&mut rng) };
            data.extend(p.iter().map(|&v| from_level(to_level(v))));
            mask.set(r, c, inside);
        }
    }
    let img = FundusImage::new(id, Tensor::from_parts(vec![size, size, CHANNELS], data))
        .expect("synthetic image has valid extents");
    (
        img,
        GroundTruthMask {
            id: id.into(),
            mask,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = blob_patches(10, 1);
        assert_eq!(a.class_counts().background, 5);
        assert_eq!(a, blob_patches(10, 1));
        let center = (PATCH_CENTER * PATCH_SIZE + PATCH_CENTER) * CHANNELS;
        for r in &a.records {
            let bright = r.pixels[center] > 200;
            assert_eq!(bright, r.label == Class::Exudate);
        }
    }

    #[test]
    fn fundus_pair_mask_matches_color() {
        let (img, gt) = fundus_pair("x", 64, 3, 2);
        assert!(gt.mask.count_ones() > 0);
        for r in 0..64 {
            for c in 0..64 {
                let bright = img.pixels.at(&[r, c, 1]) > 0.5;
                assert_eq!(bright, gt.mask.get(r, c) == 1);
            }
        }
    }
}
