use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::{PATCH_CENTER, VALID_EXTENT, WORKING_SIZE};

use super::{Class, FundusImage, GroundTruthMask, PatchRecord, PatchSet, Provenance};

/// Recorded when a class partition cannot supply `requested` distinct centers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionWarning {
    pub image: String,
    pub class: Class,
    pub available: usize,
    pub requested: usize,
    /// `true` when the shortfall was covered by sampling with replacement;
    /// `false` when the partition was empty and no patches were produced.
    pub with_replacement: bool,
}

/// Every center whose 32×32 patch fits inside the working image, in
/// row-major order: rows and columns `16..240`, 50176 in total.
pub fn valid_centers() -> impl Iterator<Item = (usize, usize)> {
    let range = PATCH_CENTER..PATCH_CENTER + VALID_EXTENT;
    range.clone().flat_map(move |r| range.clone().map(move |c| (r, c)))
}

fn sample(
    candidates: &[(usize, usize)],
    per_class: usize,
    rng: &mut Rng,
) -> (Vec<(usize, usize)>, bool) {
    if candidates.is_empty() || per_class == 0 {
        return (Vec::new(), false);
    }
    if candidates.len() >= per_class {
        // partial Fisher–Yates: the first `per_class` slots end up uniform
        let mut pool = candidates.to_vec();
        for i in 0..per_class {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(per_class);
        (pool, false)
    } else {
        let picks = (0..per_class)
            .map(|_| candidates[rng.below(candidates.len())])
            .collect();
        (picks, true)
    }
}

/// Draws `per_class` background and `per_class` exudate patches from a
/// 256×256 image/mask pair.
///
/// Records are ordered background first, then exudate. Shortfalls are
/// returned as warnings in the provenance rather than failing.
pub fn extract_balanced(
    img: &FundusImage,
    mask: &GroundTruthMask,
    per_class: usize,
    rng: &mut Rng,
) -> Result<PatchSet> {
    let working = (WORKING_SIZE, WORKING_SIZE);
    if (img.height(), img.width()) != working || mask.mask.extent() != working {
        return Err(Error::ExtentMismatch(format!(
            "{}: extraction needs 256×256 inputs, got image {}×{} and mask {:?}",
            img.id,
            img.height(),
            img.width(),
            mask.mask.extent()
        )));
    }
    let (mut background, mut exudate) = (Vec::new(), Vec::new());
    for (r, c) in valid_centers() {
        if mask.mask.get(r, c) == 1 {
            exudate.push((r, c));
        } else {
            background.push((r, c));
        }
    }

    let mut set = PatchSet {
        records: Vec::with_capacity(2 * per_class),
        sources: vec![img.id.clone()],
        provenance: Provenance {
            seed: 0,
            per_class,
            warnings: Vec::new(),
        },
    };
    for (class, candidates) in [(Class::Background, &background), (Class::Exudate, &exudate)] {
        let (centers, with_replacement) = sample(candidates, per_class, rng);
        if candidates.len() < per_class {
            let w = ExtractionWarning {
                image: img.id.clone(),
                class,
                available: candidates.len(),
                requested: per_class,
                with_replacement,
            };
            if with_replacement {
                warn!(
                    "{}: only {} {:?} centers for {} patches; sampling with replacement",
                    w.image, w.available, class, per_class
                );
            } else {
                warn!("{}: no {:?} centers; extracting 0 patches of that class", w.image, class);
            }
            set.provenance.warnings.push(w);
        }
        set.records.extend(centers.into_iter().map(|(r, c)| PatchRecord {
            pixels: img.patch_bytes(r, c),
            label: class,
            source: 0,
            center: (r as u16, c as u16),
        }));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BinaryMask;
    use crate::tensor::Tensor;
    use std::collections::HashSet;

    fn image() -> FundusImage {
        let mut rng = Rng::new(9);
        let t = rng.uniform_tensor(&[256, 256, 3], 0.0, 1.0).unwrap();
        let q = t.map(|v| (v * 255.0).round() / 255.0).unwrap();
        FundusImage::new("img", q).unwrap()
    }

    fn mask(ones: &[(usize, usize)]) -> GroundTruthMask {
        let mut m = BinaryMask::zeros(256, 256);
        for &(r, c) in ones {
            m.set(r, c, true);
        }
        GroundTruthMask { id: "img".into(), mask: m }
    }

    #[test]
    fn candidate_universe_has_50176_centers() {
        let all: Vec<_> = valid_centers().collect();
        assert_eq!(all.len(), 50176);
        assert_eq!(all[0], (16, 16));
        assert_eq!(all[1], (16, 17));
        assert_eq!(*all.last().unwrap(), (239, 239));
    }

    #[test]
    fn empty_mask_yields_background_only() {
        let set = extract_balanced(&image(), &mask(&[]), 10, &mut Rng::new(1)).unwrap();
        assert_eq!(set.class_counts().background, 10);
        assert_eq!(set.class_counts().exudate, 0);
        assert_eq!(set.provenance.warnings.len(), 1);
        assert!(!set.provenance.warnings[0].with_replacement);
        assert_eq!(set.provenance.warnings[0].class, Class::Exudate);
    }

    #[test]
    fn single_exudate_pixel_is_resampled() {
        let set = extract_balanced(&image(), &mask(&[(100, 100)]), 3, &mut Rng::new(1)).unwrap();
        let ex: Vec<_> = set.records.iter().filter(|r| r.label == Class::Exudate).collect();
        assert_eq!(ex.len(), 3);
        assert!(ex.iter().all(|r| r.center == (100, 100)));
        assert!(set.provenance.warnings[0].with_replacement);
    }

    #[test]
    fn border_exudates_are_not_candidates() {
        // (5,5) and (240,100) lie outside the valid center range
        let set = extract_balanced(&image(), &mask(&[(5, 5), (240, 100)]), 2, &mut Rng::new(1)).unwrap();
        assert_eq!(set.class_counts().exudate, 0);
    }

    #[test]
    fn full_quota_has_unique_centers() {
        let ones: Vec<_> = (16..240).flat_map(|r| (16..40).map(move |c| (r, c))).collect();
        let set = extract_balanced(&image(), &mask(&ones), 2500, &mut Rng::new(4)).unwrap();
        let counts = set.class_counts();
        assert_eq!((counts.background, counts.exudate), (2500, 2500));
        for class in [Class::Background, Class::Exudate] {
            let centers: HashSet<_> = set.records.iter().filter(|r| r.label == class).map(|r| r.center).collect();
            assert_eq!(centers.len(), 2500);
        }
        assert!(set.provenance.warnings.is_empty());
    }

    #[test]
    fn records_recrop_and_agree_with_mask() {
        let img = image();
        let m = mask(&[(30, 30), (31, 30), (200, 17)]);
        let set = extract_balanced(&img, &m, 50, &mut Rng::new(2)).unwrap();
        for r in &set.records {
            let (row, col) = (r.center.0 as usize, r.center.1 as usize);
            assert!((16..240).contains(&row) && (16..240).contains(&col));
            assert_eq!(r.label == Class::Exudate, m.mask.get(row, col) == 1);
            let patch = r.pixels_tensor();
            for ch in 0..3 {
                assert_eq!(patch.at(&[16, 16, ch]), img.pixels.at(&[row, col, ch]));
                assert_eq!(patch.at(&[0, 0, ch]), img.pixels.at(&[row - 16, col - 16, ch]));
                assert_eq!(patch.at(&[31, 31, ch]), img.pixels.at(&[row + 15, col + 15, ch]));
            }
        }
    }

    #[test]
    fn same_seed_same_records() {
        let img = image();
        let m = mask(&[(50, 50), (60, 60), (70, 70)]);
        let a = extract_balanced(&img, &m, 20, &mut Rng::new(8)).unwrap();
        let b = extract_balanced(&img, &m, 20, &mut Rng::new(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_extent_rejected() {
        let img = FundusImage::new("x", Tensor::zeros(&[128, 128, 3])).unwrap();
        assert!(extract_balanced(&img, &mask(&[]), 1, &mut Rng::new(0)).is_err());
    }
}
