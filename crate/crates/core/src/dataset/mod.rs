//! Fundus images, ground-truth masks and labelled patch sets.

mod archive;
mod extract;
mod io;
mod resize;
pub mod synthetic;

pub use archive::{load_patchset, save_patchset, PATCHSET_MAGIC, PATCHSET_VERSION};
pub use extract::{extract_balanced, valid_centers, ExtractionWarning};
pub use io::{find_by_stem, load_image, load_mask, read_gray_png, write_gray_png, write_rgb_png, SUPPORTED_EXTENSIONS};
pub use resize::{resize_bilinear, resize_mask, resize_nearest, resize_to_working};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::{CHANNELS, PATCH_CENTER, PATCH_SIZE};

/// An RGB fundus photograph with values in `[0, 1]`, shape `[H, W, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FundusImage {
    pub id: String,
    pub pixels: Tensor,
    /// `(height, width)` of the file before any resizing.
    pub original: (usize, usize),
}

impl FundusImage {
    pub fn new(id: impl Into<String>, pixels: Tensor) -> Result<Self> {
        match pixels.shape() {
            [h, w, CHANNELS] if *h >= PATCH_SIZE && *w >= PATCH_SIZE => {
                let original = (*h, *w);
                let pixels = pixels.map(|v| v.clamp(0.0, 1.0))?;
                Ok(FundusImage {
                    id: id.into(),
                    pixels,
                    original,
                })
            }
            s => Err(Error::ExtentMismatch(format!(
                "fundus image must be H×W×3 with H,W >= {PATCH_SIZE}, got {s:?}"
            ))),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// The 32×32×3 crop whose local (16,16) element is image `(row, col)`,
    /// as 8-bit levels.
    pub fn patch_bytes(&self, row: usize, col: usize) -> Vec<u8> {
        assert!(
            row >= PATCH_CENTER && col >= PATCH_CENTER,
            "patch center ({row},{col}) too close to the border"
        );
        let (top, left) = (row - PATCH_CENTER, col - PATCH_CENTER);
        assert!(top + PATCH_SIZE <= self.height() && left + PATCH_SIZE <= self.width());
        let w = self.width();
        let px = self.pixels.as_slice();
        let mut out = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE * CHANNELS);
        for r in top..top + PATCH_SIZE {
            let start = (r * w + left) * CHANNELS;
            out.extend(px[start..start + PATCH_SIZE * CHANNELS].iter().map(|&v| to_level(v)));
        }
        out
    }
}

pub fn to_level(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_level(v: u8) -> Real {
    v as Real / 255.0
}

/// A strictly binary `H×W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("BinaryMask", &[height, width], &[data.len()]));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidRange("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Rows `[top, top+height)` and columns `[left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<BinaryMask> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::ExtentMismatch(format!(
                "crop {height}×{width} at ({top},{left}) exceeds {}×{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        for r in top..top + height {
            data.extend_from_slice(&self.data[r * self.width + left..r * self.width + left + width]);
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.height, self.width],
            self.data.iter().map(|&v| v as Real).collect(),
        )
    }

    /// Binarizes a rank-2 tensor at 0.5.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w] => Ok(BinaryMask {
                height: *h,
                width: *w,
                data: t.as_slice().iter().map(|&v| (v >= 0.5) as u8).collect(),
            }),
            s => Err(Error::shape("BinaryMask::from_tensor", &[0, 0], s)),
        }
    }
}

/// Expert annotation: 1 marks hard-exudate pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    pub id: String,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Background,
    Exudate,
}

impl Class {
    pub fn from_mask_value(v: u8) -> Self {
        if v == 1 {
            Class::Exudate
        } else {
            Class::Background
        }
    }

    pub fn index(self) -> usize {
        match self {
            Class::Background => 0,
            Class::Exudate => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Class::Exudate
        } else {
            Class::Background
        }
    }

    /// Background is `[1, 0]`, exudate is `[0, 1]`.
    pub fn one_hot(self) -> [Real; 2] {
        match self {
            Class::Background => [1.0, 0.0],
            Class::Exudate => [0.0, 1.0],
        }
    }
}

/// One labelled 32×32×3 patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRecord {
    /// Row-major `32×32×3` 8-bit levels.
    pub pixels: Vec<u8>,
    pub label: Class,
    /// Index into [`PatchSet::sources`].
    pub source: u32,
    /// `(row, col)` of the labelled pixel in the 256×256 working image.
    pub center: (u16, u16),
}

impl PatchRecord {
    pub fn pixels_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![PATCH_SIZE, PATCH_SIZE, CHANNELS],
            self.pixels.iter().map(|&v| from_level(v)).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub background: usize,
    pub exudate: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.background + self.exudate
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub per_class: usize,
    pub warnings: Vec<ExtractionWarning>,
}

/// An ordered collection of patches with the image ids they came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchSet {
    pub records: Vec<PatchRecord>,
    pub sources: Vec<String>,
    pub provenance: Provenance,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> ClassCounts {
        let mut counts = ClassCounts::default();
        for r in &self.records {
            match r.label {
                Class::Background => counts.background += 1,
                Class::Exudate => counts.exudate += 1,
            }
        }
        counts
    }

    pub fn source_id(&self, record: &PatchRecord) -> &str {
        &self.sources[record.source as usize]
    }

    /// Appends another set, remapping its source indices.
    pub fn extend(&mut self, other: PatchSet) {
        let offset = self.sources.len() as u32;
        self.sources.extend(other.sources);
        self.records.extend(other.records.into_iter().map(|mut r| {
            r.source += offset;
            r
        }));
        self.provenance.warnings.extend(other.provenance.warnings);
    }

    /// Gathers records into an input batch `[N,32,32,3]` and one-hot labels `[N,2]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let plen = PATCH_SIZE * PATCH_SIZE * CHANNELS;
        let mut x = Vec::with_capacity(indices.len() * plen);
        let mut y = Vec::with_capacity(indices.len() * 2);
        for &i in indices {
            let r = &self.records[i];
            x.extend(r.pixels.iter().map(|&v| from_level(v)));
            y.extend_from_slice(&r.label.one_hot());
        }
        (
            Tensor::from_parts(vec![indices.len(), PATCH_SIZE, PATCH_SIZE, CHANNELS], x),
            Tensor::from_parts(vec![indices.len(), 2], y),
        )
    }
}
