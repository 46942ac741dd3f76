use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::{CHANNELS, PATCH_SIZE};

use super::{Class, ClassCounts, PatchRecord, PatchSet, Provenance};

pub const PATCHSET_MAGIC: &[u8; 4] = b"EXPS";
pub const PATCHSET_VERSION: u32 = 1;

const PIXELS: usize = PATCH_SIZE * PATCH_SIZE * CHANNELS;
// label u8, source u32, row u16, col u16, pixels
const RECORD_BYTES: usize = 1 + 4 + 2 + 2 + PIXELS;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    patch_size: usize,
    channels: usize,
    count: usize,
    class_counts: ClassCounts,
    sources: Vec<String>,
    provenance: Provenance,
}

pub fn save_patchset(set: &PatchSet, path: &Path) -> Result<()> {
    let manifest = Manifest {
        patch_size: PATCH_SIZE,
        channels: CHANNELS,
        count: set.len(),
        class_counts: set.class_counts(),
        sources: set.sources.clone(),
        provenance: set.provenance.clone(),
    };
    let mut payload = Vec::with_capacity(set.len() * RECORD_BYTES);
    for r in &set.records {
        debug_assert_eq!(r.pixels.len(), PIXELS);
        payload.push(r.label.index() as u8);
        payload.extend_from_slice(&r.source.to_le_bytes());
        payload.extend_from_slice(&r.center.0.to_le_bytes());
        payload.extend_from_slice(&r.center.1.to_le_bytes());
        payload.extend_from_slice(&r.pixels);
    }
    container::write_file(path, PATCHSET_MAGIC, PATCHSET_VERSION, &manifest, &payload)
}

pub fn load_patchset(path: &Path) -> Result<PatchSet> {
    let (manifest, payload): (Manifest, _) = container::read_file(path, PATCHSET_MAGIC, PATCHSET_VERSION)?;
    let corrupt = |msg: String| Error::Corrupt(format!("{}: {msg}", path.display()));
    if manifest.patch_size != PATCH_SIZE || manifest.channels != CHANNELS {
        return Err(corrupt(format!(
            "patch geometry {}×{}×{} is not supported",
            manifest.patch_size, manifest.patch_size, manifest.channels
        )));
    }
    if payload.len() != manifest.count * RECORD_BYTES {
        return Err(corrupt(format!(
            "payload holds {} bytes, expected {} records",
            payload.len(),
            manifest.count
        )));
    }
    let mut records = Vec::with_capacity(manifest.count);
    for chunk in payload.chunks_exact(RECORD_BYTES) {
        let label = match chunk[0] {
            0 => Class::Background,
            1 => Class::Exudate,
            v => return Err(corrupt(format!("label byte {v}"))),
        };
        let source = u32::from_le_bytes(chunk[1..5].try_into().unwrap());
        if source as usize >= manifest.sources.len() {
            return Err(corrupt(format!("source index {source} out of range")));
        }
        records.push(PatchRecord {
            label,
            source,
            center: (
                u16::from_le_bytes(chunk[5..7].try_into().unwrap()),
                u16::from_le_bytes(chunk[7..9].try_into().unwrap()),
            ),
            pixels: chunk[9..].to_vec(),
        });
    }
    let set = PatchSet {
        records,
        sources: manifest.sources,
        provenance: manifest.provenance,
    };
    if set.class_counts() != manifest.class_counts {
        return Err(corrupt("class counts disagree with labels".into()));
    }
    Ok(set)
}
