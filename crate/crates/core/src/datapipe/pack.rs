//! The packed dataset file.
//!
//! Layout: `WOODSET1`, a little-endian `u32` header length, the header as
//! canonical JSON, one `u8` label per sample, then every sample's pixels as
//! planar `C × H × W` bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prepare::CropMode;
use super::{Normalization, Split};
use crate::error::{Error, Result};

pub const PACK_MAGIC: &[u8; 8] = b"WOODSET1";
const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl SplitIndices {
    pub fn get(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackHeader {
    pub class_names: Vec<String>,
    pub crop_mode: CropMode,
    pub image_size: usize,
    pub sample_count: usize,
    pub replicas: u32,
    pub seed: u64,
    pub splits: SplitIndices,
    pub normalization: Normalization,
}

impl PackHeader {
    pub fn sample_bytes(&self) -> usize {
        CHANNELS * self.image_size * self.image_size
    }

    fn validate(&self) -> Result<()> {
        let n = self.sample_count;
        if self.class_names.is_empty() || self.class_names.len() > 256 {
            return Err(Error::Config(format!("pack declares {} classes", self.class_names.len())));
        }
        if self.image_size == 0 {
            return Err(Error::Config("pack image size is zero".into()));
        }
        let mut seen = vec![false; n];
        for split in Split::ALL {
            for &i in self.splits.get(split) {
                let i = i as usize;
                if i >= n || seen[i] {
                    return Err(Error::Config(format!(
                        "split lists are not a partition: index {i} in {split}"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("split lists do not cover every sample".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPack {
    pub header: PackHeader,
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl DatasetPack {
    pub fn new(header: PackHeader, labels: Vec<u8>, pixels: Vec<u8>) -> Result<Self> {
        header.validate()?;
        let n = header.sample_count;
        if labels.len() != n || pixels.len() != n * header.sample_bytes() {
            return Err(Error::Config(format!(
                "pack holds {} labels and {} pixel bytes for {n} samples",
                labels.len(),
                pixels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= header.class_names.len()) {
            return Err(Error::Label {
                index,
                label: label as usize,
                classes: header.class_names.len(),
            });
        }
        Ok(Self { header, labels, pixels })
    }

    pub fn len(&self) -> usize {
        self.header.sample_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [CHANNELS, self.header.image_size, self.header.image_size]
    }

    pub fn sample(&self, i: usize) -> &[u8] {
        let b = self.header.sample_bytes();
        &self.pixels[i * b..(i + 1) * b]
    }

    pub fn split(&self, split: Split) -> &[u32] {
        self.header.splits.get(split)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.header.class_names.len()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = canonical_json(&self.header)?;
        let mut out = Vec::with_capacity(12 + header.len() + self.labels.len() + self.pixels.len());
        out.extend_from_slice(PACK_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.labels);
        out.extend_from_slice(&self.pixels);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body_start) = read_framed_header::<PackHeader>(bytes, PACK_MAGIC)?;
        let n = header.sample_count;
        let expected = n
            .checked_mul(1 + header.sample_bytes())
            .ok_or_else(|| Error::format(body_start, "sample count overflows"))?;
        let body = &bytes[body_start..];
        if body.len() != expected {
            return Err(Error::format(
                body_start + body.len().min(expected),
                format!("payload is {} bytes, header implies {expected}", body.len()),
            ));
        }
        let (labels, pixels) = body.split_at(n);
        Self::new(header, labels.to_vec(), pixels.to_vec())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Serialize with sorted keys and no whitespace.
pub(crate) fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

/// Parse `magic | u32 length | JSON header`, returning the header and the
/// offset of the first byte after it.
pub(crate) fn read_framed_header<T: for<'de> Deserialize<'de>>(bytes: &[u8], magic: &[u8; 8]) -> Result<(T, usize)> {
    if bytes.len() < magic.len() {
        return Err(Error::format(bytes.len(), "file shorter than its magic"));
    }
    if let Some(i) = bytes.iter().zip(magic).position(|(a, b)| a != b) {
        return Err(Error::format(i, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let len_bytes = bytes
        .get(8..12)
        .ok_or_else(|| Error::format(bytes.len(), "truncated header length"))?;
    let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let header = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::format(bytes.len(), format!("truncated header, declared {len} bytes")))?;
    let parsed = serde_json::from_slice(header).map_err(|e| Error::format(12, format!("bad header: {e}")))?;
    Ok((parsed, 12 + len))
}
