//! IDX container format: big-endian magic `0x0000_08NN` (u8 payload, `NN`
//! dimensions), `NN` big-endian u32 sizes, then the raw bytes.

use std::path::Path;
use std::sync::Arc;

use super::{DataError, DomainData};
use crate::augment::{Grid, Sample, Values};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn count(&self) -> usize {
        self.dims[0]
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(DataError::Truncated)
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, DataError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC && magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let header = 4 + 4 * ndim;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or(DataError::Truncated)?;
    let body = &bytes[header..];
    if body.len() < len {
        return Err(DataError::Truncated);
    }
    if body.len() > len {
        return Err(DataError::TrailingBytes(body.len() - len));
    }
    Ok(IdxArray {
        magic,
        dims,
        data: body.to_vec(),
    })
}

/// Serialises an array in IDX layout; inverse of [`parse_idx`].
pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&array.magic.to_be_bytes());
    for d in &array.dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

pub fn pair_idx(images: IdxArray, labels: IdxArray) -> Result<LabeledImages, DataError> {
    if images.magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic(images.magic));
    }
    if labels.magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic(labels.magic));
    }
    if images.count() != labels.count() {
        return Err(DataError::CountMismatch {
            images: images.count(),
            labels: labels.count(),
        });
    }
    Ok(LabeledImages {
        count: images.dims[0],
        rows: images.dims[1],
        cols: images.dims[2],
        pixels: images.data,
        labels: labels.data,
    })
}

impl LabeledImages {
    /// Single-channel grids with pixels scaled to `[0, 1]`.
    pub fn to_samples(&self, domain: &Arc<str>) -> Vec<Sample> {
        let px = self.rows * self.cols;
        (0..self.count)
            .map(|i| Sample {
                values: Values::Grid(Grid::new(
                    self.rows,
                    self.cols,
                    1,
                    self.pixels[i * px..(i + 1) * px]
                        .iter()
                        .map(|p| f64::from(*p) / 255.0)
                        .collect(),
                )),
                label: self.labels[i] as usize,
                domain: Arc::clone(domain),
            })
            .collect()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_idx_domain(name: &str, images: &Path, labels: &Path) -> Result<DomainData, DataError> {
    let pair = pair_idx(parse_idx(&read_file(images)?)?, parse_idx(&read_file(labels)?)?)?;
    let name: Arc<str> = Arc::from(name);
    Ok(DomainData {
        samples: pair.to_samples(&name),
        name,
    })
}
