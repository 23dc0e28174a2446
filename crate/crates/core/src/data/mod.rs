//! Multi-domain datasets: a seeded synthetic generator, the IDX reader for
//! digit-style corpora, and the client partitioner.

mod idx;
mod partition;
mod synthetic;

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::augment::Sample;

pub use idx::{encode_idx, load_idx_domain, pair_idx, parse_idx, IdxArray, LabeledImages, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use partition::{partition, ClientAssignment, PartitionPlan};
pub use synthetic::{gen_synthetic, DomainSpec, SyntheticConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    InvalidConfig(String),
    #[error("bad IDX magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("IDX stream truncated")]
    Truncated,
    #[error("IDX stream has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("client {client} would receive no samples")]
    EmptyResult { client: u32 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// All samples of one domain for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub name: Arc<str>,
    pub samples: Vec<Sample>,
}

impl DomainData {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Train and test data with one entry per domain, same order in both.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplit {
    pub train: Vec<DomainData>,
    pub test: Vec<DomainData>,
}

impl DomainSplit {
    pub fn domain_names(&self) -> Vec<Arc<str>> {
        self.train.iter().map(|d| Arc::clone(&d.name)).collect()
    }
}

/// One client's private data `D_k` with its per-class index `S^m_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: u32,
    pub domain: Arc<str>,
    pub samples: Vec<Sample>,
    pub class_index: BTreeMap<usize, Vec<usize>>,
}

impl ClientDataset {
    pub fn new(client_id: u32, domain: Arc<str>, samples: Vec<Sample>) -> Self {
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            class_index.entry(s.label).or_default().push(i);
        }
        Self {
            client_id,
            domain,
            samples,
            class_index,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.values.len())
    }
}
