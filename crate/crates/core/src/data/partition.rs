use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ClientDataset, DataError, DomainData};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientAssignment {
    pub domain: String,
    pub fraction: f64,
}

/// Client → (domain, sampling fraction). Client ids are list positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub clients: Vec<ClientAssignment>,
    #[serde(default)]
    pub seed: u64,
    /// Same-domain clients receive non-overlapping shards instead of
    /// independent samples.
    #[serde(default)]
    pub disjoint: bool,
}

impl PartitionPlan {
    /// `counts` clients per domain, in order, each sampling `fraction`.
    pub fn from_counts(counts: &[(&str, usize)], fraction: f64, seed: u64) -> Self {
        let clients = counts
            .iter()
            .flat_map(|(d, n)| {
                std::iter::repeat_with(move || ClientAssignment {
                    domain: d.to_string(),
                    fraction,
                })
                .take(*n)
            })
            .collect();
        Self {
            clients,
            seed,
            disjoint: false,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.clients.is_empty() {
            return Err(DataError::InvalidConfig("partition plan has no clients".into()));
        }
        for c in &self.clients {
            if !(c.fraction > 0.0 && c.fraction <= 1.0) {
                return Err(DataError::InvalidConfig(format!(
                    "fraction {} for domain {} is outside (0, 1]",
                    c.fraction, c.domain
                )));
            }
        }
        Ok(())
    }
}

/// Draws each client's subset of its domain's training split.
///
/// Each client takes `floor(fraction · n)` samples without replacement; a
/// client that would get none is an error.
pub fn partition(domains: &[DomainData], plan: &PartitionPlan) -> Result<Vec<ClientDataset>, DataError> {
    plan.validate()?;
    let mut shard_cursor = vec![0usize; domains.len()];
    let shuffled: Vec<Vec<usize>> = domains
        .iter()
        .enumerate()
        .map(|(d, dom)| {
            let mut order: Vec<usize> = (0..dom.samples.len()).collect();
            order.shuffle(&mut seed::rng(plan.seed, &[0xd15, d as u64]));
            order
        })
        .collect();

    plan.clients
        .iter()
        .enumerate()
        .map(|(k, assign)| {
            let client = k as u32;
            let d = domains
                .iter()
                .position(|dom| *dom.name == *assign.domain)
                .ok_or_else(|| DataError::UnknownDomain(assign.domain.clone()))?;
            let pool = &domains[d].samples;
            let count = (assign.fraction * pool.len() as f64).floor() as usize;
            if count == 0 {
                return Err(DataError::EmptyResult { client });
            }
            let mut picked: Vec<usize> = if plan.disjoint {
                let start = shard_cursor[d];
                if start + count > pool.len() {
                    return Err(DataError::EmptyResult { client });
                }
                shard_cursor[d] += count;
                shuffled[d][start..start + count].to_vec()
            } else {
                let mut rng = seed::rng(plan.seed, &[k as u64]);
                rand::seq::index::sample(&mut rng, pool.len(), count).into_vec()
            };
            picked.sort_unstable();
            let samples = picked.into_iter().map(|i| pool[i].clone()).collect();
            Ok(ClientDataset::new(client, Arc::clone(&domains[d].name), samples))
        })
        .collect()
}
