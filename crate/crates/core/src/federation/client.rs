use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::FederationError;
use crate::augment::{make_views, AugmentPolicy, Sample};
use crate::data::ClientDataset;
use crate::loss::{apc_loss, cross_entropy, fedproto_reg, total_loss, ApcTarget, BaselineMode, LossConfig};
use crate::model::{Model, ModelConfig};
use crate::prototype::{local_prototypes, mean_feature, MeanFeature, Owner, PrototypeSet};
use crate::seed;
use crate::tensor::{GradTape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 2,
            learning_rate: 0.01,
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        if self.batch_size == 0 {
            return Err(FederationError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(FederationError::InvalidConfig("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Mean per-step loss terms of one local training call.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainStats {
    pub ce: f64,
    /// Contrastive loss, or the prototype regulariser in FedProto mode.
    pub apc: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub params: Vec<f64>,
    pub prototypes: PrototypeSet,
    pub dataset_size: u32,
    pub stats: TrainStats,
}

/// Anything that can answer a broadcast with an update.
pub trait LocalTrainer: Send {
    fn client_id(&self) -> u32;

    fn train(&mut self, round: u32, params: &[f64], globals: &PrototypeSet) -> Result<ClientUpdate, FederationError>;
}

/// A client holding private data and the local objective configuration.
#[derive(Debug, Clone)]
pub struct FedClient {
    pub data: ClientDataset,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentPolicy,
    pub train: TrainConfig,
    pub seed: u64,
}

fn batch_matrix(rows: &[&Sample], dim: usize) -> Result<Tensor, FederationError> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for s in rows {
        data.extend_from_slice(s.values.as_slice());
    }
    Ok(Tensor::matrix(rows.len(), dim, data)?)
}

/// Row-wise mean of equally shaped feature matrices.
fn mean_of(parts: &[Tensor]) -> Result<Tensor, FederationError> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc = acc.add(p)?;
    }
    Ok(if parts.len() == 1 {
        acc
    } else {
        acc.scale(1.0 / parts.len() as f64)
    })
}

impl FedClient {
    /// Runs local epochs from `params`, then recomputes local prototypes.
    pub fn local_training(
        &self,
        round: u32,
        params: &[f64],
        globals: &PrototypeSet,
    ) -> Result<ClientUpdate, FederationError> {
        self.train.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.data.is_empty() {
            return Err(FederationError::ZeroWeight(self.data.client_id));
        }
        let mut model = Model::unflatten(&self.model, params)?;
        let dim = self.model.input_dim;
        let n_views = self.augment.num_views;
        let have_globals = !globals.is_empty();
        let apc_on = self.loss.apc_enabled && have_globals;
        let reg_on = self.loss.baseline_mode == BaselineMode::Fedproto && have_globals;
        let all_views = apc_on || reg_on;
        let r = u64::from(round);

        let mut stats = TrainStats::default();
        for epoch in 0..self.train.local_epochs as u64 {
            let mut order: Vec<usize> = (0..self.data.len()).collect();
            order.shuffle(&mut seed::rng(self.seed, &[r, epoch, 1]));
            for (b, chunk) in order.chunks(self.train.batch_size).enumerate() {
                let mut view_rng = seed::rng(self.seed, &[r, epoch, 2, b as u64]);
                let views = chunk
                    .iter()
                    .map(|&i| make_views(&self.data.samples[i], &self.augment, &mut view_rng))
                    .collect::<Result<Vec<_>, _>>()?;
                let labels: Vec<usize> = chunk.iter().map(|&i| self.data.samples[i].label).collect();

                let tape = GradTape::begin()?;
                let bound = model.bind(&tape)?;
                let used = if all_views { n_views } else { 1 };
                let feats = (0..used)
                    .map(|v| {
                        let rows: Vec<&Sample> = views.iter().map(|vs| &vs[v]).collect();
                        Ok(bound.encode(&batch_matrix(&rows, dim)?)?)
                    })
                    .collect::<Result<Vec<_>, FederationError>>()?;

                let ce = cross_entropy(&bound.classify(&feats[0])?, &labels)?;
                let aux = if apc_on {
                    match self.loss.apc_target {
                        ApcTarget::Views => {
                            let refs: Vec<&Tensor> = feats.iter().collect();
                            let stacked = Tensor::concat_rows(&refs)?;
                            let stacked_labels: Vec<usize> = (0..used).flat_map(|_| labels.iter().copied()).collect();
                            apc_loss(&stacked, &stacked_labels, globals, self.loss.temperature)?.value
                        }
                        ApcTarget::MeanFeature => apc_loss(&mean_of(&feats)?, &labels, globals, self.loss.temperature)?.value,
                    }
                } else if reg_on {
                    fedproto_reg(&mean_of(&feats)?, &labels, globals, self.loss.fedproto_weight)?
                } else {
                    Tensor::scalar(0.0)
                };
                let total = total_loss(&ce, &aux)?;
                stats.ce += ce.item();
                stats.apc += aux.item();
                stats.steps += 1;
                let grads = tape.backward(&total)?;
                model = bound.sgd(&grads, self.train.learning_rate)?;
            }
        }
        if stats.steps > 0 {
            stats.ce /= stats.steps as f64;
            stats.apc /= stats.steps as f64;
        }

        let prototypes = self.prototypes(&model, round)?;
        Ok(ClientUpdate {
            client_id: self.data.client_id,
            params: model.flatten(),
            prototypes,
            dataset_size: self.data.len() as u32,
            stats,
        })
    }

    /// Class means of the per-sample mean view features under `model`.
    pub fn prototypes(&self, model: &Model, round: u32) -> Result<PrototypeSet, FederationError> {
        let dim = self.model.input_dim;
        let mut rng = seed::rng(self.seed, &[u64::from(round), 3]);
        let views = self
            .data
            .samples
            .iter()
            .map(|s| make_views(s, &self.augment, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let feats = (0..self.augment.num_views)
            .map(|v| {
                let rows: Vec<&Sample> = views.iter().map(|vs| &vs[v]).collect();
                Ok(model.encode(&batch_matrix(&rows, dim)?)?)
            })
            .collect::<Result<Vec<_>, FederationError>>()?;
        let means = (0..self.data.len())
            .map(|i| {
                let rows: Vec<&[f64]> = feats.iter().map(|f| f.row(i)).collect();
                mean_feature(&rows, i)
            })
            .collect::<Result<Vec<MeanFeature>, _>>()?;
        let labels: Vec<usize> = self.data.samples.iter().map(|s| s.label).collect();
        Ok(local_prototypes(&means, &labels, Owner::Client(self.data.client_id))?)
    }
}

impl LocalTrainer for FedClient {
    fn client_id(&self) -> u32 {
        self.data.client_id
    }

    fn train(&mut self, round: u32, params: &[f64], globals: &PrototypeSet) -> Result<ClientUpdate, FederationError> {
        self.local_training(round, params, globals)
    }
}
