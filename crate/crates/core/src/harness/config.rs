use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::augment::AugmentPolicy;
use crate::data::{PartitionPlan, SyntheticConfig};
use crate::federation::{TrainConfig, TransportKind};
use crate::loss::{BaselineMode, LossConfig};
use crate::model::ModelConfig;
use crate::prototype::GlobalAggregation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fedavg,
    Fedproto,
    Fedapc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fedavg => "fedavg",
            Self::Fedproto => "fedproto",
            Self::Fedapc => "fedapc",
        }
    }
}

/// One IDX-backed domain: image and label files for each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxDomain {
    pub name: String,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Idx(Vec<IdxDomain>),
}

fn default_rounds() -> u32 {
    30
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_report_last() -> u32 {
    5
}

/// Everything that determines a run. Sub-seeds are derived from each entry
/// of `seeds`, so the file alone reproduces every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub augment: AugmentPolicy,
    pub data: DataSource,
    pub partition: PartitionPlan,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_report_last")]
    pub report_last: u32,
    #[serde(default)]
    pub aggregation: GlobalAggregation,
    #[serde(default)]
    pub transport: TransportKind,
    /// Loopback port for the TCP transport; 0 picks a free one.
    #[serde(default)]
    pub tcp_port: u16,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| HarnessError::BadConfig {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |path: &str, message: String| {
            Err(HarnessError::BadConfig {
                path: path.into(),
                message,
            })
        };
        if let Err(e) = self.model.validate() {
            return bad("model", e.to_string());
        }
        if let Err(e) = self.loss.validate() {
            return bad("loss", e.to_string());
        }
        if let Err(e) = self.augment.validate() {
            return bad("augment", e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return bad("train", e.to_string());
        }
        if let Err(e) = self.partition.validate() {
            return bad("partition", e.to_string());
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                if let Err(e) = s.validate() {
                    return bad("data.synthetic", e.to_string());
                }
                if s.input_dim != self.model.input_dim {
                    return bad(
                        "model.input_dim",
                        format!("{} does not match synthetic input_dim {}", self.model.input_dim, s.input_dim),
                    );
                }
                if s.num_classes != self.model.num_classes {
                    return bad(
                        "model.num_classes",
                        format!("{} does not match synthetic num_classes {}", self.model.num_classes, s.num_classes),
                    );
                }
            }
            DataSource::Idx(domains) => {
                if domains.is_empty() {
                    return bad("data.idx", "at least one domain is required".into());
                }
            }
        }
        for name in self.domain_names() {
            if name.is_empty() || name.contains(|c: char| c == ',' || c == '"' || c.is_whitespace()) {
                return bad("data", format!("domain name {name:?} must be non-empty without commas, quotes or spaces"));
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        if self.rounds == 0 {
            return bad("rounds", "must be positive".into());
        }
        if self.report_last == 0 || self.report_last > self.rounds {
            return bad("report_last", format!("must lie in 1..={}", self.rounds));
        }
        Ok(())
    }

    pub fn domain_names(&self) -> Vec<String> {
        match &self.data {
            DataSource::Synthetic(s) => s.domains.iter().map(|d| d.name.clone()).collect(),
            DataSource::Idx(d) => d.iter().map(|d| d.name.clone()).collect(),
        }
    }

    /// The config actually trained: method presets override the loss and
    /// augmentation switches they define.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        match self.method {
            Method::Fedavg => {
                c.loss.apc_enabled = false;
                c.loss.baseline_mode = BaselineMode::None;
                c.augment.enabled = false;
            }
            Method::Fedproto => {
                c.loss.apc_enabled = false;
                c.loss.baseline_mode = BaselineMode::Fedproto;
                c.augment.enabled = false;
            }
            Method::Fedapc => {}
        }
        c
    }

    /// The bundled synthetic benchmark: four shifted domains, eight clients.
    pub fn default_synthetic(method: Method) -> Self {
        let data = SyntheticConfig::default();
        let model = ModelConfig::new(data.input_dim, vec![64, 64], 32, data.num_classes, 11);
        let partition = PartitionPlan::from_counts(
            &[("alpha", 2), ("beta", 1), ("gamma", 2), ("delta", 3)],
            DEFAULT_FRACTION,
            13,
        );
        Self {
            method,
            model,
            loss: LossConfig::default(),
            augment: AugmentPolicy {
                erase_fraction: 0.1,
                noise_sigma: 0.3,
                ..AugmentPolicy::default()
            },
            data: DataSource::Synthetic(data),
            partition,
            rounds: default_rounds(),
            // small clients and a shallow MLP need a larger step than 0.01 to converge in 30 rounds
            train: TrainConfig {
                learning_rate: 0.1,
                ..TrainConfig::default()
            },
            seeds: default_seeds(),
            report_last: default_report_last(),
            aggregation: GlobalAggregation::Mean,
            transport: TransportKind::InProc,
            tcp_port: 0,
        }
    }
}

/// Share of its domain's training split each default client samples.
pub const DEFAULT_FRACTION: f64 = 0.05;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_json() {
        let c = ExperimentConfig::default_synthetic(Method::Fedapc);
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.partition.clients.len(), 8);
    }

    #[test]
    fn bad_field_reports_path() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default_synthetic(Method::Fedavg).to_json()).unwrap();
        v["loss"]["temprature"] = 0.3.into();
        match ExperimentConfig::from_json(&v.to_string()) {
            Err(HarnessError::BadConfig { path, .. }) => assert!(path.starts_with("loss"), "{path}"),
            other => panic!("{other:?}"),
        }
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default_synthetic(Method::Fedavg).to_json()).unwrap();
        v["train"]["batch_size"] = "big".into();
        match ExperimentConfig::from_json(&v.to_string()) {
            Err(HarnessError::BadConfig { path, .. }) => assert_eq!(path, "train.batch_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_validation() {
        let mut c = ExperimentConfig::default_synthetic(Method::Fedapc);
        c.seeds.clear();
        assert!(matches!(c.validate(), Err(HarnessError::BadConfig { path, .. }) if path == "seeds"));
        let mut c = ExperimentConfig::default_synthetic(Method::Fedapc);
        c.report_last = 31;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default_synthetic(Method::Fedapc);
        c.model.input_dim = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn presets() {
        let avg = ExperimentConfig::default_synthetic(Method::Fedavg).effective();
        assert!(!avg.loss.apc_enabled && !avg.augment.enabled);
        let proto = ExperimentConfig::default_synthetic(Method::Fedproto).effective();
        assert_eq!(proto.loss.baseline_mode, BaselineMode::Fedproto);
        let apc = ExperimentConfig::default_synthetic(Method::Fedapc);
        assert_eq!(apc.effective(), apc);
    }
}
