use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use super::config::{DataSource, ExperimentConfig};
use super::metrics::{average_of, csv_header, summarize, MetricsRow, Summary};
use super::HarnessError;
use crate::augment::Sample;
use crate::data::{gen_synthetic, load_idx_domain, partition, DomainData, DomainSplit};
use crate::federation::{FedClient, Federation, LocalTrainer};
use crate::model::Model;
use crate::seed;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 512;

/// Per-domain accuracy and their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_domain: Vec<f64>,
    pub average: f64,
}

/// Index of the largest logit per sample; ties go to the lowest class.
pub fn predict(model: &Model, samples: &[Sample]) -> Result<Vec<usize>, HarnessError> {
    let dim = model.config().input_dim;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * dim);
        for s in chunk {
            if s.values.len() != dim {
                return Err(HarnessError::Invalid(format!(
                    "sample width {} does not match model input_dim {dim}",
                    s.values.len()
                )));
            }
            data.extend_from_slice(s.values.as_slice());
        }
        let x = Tensor::matrix(chunk.len(), dim, data).map_err(crate::model::ModelError::from)?;
        let logits = model.classify(&model.encode(&x)?)?;
        for i in 0..chunk.len() {
            let row = logits.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Accuracy on un-augmented test samples, domain by domain.
pub fn evaluate(model: &Model, test: &[DomainData]) -> Result<Evaluation, HarnessError> {
    let per_domain = test
        .iter()
        .map(|d| {
            if d.samples.is_empty() {
                return Err(HarnessError::EmptyTestSet(d.name.to_string()));
            }
            let hits = predict(model, &d.samples)?
                .iter()
                .zip(&d.samples)
                .filter(|(p, s)| **p == s.label)
                .count();
            Ok(hits as f64 / d.samples.len() as f64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if per_domain.is_empty() {
        return Err(HarnessError::EmptyTestSet("<none>".into()));
    }
    Ok(Evaluation {
        average: average_of(&per_domain),
        per_domain,
    })
}

/// Train/test data for one seed.
pub fn load_data(config: &ExperimentConfig, run_seed: u64) -> Result<DomainSplit, HarnessError> {
    let split = match &config.data {
        DataSource::Synthetic(s) => {
            let mut s = s.clone();
            s.seed = seed::derive(s.seed, &[run_seed]);
            gen_synthetic(&s)?
        }
        DataSource::Idx(domains) => {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for d in domains {
                train.push(load_idx_domain(&d.name, &d.train_images, &d.train_labels)?);
                test.push(load_idx_domain(&d.name, &d.test_images, &d.test_labels)?);
            }
            DomainSplit { train, test }
        }
    };
    let dim = config.model.input_dim;
    for d in split.train.iter().chain(&split.test) {
        if let Some(s) = d.samples.iter().find(|s| s.values.len() != dim || s.label >= config.model.num_classes) {
            return Err(HarnessError::BadConfig {
                path: "model".into(),
                message: format!(
                    "domain {} has a sample of width {} and label {}, model expects width {dim} and {} classes",
                    d.name,
                    s.values.len(),
                    s.label,
                    config.model.num_classes
                ),
            });
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub seed: u64,
    pub round: u32,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub domains: Vec<String>,
    pub clients: usize,
    pub rows: Vec<MetricsRow>,
    pub timings: Vec<Timing>,
    pub summary: Summary,
}

impl ExperimentResult {
    pub fn csv(&self) -> String {
        let mut s = csv_header(&self.domains, self.clients);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, HarnessError> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Runs every seed of `config`. With `out_dir`, writes `metrics.csv` (flushed
/// per round), `timings.csv`, `summary.json` and the resolved `config.json`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentResult, HarnessError> {
    config.validate()?;
    let cfg = config.effective();
    let domains = cfg.domain_names();
    let clients = cfg.partition.clients.len();

    let mut files = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_at(dir))?;
            let mut metrics = create(dir, "metrics.csv")?;
            writeln!(metrics, "{}", csv_header(&domains, clients)).map_err(io_at(dir))?;
            let mut timings = create(dir, "timings.csv")?;
            writeln!(timings, "seed,round,wall_ms").map_err(io_at(dir))?;
            let mut resolved = create(dir, "config.json")?;
            writeln!(resolved, "{}", config.to_json()).map_err(io_at(dir))?;
            Some((dir, metrics, timings))
        }
        None => None,
    };

    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for &run_seed in &cfg.seeds {
        let split = load_data(&cfg, run_seed)?;
        let mut plan = cfg.partition.clone();
        plan.seed = seed::derive(plan.seed, &[run_seed]);
        let datasets = partition(&split.train, &plan)?;
        let mut model_cfg = cfg.model.clone();
        model_cfg.seed = seed::derive(model_cfg.seed, &[run_seed]);
        let init = Model::init(&model_cfg)?.flatten();
        let trainers: Vec<Box<dyn LocalTrainer>> = datasets
            .into_iter()
            .map(|data| {
                let client_seed = seed::derive(run_seed, &[0xc1, u64::from(data.client_id)]);
                Box::new(FedClient {
                    data,
                    model: model_cfg.clone(),
                    loss: cfg.loss.clone(),
                    augment: cfg.augment.clone(),
                    train: cfg.train.clone(),
                    seed: client_seed,
                }) as Box<dyn LocalTrainer>
            })
            .collect();
        let mut fed = Federation::new(
            cfg.transport,
            trainers,
            init,
            model_cfg.feature_dim,
            cfg.aggregation,
            cfg.tcp_port,
        )?;
        for _ in 0..cfg.rounds {
            let start = Instant::now();
            let outcome = fed.run_round()?;
            let model = Model::unflatten(&model_cfg, &fed.state().params)?;
            let eval = evaluate(&model, &split.test)?;
            let row = MetricsRow {
                seed: run_seed,
                round: outcome.round,
                avg_acc: eval.average,
                domain_acc: eval.per_domain,
                client_ce: outcome.clients.iter().map(|c| c.1.ce).collect(),
                client_apc: outcome.clients.iter().map(|c| c.1.apc).collect(),
            };
            let timing = Timing {
                seed: run_seed,
                round: outcome.round,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            log::info!(
                "{} seed {} round {}/{}: avg_acc {:.4} ({:.0} ms)",
                cfg.method.name(),
                run_seed,
                row.round,
                cfg.rounds,
                row.avg_acc,
                timing.wall_ms
            );
            if let Some((dir, metrics, timing_file)) = files.as_mut() {
                writeln!(metrics, "{}", row.to_csv()).and_then(|_| metrics.flush()).map_err(io_at(dir))?;
                writeln!(timing_file, "{},{},{:.3}", timing.seed, timing.round, timing.wall_ms).map_err(io_at(dir))?;
            }
            rows.push(row);
            timings.push(timing);
        }
        fed.shutdown()?;
    }

    let summary = summarize(cfg.method.name(), &domains, &rows, &cfg.seeds, cfg.report_last)?;
    if let Some((dir, _, mut timing_file)) = files {
        timing_file.flush().map_err(io_at(dir))?;
        let mut out = create(dir, "summary.json")?;
        writeln!(out, "{}", serde_json::to_string_pretty(&summary).expect("summary serialises")).map_err(io_at(dir))?;
        out.flush().map_err(io_at(dir))?;
    }
    Ok(ExperimentResult {
        domains,
        clients,
        rows,
        timings,
        summary,
    })
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub augmented: ExperimentResult,
    pub plain: ExperimentResult,
}

impl Ablation {
    pub fn delta(&self) -> f64 {
        self.augmented.summary.average - self.plain.summary.average
    }
}

/// The same config with and without augmentation, augmented run first.
pub fn run_ablation(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Ablation, HarnessError> {
    let mut with = config.clone();
    with.augment.enabled = true;
    let mut without = config.clone();
    without.augment.enabled = false;
    let augmented = run_experiment(&with, out_dir.map(|d| d.join("augmented")).as_deref())?;
    let plain = run_experiment(&without, out_dir.map(|d| d.join("no_augmentation")).as_deref())?;
    Ok(Ablation { augmented, plain })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::augment::Values;
    use crate::model::ModelConfig;

    fn domain(samples: Vec<(Vec<f64>, usize)>) -> DomainData {
        let name: Arc<str> = Arc::from("d");
        DomainData {
            samples: samples
                .into_iter()
                .map(|(v, label)| Sample {
                    values: Values::Flat(v),
                    label,
                    domain: Arc::clone(&name),
                })
                .collect(),
            name,
        }
    }

    #[test]
    fn constant_predictor_scores_class_share() {
        // all-zero weights: logits equal the classifier bias
        let cfg = ModelConfig::new(2, vec![3], 2, 10, 0);
        let mut flat = vec![0.0; cfg.parameter_count()];
        let cls_bias = *cfg.bias_offsets().last().unwrap();
        flat[cls_bias] = 1.0;
        let model = Model::unflatten(&cfg, &flat).unwrap();
        let test = domain((0..100).map(|i| (vec![i as f64, 1.0], i % 10)).collect());
        let eval = evaluate(&model, &[test.clone(), test]).unwrap();
        assert_eq!(eval.per_domain, vec![0.1, 0.1]);
        assert_eq!(eval.average, 0.1);
    }

    #[test]
    fn ties_pick_lowest_class() {
        let cfg = ModelConfig::new(2, vec![3], 2, 4, 0);
        let model = Model::unflatten(&cfg, &vec![0.0; cfg.parameter_count()]).unwrap();
        let preds = predict(&model, &domain(vec![(vec![1.0, 2.0], 3)]).samples).unwrap();
        assert_eq!(preds, vec![0]);
    }

    #[test]
    fn perfect_lookup_scores_one() {
        // identity encoder, classifier picks the larger coordinate
        let cfg = ModelConfig::new(2, vec![2], 2, 2, 0);
        let flat = vec![
            1.0, 0.0, 0.0, 1.0, 0.0, 0.0, // hidden
            1.0, 0.0, 0.0, 1.0, 0.0, 0.0, // feature
            1.0, 0.0, 0.0, 1.0, 0.0, 0.0, // classifier
        ];
        let model = Model::unflatten(&cfg, &flat).unwrap();
        let test = domain(vec![
            (vec![3.0, 1.0], 0),
            (vec![0.5, 2.0], 1),
            (vec![1.0, 0.0], 0),
            (vec![0.0, 9.0], 1),
            (vec![4.0, 3.9], 0),
        ]);
        assert_eq!(evaluate(&model, &[test]).unwrap().per_domain, vec![1.0]);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let cfg = ModelConfig::new(2, vec![2], 2, 2, 0);
        let model = Model::init(&cfg).unwrap();
        assert!(matches!(evaluate(&model, &[domain(vec![])]), Err(HarnessError::EmptyTestSet(_))));
    }
}
