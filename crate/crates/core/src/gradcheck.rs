//! Central finite-difference verification of reverse-mode gradients.
//!
//! Each check builds a small random model and batch, differentiates a loss on
//! a tape, then re-evaluates the same loss with every parameter nudged by
//! `±STEP` and compares. Error per coordinate is
//! `|analytic − numeric| / max(1, |numeric|)`.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::loss::{self, LossError};
use crate::model::{Model, ModelConfig, ModelError};
use crate::prototype::{Owner, PrototypeSet};
use crate::seed;
use crate::tensor::{primitive_forward, GradTape, OpKind, Tensor, TensorError};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Apc,
    CePlusApc,
    FedProtoReg,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::CrossEntropy,
        LossKind::Apc,
        LossKind::CePlusApc,
        LossKind::FedProtoReg,
    ];
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Apc => "apc",
            LossKind::CePlusApc => "ce+apc",
            LossKind::FedProtoReg => "fedproto_reg",
        })
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub kind: LossKind,
    pub case: u64,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub results: Vec<CheckResult>,
}

impl Report {
    pub fn max_rel_error(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < TOLERANCE
    }

    pub fn worst(&self, kind: LossKind) -> f64 {
        self.results
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Random small instance: model, two views of a batch, labels, prototypes.
struct Case {
    model: Model,
    views: [Tensor; 2],
    labels: Vec<usize>,
    globals: PrototypeSet,
    temperature: f64,
    weight: f64,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn random_case(case: u64) -> Result<Case, GradCheckError> {
    let mut rng = seed::rng(0x6772_6164, &[case]);
    let input_dim = rng.gen_range(2..6);
    let hidden: Vec<usize> = (0..rng.gen_range(0..3)).map(|_| rng.gen_range(3..7)).collect();
    let feature_dim = rng.gen_range(2..5);
    let classes = rng.gen_range(2..5);
    let config = ModelConfig::new(input_dim, hidden, feature_dim, classes, rng.gen());
    let mut model = Model::init(&config)?;
    // non-zero biases so every term is exercised
    let mut flat = model.flatten();
    for v in flat.iter_mut() {
        *v += rng.gen_range(-0.1..0.1);
    }
    model = Model::unflatten(&config, &flat)?;

    let batch = rng.gen_range(2..6);
    let v1 = Tensor::matrix(batch, input_dim, uniform(&mut rng, batch * input_dim, 1.5))?;
    let v2 = Tensor::matrix(batch, input_dim, uniform(&mut rng, batch * input_dim, 1.5))?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();

    let mut globals = PrototypeSet::empty(Owner::Global, feature_dim);
    for c in 0..classes {
        // keep the first sample's class so at least one row counts
        if c == labels[0] || rng.gen_bool(0.7) {
            globals
                .insert(c, uniform(&mut rng, feature_dim, 1.0), 1)
                .expect("dimension matches");
        }
    }
    Ok(Case {
        model,
        views: [v1, v2],
        labels,
        globals,
        temperature: rng.gen_range(0.2..1.0),
        weight: rng.gen_range(0.1..2.0),
    })
}

fn evaluate(kind: LossKind, model: &Model, c: &Case) -> Result<Tensor, GradCheckError> {
    let z1 = model.encode(&c.views[0])?;
    Ok(match kind {
        LossKind::CrossEntropy => loss::cross_entropy(&model.classify(&z1)?, &c.labels)?,
        LossKind::Apc => loss::apc_loss(&z1, &c.labels, &c.globals, c.temperature)?.value,
        LossKind::CePlusApc => {
            let ce = loss::cross_entropy(&model.classify(&z1)?, &c.labels)?;
            let z2 = model.encode(&c.views[1])?;
            let both = Tensor::concat_rows(&[&z1, &z2])?;
            let labels: Vec<usize> = c.labels.iter().chain(&c.labels).copied().collect();
            let apc = loss::apc_loss(&both, &labels, &c.globals, c.temperature)?.value;
            loss::total_loss(&ce, &apc)?
        }
        LossKind::FedProtoReg => {
            let z2 = model.encode(&c.views[1])?;
            let mean = z1.add(&z2)?.scale(0.5);
            loss::fedproto_reg(&mean, &c.labels, &c.globals, c.weight)?
        }
    })
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks one loss kind on one random case against finite differences.
pub fn check_loss(kind: LossKind, case: u64) -> Result<CheckResult, GradCheckError> {
    let c = random_case(case)?;
    let tape = GradTape::begin()?;
    let bound = c.model.bind(&tape)?;
    let loss = evaluate(kind, &bound, &c)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<f64> = bound
        .params()
        .iter()
        .flat_map(|p| grads.get(p).expect("bound parameter").data().to_vec())
        .collect();

    let config = c.model.config().clone();
    let flat = c.model.flatten();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = flat.clone();
        plus[i] += STEP;
        let mut minus = flat.clone();
        minus[i] -= STEP;
        let fp = evaluate(kind, &Model::unflatten(&config, &plus)?, &c)?.item();
        let fm = evaluate(kind, &Model::unflatten(&config, &minus)?, &c)?.item();
        worst = worst.max(relative_error(*a, (fp - fm) / (2.0 * STEP)));
    }
    Ok(CheckResult {
        kind,
        case,
        coordinates: analytic.len(),
        max_rel_error: worst,
    })
}

/// Every loss kind on `cases` random instances.
pub fn run_suite(cases: u64) -> Result<Report, GradCheckError> {
    let mut results = Vec::new();
    for kind in LossKind::ALL {
        for case in 0..cases {
            results.push(check_loss(kind, case)?);
        }
    }
    Ok(Report { results })
}

/// Random expression using every primitive once; returns the max relative
/// gradient error over its two leaf inputs.
pub fn check_primitives(case: u64) -> Result<f64, GradCheckError> {
    let mut rng = seed::rng(0x7072_696d, &[case]);
    let (m, k) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let a0 = uniform(&mut rng, m * k, 1.0);
    let b0 = uniform(&mut rng, k * m, 1.0);
    let c = rng.gen_range(-2.0..2.0);

    let graph = |a: &Tensor, b: &Tensor| -> Result<Tensor, TensorError> {
        use OpKind::*;
        let ab = primitive_forward(MatMul, &[a, b])?; // m×m
        let sq = primitive_forward(Mul, &[&ab, &ab])?;
        let shifted = primitive_forward(Add, &[&sq, &Tensor::scalar(0.5)])?;
        let logd = primitive_forward(Log, &[&shifted])?;
        let r = primitive_forward(Relu, &[&ab])?;
        let e = primitive_forward(Exp, &[&primitive_forward(Scale(0.3), &[&r])?])?;
        let diff = primitive_forward(Sub, &[&logd, &e])?;
        let stacked = primitive_forward(ConcatRows, &[&diff, &ab])?;
        let norms = primitive_forward(L2Norm, &[&stacked])?;
        let s = primitive_forward(Sum, &[&norms])?;
        let mean = primitive_forward(Mean, &[&stacked])?;
        primitive_forward(Add, &[&s, &primitive_forward(Scale(c), &[&mean])?])
    };

    let a = Tensor::matrix(m, k, a0.clone())?;
    let b = Tensor::matrix(k, m, b0.clone())?;
    let tape = GradTape::begin()?;
    let (ap, bp) = (tape.param(&a)?, tape.param(&b)?);
    let out = graph(&ap, &bp)?;
    let grads = tape.backward(&out)?;

    let mut worst: f64 = 0.0;
    for (which, base) in [(0, &a0), (1, &b0)] {
        let g = if which == 0 { grads.get(&ap) } else { grads.get(&bp) }.expect("leaf");
        for i in 0..base.len() {
            let eval = |delta: f64| -> Result<f64, TensorError> {
                let mut v = base.clone();
                v[i] += delta;
                let (x, y) = if which == 0 {
                    (Tensor::matrix(m, k, v)?, b.clone())
                } else {
                    (a.clone(), Tensor::matrix(k, m, v)?)
                };
                Ok(graph(&x, &y)?.item())
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(g.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_kind_passes_on_a_few_cases() {
        for kind in LossKind::ALL {
            for case in 0..3 {
                let r = check_loss(kind, case).unwrap();
                assert!(r.max_rel_error < TOLERANCE, "{kind} case {case}: {}", r.max_rel_error);
                assert!(r.coordinates > 0);
            }
        }
    }

    #[test]
    fn primitive_graphs_pass() {
        for case in 0..20 {
            let e = check_primitives(case).unwrap();
            assert!(e < TOLERANCE, "case {case}: {e}");
        }
    }
}
