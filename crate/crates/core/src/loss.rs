//! Training objectives: cross-entropy, the prototype contrastive loss, and
//! the squared-distance prototype regulariser used by the FedProto baseline.
//!
//! All losses are built from tensor primitives so they differentiate on
//! whatever tape their inputs live on. Prototypes always enter as constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prototype::PrototypeSet;
use crate::tensor::{Tensor, TensorError};

/// Floor for feature norms before division.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("expected {expected} labels, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("global prototype set is empty")]
    EmptyGlobals,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("regulariser weight must be non-negative, got {0}")]
    BadWeight(f64),
    #[error("feature width {got} does not match prototype dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    #[default]
    None,
    Fedproto,
}

/// Which features the contrastive term is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApcTarget {
    /// Every augmented view of every sample in the batch.
    #[default]
    Views,
    /// The per-sample mean over views.
    MeanFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub apc_enabled: bool,
    pub apc_target: ApcTarget,
    pub baseline_mode: BaselineMode,
    pub fedproto_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            apc_enabled: true,
            apc_target: ApcTarget::Views,
            baseline_mode: BaselineMode::None,
            fedproto_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::BadTemperature(self.temperature));
        }
        if !(self.fedproto_weight >= 0.0 && self.fedproto_weight.is_finite()) {
            return Err(LossError::BadWeight(self.fedproto_weight));
        }
        Ok(())
    }
}

/// Scalar loss components of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub ce: f64,
    /// Alignment term: the contrastive loss, or the prototype regulariser
    /// in FedProto mode.
    pub apc: f64,
    pub total: f64,
    pub batch_size: usize,
    /// False while no global prototypes exist.
    pub apc_active: bool,
    /// Rows whose class had no global prototype.
    pub skipped: usize,
}

fn ones(rows: usize, cols: usize) -> Result<Tensor, TensorError> {
    Tensor::full(vec![rows, cols], 1.0)
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<(), LossError> {
    if labels.len() != rows {
        return Err(LossError::ShapeMismatch {
            expected: rows,
            got: labels.len(),
        });
    }
    match labels.iter().find(|l| **l >= classes) {
        Some(&label) => Err(LossError::BadLabel { label, classes }),
        None => Ok(()),
    }
}

/// Mean over rows of `-log softmax(logits)[label]`, via log-sum-exp.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor, LossError> {
    if logits.shape().len() != 2 {
        return Err(LossError::Tensor(TensorError::InvalidShape {
            shape: logits.shape().to_vec(),
            len: logits.numel(),
        }));
    }
    let (rows, classes) = (logits.rows(), logits.cols());
    check_labels(labels, rows, classes)?;

    let row_max: Vec<f64> = (0..rows)
        .map(|r| logits.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = Tensor::matrix(rows, 1, row_max)?.matmul(&ones(1, classes)?)?;
    let shifted = logits.sub(&shift)?;

    let mut one_hot = vec![0.0; rows * classes];
    for (r, &l) in labels.iter().enumerate() {
        one_hot[r * classes + l] = 1.0;
    }
    let one_hot = Tensor::matrix(rows, classes, one_hot)?;

    let lse = shifted.exp().matmul(&ones(classes, 1)?)?.log()?;
    let picked = shifted.mul(&one_hot)?.matmul(&ones(classes, 1)?)?;
    Ok(lse.sub(&picked)?.mean())
}

/// Cosine similarity of two plain vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    if a.len() != b.len() {
        return Err(LossError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity of a zero vector");
    }
    Ok(dot / (na.max(NORM_EPS) * nb.max(NORM_EPS)))
}

/// `(B×d)` features against prototype rows → `(B×P)` cosine similarities,
/// differentiable w.r.t. the features.
pub fn cosine_matrix(features: &Tensor, prototypes: &[&[f64]]) -> Result<Tensor, LossError> {
    let d = features.cols();
    let p = prototypes.len();
    let mut unit = vec![0.0; d * p];
    for (j, proto) in prototypes.iter().enumerate() {
        if proto.len() != d {
            return Err(LossError::DimensionMismatch {
                expected: proto.len(),
                got: d,
            });
        }
        let norm = proto.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            log::warn!("zero-norm prototype in cosine similarity");
        }
        for (i, v) in proto.iter().enumerate() {
            unit[i * p + j] = v / norm.max(NORM_EPS);
        }
    }
    let unit = Tensor::matrix(d, p, unit)?;

    let mut norms = features.l2_norm();
    if norms.data().iter().any(|n| *n < NORM_EPS) {
        log::warn!("zero-norm feature in cosine similarity");
        norms = norms.add(&Tensor::scalar(NORM_EPS))?;
    }
    // 1/‖f‖ as exp(-ln ‖f‖), spread across the prototype columns
    let inv = norms.log()?.scale(-1.0).exp();
    let inv = inv.matmul(&ones(1, p)?)?;
    Ok(features.matmul(&unit)?.mul(&inv)?)
}

/// Contrastive loss value plus bookkeeping.
#[derive(Debug, Clone)]
pub struct ApcLoss {
    pub value: Tensor,
    pub counted: usize,
    pub skipped: usize,
}

/// Rows of `features` whose label has a global prototype, as a selection.
fn select_rows(features: &Tensor, keep: &[usize]) -> Result<Tensor, TensorError> {
    if keep.len() == features.rows() {
        return Ok(features.clone());
    }
    let n = features.rows();
    let mut sel = vec![0.0; keep.len() * n];
    for (r, &i) in keep.iter().enumerate() {
        sel[r * n + i] = 1.0;
    }
    Tensor::matrix(keep.len(), n, sel)?.matmul(features)
}

/// Per sample: `-log( Σ_{g∈G+} e^{s(z,g)/τ} / Σ_{g∈G} e^{s(z,g)/τ} )`,
/// averaged over samples whose class has a global prototype.
///
/// Exponents are shifted by the constant `1/τ`, which keeps every term in
/// `(0, 1]` for temperatures down to about 3e-3.
pub fn apc_loss(
    features: &Tensor,
    labels: &[usize],
    globals: &PrototypeSet,
    temperature: f64,
) -> Result<ApcLoss, LossError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(LossError::BadTemperature(temperature));
    }
    if globals.is_empty() {
        return Err(LossError::EmptyGlobals);
    }
    if labels.len() != features.rows() {
        return Err(LossError::ShapeMismatch {
            expected: features.rows(),
            got: labels.len(),
        });
    }
    let classes = globals.classes();
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| globals.contains(labels[i])).collect();
    let skipped = labels.len() - keep.len();
    if keep.is_empty() {
        return Ok(ApcLoss {
            value: Tensor::scalar(0.0),
            counted: 0,
            skipped,
        });
    }

    let protos: Vec<&[f64]> = globals.iter().map(|(_, p)| p.vector.as_slice()).collect();
    let selected = select_rows(features, &keep)?;
    let sims = cosine_matrix(&selected, &protos)?;

    let p = classes.len();
    let mut positive = vec![0.0; keep.len() * p];
    for (r, &i) in keep.iter().enumerate() {
        for (j, c) in classes.iter().enumerate() {
            if *c == labels[i] {
                positive[r * p + j] = 1.0;
            }
        }
    }
    let positive = Tensor::matrix(keep.len(), p, positive)?;

    let inv_t = 1.0 / temperature;
    let e = sims.scale(inv_t).sub(&Tensor::scalar(inv_t))?.exp();
    let denom = e.matmul(&ones(p, 1)?)?.log()?;
    let numer = e.mul(&positive)?.matmul(&ones(p, 1)?)?.log()?;
    Ok(ApcLoss {
        value: denom.sub(&numer)?.mean(),
        counted: keep.len(),
        skipped,
    })
}

/// `λ · mean ‖z̄ − G^y‖²` over samples whose class has a global prototype.
pub fn fedproto_reg(
    mean_features: &Tensor,
    labels: &[usize],
    globals: &PrototypeSet,
    weight: f64,
) -> Result<Tensor, LossError> {
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(LossError::BadWeight(weight));
    }
    if globals.is_empty() {
        return Err(LossError::EmptyGlobals);
    }
    if labels.len() != mean_features.rows() {
        return Err(LossError::ShapeMismatch {
            expected: mean_features.rows(),
            got: labels.len(),
        });
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| globals.contains(labels[i])).collect();
    if weight == 0.0 || keep.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let d = mean_features.cols();
    if globals.dim() != d {
        return Err(LossError::DimensionMismatch {
            expected: globals.dim(),
            got: d,
        });
    }
    let mut target = Vec::with_capacity(keep.len() * d);
    for &i in &keep {
        target.extend_from_slice(&globals.get(labels[i]).expect("filtered").vector);
    }
    let target = Tensor::matrix(keep.len(), d, target)?;
    let diff = select_rows(mean_features, &keep)?.sub(&target)?;
    Ok(diff.mul(&diff)?.sum().scale(weight / keep.len() as f64))
}

/// Unweighted sum of the classification and alignment terms.
pub fn total_loss(ce: &Tensor, apc: &Tensor) -> Result<Tensor, LossError> {
    Ok(ce.add(apc)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototype::Owner;
    use crate::tensor::GradTape;

    fn protos(entries: Vec<(usize, Vec<f64>)>) -> PrototypeSet {
        let d = entries[0].1.len();
        PrototypeSet::from_entries(Owner::Global, d, entries.into_iter().map(|(c, v)| (c, v, 1))).unwrap()
    }

    #[test]
    fn ce_uniform_and_saturated() {
        let logits = Tensor::zeros(vec![3, 10]).unwrap();
        let ce = cross_entropy(&logits, &[0, 4, 9]).unwrap().item();
        assert!((ce - 10f64.ln()).abs() < 1e-12);

        let mut row = vec![0.0; 10];
        row[2] = 1000.0;
        let logits = Tensor::from_rows(&[row]).unwrap();
        assert!(cross_entropy(&logits, &[2]).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn ce_matches_direct_softmax() {
        let rows = vec![vec![0.3, -1.2, 2.5, 0.0], vec![-0.7, 0.1, 0.2, 1.9]];
        let labels = [2, 0];
        let mut expected = 0.0;
        for (row, &l) in rows.iter().zip(&labels) {
            let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
            expected += -(row[l].exp() / z).ln();
        }
        expected /= 2.0;
        let got = cross_entropy(&Tensor::from_rows(&rows).unwrap(), &labels).unwrap().item();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn ce_errors() {
        let logits = Tensor::zeros(vec![2, 3]).unwrap();
        assert_eq!(
            cross_entropy(&logits, &[0, 3]).unwrap_err(),
            LossError::BadLabel { label: 3, classes: 3 }
        );
        assert!(matches!(cross_entropy(&logits, &[0]), Err(LossError::ShapeMismatch { .. })));
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -2.0, 5.0];
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_sim(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn apc_single_class_is_zero() {
        let g = protos(vec![(1, vec![1.0, 2.0])]);
        let f = Tensor::from_rows(&[vec![0.3, -0.4], vec![5.0, 1.0]]).unwrap();
        let out = apc_loss(&f, &[1, 1], &g, 0.5).unwrap();
        assert_eq!(out.value.item(), 0.0);
    }

    #[test]
    fn apc_two_orthogonal_prototypes() {
        let g = protos(vec![(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        let f = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let got = apc_loss(&f, &[0], &g, 1.0).unwrap().value.item();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn apc_scale_invariance_and_skips() {
        let g = protos(vec![(0, vec![1.0, 0.5, 0.0]), (2, vec![-0.2, 1.0, 0.3])]);
        let f = Tensor::from_rows(&[vec![0.4, -1.0, 2.0], vec![1.0, 1.0, 1.0], vec![3.0, 0.1, 0.0]]).unwrap();
        let labels = [0, 1, 2];
        let base = apc_loss(&f, &labels, &g, 0.3).unwrap();
        assert_eq!(base.skipped, 1);
        assert_eq!(base.counted, 2);
        let scaled = apc_loss(&f.scale(7.5), &labels, &g, 0.3).unwrap();
        assert!((base.value.item() - scaled.value.item()).abs() < 1e-12);
        assert!(base.value.item() > 0.0);

        let none = apc_loss(&f, &[1, 1, 1], &g, 0.3).unwrap();
        assert_eq!(none.value.item(), 0.0);
        assert_eq!(none.skipped, 3);
    }

    #[test]
    fn apc_errors() {
        let g = protos(vec![(0, vec![1.0])]);
        let f = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert_eq!(apc_loss(&f, &[0], &g, 0.0).unwrap_err(), LossError::BadTemperature(0.0));
        let empty = PrototypeSet::empty(Owner::Global, 1);
        assert_eq!(apc_loss(&f, &[0], &empty, 1.0).unwrap_err(), LossError::EmptyGlobals);
    }

    #[test]
    fn apc_decreases_when_positive_similarity_rises() {
        let g = protos(vec![(0, vec![1.0, 0.0, 0.0]), (1, vec![0.0, 0.0, 1.0])]);
        // rotating from e2 towards e1 keeps the similarity to e3 at zero
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let t = k as f64 * 0.15;
            let f = Tensor::from_rows(&[vec![t.sin(), t.cos(), 0.0]]).unwrap();
            let v = apc_loss(&f, &[0], &g, 0.5).unwrap().value.item();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn fedproto_cases() {
        let g = protos(vec![(0, vec![3.0, 4.0])]);
        let z = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(fedproto_reg(&z, &[0], &g, 1.0).unwrap().item(), 25.0);
        assert_eq!(fedproto_reg(&z, &[0], &g, 0.0).unwrap().item(), 0.0);
        let at = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(fedproto_reg(&at, &[0], &g, 2.0).unwrap().item(), 0.0);
        let empty = PrototypeSet::empty(Owner::Global, 2);
        assert_eq!(fedproto_reg(&z, &[0], &empty, 1.0).unwrap_err(), LossError::EmptyGlobals);
    }

    #[test]
    fn total_is_plain_sum() {
        assert_eq!(total_loss(&Tensor::scalar(2.0), &Tensor::scalar(0.0)).unwrap().item(), 2.0);
        assert_eq!(total_loss(&Tensor::scalar(0.0), &Tensor::scalar(0.5)).unwrap().item(), 0.5);
    }

    #[test]
    fn apc_gradient_only_flows_to_features() {
        let g = protos(vec![(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        let tape = GradTape::begin().unwrap();
        let f = tape.param(&Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap()).unwrap();
        let loss = apc_loss(&f, &[0], &g, 0.5).unwrap().value;
        let grads = tape.backward(&loss).unwrap();
        let gf = grads.get(&f).unwrap();
        // moving along the feature direction leaves cosine unchanged
        let radial: f64 = gf.data().iter().zip([0.6, 0.8]).map(|(a, b)| a * b).sum();
        assert!(radial.abs() < 1e-12);
    }
}
