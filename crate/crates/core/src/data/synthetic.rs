use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, DomainData, DomainSplit};
use crate::augment::{Sample, Values};
use crate::seed;

/// How one domain distorts the shared class patterns.
///
/// A sample of class `m` is `scale · R(rotation) · base_m + offset + noise · ε`
/// where `R` rotates every consecutive coordinate pair `(0,1), (2,3), …` by
/// the same angle and `ε ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default = "one")]
    pub scale: f64,
    /// Explicit offset; empty means zero.
    #[serde(default)]
    pub offset: Vec<f64>,
    /// Magnitude of an extra seeded Gaussian offset direction.
    #[serde(default)]
    pub random_offset: f64,
    #[serde(default)]
    pub noise: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub domains: Vec<DomainSpec>,
    pub samples_per_class_per_domain: usize,
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let domain = |name: &str, rotation_deg: f64, scale: f64, random_offset: f64, noise: f64| DomainSpec {
            name: name.to_string(),
            rotation_deg,
            scale,
            offset: Vec::new(),
            random_offset,
            noise,
        };
        Self {
            num_classes: 10,
            input_dim: 32,
            domains: vec![
                domain("alpha", 0.0, 1.0, 0.0, 1.0),
                domain("beta", 30.0, 0.8, 1.0, 1.0),
                domain("gamma", 60.0, 1.2, 1.0, 1.2),
                domain("delta", 90.0, 0.6, 1.5, 1.0),
            ],
            samples_per_class_per_domain: 150,
            test_fraction: 1.0 / 3.0,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.domains.len() < 2 {
            return bad("at least two domains are required".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)".into());
        }
        if self.samples_per_class_per_domain < 2 {
            return bad("samples_per_class_per_domain must be at least 2".into());
        }
        for d in &self.domains {
            if d.scale.is_nan() || d.scale <= 0.0 {
                return bad(format!("domain {}: scale must be positive", d.name));
            }
            if !d.offset.is_empty() && d.offset.len() != self.input_dim {
                return bad(format!("domain {}: offset length must equal input_dim", d.name));
            }
            if d.noise.is_nan() || d.noise < 0.0 || d.random_offset.is_nan() || d.random_offset < 0.0 {
                return bad(format!("domain {}: noise and random_offset must be non-negative", d.name));
            }
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.domains.len() {
            return bad("domain names must be unique".into());
        }
        Ok(())
    }

    /// Test samples per class and domain.
    pub fn test_per_class(&self) -> usize {
        let n = self.samples_per_class_per_domain;
        ((n as f64 * self.test_fraction).round() as usize).clamp(1, n - 1)
    }
}

fn gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Rotates consecutive coordinate pairs by `angle` radians.
pub(crate) fn rotate_pairs(v: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = v.to_vec();
    for pair in out.chunks_exact_mut(2) {
        let (x, y) = (pair[0], pair[1]);
        pair[0] = c * x - s * y;
        pair[1] = s * x + c * y;
    }
    out
}

/// Class patterns shared by every domain.
pub(crate) fn base_patterns(config: &SyntheticConfig) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(config.seed, &[0]);
    (0..config.num_classes)
        .map(|_| gaussian(&mut rng, config.input_dim))
        .collect()
}

/// Explicit offset of domain `d` plus its seeded random offset.
pub(crate) fn domain_offset(config: &SyntheticConfig, d: usize) -> Vec<f64> {
    let dom = &config.domains[d];
    let mut offset = if dom.offset.is_empty() {
        vec![0.0; config.input_dim]
    } else {
        dom.offset.clone()
    };
    if dom.random_offset > 0.0 {
        let mut rng = seed::rng(config.seed, &[2, d as u64]);
        let dir = gaussian(&mut rng, config.input_dim);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for (o, v) in offset.iter_mut().zip(dir) {
            *o += dom.random_offset * v / norm;
        }
    }
    offset
}

/// Generates per-domain train and test sets sharing one label space.
pub fn gen_synthetic(config: &SyntheticConfig) -> Result<DomainSplit, DataError> {
    config.validate()?;
    let bases = base_patterns(config);
    let n_test = config.test_per_class();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (d, dom) in config.domains.iter().enumerate() {
        let name: Arc<str> = Arc::from(dom.name.as_str());
        let offset = domain_offset(config, d);
        let mut rng = seed::rng(config.seed, &[1, d as u64]);
        let mut tr = Vec::new();
        let mut te = Vec::new();
        for (class, base) in bases.iter().enumerate() {
            let centre: Vec<f64> = rotate_pairs(base, dom.rotation_deg.to_radians())
                .iter()
                .zip(&offset)
                .map(|(b, o)| dom.scale * b + o)
                .collect();
            for i in 0..config.samples_per_class_per_domain {
                let eps = gaussian(&mut rng, config.input_dim);
                let values = centre.iter().zip(eps).map(|(c, e)| c + dom.noise * e).collect();
                let sample = Sample {
                    values: Values::Flat(values),
                    label: class,
                    domain: Arc::clone(&name),
                };
                if i < n_test {
                    te.push(sample);
                } else {
                    tr.push(sample);
                }
            }
        }
        train.push(DomainData {
            name: Arc::clone(&name),
            samples: tr,
        });
        test.push(DomainData { name, samples: te });
    }
    Ok(DomainSplit { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_domain(rotation: f64, noise: f64) -> SyntheticConfig {
        let dom = |name: &str, rot: f64| DomainSpec {
            name: name.into(),
            rotation_deg: rot,
            scale: 1.0,
            offset: vec![],
            random_offset: 0.0,
            noise,
        };
        SyntheticConfig {
            num_classes: 3,
            input_dim: 6,
            domains: vec![dom("a", 0.0), dom("b", rotation)],
            samples_per_class_per_domain: 400,
            test_fraction: 0.25,
            seed: 3,
        }
    }

    fn class_mean(d: &DomainData, class: usize, dim: usize) -> Vec<f64> {
        let rows: Vec<&[f64]> = d.samples.iter().filter(|s| s.label == class).map(|s| s.values.as_slice()).collect();
        (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
    }

    #[test]
    fn default_config_shape() {
        let cfg = SyntheticConfig::default();
        assert_eq!(cfg.test_per_class(), 50);
        let split = gen_synthetic(&cfg).unwrap();
        assert_eq!(split.train.len(), 4);
        for (tr, te) in split.train.iter().zip(&split.test) {
            assert_eq!(tr.samples.len(), 1000);
            assert_eq!(te.samples.len(), 500);
            let mut labels = tr.labels();
            labels.dedup();
            assert_eq!(labels, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn no_shift_means_coincide() {
        let split = gen_synthetic(&two_domain(0.0, 0.0)).unwrap();
        for c in 0..3 {
            assert_eq!(class_mean(&split.train[0], c, 6), class_mean(&split.train[1], c, 6));
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SyntheticConfig::default();
        assert_eq!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&cfg).unwrap());
    }

    #[test]
    fn rotated_domain_means_follow_rotation() {
        let noise = 0.5;
        let cfg = two_domain(45.0, noise);
        let split = gen_synthetic(&cfg).unwrap();
        let n = split.train[0].samples.len() / 3;
        let tol = 3.0 * noise * (2.0 / n as f64).sqrt() * 1.5;
        for c in 0..3 {
            let a = class_mean(&split.train[0], c, 6);
            let b = class_mean(&split.train[1], c, 6);
            let rotated = rotate_pairs(&a, 45f64.to_radians());
            for (x, y) in rotated.iter().zip(&b) {
                assert!((x - y).abs() < tol, "{x} vs {y} (tol {tol})");
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = two_domain(0.0, 1.0);
        cfg.domains.pop();
        assert!(gen_synthetic(&cfg).is_err());
        let mut cfg = two_domain(0.0, 1.0);
        cfg.domains[0].scale = 0.0;
        assert!(gen_synthetic(&cfg).is_err());
        let mut cfg = two_domain(0.0, 1.0);
        cfg.test_fraction = 1.0;
        assert!(gen_synthetic(&cfg).is_err());
        let mut cfg = two_domain(0.0, 1.0);
        cfg.domains[1].name = "a".into();
        assert!(gen_synthetic(&cfg).is_err());
    }
}
