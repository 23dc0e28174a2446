//! Multi-view augmentation: horizontal flip, pad-and-crop, rectangular
//! erasing and additive Gaussian noise.
//!
//! Flat feature vectors have no spatial axes, so for them a view is a
//! zeroed contiguous coordinate block plus noise.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugmentError {
    #[error("bad augmentation policy: {0}")]
    BadPolicy(String),
    #[error("{0} is out of bounds")]
    OutOfBounds(String),
}

/// Image-like values laid out as `(row, column, channel)`, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(height * width * channels, data.len(), "grid size mismatch");
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    fn idx(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.width + c) * self.channels + ch
    }

    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[self.idx(r, c, ch)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    Flat(Vec<f64>),
    Grid(Grid),
}

impl Values {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            Values::Flat(v) => v,
            Values::Grid(g) => &g.data,
        }
    }

    pub fn len(&self) -> usize {
        self.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One labelled input `(x, y)` tagged with its source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub values: Values,
    pub label: usize,
    pub domain: Arc<str>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub num_views: usize,
    pub erase_fraction: f64,
    pub crop_pad: usize,
    pub flip_prob: f64,
    pub noise_sigma: f64,
    pub enabled: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            num_views: 2,
            erase_fraction: 0.25,
            crop_pad: 2,
            flip_prob: 0.5,
            noise_sigma: 0.1,
            enabled: true,
        }
    }
}

impl AugmentPolicy {
    /// Policy whose every transform is a no-op.
    pub fn identity(num_views: usize) -> Self {
        Self {
            num_views,
            erase_fraction: 0.0,
            crop_pad: 0,
            flip_prob: 0.0,
            noise_sigma: 0.0,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::BadPolicy(m.to_string()));
        if self.num_views == 0 {
            return bad("num_views must be at least 1");
        }
        if !(0.0..1.0).contains(&self.erase_fraction) {
            return bad("erase_fraction must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Reverses column order in every row and channel.
pub fn flip_h(grid: &Grid) -> Grid {
    let mut out = grid.clone();
    for r in 0..grid.height {
        for c in 0..grid.width {
            for ch in 0..grid.channels {
                let dst = out.idx(r, c, ch);
                out.data[dst] = grid.get(r, grid.width - 1 - c, ch);
            }
        }
    }
    out
}

/// Zeroes `rect`.
pub fn erase(grid: &Grid, rect: Rect) -> Result<Grid, AugmentError> {
    if rect.top + rect.height > grid.height || rect.left + rect.width > grid.width {
        return Err(AugmentError::OutOfBounds(format!("{rect:?}")));
    }
    let mut out = grid.clone();
    for r in rect.top..rect.top + rect.height {
        for c in rect.left..rect.left + rect.width {
            for ch in 0..grid.channels {
                let i = out.idx(r, c, ch);
                out.data[i] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Zero-pads by `pad` on every side, then cuts an original-size window whose
/// top-left corner sits at `offset = (row, col)` in the padded grid.
pub fn crop_pad(grid: &Grid, pad: usize, offset: (usize, usize)) -> Result<Grid, AugmentError> {
    if offset.0 > 2 * pad || offset.1 > 2 * pad {
        return Err(AugmentError::OutOfBounds(format!("crop offset {offset:?} with pad {pad}")));
    }
    let mut out = Grid::new(
        grid.height,
        grid.width,
        grid.channels,
        vec![0.0; grid.data.len()],
    );
    for r in 0..grid.height {
        // padded row r + offset.0 maps back to source row r + offset.0 - pad
        let Some(src_r) = (r + offset.0).checked_sub(pad).filter(|v| *v < grid.height) else {
            continue;
        };
        for c in 0..grid.width {
            let Some(src_c) = (c + offset.1).checked_sub(pad).filter(|v| *v < grid.width) else {
                continue;
            };
            for ch in 0..grid.channels {
                let dst = out.idx(r, c, ch);
                out.data[dst] = grid.get(src_r, src_c, ch);
            }
        }
    }
    Ok(out)
}

pub fn add_noise<R: Rng + ?Sized>(values: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    for v in values {
        *v += normal.sample(rng);
    }
}

fn erase_block(values: &mut [f64], start: usize, len: usize) -> Result<(), AugmentError> {
    if start + len > values.len() {
        return Err(AugmentError::OutOfBounds(format!("block {start}+{len}")));
    }
    values[start..start + len].iter_mut().for_each(|v| *v = 0.0);
    Ok(())
}

fn one_view<R: Rng>(values: &Values, policy: &AugmentPolicy, rng: &mut R) -> Result<Values, AugmentError> {
    match values {
        Values::Grid(grid) => {
            let mut g = grid.clone();
            if rng.gen_bool(policy.flip_prob) {
                g = flip_h(&g);
            }
            if policy.crop_pad > 0 {
                let span = 2 * policy.crop_pad;
                let offset = (rng.gen_range(0..=span), rng.gen_range(0..=span));
                g = crop_pad(&g, policy.crop_pad, offset)?;
            }
            if policy.erase_fraction > 0.0 {
                let side = policy.erase_fraction.sqrt();
                let eh = ((g.height as f64 * side).ceil() as usize).min(g.height);
                let ew = ((g.width as f64 * side).ceil() as usize).min(g.width);
                let rect = Rect {
                    top: rng.gen_range(0..=g.height - eh),
                    left: rng.gen_range(0..=g.width - ew),
                    height: eh,
                    width: ew,
                };
                g = erase(&g, rect)?;
            }
            add_noise(&mut g.data, policy.noise_sigma, rng);
            Ok(Values::Grid(g))
        }
        Values::Flat(v) => {
            let mut v = v.clone();
            if policy.erase_fraction > 0.0 && !v.is_empty() {
                let len = ((v.len() as f64 * policy.erase_fraction).ceil() as usize).min(v.len());
                let start = rng.gen_range(0..=v.len() - len);
                erase_block(&mut v, start, len)?;
            }
            add_noise(&mut v, policy.noise_sigma, rng);
            Ok(Values::Flat(v))
        }
    }
}

/// Produces `policy.num_views` independently augmented copies of `sample`.
///
/// Exactly one `u64` is drawn from `rng` regardless of the policy; view `i`
/// then runs on its own stream derived from that draw and `i`.
pub fn make_views<R: Rng + ?Sized>(
    sample: &Sample,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Vec<Sample>, AugmentError> {
    policy.validate()?;
    let base: u64 = rng.gen();
    if !policy.enabled {
        return Ok(vec![sample.clone(); policy.num_views]);
    }
    (0..policy.num_views)
        .map(|i| {
            let mut view_rng = seed::rng(base, &[i as u64]);
            Ok(Sample {
                values: one_view(&sample.values, policy, &mut view_rng)?,
                label: sample.label,
                domain: Arc::clone(&sample.domain),
            })
        })
        .collect()
}
