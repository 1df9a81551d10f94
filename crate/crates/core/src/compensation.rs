//! Train-time uncertainty-aware transformation of latent feature maps.
//!
//! Each enabled layer's feature batch is re-normalized by its own channel
//! statistics and re-injected with perturbed statistics, the perturbation
//! being scaled by the batch-level spread of those statistics:
//!
//! ```text
//! F̂ = (S + ε_σ·Σ_σ) · (F − U) / (S + eps_div) + (U + ε_μ·Σ_μ)
//! ```

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{AlumError, Result};
use crate::network::BoundNetwork;
use crate::rng::{RngKey, StepKey};
use crate::stats::{layer_stats, LayerStats};
use crate::tensor::{DiffArray, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EpsMode {
    /// Independent ε_μ, ε_σ for every (sample, channel).
    #[default]
    PerElement,
    /// One ε shared by both terms and all elements.
    SharedScalar,
}

impl FromStr for EpsMode {
    type Err = AlumError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-element" => Ok(EpsMode::PerElement),
            "shared-scalar" => Ok(EpsMode::SharedScalar),
            _ => Err(AlumError::Config(format!("unknown eps mode `{s}`"))),
        }
    }
}

impl fmt::Display for EpsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpsMode::PerElement => "per-element",
            EpsMode::SharedScalar => "shared-scalar",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensationConfig {
    /// 1-based indices of intermediate layers to transform.
    pub enabled_layers: Vec<usize>,
    pub mode: EpsMode,
    pub apply_in_eval: bool,
    pub eps_div: f64,
    /// Use batch-level μ, σ in place of the per-instance U, S everywhere.
    pub eq7_literal: bool,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        CompensationConfig {
            enabled_layers: Vec::new(),
            mode: EpsMode::PerElement,
            apply_in_eval: false,
            eps_div: 1e-6,
            eq7_literal: false,
        }
    }
}

impl CompensationConfig {
    pub fn layers(layers: &[usize]) -> Self {
        CompensationConfig {
            enabled_layers: layers.to_vec(),
            ..Default::default()
        }
    }

    pub fn is_enabled(&self) -> bool {
        !self.enabled_layers.is_empty()
    }

    /// Layer indices must be in `1..=num_layers` (the input is never transformed).
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if let Some(&k) = self.enabled_layers.iter().find(|&&k| k == 0 || k > num_layers) {
            return Err(AlumError::Config(format!(
                "compensation layer {k} is not an intermediate layer (1..={num_layers})"
            )));
        }
        if self.eps_div.is_nan() || self.eps_div <= 0.0 {
            return Err(AlumError::Config("eps_div must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Standard-normal draws for one layer of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDraw {
    /// `B×C`
    pub eps_mean: DiffArray,
    /// `B×C`; identical to `eps_mean` in shared-scalar mode.
    pub eps_std: DiffArray,
}

impl PerturbationDraw {
    pub fn sample(key: RngKey, batch: usize, channels: usize, mode: EpsMode) -> Self {
        let mut rng = key.rng();
        let n = batch * channels;
        let shape = [batch, channels];
        match mode {
            EpsMode::PerElement => {
                let mut draw = |_| StandardNormal.sample(&mut rng);
                let eps_mean: Vec<f64> = (0..n).map(&mut draw).collect();
                let eps_std: Vec<f64> = (0..n).map(&mut draw).collect();
                PerturbationDraw {
                    eps_mean: DiffArray::new(&shape, eps_mean).expect("shape"),
                    eps_std: DiffArray::new(&shape, eps_std).expect("shape"),
                }
            }
            EpsMode::SharedScalar => {
                let e: f64 = StandardNormal.sample(&mut rng);
                PerturbationDraw {
                    eps_mean: DiffArray::filled(&shape, e),
                    eps_std: DiffArray::filled(&shape, e),
                }
            }
        }
    }

    pub fn zeros(batch: usize, channels: usize) -> Self {
        PerturbationDraw {
            eps_mean: DiffArray::zeros(&[batch, channels]),
            eps_std: DiffArray::zeros(&[batch, channels]),
        }
    }
}

/// Broadcast a `B×C` array to `B×C×H×W`.
fn spread_spatial(tape: &mut Tape, v: Var, shape: &[usize]) -> Result<Var> {
    let r = tape.reshape(v, &[shape[0], shape[1], 1, 1])?;
    tape.expand(r, shape)
}

/// Broadcast a `C` array to `B×C`.
fn spread_rows(tape: &mut Tape, v: Var, b: usize) -> Result<Var> {
    let c = tape.shape(v)[0];
    let r = tape.reshape(v, &[1, c])?;
    tape.expand(r, &[b, c])
}

/// Apply the compensation transform to `features` using `stats` computed from it.
pub fn compensate(
    tape: &mut Tape,
    features: Var,
    stats: &LayerStats,
    draw: &PerturbationDraw,
    cfg: &CompensationConfig,
) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 4 {
        return Err(AlumError::shape(format!("compensate: feature batch {shape:?}")));
    }
    let (b, c) = (shape[0], shape[1]);
    if tape.shape(stats.instance_mean) != [b, c] || tape.shape(stats.std_of_means) != [c] {
        return Err(AlumError::shape(format!(
            "compensate: stats {:?}/{:?} do not match features {shape:?}",
            tape.shape(stats.instance_mean),
            tape.shape(stats.std_of_means)
        )));
    }
    if draw.eps_mean.shape() != [b, c] || draw.eps_std.shape() != [b, c] {
        return Err(AlumError::shape(format!(
            "compensate: draw {:?} for features {shape:?}",
            draw.eps_mean.shape()
        )));
    }

    let (center, scale) = if cfg.eq7_literal {
        (
            spread_rows(tape, stats.mean_of_means, b)?,
            spread_rows(tape, stats.mean_of_stds, b)?,
        )
    } else {
        (stats.instance_mean, stats.instance_std)
    };
    let spread_mu = spread_rows(tape, stats.std_of_means, b)?;
    let spread_sigma = spread_rows(tape, stats.std_of_stds, b)?;
    let eps_mu = tape.constant(draw.eps_mean.clone());
    let eps_sigma = tape.constant(draw.eps_std.clone());

    // new scale over old scale, per (b, c)
    let jitter_sigma = tape.mul(eps_sigma, spread_sigma)?;
    let new_scale = tape.add(scale, jitter_sigma)?;
    let old_scale = tape.add_scalar(scale, cfg.eps_div);
    let ratio = tape.div(new_scale, old_scale)?;

    let jitter_mu = tape.mul(eps_mu, spread_mu)?;
    let new_center = tape.add(center, jitter_mu)?;

    let center4 = spread_spatial(tape, center, &shape)?;
    let ratio4 = spread_spatial(tape, ratio, &shape)?;
    let new_center4 = spread_spatial(tape, new_center, &shape)?;
    let centered = tape.sub(features, center4)?;
    let rescaled = tape.mul(ratio4, centered)?;
    tape.add(rescaled, new_center4)
}

/// Backbone forward pass with compensation at every enabled layer (train
/// mode, or eval mode when `apply_in_eval`). Returns penultimate features.
pub fn forward_with_compensation(
    tape: &mut Tape,
    net: &BoundNetwork<'_>,
    x: Var,
    cfg: &CompensationConfig,
    mode: Mode,
    step: StepKey,
) -> Result<Var> {
    cfg.validate(net.net.arch.num_layers())?;
    let active = match mode {
        Mode::Train => cfg.is_enabled(),
        Mode::Eval => cfg.is_enabled() && cfg.apply_in_eval,
    };
    if !active {
        return net.plain_backbone(tape, x);
    }
    net.backbone(tape, x, &mut |tape, k, f| {
        if !cfg.enabled_layers.contains(&k) {
            return Ok(f);
        }
        let stats = layer_stats(tape, f)?;
        let shape = tape.shape(f);
        let draw = PerturbationDraw::sample(step.compensation(k), shape[0], shape[1], cfg.mode);
        compensate(tape, f, &stats, &draw, cfg)
    })
}
