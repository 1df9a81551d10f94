//! Channel statistics of a feature batch.
//!
//! Per instance: mean and population std of every channel's spatial map.
//! Per batch: mean and population std of those per-instance statistics.
//! Everything is computed on the tape, so gradients flow through it.

use crate::error::{AlumError, Result};
use crate::tensor::{Tape, Var};

/// Statistics of one layer's `B×C×H×W` feature batch.
#[derive(Debug, Clone, Copy)]
pub struct LayerStats {
    /// `B×C`
    pub instance_mean: Var,
    /// `B×C`
    pub instance_std: Var,
    /// `C`: column mean of `instance_mean`.
    pub mean_of_means: Var,
    /// `C`: column std of `instance_mean`.
    pub std_of_means: Var,
    /// `C`: column mean of `instance_std`.
    pub mean_of_stds: Var,
    /// `C`: column std of `instance_std`.
    pub std_of_stds: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchStats {
    pub mean_of_means: Var,
    pub std_of_means: Var,
    pub mean_of_stds: Var,
    pub std_of_stds: Var,
}

/// Spatial mean and std of every (sample, channel) map. Requires `H·W ≥ 2`.
pub fn instance_stats(tape: &mut Tape, features: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(features);
    if shape.len() != 4 {
        return Err(AlumError::shape(format!(
            "feature batch must be B×C×H×W, got {shape:?}"
        )));
    }
    let hw = shape[2] * shape[3];
    if hw < 2 {
        return Err(AlumError::DegenerateSpatialDims(hw));
    }
    let mean = tape.spatial_mean(features)?;
    let std = tape.spatial_std(features)?;
    Ok((mean, std))
}

/// Column means and stds of `B×C` instance statistics. Requires `B ≥ 2`.
pub fn batch_stats(tape: &mut Tape, means: Var, stds: Var) -> Result<BatchStats> {
    let (ms, ss) = (tape.shape(means), tape.shape(stds));
    if ms.len() != 2 || ms != ss {
        return Err(AlumError::shape(format!(
            "instance statistics must both be B×C, got {ms:?} and {ss:?}"
        )));
    }
    if ms[0] < 2 {
        return Err(AlumError::DegenerateBatch(ms[0]));
    }
    Ok(BatchStats {
        mean_of_means: tape.batch_mean(means)?,
        std_of_means: tape.batch_std(means)?,
        mean_of_stds: tape.batch_mean(stds)?,
        std_of_stds: tape.batch_std(stds)?,
    })
}

pub fn layer_stats(tape: &mut Tape, features: Var) -> Result<LayerStats> {
    let (instance_mean, instance_std) = instance_stats(tape, features)?;
    let b = batch_stats(tape, instance_mean, instance_std)?;
    Ok(LayerStats {
        instance_mean,
        instance_std,
        mean_of_means: b.mean_of_means,
        std_of_means: b.std_of_means,
        mean_of_stds: b.mean_of_stds,
        std_of_stds: b.std_of_stds,
    })
}
