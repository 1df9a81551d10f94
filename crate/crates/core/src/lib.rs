//! Latent uncertainty compensation and adversarial uncertainty modeling for
//! noisy-label training, on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod compensation;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod mining;
pub mod network;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use compensation::{compensate, forward_with_compensation, CompensationConfig, EpsMode, Mode, PerturbationDraw};
pub use config::{AblationFlags, DecayMode, SamplerKind, TrainConfig};
pub use data::{corrupt_labels, make_blobs, shift_domain, BlobSpec, LabeledDataset, NoiseKind, NoiseSpec};
pub use error::{AlumError, Result};
pub use eval::{evaluate, EvalReport, REJECTION_RATES};
pub use experiment::{fit, run_ablation, run_experiment, EpochMetrics, RunResult};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use losses::{ce_loss, mixup, total_loss, triplet_loss, LossBreakdown, Members, MixWeighting, MixedFeatures};
pub use mining::{cosine_distance, mine_triplets, PSchedule, TripletPlan};
pub use network::{head_forward, uncertainty_score, Architecture, Grid, Network, ScoreKind, UncertainBatch};
pub use rng::{RngKey, StepKey};
pub use stats::{batch_stats, instance_stats, layer_stats, BatchStats, LayerStats};
pub use tensor::{DiffArray, Tape, Var};
pub use train::{adam_update, train_step, AdamSettings, OptimizerState};
