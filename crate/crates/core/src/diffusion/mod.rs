//! Noise schedule, noising process, the noise-prediction objective, the two-stage
//! training driver and guided sampling.

pub mod sample;
pub mod schedule;
pub mod train;

use crate::error::Result;
use crate::model::{Branches, Condition, Model};
use crate::numerics::{Tape, Tensor, Var};

pub use sample::{guide, sample, timestep_subsequence, SampleSpec, Sampler};
pub use schedule::{make_schedule, q_sample, q_step, reconstruct_z0, DiffusionSchedule, ScheduleConfig};
pub use train::{
    build_training_conditions, stage2_from, train_stage, training_loss, LogRecord, Strategies, TrainConfig, TrainHooks,
    TrainState,
};

/// Anything that predicts noise `(b, f, h, w, 4)` for noisy latents at per-sample timesteps.
pub trait EpsModel {
    fn eps(&self, tape: &mut Tape, z_t: &Tensor, t: &[f64], conds: &[Condition]) -> Result<Var>;
}

/// A [`Model`] evaluated with a fixed set of branches.
#[derive(Clone, Copy)]
pub struct Denoiser<'a> {
    pub model: &'a Model,
    pub branches: Branches,
}

impl EpsModel for Denoiser<'_> {
    fn eps(&self, tape: &mut Tape, z_t: &Tensor, t: &[f64], conds: &[Condition]) -> Result<Var> {
        self.model.forward(tape, z_t, t, conds, self.branches)
    }
}
