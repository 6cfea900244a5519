use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::schedule::{q_sample, DiffusionSchedule};
use super::{Denoiser, EpsModel};
use crate::error::{Error, Result};
use crate::layout::sample_decision;
use crate::model::{substitute_captions, Branches, Condition, LayoutCondition, Model, Reference, StorySequence};
use crate::numerics::{adamw_step, AdamW, RngStream, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Stories per stage-2 step; stage 1 draws `batch * frames` single frames.
    pub batch: usize,
    pub frames: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub p_layout: f64,
    pub p_caption: f64,
    pub p_uncond: f64,
    pub p_ref_drop: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.03,
            batch: 4,
            frames: 4,
            stage1_steps: 3000,
            stage2_steps: 5000,
            p_layout: 0.25,
            p_caption: 0.25,
            p_uncond: 0.1,
            p_ref_drop: 0.5,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_layout", self.p_layout),
            ("p_caption", self.p_caption),
            ("p_uncond", self.p_uncond),
            ("p_ref_drop", self.p_ref_drop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || self.batch == 0 || self.frames == 0 {
            return Err(Error::Config("lr, weight_decay must be >= 0; batch, frames > 0".into()));
        }
        Ok(())
    }

    pub fn strategies(&self) -> Strategies {
        Strategies {
            p_layout: self.p_layout,
            p_caption: self.p_caption,
            p_uncond: self.p_uncond,
            p_ref_drop: self.p_ref_drop,
        }
    }

    pub fn steps_for(&self, stage: u8) -> usize {
        if stage == 1 {
            self.stage1_steps
        } else {
            self.stage2_steps
        }
    }
}

/// Per-sample conditioning dropouts applied during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Strategies {
    pub p_layout: f64,
    pub p_caption: f64,
    pub p_uncond: f64,
    pub p_ref_drop: f64,
}

impl Strategies {
    pub const NONE: Strategies = Strategies {
        p_layout: 0.0,
        p_caption: 0.0,
        p_uncond: 0.0,
        p_ref_drop: 0.0,
    };
}

/// Training conditions for a batch. Every decision draws from a child stream keyed
/// by the story id, so it does not depend on batch order.
pub fn build_training_conditions(batch: &[StorySequence], rng: &RngStream, st: &Strategies) -> Result<Vec<Condition>> {
    batch
        .iter()
        .map(|s| {
            if sample_decision(rng, "uncond", s.id, st.p_uncond) {
                return Ok(Condition::unconditional());
            }
            let (subject_captions, _) = substitute_captions(&s.subject_captions, &s.global_caption, st.p_caption, rng, s.id);
            let all_valid_masks = sample_decision(rng, "layout-dropout", s.id, st.p_layout);
            let reference = if sample_decision(rng, "ref-drop", s.id, st.p_ref_drop) {
                None
            } else {
                let r = rng.child(format!("ref-frame/{}", s.id)).below(s.len());
                let latent = s.frames[r].clone();
                let (h, w) = (latent.shape()[0], latent.shape()[1]);
                let m = crate::layout::rasterize_bbox(&s.boxes[r], h, w)?;
                Some(Reference {
                    frame: r,
                    latent,
                    mask: Tensor::new(&[h, w, 1], m.as_f64())?,
                })
            };
            Ok(Condition {
                global_caption: s.global_caption.clone(),
                layout: Some(LayoutCondition {
                    boxes: s.boxes.clone(),
                    subject_captions,
                    reference,
                    all_valid_masks,
                }),
            })
        })
        .collect()
}

/// Mean squared error between the drawn noise and the model's prediction on one batch.
pub fn training_loss(
    tape: &mut Tape,
    model: &dyn EpsModel,
    batch: &[StorySequence],
    schedule: &DiffusionSchedule,
    rng: &RngStream,
    strategies: &Strategies,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::BadShape {
            op: "training_loss",
            detail: "empty batch".into(),
        });
    }
    let mut z_t = Vec::with_capacity(batch.len());
    let mut eps_all = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());
    for s in batch {
        let z0 = s.stacked()?;
        if !z0.all_finite() {
            return Err(Error::NonFinite("training batch"));
        }
        let t = 1 + rng.child(format!("t/{}", s.id)).below(schedule.t_max());
        let mut er = rng.child(format!("eps/{}", s.id));
        let eps = Tensor::from_fn(z0.shape(), |_| er.normal());
        z_t.push(q_sample(&z0, t, &eps, schedule)?);
        eps_all.push(eps);
        ts.push(t as f64);
    }
    let conds = build_training_conditions(batch, rng, strategies)?;
    let z_t = Tensor::stack(&z_t)?;
    let target = Tensor::stack(&eps_all)?;
    let pred = model.eps(tape, &z_t, &ts, &conds)?;
    tape.mse(pred, &target)
}

/// Model under training with its stage and completed step count.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub stage: u8,
    pub step: usize,
}

impl TrainState {
    pub fn stage1(model: Model) -> Self {
        TrainState { model, stage: 1, step: 0 }
    }
}

/// Start stage 2 from a finished stage-1 state: copy-initialize the subject branch,
/// freeze the global branch and reset optimizer moments.
pub fn stage2_from(stage1: Option<TrainState>, looked_for: &Path) -> Result<TrainState> {
    let Some(mut st) = stage1.filter(|s| s.stage == 1) else {
        return Err(Error::MissingStage1Checkpoint(looked_for.to_path_buf()));
    };
    st.model.copy_init_subject()?;
    st.model.freeze_global();
    for (_, p) in st.model.params.iter_mut() {
        p.moments = None;
    }
    st.stage = 2;
    st.step = 0;
    Ok(st)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

pub struct TrainHooks<'a> {
    pub on_log: &'a mut dyn FnMut(&LogRecord),
    pub on_checkpoint: &'a mut dyn FnMut(&TrainState) -> Result<()>,
    /// Polled after every step; `true` finishes the step, checkpoints and returns.
    pub stop: &'a dyn Fn() -> bool,
}

/// Single frames of randomly chosen stories, for the global-only stage.
fn stage1_batch(data: &[StorySequence], n: usize, rng: &mut RngStream) -> Vec<StorySequence> {
    (0..n)
        .map(|_| {
            let s = &data[rng.below(data.len())];
            let k = rng.below(s.len());
            StorySequence {
                id: s.id * 64 + k as u64,
                video_id: s.video_id.clone(),
                frames: vec![s.frames[k].clone()],
                global_caption: s.global_caption.clone(),
                subject_captions: vec![s.subject_captions[k].clone()],
                boxes: vec![s.boxes[k]],
                ref_frame: 0,
                meta: s.meta.clone(),
            }
        })
        .collect()
}

fn stage2_batch(data: &[StorySequence], n: usize, frames: usize, rng: &mut RngStream) -> Result<Vec<StorySequence>> {
    (0..n)
        .map(|_| {
            let s = &data[rng.below(data.len())];
            if s.len() < frames {
                return Err(Error::InvalidRecord(format!("story {} has {} < {frames} frames", s.id, s.len())));
            }
            let mut s = s.clone();
            s.frames.truncate(frames);
            s.subject_captions.truncate(frames);
            s.boxes.truncate(frames);
            s.ref_frame = s.ref_frame.min(frames - 1);
            Ok(s)
        })
        .collect()
}

/// Run `state.stage` from `state.step` to the configured step count.
///
/// Stage 1 trains the global branch alone on single frames. Stage 2 trains the
/// subject branch on whole sequences with the global branch frozen; frozen
/// parameters must receive exactly zero gradient.
pub fn train_stage(
    state: &mut TrainState,
    data: &[StorySequence],
    schedule: &DiffusionSchedule,
    tcfg: &TrainConfig,
    seed: u64,
    hooks: TrainHooks<'_>,
) -> Result<Vec<LogRecord>> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidRecord("empty training set".into()));
    }
    let stage = state.stage;
    let total = tcfg.steps_for(stage);
    let opt = AdamW::new(tcfg.lr, tcfg.weight_decay);
    let strategies = tcfg.strategies();
    let branches = if stage == 1 { Branches::Global } else { Branches::Full };
    let mut log = Vec::new();
    while state.step < total {
        let step = state.step + 1;
        let t0 = Instant::now();
        let step_rng = RngStream::new(seed, format!("train/stage{stage}/step{step}"));
        let mut pick = step_rng.child("batch");
        let batch = if stage == 1 {
            stage1_batch(data, tcfg.batch * tcfg.frames, &mut pick)
        } else {
            stage2_batch(data, tcfg.batch, tcfg.frames, &mut pick)?
        };
        let mut tape = Tape::new();
        let den = Denoiser {
            model: &state.model,
            branches,
        };
        let loss_var = training_loss(&mut tape, &den, &batch, schedule, &step_rng, &strategies)?;
        let loss = tape.value(loss_var).item()?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = tape.backward(loss_var, &state.model.params)?;
        let mut sq = 0.0;
        for (name, p) in state.model.params.iter() {
            let g = &grads[name];
            let n2: f64 = g.data().iter().map(|x| x * x).sum();
            if p.requires_grad {
                sq += n2;
            } else if n2 != 0.0 {
                return Err(Error::Checkpoint(format!("frozen parameter {name} received a gradient")));
            }
        }
        if !sq.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        adamw_step(&mut state.model.params, &grads, &opt, step as u64)?;
        state.step = step;
        let rec = LogRecord {
            step,
            stage,
            loss,
            grad_norm: sq.sqrt(),
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        (hooks.on_log)(&rec);
        log.push(rec);
        let stop = (hooks.stop)();
        if stop || step == total || (tcfg.checkpoint_every > 0 && step % tcfg.checkpoint_every == 0) {
            (hooks.on_checkpoint)(state)?;
        }
        if stop {
            break;
        }
    }
    Ok(log)
}
