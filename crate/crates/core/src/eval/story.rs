//! Sampling a set of evaluation stories under one conditioning mode and scoring them.

use serde::{Deserialize, Serialize};

use super::{fid, layout_adherence, random_placement_baseline, subject_consistency, toy_features, FeatureMode, MetricRecord};
use crate::diffusion::{sample, Denoiser, DiffusionSchedule, SampleSpec};
use crate::error::{Error, Result};
use crate::layout::BoundingBox;
use crate::model::{Branches, Condition, Model, StorySequence};
use crate::numerics::Tensor;
use crate::pipeline::detect_subject_stub;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Boxes, subject captions and the story's reference frame.
    WithLayout,
    /// Global caption only; the model falls back to full-frame masks.
    WithoutLayout,
    /// Layout inputs given, but the subject branch is never run.
    NoSubjectBranch,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::WithLayout, EvalMode::WithoutLayout, EvalMode::NoSubjectBranch];

    pub fn label(self) -> &'static str {
        match self {
            EvalMode::WithLayout => "with_layout",
            EvalMode::WithoutLayout => "without_layout",
            EvalMode::NoSubjectBranch => "no_subject_branch",
        }
    }

    pub fn branches(self) -> Branches {
        match self {
            EvalMode::NoSubjectBranch => Branches::Global,
            _ => Branches::Full,
        }
    }

    pub fn condition(self, story: &StorySequence) -> Result<Condition> {
        Condition::from_story(story, self != EvalMode::WithoutLayout, self != EvalMode::WithoutLayout)
    }
}

#[derive(Clone, Debug)]
pub struct ModeResult {
    pub mode: EvalMode,
    /// `(n, f, h, w, 4)`.
    pub samples: Tensor,
    /// Over all frames of all stories.
    pub adherence: f64,
    /// One score per story.
    pub consistency: Vec<f64>,
    pub fid: f64,
}

impl ModeResult {
    pub fn mean_consistency(&self) -> f64 {
        self.consistency.iter().sum::<f64>() / self.consistency.len().max(1) as f64
    }

    pub fn frames(&self, story: usize) -> Vec<Tensor> {
        let s = self.samples.index_axis0(story);
        (0..s.shape()[0]).map(|k| s.index_axis0(k)).collect()
    }
}

/// Full-mode features of every frame of `stories`.
pub fn story_features(stories: &[StorySequence]) -> Result<Tensor> {
    let frames: Vec<Tensor> = stories.iter().flat_map(|s| s.frames.iter().cloned()).collect();
    toy_features(&frames, None, FeatureMode::Full)
}

/// Subject boxes found by the stub detector, the full frame where none is found.
/// Consistency is measured on detected subjects rather than on the requested boxes,
/// so a model that ignores the layout is not penalized for cropping background.
pub fn detected_boxes(frames: &[Tensor]) -> Result<Vec<BoundingBox>> {
    frames
        .iter()
        .map(|f| match detect_subject_stub(f) {
            Ok(b) => Ok(b),
            Err(Error::NoSubject) => Ok(BoundingBox::FULL),
            Err(e) => Err(e),
        })
        .collect()
}

/// Sample every story under `mode`, with each story's frame count and boxes, and
/// score against `reference` features (from [`story_features`] of held-out stories).
pub fn evaluate_mode(
    model: &Model,
    schedule: &DiffusionSchedule,
    spec: &SampleSpec,
    stories: &[StorySequence],
    reference: &Tensor,
    mode: EvalMode,
) -> Result<ModeResult> {
    let Some(first) = stories.first() else {
        return Err(Error::InvalidRecord("no evaluation stories".into()));
    };
    let f = first.len();
    if stories.iter().any(|s| s.len() != f) {
        return Err(Error::InvalidRecord("evaluation stories must share one length".into()));
    }
    let conds = stories.iter().map(|s| mode.condition(s)).collect::<Result<Vec<_>>>()?;
    let den = Denoiser {
        model,
        branches: mode.branches(),
    };
    let (h, w) = (model.cfg.h, model.cfg.w);
    let samples = sample(&den, schedule, spec, &conds, f, (h, w, 4))?;
    let mut all_frames = Vec::new();
    let mut all_boxes = Vec::new();
    let mut consistency = Vec::new();
    for (i, story) in stories.iter().enumerate() {
        let s = samples.index_axis0(i);
        let frames: Vec<Tensor> = (0..f).map(|k| s.index_axis0(k)).collect();
        consistency.push(subject_consistency(&frames, &detected_boxes(&frames)?)?);
        all_boxes.extend_from_slice(&story.boxes);
        all_frames.extend(frames);
    }
    let adherence = layout_adherence(&all_frames, &all_boxes)?;
    let fid = fid(&toy_features(&all_frames, None, FeatureMode::Full)?, reference)?;
    Ok(ModeResult {
        mode,
        samples,
        adherence,
        consistency,
        fid,
    })
}

/// Metric lines for a set of mode results plus the random-placement baseline.
pub fn mode_records(results: &[ModeResult], stories: &[StorySequence], config_hash: &str, seed: u64) -> Vec<MetricRecord> {
    let boxes: Vec<BoundingBox> = stories.iter().flat_map(|s| s.boxes.iter().copied()).collect();
    let rec = |metric: String, value: f64, n: usize| MetricRecord {
        metric,
        value,
        n,
        config_hash: config_hash.to_string(),
        seed,
    };
    let mut out = vec![rec("random_placement_baseline".into(), random_placement_baseline(&boxes), boxes.len())];
    for r in results {
        let l = r.mode.label();
        out.push(rec(format!("{l}/layout_adherence"), r.adherence, boxes.len()));
        out.push(rec(format!("{l}/toy_subject_consistency"), r.mean_consistency(), r.consistency.len()));
        out.push(rec(format!("{l}/toy_fid"), r.fid, boxes.len()));
    }
    out
}
