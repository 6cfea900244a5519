//! The subcommands as library calls: every one validates its config before it
//! touches the output directory, and all artifacts live under one root.
//!
//! ```text
//! data/{train,heldout,eval}.jsonl   story manifests, latents beside them
//! records/records.jsonl             synthetic frame records for the pipeline
//! pipeline/{train,bench}.jsonl      pipeline output manifests
//! checkpoints/stage{1,2}.ckpt
//! logs/train_stage{1,2}.jsonl
//! samples/                          sampled latents and PPM renders
//! eval/                             metric report, table, bar image, renders
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::diffusion::{sample, stage2_from, train_stage, Denoiser, LogRecord, TrainHooks, TrainState};
use crate::error::{Error, Result};
use crate::eval::{evaluate_mode, mode_records, story_features, summary_table, EvalMode, MetricRecord, ModeResult};
use crate::layout::BoundingBox;
use crate::model::{Branches, Condition, LayoutCondition, Model, StorySequence};
use crate::pipeline::records::{read_jsonl, write_jsonl};
use crate::pipeline::{
    build_manifest, gen_synthetic_stories, run_pipeline, split_manifests, write_latent, write_stories,
    write_synthetic_records, DatasetManifest, FrameRecord, ProjectionFeatures, Services, Split, StubCaptioner,
    StubDetector,
};
use crate::render::{render_bars, render_latent};

/// Offsets keeping held-out and evaluation story ids, and so their video ids and
/// random streams, disjoint from training.
pub const HELDOUT_FIRST_ID: u64 = 1_000_000;
pub const EVAL_FIRST_ID: u64 = 2_000_000;

/// Stories rendered per mode in the eval directory.
const EVAL_RENDERS: usize = 2;

#[derive(Clone, Debug)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Paths { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("{split}.jsonl"))
    }

    pub fn records_dir(&self) -> PathBuf {
        self.root.join("records")
    }

    pub fn pipeline_dir(&self) -> PathBuf {
        self.root.join("pipeline")
    }

    pub fn checkpoint(&self, stage: u8) -> PathBuf {
        self.root.join("checkpoints").join(format!("stage{stage}.ckpt"))
    }

    pub fn train_log(&self, stage: u8) -> PathBuf {
        self.root.join("logs").join(format!("train_stage{stage}.jsonl"))
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

pub struct StorySets {
    pub train: Vec<StorySequence>,
    pub heldout: Vec<StorySequence>,
    pub eval: Vec<StorySequence>,
}

pub fn generate_story_sets(cfg: &RunConfig) -> Result<StorySets> {
    let d = &cfg.data;
    Ok(StorySets {
        train: gen_synthetic_stories(d.n_train, &cfg.synth, cfg.seed, 0)?,
        heldout: gen_synthetic_stories(d.n_heldout, &cfg.synth, cfg.seed, HELDOUT_FIRST_ID)?,
        eval: gen_synthetic_stories(d.n_eval, &cfg.synth, cfg.seed, EVAL_FIRST_ID)?,
    })
}

/// Write the three story sets with their manifests; returns `(split, sets)` counts.
pub fn gen_data(cfg: &RunConfig, paths: &Paths) -> Result<Vec<(String, usize)>> {
    cfg.validate()?;
    let sets = generate_story_sets(cfg)?;
    let dir = paths.data_dir();
    let train = write_stories(&sets.train, &dir, "train")?;
    let train_m = build_manifest(train, Split::Train, &cfg.pipeline.rules, None, cfg.seed)?;
    train_m.write(&paths.manifest("train"))?;
    let mut out = vec![("train".to_string(), train_m.header.sets)];
    for (name, stories) in [("heldout", &sets.heldout), ("eval", &sets.eval)] {
        let entries = write_stories(stories, &dir, name)?;
        let m = build_manifest(entries, Split::Train, &cfg.pipeline.rules, Some(&train_m.entries), cfg.seed)?;
        m.write(&paths.manifest(name))?;
        out.push((name.to_string(), m.header.sets));
    }
    Ok(out)
}

pub fn load_split(paths: &Paths, split: &str) -> Result<Vec<StorySequence>> {
    let p = paths.manifest(split);
    if !p.exists() {
        return Err(Error::Config(format!("{} not found; run gen-data first", p.display())));
    }
    DatasetManifest::read(&p)?.load_stories(&paths.data_dir())
}

/// Cluster, group and annotate a frame-record set into train and bench manifests.
pub fn pipeline(cfg: &RunConfig, paths: &Paths) -> Result<(DatasetManifest, DatasetManifest)> {
    cfg.validate()?;
    let (records, base): (Vec<FrameRecord>, PathBuf) = match &cfg.data.records {
        Some(p) => (read_jsonl(p)?, p.parent().unwrap_or(Path::new(".")).to_path_buf()),
        None => {
            let dir = paths.records_dir();
            let d = &cfg.data;
            let recs = write_synthetic_records(d.n_videos, d.frames_per_video, d.segment, &cfg.synth, cfg.seed, &dir)?;
            write_jsonl(&dir.join("records.jsonl"), &recs)?;
            (recs, dir)
        }
    };
    let features = ProjectionFeatures::new(cfg.pipeline.feature_seed);
    let sv = Services {
        detector: &StubDetector,
        features: &features,
        captioner: &StubCaptioner,
    };
    let entries = run_pipeline(records, &base, &cfg.pipeline, cfg.seed, &sv)?;
    let (train, bench) = split_manifests(entries, &cfg.pipeline, cfg.seed)?;
    train.write(&paths.pipeline_dir().join("train.jsonl"))?;
    bench.write(&paths.pipeline_dir().join("bench.jsonl"))?;
    Ok((train, bench))
}

fn load_checkpoint(cfg: &RunConfig, path: &Path, force: bool) -> Result<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    ck.check_compatible(cfg, force)?;
    let mut cfg = cfg.clone();
    if ck.header.config.model != cfg.model {
        log::warn!("{}: using the checkpoint's model config", path.display());
        cfg.model = ck.header.config.model.clone();
    }
    Ok((ck, cfg))
}

pub struct TrainOptions<'a> {
    pub stage: u8,
    pub force: bool,
    /// Polled after each step; `true` checkpoints and returns early.
    pub stop: &'a dyn Fn() -> bool,
}

/// Run (or resume) one training stage. Each step is appended to the stage's log.
pub fn train(cfg: &RunConfig, paths: &Paths, opts: &TrainOptions<'_>) -> Result<TrainState> {
    cfg.validate()?;
    let stage = opts.stage;
    if stage != 1 && stage != 2 {
        return Err(Error::Config(format!("stage must be 1 or 2, got {stage}")));
    }
    let stage1_path = paths.checkpoint(1);
    if stage == 2 && !stage1_path.exists() {
        return Err(Error::MissingStage1Checkpoint(stage1_path));
    }
    let data = load_split(paths, "train")?;
    let own = paths.checkpoint(stage);
    let (mut state, cfg) = if own.exists() {
        let (ck, c) = load_checkpoint(cfg, &own, opts.force)?;
        if ck.header.stage != stage {
            return Err(Error::Checkpoint(format!("{} holds stage {}", own.display(), ck.header.stage)));
        }
        log::info!("resuming stage {stage} at step {}", ck.header.step);
        (ck.into_state(), c)
    } else if stage == 1 {
        (TrainState::stage1(Model::new(cfg.model.clone(), cfg.seed)?), cfg.clone())
    } else {
        let (ck, c) = load_checkpoint(cfg, &stage1_path, opts.force)?;
        if ck.header.step < c.training.stage1_steps {
            log::warn!("stage-1 checkpoint stopped at step {} of {}", ck.header.step, c.training.stage1_steps);
        }
        (stage2_from(Some(ck.into_state()), &stage1_path)?, c)
    };
    let schedule = cfg.schedule.build()?;
    let log_path = paths.train_log(stage);
    fs::create_dir_all(log_path.parent().unwrap())?;
    let mut log_file = OpenOptions::new().create(true).append(true).open(&log_path)?;
    let mut io_err: Option<std::io::Error> = None;
    let every = (cfg.training.steps_for(stage) / 20).max(1);
    let mut on_log = |r: &LogRecord| {
        if r.step % every == 0 {
            log::info!("stage {} step {} loss {:.5} grad_norm {:.4}", r.stage, r.step, r.loss, r.grad_norm);
        }
        let line = serde_json::to_string(r).expect("log record serializes");
        if let Err(e) = writeln!(log_file, "{line}") {
            io_err.get_or_insert(e);
        }
    };
    let mut on_checkpoint = |s: &TrainState| Checkpoint::from_state(s, &cfg)?.save(&own);
    train_stage(
        &mut state,
        &data,
        &schedule,
        &cfg.training,
        cfg.seed,
        TrainHooks {
            on_log: &mut on_log,
            on_checkpoint: &mut on_checkpoint,
            stop: opts.stop,
        },
    )?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    Ok(state)
}

pub fn read_train_log(paths: &Paths, stage: u8) -> Result<Vec<LogRecord>> {
    read_jsonl(&paths.train_log(stage))
}

/// The most trained model available: stage 2 with both branches, else stage 1 alone.
pub fn load_model(cfg: &RunConfig, paths: &Paths, force: bool) -> Result<(Model, Branches)> {
    for (stage, branches) in [(2, Branches::Full), (1, Branches::Global)] {
        let p = paths.checkpoint(stage);
        if p.exists() {
            let (ck, _) = load_checkpoint(cfg, &p, force)?;
            return Ok((ck.into_state().model, branches));
        }
    }
    Err(Error::Config(format!("no checkpoint under {}; run train first", paths.root.display())))
}

/// One line of a prompt file for the sample subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub global_caption: String,
    #[serde(default)]
    pub boxes: Option<Vec<BoundingBox>>,
    #[serde(default)]
    pub subject_captions: Option<Vec<String>>,
}

impl PromptSpec {
    pub fn frames(&self, default: usize) -> usize {
        self.boxes.as_ref().map_or(default, Vec::len)
    }

    pub fn condition(&self) -> Result<Condition> {
        let layout = match &self.boxes {
            None => None,
            Some(boxes) => {
                for b in boxes {
                    b.validate()?;
                }
                let caps = match &self.subject_captions {
                    Some(c) if c.len() == boxes.len() => c.clone(),
                    Some(c) => return Err(Error::InvalidRecord(format!("{} subject captions for {} boxes", c.len(), boxes.len()))),
                    None => vec![self.global_caption.clone(); boxes.len()],
                };
                Some(LayoutCondition {
                    boxes: boxes.clone(),
                    subject_captions: caps,
                    reference: None,
                    all_valid_masks: false,
                })
            }
        };
        Ok(Condition {
            global_caption: self.global_caption.clone(),
            layout,
        })
    }
}

fn write_sample(samples: &crate::numerics::Tensor, i: usize, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let s = samples.index_axis0(i);
    let frames: Vec<_> = (0..s.shape()[0]).map(|k| s.index_axis0(k)).collect();
    for (k, f) in frames.iter().enumerate() {
        write_latent(&dir.join(stem).join(format!("f{k}.l2sa")), f)?;
    }
    render_latent(&frames, dir, stem)
}

/// Sample the prompt file, or the first stories of the eval split with their
/// layouts, and write latents and renders. Returns the rendered image paths.
pub fn sample_prompts(cfg: &RunConfig, paths: &Paths, force: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let (conds, frames) = match &cfg.data.prompts {
        Some(p) => {
            let specs: Vec<PromptSpec> = read_jsonl(p)?;
            let Some(first) = specs.first() else {
                return Err(Error::InvalidRecord(format!("{}: no prompts", p.display())));
            };
            let f = first.frames(cfg.training.frames);
            if specs.iter().any(|s| s.frames(cfg.training.frames) != f) {
                return Err(Error::InvalidRecord("all prompts must have the same number of frames".into()));
            }
            (specs.iter().map(PromptSpec::condition).collect::<Result<Vec<_>>>()?, f)
        }
        None => {
            let mut stories = load_split(paths, "eval")?;
            stories.truncate(cfg.data.n_sample);
            let f = stories[0].len();
            let conds = stories
                .iter()
                .map(|s| EvalMode::WithLayout.condition(s))
                .collect::<Result<Vec<_>>>()?;
            (conds, f)
        }
    };
    let (model, branches) = load_model(cfg, paths, force)?;
    if frames > model.cfg.max_frames {
        return Err(Error::Config(format!("{frames} frames exceed model.max_frames {}", model.cfg.max_frames)));
    }
    let schedule = cfg.schedule.build()?;
    log::info!("steps={} guidance={}", cfg.sample.steps, cfg.sample.guidance_scale);
    let den = Denoiser { model: &model, branches };
    let samples = sample(&den, &schedule, &cfg.sample, &conds, frames, (model.cfg.h, model.cfg.w, 4))?;
    let dir = paths.samples_dir();
    let mut out = Vec::new();
    for i in 0..conds.len() {
        out.extend(write_sample(&samples, i, &dir, &format!("s{i:03}"))?);
    }
    Ok(out)
}

pub struct EvalOutcome {
    pub records: Vec<MetricRecord>,
    pub results: Vec<ModeResult>,
    pub stories: Vec<StorySequence>,
}

/// Score the stage-2 model on the eval split under every [`EvalMode`] and write
/// `report.jsonl`, `report.txt` and `bars.ppm` under the eval directory.
pub fn evaluate(cfg: &RunConfig, paths: &Paths, force: bool) -> Result<EvalOutcome> {
    cfg.validate()?;
    let stories = load_split(paths, "eval")?;
    let heldout = load_split(paths, "heldout")?;
    let p = paths.checkpoint(2);
    if !p.exists() {
        return Err(Error::Config(format!("{} not found; eval needs a stage-2 model", p.display())));
    }
    let (ck, _) = load_checkpoint(cfg, &p, force)?;
    let model = ck.into_state().model;
    let schedule = cfg.schedule.build()?;
    let reference = story_features(&heldout)?;
    let mut results = Vec::new();
    for mode in EvalMode::ALL {
        log::info!("evaluating {} on {} stories", mode.label(), stories.len());
        results.push(evaluate_mode(&model, &schedule, &cfg.sample, &stories, &reference, mode)?);
    }
    let records = mode_records(&results, &stories, &cfg.hash(), cfg.seed);
    let dir = paths.eval_dir();
    fs::create_dir_all(&dir)?;
    write_jsonl(&dir.join("report.jsonl"), &records)?;
    fs::write(dir.join("report.txt"), summary_table(&records))?;
    render_bars(&records.iter().map(|r| r.value).collect::<Vec<_>>(), &dir.join("bars.ppm"))?;
    for r in &results {
        for i in 0..EVAL_RENDERS.min(stories.len()) {
            write_sample(&r.samples, i, &dir.join(r.mode.label()), &format!("s{i:03}"))?;
        }
    }
    Ok(EvalOutcome { records, results, stories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::read_ppm;

    fn tiny_run() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.d_model = 8;
        c.model.n_heads = 2;
        c.model.n_global_blocks = 2;
        c.model.h = 8;
        c.model.w = 8;
        c.model.vocab_dim = 4;
        c.synth.h = 8;
        c.synth.w = 8;
        c.data.n_train = 6;
        c.data.n_heldout = 4;
        c.data.n_eval = 2;
        c.data.n_sample = 2;
        c.data.n_videos = 2;
        c.data.frames_per_video = 60;
        c.data.segment = 20;
        c.training.stage1_steps = 3;
        c.training.stage2_steps = 2;
        c.training.batch = 2;
        c.sample.steps = 2;
        c
    }

    #[test]
    fn full_workflow_on_a_tiny_model() {
        let dir = tempfile::tempdir().unwrap();
        let paths = Paths::new(dir.path());
        let cfg = tiny_run();
        let never = || false;
        let opts = |stage| TrainOptions { stage, force: false, stop: &never };

        assert!(matches!(train(&cfg, &paths, &opts(1)), Err(Error::Config(_))));
        let counts = gen_data(&cfg, &paths).unwrap();
        assert_eq!(counts, vec![("train".into(), 6), ("heldout".into(), 4), ("eval".into(), 2)]);
        assert!(matches!(train(&cfg, &paths, &opts(2)), Err(Error::MissingStage1Checkpoint(_))));

        let s1 = train(&cfg, &paths, &opts(1)).unwrap();
        assert_eq!((s1.stage, s1.step), (1, 3));
        assert_eq!(read_train_log(&paths, 1).unwrap().len(), 3);
        // resuming a finished stage is a no-op
        assert_eq!(train(&cfg, &paths, &opts(1)).unwrap().step, 3);
        assert_eq!(read_train_log(&paths, 1).unwrap().len(), 3);
        let (_, b) = load_model(&cfg, &paths, false).unwrap();
        assert_eq!(b, Branches::Global);

        let s2 = train(&cfg, &paths, &opts(2)).unwrap();
        assert_eq!((s2.stage, s2.step), (2, 2));
        let imgs = sample_prompts(&cfg, &paths, false).unwrap();
        assert_eq!(imgs.len(), 2 * 4);
        assert_eq!(read_ppm(&imgs[0]).unwrap().0, 8);

        let out = evaluate(&cfg, &paths, false).unwrap();
        assert_eq!(out.results.len(), 3);
        assert!(paths.eval_dir().join("report.txt").exists());
        assert!(paths.eval_dir().join("bars.ppm").exists());

        let mut other = cfg.clone();
        other.model.d_model = 4;
        assert!(matches!(load_model(&other, &paths, false), Err(Error::Checkpoint(_))));
        assert_eq!(load_model(&other, &paths, true).unwrap().0.cfg.d_model, 8);
    }

    #[test]
    fn interrupted_training_resumes_to_the_same_weights() {
        let cfg = tiny_run();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (pa, pb) = (Paths::new(a.path()), Paths::new(b.path()));
        gen_data(&cfg, &pa).unwrap();
        gen_data(&cfg, &pb).unwrap();
        let never = || false;
        let always = || true;
        let full = train(&cfg, &pa, &TrainOptions { stage: 1, force: false, stop: &never }).unwrap();
        let cut = train(&cfg, &pb, &TrainOptions { stage: 1, force: false, stop: &always }).unwrap();
        assert_eq!(cut.step, 1);
        assert_eq!(Checkpoint::load(&pb.checkpoint(1)).unwrap().header.step, 1);
        let resumed = train(&cfg, &pb, &TrainOptions { stage: 1, force: false, stop: &never }).unwrap();
        // f32 checkpoint storage rounds the weights at the interruption point
        let diff = full
            .model
            .params
            .iter()
            .map(|(n, p)| p.value.max_abs_diff(&resumed.model.params.value(n).unwrap()).unwrap())
            .fold(0.0, f64::max);
        assert!(diff < 1e-4, "{diff}");
        assert_eq!(fs::read(pa.manifest("train")).unwrap(), fs::read(pb.manifest("train")).unwrap());
    }

    #[test]
    fn prompt_specs() {
        let p = PromptSpec {
            global_caption: "a red solid blob | rising".into(),
            boxes: Some(vec![BoundingBox::FULL; 3]),
            subject_captions: None,
        };
        assert_eq!(p.frames(4), 3);
        let c = p.condition().unwrap();
        assert_eq!(c.layout.unwrap().subject_captions.len(), 3);
        let bad = PromptSpec {
            subject_captions: Some(vec!["x".into()]),
            ..p
        };
        assert!(bad.condition().is_err());
    }
}
