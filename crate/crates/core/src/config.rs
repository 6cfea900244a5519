use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{SampleSpec, ScheduleConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::{PipelineConfig, SynthConfig};

/// Sizes of the generated datasets and the evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    /// Held-out stories used as the FID reference set.
    pub n_heldout: usize,
    /// Stories sampled during evaluation.
    pub n_eval: usize,
    /// Synthetic videos written for the pipeline subcommand.
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub segment: usize,
    /// Stories drawn by the sample subcommand when no prompt file is given.
    pub n_sample: usize,
    /// Frame-record JSONL for the pipeline subcommand; synthetic records are
    /// written when unset. Latent paths resolve against the file's directory.
    pub records: Option<PathBuf>,
    /// Prompt JSONL for the sample subcommand.
    pub prompts: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 2000,
            n_heldout: 256,
            n_eval: 64,
            n_videos: 8,
            frames_per_video: 300,
            segment: 50,
            n_sample: 8,
            records: None,
            prompts: None,
        }
    }
}

/// Everything a run depends on. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sample: SampleSpec,
    pub training: TrainConfig,
    pub pipeline: PipelineConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let schedule = self.schedule.build()?;
        self.training.validate()?;
        self.pipeline.validate()?;
        self.synth.validate()?;
        let s = &self.sample;
        if s.steps == 0 || s.steps > schedule.t_max() {
            return Err(Error::Config(format!("sample.steps {} not in 1..={}", s.steps, schedule.t_max())));
        }
        if !(s.guidance_scale >= 0.0) || !s.guidance_scale.is_finite() {
            return Err(Error::Config(format!("sample.guidance_scale {} must be >= 0", s.guidance_scale)));
        }
        if s.chunk == 0 {
            return Err(Error::Config("sample.chunk must be positive".into()));
        }
        if (self.synth.h, self.synth.w) != (self.model.h, self.model.w) {
            return Err(Error::Config("synth and model latent sizes differ".into()));
        }
        if self.training.frames > self.model.max_frames || self.synth.frames < self.training.frames {
            return Err(Error::Config(format!(
                "training.frames {} must be <= model.max_frames {} and <= synth.frames {}",
                self.training.frames, self.model.max_frames, self.synth.frames
            )));
        }
        if self.data.n_eval == 0 || self.data.n_train == 0 || self.data.n_sample == 0 || self.data.n_heldout < 2 {
            return Err(Error::Config("data sizes must be positive (n_heldout >= 2)".into()));
        }
        Ok(())
    }

    /// Short digest of the whole resolved config.
    pub fn hash(&self) -> String {
        short_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Digest of the parts a checkpoint's weights depend on.
    pub fn model_hash(&self) -> String {
        model_hash(&self.model)
    }
}

pub fn model_hash(m: &ModelConfig) -> String {
    short_hash(serde_json::to_string(m).expect("config serializes").as_bytes())
}
