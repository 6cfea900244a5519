//! Frame-sequence dataset construction: filter sampled frames, find the subject,
//! cluster similar frames per video, group clusters into sequences of 4 to 6
//! frames, caption them and write video-disjoint train and bench manifests. Also
//! the synthetic blob-story generator that stands in for real footage.

pub mod annotate;
pub mod cluster;
pub mod detect;
pub mod external;
pub mod group;
pub mod manifest;
pub mod records;
pub mod synth;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use annotate::{annotate_stub, Annotation, Captioner, FeatureExtractor, ProjectionFeatures, StubCaptioner};
pub use cluster::{cluster_windows, kmeans, window_k, ClusterResult};
pub use detect::{detect_subject_stub, Detector, StubDetector};
pub use external::SubprocessClient;
pub use group::{group_frames, LengthDist};
pub use manifest::{build_manifest, DatasetManifest, ManifestEntry, ManifestRules, Split};
pub use records::{filter_records, read_latent, write_latent, FrameRecord};
pub use synth::{gen_synthetic_stories, gen_synthetic_video, SynthConfig};

use crate::error::{Error, Result};
use crate::layout::sample_decision;
use crate::model::StorySequence;
use crate::numerics::{RngStream, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub aes_threshold: f64,
    pub length_dist: LengthDist,
    pub rules: ManifestRules,
    /// Fraction of videos routed to the bench split.
    pub bench_fraction: f64,
    pub feature_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            aes_threshold: 4.5,
            length_dist: LengthDist::default(),
            rules: ManifestRules::default(),
            bench_fraction: 0.1,
            feature_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.length_dist.validate()?;
        if !(0.0..=1.0).contains(&self.bench_fraction) {
            return Err(Error::Config(format!("bench_fraction {} outside [0, 1]", self.bench_fraction)));
        }
        let (lo, hi) = (self.length_dist.min_len(), self.length_dist.lengths.iter().max().copied().unwrap_or(0));
        if lo < self.rules.min_len || hi > self.rules.max_len {
            return Err(Error::Config("length distribution exceeds manifest length rules".into()));
        }
        Ok(())
    }
}

/// Services the pipeline calls per frame or sequence.
pub struct Services<'a> {
    pub detector: &'a (dyn Detector + Sync),
    pub features: &'a (dyn FeatureExtractor + Sync),
    pub captioner: &'a (dyn Captioner + Sync),
}

struct Frame {
    rec: FrameRecord,
    latent: Tensor,
    bbox: crate::layout::BoundingBox,
    feature: Vec<f64>,
}

fn process_video(video: &str, recs: Vec<FrameRecord>, base: &Path, cfg: &PipelineConfig, seed: u64, sv: &Services<'_>) -> Result<Vec<ManifestEntry>> {
    let frames = recs
        .into_iter()
        .map(|rec| {
            let latent = read_latent(&base.join(&rec.latent))?;
            let bbox = match rec.bbox {
                Some(b) => b,
                None => sv.detector.detect(&latent)?,
            };
            let feature = match &rec.feature {
                Some(f) => f.clone(),
                None => sv.features.feature(&latent, &bbox)?,
            };
            Ok(Frame { rec, latent, bbox, feature })
        })
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let d = frames[0].feature.len();
    if frames.iter().any(|f| f.feature.len() != d) {
        return Err(Error::InvalidRecord(format!("{video}: features differ in length")));
    }
    let feats = Tensor::new(&[frames.len(), d], frames.iter().flat_map(|f| f.feature.clone()).collect())?;
    let mut out = Vec::new();
    for (range, cr) in cluster_windows(&feats, seed, video)? {
        for (c, members) in cr.members().into_iter().enumerate() {
            let members: Vec<usize> = members.into_iter().map(|i| i + range.start).collect();
            let mut rng = RngStream::new(seed, format!("group/{video}/{}/{c}", range.start));
            for seq in group_frames(&members, &cfg.length_dist, &mut rng) {
                let fs: Vec<&Frame> = seq.iter().map(|&i| &frames[i]).collect();
                let latents: Vec<Tensor> = fs.iter().map(|f| f.latent.clone()).collect();
                let boxes: Vec<_> = fs.iter().map(|f| f.bbox).collect();
                let meta: Vec<_> = fs.iter().map(|f| f.rec.meta.clone()).collect();
                let ann = sv.captioner.annotate(&latents, &boxes, &meta)?;
                let category = meta[0]
                    .as_ref()
                    .map(synth::identity_prompt)
                    .unwrap_or_else(|| video.to_string());
                out.push(ManifestEntry {
                    id: 0,
                    video_id: video.to_string(),
                    category,
                    frame_indices: fs.iter().map(|f| f.rec.frame_index).collect(),
                    latents: fs.iter().map(|f| f.rec.latent.clone()).collect(),
                    boxes,
                    global_caption: ann.global_caption,
                    subject_captions: ann.subject_captions,
                    ref_frame: rng.below(seq.len()),
                    meta: meta[0].clone(),
                });
            }
        }
    }
    // temporal order within the video, independent of cluster numbering
    out.sort_by_key(|e| e.frame_indices[0]);
    Ok(out)
}

/// Run ingestion through annotation. Sequence ids are assigned in (video, time) order.
pub fn run_pipeline(records: Vec<FrameRecord>, base: &Path, cfg: &PipelineConfig, seed: u64, sv: &Services<'_>) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    let kept = filter_records(records, cfg.aes_threshold)?;
    let videos = records::group_by_video(kept)?;
    let per_video: Vec<Vec<ManifestEntry>> = videos
        .into_par_iter()
        .map(|(v, recs)| process_video(&v, recs, base, cfg, seed, sv))
        .collect::<Result<_>>()?;
    let mut all: Vec<ManifestEntry> = per_video.into_iter().flatten().collect();
    for (i, e) in all.iter_mut().enumerate() {
        e.id = i as u64;
    }
    Ok(all)
}

/// Route whole videos to train or bench and build both manifests.
pub fn split_manifests(entries: Vec<ManifestEntry>, cfg: &PipelineConfig, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    let rng = RngStream::new(seed, "split");
    let (bench, train): (Vec<_>, Vec<_>) = entries.into_iter().partition(|e| {
        let key = crate::model::text::token_hash(&e.video_id);
        sample_decision(&rng, "bench", key, cfg.bench_fraction)
    });
    let train_m = build_manifest(train, Split::Train, &cfg.rules, Some(&bench), seed)?;
    let bench_m = build_manifest(bench, Split::Bench, &cfg.rules, Some(&train_m.entries), seed)?;
    Ok((train_m, bench_m))
}

/// Write each story's frames as latent files under `dir` and return manifest entries
/// referencing them.
pub fn write_stories(stories: &[StorySequence], dir: &Path, sub: &str) -> Result<Vec<ManifestEntry>> {
    stories
        .iter()
        .map(|s| {
            let latents = (0..s.len())
                .map(|k| {
                    let rel = format!("{sub}/{}/{k}.l2sa", s.video_id);
                    write_latent(&dir.join(&rel), &s.frames[k])?;
                    Ok(rel)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ManifestEntry {
                id: s.id,
                video_id: s.video_id.clone(),
                category: s.meta.as_ref().map(synth::identity_prompt).unwrap_or_else(|| s.video_id.clone()),
                frame_indices: (0..s.len()).collect(),
                latents,
                boxes: s.boxes.clone(),
                global_caption: s.global_caption.clone(),
                subject_captions: s.subject_captions.clone(),
                ref_frame: s.ref_frame,
                meta: s.meta.clone(),
            })
        })
        .collect()
}

/// Frame records for synthetic videos, latents written under `dir/frames`.
/// Frames are 4 s apart and every third one carries a low aesthetic score.
pub fn write_synthetic_records(n_videos: usize, frames_per_video: usize, segment: usize, cfg: &SynthConfig, seed: u64, dir: &Path) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::new();
    for v in 0..n_videos {
        let vid = format!("vid-{v:04}");
        let frames = gen_synthetic_video(frames_per_video, segment, cfg, seed, &vid)?;
        let mut r = RngStream::new(seed, format!("scores/{vid}"));
        for (i, (lat, _, meta)) in frames.into_iter().enumerate() {
            let rel = format!("frames/{vid}/{i}.l2sa");
            write_latent(&dir.join(&rel), &lat)?;
            out.push(FrameRecord {
                video_id: vid.clone(),
                frame_index: i,
                timestamp_s: 4.0 * i as f64,
                latent: rel,
                aesthetic_score: Some(if i % 3 == 2 { r.uniform_range(0.0, 4.0) } else { r.uniform_range(5.0, 9.0) }),
                nsfw: Some(false),
                bbox: None,
                feature: None,
                meta: Some(meta),
            });
        }
    }
    Ok(out)
}
