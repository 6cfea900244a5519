use serde::{Deserialize, Serialize};

use super::synth::{global_caption, subject_caption};
use crate::error::{Error, Result};
use crate::layout::BoundingBox;
use crate::model::StoryMeta;
use crate::numerics::{RngStream, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// `identity prompt | frame prompt`.
    pub global_caption: String,
    pub subject_captions: Vec<String>,
}

/// Captions for a frame sequence.
pub trait Captioner {
    fn annotate(&self, frames: &[Tensor], boxes: &[BoundingBox], meta: &[Option<StoryMeta>]) -> Result<Annotation>;
}

/// Template captions from generator metadata.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubCaptioner;

impl Captioner for StubCaptioner {
    fn annotate(&self, _frames: &[Tensor], boxes: &[BoundingBox], meta: &[Option<StoryMeta>]) -> Result<Annotation> {
        annotate_stub(boxes, meta)
    }
}

/// The identity and motion come from the first frame's metadata; each subject
/// caption names the blob and the quadrant of its box.
pub fn annotate_stub(boxes: &[BoundingBox], meta: &[Option<StoryMeta>]) -> Result<Annotation> {
    if boxes.len() != meta.len() || boxes.is_empty() {
        return Err(Error::shape("annotate_stub", &[boxes.len()], &[meta.len()]));
    }
    let metas: Vec<&StoryMeta> = meta.iter().map(|m| m.as_ref().ok_or(Error::MissingMetadata)).collect::<Result<_>>()?;
    Ok(Annotation {
        global_caption: global_caption(metas[0]),
        subject_captions: metas.iter().zip(boxes).map(|(m, b)| subject_caption(m, b)).collect(),
    })
}

/// Clustering features of a frame.
pub trait FeatureExtractor {
    fn feature(&self, latent: &Tensor, bbox: &BoundingBox) -> Result<Vec<f64>>;
}

pub const FEATURE_DIM: usize = 64;

/// Average-pool the box crop to a 4x4 grid per channel, then apply a fixed
/// Gaussian projection to [`FEATURE_DIM`] dimensions.
#[derive(Clone, Debug)]
pub struct ProjectionFeatures {
    /// `(FEATURE_DIM, 64)` row-major.
    proj: Vec<f64>,
}

impl ProjectionFeatures {
    pub fn new(seed: u64) -> Self {
        let mut r = RngStream::new(seed, "feature-projection");
        let scale = 1.0 / (64f64).sqrt();
        ProjectionFeatures {
            proj: (0..FEATURE_DIM * 64).map(|_| scale * r.normal()).collect(),
        }
    }
}

/// Mean of each channel over each cell of a 4x4 partition of the box, 64 values.
/// Box edges split latent cells fractionally.
pub fn pooled_crop(latent: &Tensor, bbox: &BoundingBox) -> Result<Vec<f64>> {
    let s = latent.shape();
    if s.len() != 3 || s[2] != 4 {
        return Err(Error::BadShape {
            op: "pooled_crop",
            detail: format!("expected (h, w, 4), got {s:?}"),
        });
    }
    bbox.validate()?;
    let (h, w) = (s[0] as f64, s[1] as f64);
    // overlap of latent cell [k, k+1) with the interval [a, b), in cell units
    let overlap = |k: usize, a: f64, b: f64| ((k as f64 + 1.0).min(b) - (k as f64).max(a)).max(0.0);
    let mut out = vec![0.0; 64];
    for gi in 0..4 {
        let (ya, yb) = (
            (bbox.y0 + (bbox.y1 - bbox.y0) * gi as f64 / 4.0) * h,
            (bbox.y0 + (bbox.y1 - bbox.y0) * (gi + 1) as f64 / 4.0) * h,
        );
        for gj in 0..4 {
            let (xa, xb) = (
                (bbox.x0 + (bbox.x1 - bbox.x0) * gj as f64 / 4.0) * w,
                (bbox.x0 + (bbox.x1 - bbox.x0) * (gj + 1) as f64 / 4.0) * w,
            );
            let mut acc = [0.0; 4];
            let mut wsum = 0.0;
            for i in 0..s[0] {
                let oy = overlap(i, ya, yb);
                if oy == 0.0 {
                    continue;
                }
                for j in 0..s[1] {
                    let a = oy * overlap(j, xa, xb);
                    if a == 0.0 {
                        continue;
                    }
                    wsum += a;
                    for (c, v) in acc.iter_mut().enumerate() {
                        *v += a * latent.get(&[i, j, c]);
                    }
                }
            }
            for c in 0..4 {
                out[(gi * 4 + gj) * 4 + c] = if wsum > 0.0 { acc[c] / wsum } else { 0.0 };
            }
        }
    }
    Ok(out)
}

impl FeatureExtractor for ProjectionFeatures {
    fn feature(&self, latent: &Tensor, bbox: &BoundingBox) -> Result<Vec<f64>> {
        let x = pooled_crop(latent, bbox)?;
        Ok(self.proj.chunks(64).map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::{gen_synthetic_stories, SynthConfig, CAPTION_SEPARATOR};

    fn meta(color: &str) -> StoryMeta {
        StoryMeta {
            color: color.into(),
            texture: "solid".into(),
            size: "small".into(),
            motion: "rising".into(),
        }
    }

    #[test]
    fn red_blob_top_left() {
        let b = BoundingBox::new(0.0, 0.0, 0.3, 0.3).unwrap();
        let a = annotate_stub(&[b], &[Some(meta("red"))]).unwrap();
        assert!(a.subject_captions[0].contains("red") && a.subject_captions[0].contains("top-left"));
        let (ident, frame) = a.global_caption.split_once(CAPTION_SEPARATOR).unwrap();
        assert_eq!((ident, frame), ("small red solid blob", "rising"));
    }

    #[test]
    fn identical_frames_identical_captions() {
        let b = BoundingBox::new(0.5, 0.5, 0.9, 0.9).unwrap();
        let a = annotate_stub(&[b, b], &[Some(meta("teal")), Some(meta("teal"))]).unwrap();
        assert_eq!(a.subject_captions[0], a.subject_captions[1]);
        assert!(matches!(annotate_stub(&[b], &[None]), Err(Error::MissingMetadata)));
    }

    #[test]
    fn pooling_constant_and_aligned_crops() {
        let t = Tensor::full(&[16, 16, 4], 0.7);
        let b = BoundingBox::new(0.13, 0.2, 0.71, 0.9).unwrap();
        assert!(pooled_crop(&t, &b).unwrap().iter().all(|&x| (x - 0.7).abs() < 1e-12));
        // a cell-aligned 8x8 box pools 2x2 blocks exactly
        let t = Tensor::randn(&[16, 16, 4], 1.0, &mut RngStream::new(1, "p"));
        let b = BoundingBox::new(0.25, 0.5, 0.75, 1.0).unwrap();
        let f = pooled_crop(&t, &b).unwrap();
        let want: f64 = (0..2).flat_map(|di| (0..2).map(move |dj| (di, dj))).map(|(di, dj)| t.get(&[8 + 2 + di, 4 + 6 + dj, 3])).sum::<f64>() / 4.0;
        assert!((f[(1 * 4 + 3) * 4 + 3] - want).abs() < 1e-12);
    }

    #[test]
    fn features_separate_identities() {
        let stories = gen_synthetic_stories(2, &SynthConfig::default(), 5, 0).unwrap();
        let fx = ProjectionFeatures::new(0);
        let f = |s: usize, k: usize| fx.feature(&stories[s].frames[k], &stories[s].boxes[k]).unwrap();
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        assert_eq!(f(0, 0).len(), FEATURE_DIM);
        if stories[0].meta != stories[1].meta {
            assert!(d(&f(0, 0), &f(0, 1)) < d(&f(0, 0), &f(1, 0)));
        }
    }
}
