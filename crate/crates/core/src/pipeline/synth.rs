//! Procedural blob stories: one textured, colored blob per story moving along a
//! straight trajectory over a low-amplitude noise background.
//!
//! Channel 0 carries the blob's shape at `amplitude`, channels 1 and 2 its color,
//! channel 3 its texture. Boxes are snapped to the latent grid and the blob never
//! leaves its box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::BoundingBox;
use crate::model::{StoryMeta, StorySequence};
use crate::numerics::{RngStream, Tensor};

pub const COLORS: [(&str, f64, f64); 6] = [
    ("red", 1.2, -1.2),
    ("green", -1.2, 1.2),
    ("blue", -1.2, -1.2),
    ("yellow", 1.2, 1.2),
    ("orange", 1.2, 0.0),
    ("teal", -1.2, 0.0),
];

pub const TEXTURES: [&str; 3] = ["solid", "striped", "dotted"];

/// Size word and box side in cells at the default 16x16 latent. Small enough that a
/// subject center placed without regard to layout lands in a given box with
/// probability close to the box's area fraction.
pub const SIZES: [(&str, usize); 3] = [("small", 3), ("medium", 4), ("large", 5)];

/// Motion word and per-frame displacement in cells `(dx, dy)`.
pub const MOTIONS: [(&str, i64, i64); 5] = [
    ("drifting right", 1, 0),
    ("drifting left", -1, 0),
    ("rising", 0, -1),
    ("falling", 0, 1),
    ("hovering", 0, 0),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub h: usize,
    pub w: usize,
    pub frames: usize,
    /// Subset of the color names in [`COLORS`].
    pub palette: Vec<String>,
    pub amplitude: f64,
    pub background_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            h: 16,
            w: 16,
            frames: 4,
            palette: COLORS.iter().map(|c| c.0.to_string()).collect(),
            amplitude: 2.0,
            background_noise: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let side = SIZES.iter().map(|s| s.1).max().unwrap_or(0);
        let scaled = self.side_cells(side);
        if self.frames == 0 || self.h < scaled + self.frames || self.w < scaled + self.frames {
            return Err(Error::Config(format!(
                "synthetic {}x{} latents cannot hold a {scaled}-cell blob moving over {} frames",
                self.h, self.w, self.frames
            )));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("empty blob palette".into()));
        }
        for c in &self.palette {
            color_channels(c)?;
        }
        if !(self.amplitude > 0.0) || !(self.background_noise >= 0.0) {
            return Err(Error::Config("amplitude must be positive and background_noise nonnegative".into()));
        }
        Ok(())
    }

    /// Blob side scaled from the 16-cell reference grid.
    fn side_cells(&self, side16: usize) -> usize {
        ((side16 * self.h.min(self.w)) as f64 / 16.0).round().max(1.0) as usize
    }
}

fn color_channels(name: &str) -> Result<(f64, f64)> {
    COLORS
        .iter()
        .find(|c| c.0 == name)
        .map(|c| (c.1, c.2))
        .ok_or_else(|| Error::Config(format!("unknown blob color {name:?}")))
}

/// The fixed appearance of one story's subject.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobIdentity {
    pub color: String,
    pub texture: String,
    pub size: String,
    pub side: usize,
    pub motion: String,
    pub velocity: (i64, i64),
}

impl BlobIdentity {
    pub fn draw(cfg: &SynthConfig, rng: &mut RngStream) -> Self {
        let color = cfg.palette[rng.below(cfg.palette.len())].clone();
        let texture = TEXTURES[rng.below(TEXTURES.len())].to_string();
        let (size, side16) = SIZES[rng.below(SIZES.len())];
        let (motion, dx, dy) = MOTIONS[rng.below(MOTIONS.len())];
        BlobIdentity {
            color,
            texture,
            size: size.into(),
            side: cfg.side_cells(side16),
            motion: motion.into(),
            velocity: (dx, dy),
        }
    }

    pub fn meta(&self) -> StoryMeta {
        StoryMeta {
            color: self.color.clone(),
            texture: self.texture.clone(),
            size: self.size.clone(),
            motion: self.motion.clone(),
        }
    }
}

/// Cell-aligned box `(row0, col0, side)` as normalized coordinates.
fn cell_box(r0: usize, c0: usize, side: usize, h: usize, w: usize) -> BoundingBox {
    BoundingBox {
        x0: c0 as f64 / w as f64,
        y0: r0 as f64 / h as f64,
        x1: (c0 + side) as f64 / w as f64,
        y1: (r0 + side) as f64 / h as f64,
    }
}

/// Render one frame: background noise everywhere, the blob inside the box with its
/// four corner cells rounded off.
pub fn render_blob(
    id: &BlobIdentity,
    r0: usize,
    c0: usize,
    cfg: &SynthConfig,
    noise: &mut RngStream,
) -> Result<Tensor> {
    let (h, w, s) = (cfg.h, cfg.w, id.side);
    let (c1, c2) = color_channels(&id.color)?;
    let mut t = Tensor::from_fn(&[h, w, 4], |_| cfg.background_noise * noise.normal());
    for i in 0..s {
        for j in 0..s {
            let corner = s >= 4 && (i == 0 || i == s - 1) && (j == 0 || j == s - 1);
            if corner {
                continue;
            }
            let tex = match id.texture.as_str() {
                "striped" => [1.0, -1.0][i % 2],
                "dotted" => [1.0, -1.0][(i + j) % 2],
                _ => 1.0,
            };
            let (r, c) = (r0 + i, c0 + j);
            for (ch, v) in [cfg.amplitude, c1, c2, tex].into_iter().enumerate() {
                t.set(&[r, c, ch], v);
            }
        }
    }
    Ok(t)
}

/// Top-left cells of a straight trajectory that stays inside the grid.
fn trajectory(id: &BlobIdentity, frames: usize, h: usize, w: usize, rng: &mut RngStream) -> Vec<(usize, usize)> {
    let span = (frames - 1) as i64;
    let range = |v: i64, extent: usize| -> (i64, i64) {
        let hi = (extent - id.side) as i64;
        (0.max(-v * span), hi.min(hi - v * span))
    };
    let (rlo, rhi) = range(id.velocity.1, h);
    let (clo, chi) = range(id.velocity.0, w);
    let r = rlo + rng.below((rhi - rlo + 1) as usize) as i64;
    let c = clo + rng.below((chi - clo + 1) as usize) as i64;
    (0..frames as i64)
        .map(|k| ((r + id.velocity.1 * k) as usize, (c + id.velocity.0 * k) as usize))
        .collect()
}

pub fn identity_prompt(meta: &StoryMeta) -> String {
    format!("{} {} {} blob", meta.size, meta.color, meta.texture)
}

/// Separator between the identity prompt and the frame prompt of a global caption.
pub const CAPTION_SEPARATOR: &str = " | ";

pub fn global_caption(meta: &StoryMeta) -> String {
    format!("{}{CAPTION_SEPARATOR}{}", identity_prompt(meta), meta.motion)
}

pub fn subject_caption(meta: &StoryMeta, bbox: &BoundingBox) -> String {
    format!("{} {} blob {}", meta.color, meta.texture, bbox.quadrant())
}

/// `n` stories with ids `first_id..first_id + n`. Story `i` depends only on
/// `(seed, first_id + i)`.
pub fn gen_synthetic_stories(n: usize, cfg: &SynthConfig, seed: u64, first_id: u64) -> Result<Vec<StorySequence>> {
    cfg.validate()?;
    (first_id..first_id + n as u64)
        .map(|sid| {
            let mut rng = RngStream::new(seed, format!("synth/story/{sid}"));
            let id = BlobIdentity::draw(cfg, &mut rng);
            let path = trajectory(&id, cfg.frames, cfg.h, cfg.w, &mut rng);
            let meta = id.meta();
            let mut noise = rng.child("background");
            let frames = path
                .iter()
                .map(|&(r, c)| render_blob(&id, r, c, cfg, &mut noise))
                .collect::<Result<Vec<_>>>()?;
            let boxes: Vec<_> = path.iter().map(|&(r, c)| cell_box(r, c, id.side, cfg.h, cfg.w)).collect();
            let story = StorySequence {
                id: sid,
                video_id: format!("syn-{sid:06}"),
                frames,
                global_caption: global_caption(&meta),
                subject_captions: boxes.iter().map(|b| subject_caption(&meta, b)).collect(),
                boxes,
                ref_frame: rng.below(cfg.frames),
                meta: Some(meta),
            };
            story.validate()?;
            Ok(story)
        })
        .collect()
}

/// A synthetic "video": consecutive segments, each a different blob identity,
/// rendered frame by frame. Returns per-frame `(latent, box, meta)`.
pub fn gen_synthetic_video(
    n_frames: usize,
    segment: usize,
    cfg: &SynthConfig,
    seed: u64,
    video: &str,
) -> Result<Vec<(Tensor, BoundingBox, StoryMeta)>> {
    cfg.validate()?;
    if segment == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    let mut out = Vec::with_capacity(n_frames);
    let mut rng = RngStream::new(seed, format!("synth/video/{video}"));
    let mut noise = rng.child("background");
    while out.len() < n_frames {
        let id = BlobIdentity::draw(cfg, &mut rng);
        // a still blob keeps segment frames within one cluster
        let still = BlobIdentity { velocity: (0, 0), ..id };
        let path = trajectory(&still, 1, cfg.h, cfg.w, &mut rng);
        let (r, c) = path[0];
        for _ in 0..segment.min(n_frames - out.len()) {
            let t = render_blob(&still, r, c, cfg, &mut noise)?;
            out.push((t, cell_box(r, c, still.side, cfg.h, cfg.w), still.meta()));
        }
    }
    Ok(out)
}
