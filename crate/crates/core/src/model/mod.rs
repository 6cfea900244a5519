//! The two-branch denoiser.
//!
//! The global branch is a stack of `n_global_blocks` text-conditioned blocks over
//! per-frame tokens. The subject branch (`n_global_blocks / 2` blocks) reads the
//! noisy latent concatenated with a reference frame and its mask, attends under the
//! layout masks, and after global block `2m` adds `F_m(subject block m)` through a
//! zero-initialized linear layer.

pub mod text;

use serde::{Deserialize, Serialize};

use crate::blocks::{self, BlockConfig};
use crate::error::{Error, Result};
use crate::layout::{sample_decision, AttentionBiasSet, BoundingBox, RasterMask, TOKEN_CAP};
use crate::numerics::{ParameterStore, RngStream, Tape, Tensor, Var};

pub use text::{encode_text, TextEmbedding, EMPTY_CAPTION};

/// Channels of the concatenated subject input: latent, reference latent, reference mask.
pub const CONCAT_CHANNELS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_global_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub latent_channels: usize,
    pub h: usize,
    pub w: usize,
    pub max_frames: usize,
    pub vocab_dim: usize,
    pub token_cap: usize,
    /// Side of the square latent patch folded into one token.
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub text_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_global_blocks: 4,
            d_model: 64,
            n_heads: 4,
            latent_channels: 4,
            h: 16,
            w: 16,
            max_frames: 4,
            vocab_dim: 32,
            token_cap: TOKEN_CAP,
            patch_size: 1,
            mlp_ratio: 4,
            text_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_global_blocks == 0 || self.n_global_blocks % 2 != 0 {
            return bad(format!("n_global_blocks must be even and positive, got {}", self.n_global_blocks));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.latent_channels != 4 {
            return bad(format!("latent_channels must be 4, got {}", self.latent_channels));
        }
        if self.patch_size == 0 || self.h % self.patch_size != 0 || self.w % self.patch_size != 0 || self.h == 0 || self.w == 0 {
            return bad(format!("latent {}x{} not divisible into patches of {}", self.h, self.w, self.patch_size));
        }
        if self.token_cap != TOKEN_CAP {
            return bad(format!("token_cap must be {TOKEN_CAP}, got {}", self.token_cap));
        }
        if self.max_frames == 0 || self.vocab_dim == 0 || self.mlp_ratio == 0 {
            return bad("max_frames, vocab_dim and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn n_subject_blocks(&self) -> usize {
        self.n_global_blocks / 2
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h / self.patch_size, self.w / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.latent_channels
    }

    fn global_cfg(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            has_ffn: true,
            mlp_ratio: self.mlp_ratio,
        }
    }

    fn subject_cfg(&self) -> BlockConfig {
        BlockConfig {
            has_ffn: false,
            ..self.global_cfg()
        }
    }
}

/// Generator descriptors of a synthetic story's subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryMeta {
    pub color: String,
    pub texture: String,
    pub size: String,
    pub motion: String,
}

/// A frame sequence with its annotations; the unit of training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct StorySequence {
    pub id: u64,
    pub video_id: String,
    /// Each `(h, w, 4)`.
    pub frames: Vec<Tensor>,
    pub global_caption: String,
    pub subject_captions: Vec<String>,
    pub boxes: Vec<BoundingBox>,
    pub ref_frame: usize,
    pub meta: Option<StoryMeta>,
}

impl StorySequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.frames.len();
        if f == 0 {
            return Err(Error::InvalidRecord(format!("story {} has no frames", self.id)));
        }
        if self.subject_captions.len() != f || self.boxes.len() != f {
            return Err(Error::InvalidRecord(format!(
                "story {}: {f} frames, {} captions, {} boxes",
                self.id,
                self.subject_captions.len(),
                self.boxes.len()
            )));
        }
        if self.ref_frame >= f {
            return Err(Error::BadRefFrame { frame: self.ref_frame, frames: f });
        }
        if self.global_caption.trim().is_empty() || self.subject_captions.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::EmptyCaption);
        }
        let s0 = self.frames[0].shape();
        for fr in &self.frames {
            if fr.shape() != s0 || s0.len() != 3 {
                return Err(Error::shape("StorySequence", s0, fr.shape()));
            }
        }
        for b in &self.boxes {
            b.validate()?;
        }
        Ok(())
    }

    /// Frames stacked into `(f, h, w, 4)`.
    pub fn stacked(&self) -> Result<Tensor> {
        Tensor::stack(&self.frames)
    }
}

/// Reference frame handed to the subject branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    /// Frame slot the reference occupies.
    pub frame: usize,
    /// `(h, w, 4)`.
    pub latent: Tensor,
    /// `(h, w, 1)`.
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutCondition {
    pub boxes: Vec<BoundingBox>,
    pub subject_captions: Vec<String>,
    pub reference: Option<Reference>,
    /// Replace every mask by the all-valid one while keeping captions and reference.
    pub all_valid_masks: bool,
}

impl LayoutCondition {
    /// The layout used when none is given: full-frame boxes, the global caption for
    /// every frame, and no reference.
    pub fn fallback(global_caption: &str, frames: usize) -> Self {
        LayoutCondition {
            boxes: vec![BoundingBox::FULL; frames],
            subject_captions: vec![global_caption.to_string(); frames],
            reference: None,
            all_valid_masks: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub global_caption: String,
    pub layout: Option<LayoutCondition>,
}

impl Condition {
    pub fn caption(global_caption: impl Into<String>) -> Self {
        Condition {
            global_caption: global_caption.into(),
            layout: None,
        }
    }

    /// The guidance-free condition.
    pub fn unconditional() -> Self {
        Condition::caption(EMPTY_CAPTION)
    }

    /// Story caption and layout, with the story's own reference frame when `with_reference`.
    pub fn from_story(story: &StorySequence, with_layout: bool, with_reference: bool) -> Result<Self> {
        let layout = if with_layout {
            let reference = if with_reference {
                let r = story.ref_frame;
                let latent = story.frames[r].clone();
                let (h, w) = (latent.shape()[0], latent.shape()[1]);
                let m = crate::layout::rasterize_bbox(&story.boxes[r], h, w)?;
                Some(Reference {
                    frame: r,
                    latent,
                    mask: Tensor::new(&[h, w, 1], m.as_f64())?,
                })
            } else {
                None
            };
            Some(LayoutCondition {
                boxes: story.boxes.clone(),
                subject_captions: story.subject_captions.clone(),
                reference,
                all_valid_masks: false,
            })
        } else {
            None
        };
        Ok(Condition {
            global_caption: story.global_caption.clone(),
            layout,
        })
    }

    pub fn resolved_layout(&self, frames: usize) -> LayoutCondition {
        self.layout
            .clone()
            .unwrap_or_else(|| LayoutCondition::fallback(&self.global_caption, frames))
    }
}

/// With probability `p` per sample (keyed by sample id), replace every subject
/// caption by the global caption.
pub fn substitute_captions(
    subject_captions: &[String],
    global_caption: &str,
    p: f64,
    rng: &RngStream,
    sample_id: u64,
) -> (Vec<String>, bool) {
    if sample_decision(rng, "caption-substitution", sample_id, p) {
        (vec![global_caption.to_string(); subject_captions.len()], true)
    } else {
        (subject_captions.to_vec(), false)
    }
}

/// Zero-pad the reference along frames and concatenate channels:
/// `z (b, f, h, w, 4)`, `ref_latent (b, h, w, 4)`, `ref_mask (b, h, w, 1)` into `(b, f, h, w, 9)`.
pub fn concat_reference(z: &Tensor, ref_latent: &Tensor, ref_mask: &Tensor, ref_frames: &[usize]) -> Result<Tensor> {
    let s = z.shape();
    if s.len() != 5 || s[4] != 4 {
        return Err(Error::BadShape {
            op: "concat_reference",
            detail: format!("latent shape {s:?}"),
        });
    }
    let (b, f, h, w) = (s[0], s[1], s[2], s[3]);
    if ref_latent.shape() != [b, h, w, 4] {
        return Err(Error::shape("concat_reference", &[b, h, w, 4], ref_latent.shape()));
    }
    if ref_mask.shape() != [b, h, w, 1] {
        return Err(Error::shape("concat_reference", &[b, h, w, 1], ref_mask.shape()));
    }
    if ref_frames.len() != b {
        return Err(Error::shape("concat_reference", &[b], &[ref_frames.len()]));
    }
    if let Some(&r) = ref_frames.iter().find(|&&r| r >= f) {
        return Err(Error::BadRefFrame { frame: r, frames: f });
    }
    let hw = h * w;
    let mut out = vec![0.0; b * f * hw * CONCAT_CHANNELS];
    for bi in 0..b {
        for fi in 0..f {
            for p in 0..hw {
                let o = ((bi * f + fi) * hw + p) * CONCAT_CHANNELS;
                let zi = ((bi * f + fi) * hw + p) * 4;
                out[o..o + 4].copy_from_slice(&z.data()[zi..zi + 4]);
                if fi == ref_frames[bi] {
                    let ri = (bi * hw + p) * 4;
                    out[o + 4..o + 8].copy_from_slice(&ref_latent.data()[ri..ri + 4]);
                    out[o + 8] = ref_mask.data()[bi * hw + p];
                }
            }
        }
    }
    Tensor::new(&[b, f, h, w, CONCAT_CHANNELS], out)
}

/// Which branches take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    /// Global branch only; the subject branch is not evaluated.
    Global,
    /// Both branches with injection.
    Full,
}

/// Fold `(b, f, h, w, c)` into tokens `(b * f, (h/p) (w/p), p p c)`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let (b, f, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
    let r = x.clone().reshape(&[b * f, h / p, p, w / p, p, c])?;
    r.permute(&[0, 1, 3, 2, 4, 5])?.reshape(&[b * f, (h / p) * (w / p), p * p * c])
}

fn patchify_var(tape: &mut Tape, x: Var, p: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, f, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
    if p == 1 {
        return tape.reshape(x, &[b * f, h * w, c]);
    }
    let r = tape.reshape(x, &[b * f, h / p, p, w / p, p, c])?;
    let r = tape.permute(r, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(r, &[b * f, (h / p) * (w / p), p * p * c])
}

fn unpatchify_var(tape: &mut Tape, x: Var, b: usize, f: usize, h: usize, w: usize, p: usize, c: usize) -> Result<Var> {
    if p == 1 {
        return tape.reshape(x, &[b, f, h, w, c]);
    }
    let r = tape.reshape(x, &[b * f, h / p, w / p, p, p, c])?;
    let r = tape.permute(r, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(r, &[b, f, h, w, c])
}

/// Learned table initialized with 2-D sine/cosine features of the token grid.
fn sincos_2d(gh: usize, gw: usize, d: usize) -> Tensor {
    let quarter = (d / 4).max(1);
    Tensor::from_fn(&[gh * gw, d], |idx| {
        let (tok, c) = (idx / d, idx % d);
        let (i, j) = ((tok / gw) as f64, (tok % gw) as f64);
        let band = c / quarter;
        let k = (c % quarter) as f64;
        let freq = 1.0 / 100f64.powf(k / quarter as f64);
        match band {
            0 => (i * freq).sin(),
            1 => (i * freq).cos(),
            2 => (j * freq).sin(),
            _ => (j * freq).cos(),
        }
    })
}

pub fn global_block_name(i: usize) -> String {
    format!("global.blocks.{i}")
}

pub fn subject_block_name(m: usize) -> String {
    format!("subject.blocks.{m}")
}

pub fn inject_name(m: usize) -> String {
    format!("subject.inject.{m}")
}

pub fn is_global_param(name: &str) -> bool {
    name.starts_with("global.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let (gh, gw) = cfg.grid();
        let mut s = ParameterStore::new(seed);
        blocks::insert_linear(&mut s, "global.x_embed", cfg.patch_dim(), d)?;
        s.insert("global.pos", sincos_2d(gh, gw, d))?;
        text::init_projection(&mut s, "global.text.proj", cfg.vocab_dim, d)?;
        blocks::init_timestep_trunk(&mut s, "global", d)?;
        for i in 0..cfg.n_global_blocks {
            blocks::init_global_block(&mut s, &global_block_name(i), &cfg.global_cfg())?;
        }
        let ft = Tensor::randn(&[2, d], (d as f64).powf(-0.5), &mut s.init_rng("global.final.table"));
        s.insert("global.final.table", ft)?;
        blocks::insert_linear(&mut s, "global.final.proj", d, cfg.patch_dim())?;

        let mut conv = Tensor::zeros(&[CONCAT_CHANNELS, 4]);
        for c in 0..4 {
            conv.set(&[c, c], 1.0);
        }
        s.insert("subject.conv.w", conv)?;
        s.insert("subject.conv.b", Tensor::zeros(&[4]))?;
        blocks::insert_linear(&mut s, "subject.x_embed", cfg.patch_dim(), d)?;
        s.insert("subject.pos", sincos_2d(gh, gw, d))?;
        let fp = Tensor::randn(&[cfg.max_frames, d], 0.1, &mut s.init_rng("subject.frame_pos"));
        s.insert("subject.frame_pos", fp)?;
        text::init_projection(&mut s, "subject.text.proj", cfg.vocab_dim, d)?;
        for m in 0..cfg.n_subject_blocks() {
            blocks::init_subject_block(&mut s, &subject_block_name(m), &cfg.subject_cfg())?;
            blocks::init_zero_linear(&mut s, &inject_name(m), d)?;
        }
        Ok(Model { cfg, params: s })
    }

    /// Stage-2 initialization: each subject block copies the attention weights and
    /// modulation table of global block `2m`; the 3-D attention starts from the same
    /// self-attention weights. Embeddings and the text projection copy their global twins.
    pub fn copy_init_subject(&mut self) -> Result<()> {
        let mut copies: Vec<(String, String)> = Vec::new();
        for m in 0..self.cfg.n_subject_blocks() {
            let g = global_block_name(2 * m + 1);
            let sb = subject_block_name(m);
            for (src, dst) in [("attn", "attn"), ("cross", "cross"), ("attn", "attn3d")] {
                for p in ["q", "k", "v", "o"] {
                    for wb in ["w", "b"] {
                        copies.push((format!("{g}.{src}.{p}.{wb}"), format!("{sb}.{dst}.{p}.{wb}")));
                    }
                }
            }
            copies.push((format!("{g}.table"), format!("{sb}.table")));
        }
        for (src, dst) in [
            ("global.x_embed.w", "subject.x_embed.w"),
            ("global.x_embed.b", "subject.x_embed.b"),
            ("global.pos", "subject.pos"),
            ("global.text.proj.w", "subject.text.proj.w"),
            ("global.text.proj.b", "subject.text.proj.b"),
        ] {
            copies.push((src.into(), dst.into()));
        }
        for (src, dst) in copies {
            let v = self.params.value(&src)?.clone();
            self.params.set(&dst, v)?;
        }
        Ok(())
    }

    /// Freeze the global branch and train only the subject branch.
    pub fn freeze_global(&mut self) {
        self.params.set_frozen(is_global_param);
    }

    /// Subject-branch output before injection, per subject block: `(b * f, T, d)`.
    fn subject_branch(&self, tape: &mut Tape, z_t: &Tensor, t6: Var, conds: &[Condition]) -> Result<Vec<Var>> {
        let cfg = &self.cfg;
        let s = &self.params;
        let (b, f, h, w) = (z_t.shape()[0], z_t.shape()[1], cfg.h, cfg.w);
        let (gh, gw) = cfg.grid();
        let (tokens, d) = (cfg.tokens(), cfg.d_model);
        let layouts: Vec<LayoutCondition> = conds.iter().map(|c| c.resolved_layout(f)).collect();

        let mut ref_latent = Vec::with_capacity(b * h * w * 4);
        let mut ref_mask = Vec::with_capacity(b * h * w);
        let mut ref_frames = Vec::with_capacity(b);
        let mut boxes = Vec::with_capacity(b);
        let mut captions: Vec<&str> = Vec::with_capacity(b * f);
        for l in &layouts {
            if l.boxes.len() != f || l.subject_captions.len() != f {
                return Err(Error::BadShape {
                    op: "denoiser_forward",
                    detail: format!("layout for {} boxes / {} captions, {f} frames", l.boxes.len(), l.subject_captions.len()),
                });
            }
            match &l.reference {
                Some(r) => {
                    if r.latent.shape() != [h, w, 4] || r.mask.shape() != [h, w, 1] {
                        return Err(Error::shape("reference", &[h, w, 4], r.latent.shape()));
                    }
                    ref_latent.extend_from_slice(r.latent.data());
                    ref_mask.extend_from_slice(r.mask.data());
                    ref_frames.push(r.frame);
                }
                None => {
                    ref_latent.extend(std::iter::repeat_n(0.0, h * w * 4));
                    ref_mask.extend(std::iter::repeat_n(1.0, h * w));
                    ref_frames.push(0);
                }
            }
            boxes.push(if l.all_valid_masks { None } else { Some(l.boxes.clone()) });
            captions.extend(l.subject_captions.iter().map(String::as_str));
        }
        let biases = AttentionBiasSet::from_boxes(&boxes, f, gh, gw)?;
        let cat = concat_reference(
            z_t,
            &Tensor::new(&[b, h, w, 4], ref_latent)?,
            &Tensor::new(&[b, h, w, 1], ref_mask)?,
            &ref_frames,
        )?;

        let x = tape.constant(cat);
        let x = blocks::apply_linear(tape, s, "subject.conv", x)?;
        let x = patchify_var(tape, x, cfg.patch_size)?;
        let x = blocks::apply_linear(tape, s, "subject.x_embed", x)?;
        let pos = tape.param(s, "subject.pos")?;
        let pos = tape.reshape(pos, &[1, tokens, d])?;
        let x = tape.add(x, pos)?;
        let fpos = tape.param(s, "subject.frame_pos")?;
        let fpos = tape.narrow(fpos, 0, 0, f)?;
        let fpos = tape.reshape(fpos, &[1, f, 1, d])?;
        let x = tape.reshape(x, &[b, f, tokens, d])?;
        let x = tape.add(x, fpos)?;
        let mut x = tape.reshape(x, &[b * f, tokens, d])?;

        let (text, text_bias) = text::encode_batch(tape, s, "subject.text.proj", &captions, cfg.text_seed)?;
        let mut outs = Vec::with_capacity(cfg.n_subject_blocks());
        for m in 0..cfg.n_subject_blocks() {
            x = blocks::subject_block(tape, s, &subject_block_name(m), x, text, &text_bias, &biases, t6, &cfg.subject_cfg())?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// Noise prediction `(b, f, h, w, 4)` for `z_t (b, f, h, w, 4)` at per-sample timesteps `t`.
    pub fn forward(&self, tape: &mut Tape, z_t: &Tensor, t: &[f64], conds: &[Condition], branches: Branches) -> Result<Var> {
        let cfg = &self.cfg;
        let s = &self.params;
        let zs = z_t.shape();
        if zs.len() != 5 || zs[2] != cfg.h || zs[3] != cfg.w || zs[4] != cfg.latent_channels {
            return Err(Error::BadShape {
                op: "denoiser_forward",
                detail: format!("latent {zs:?} for a {}x{}x{} model", cfg.h, cfg.w, cfg.latent_channels),
            });
        }
        let (b, f) = (zs[0], zs[1]);
        if t.len() != b || conds.len() != b {
            return Err(Error::BadShape {
                op: "denoiser_forward",
                detail: format!("batch {b} with {} timesteps and {} conditions", t.len(), conds.len()),
            });
        }
        if f > cfg.max_frames {
            return Err(Error::BadShape {
                op: "denoiser_forward",
                detail: format!("{f} frames exceed max_frames {}", cfg.max_frames),
            });
        }
        let (tokens, d, p) = (cfg.tokens(), cfg.d_model, cfg.patch_size);

        let t_rows: Vec<f64> = t.iter().flat_map(|&ti| std::iter::repeat_n(ti, f)).collect();
        let (temb, t6) = blocks::timestep_trunk(tape, s, "global", &t_rows, d)?;

        let subject = match branches {
            Branches::Global => None,
            Branches::Full => Some(self.subject_branch(tape, z_t, t6, conds)?),
        };

        let x = tape.constant(patchify(z_t, p)?);
        let x = blocks::apply_linear(tape, s, "global.x_embed", x)?;
        let pos = tape.param(s, "global.pos")?;
        let pos = tape.reshape(pos, &[1, tokens, d])?;
        let mut x = tape.add(x, pos)?;

        let captions: Vec<&str> = conds.iter().map(|c| c.global_caption.as_str()).collect();
        let (text, text_bias) = text::encode_batch(tape, s, "global.text.proj", &captions, cfg.text_seed)?;
        for i in 0..cfg.n_global_blocks {
            x = blocks::global_block(tape, s, &global_block_name(i), x, text, &text_bias, f, t6, &cfg.global_cfg())?;
            if let Some(outs) = &subject {
                if i % 2 == 1 {
                    let m = i / 2;
                    x = blocks::zero_inject(tape, s, &inject_name(m), x, outs[m])?;
                }
            }
        }

        let tab = tape.param(s, "global.final.table")?;
        let tab = tape.reshape(tab, &[1, 2, d])?;
        let te = tape.reshape(temb, &[b * f, 1, d])?;
        let shift_row = tape.narrow(tab, 1, 0, 1)?;
        let scale_row = tape.narrow(tab, 1, 1, 1)?;
        let shift = tape.add(te, shift_row)?;
        let scale = tape.add(te, scale_row)?;
        let h = tape.layer_norm(x, blocks::LN_EPS)?;
        let h = blocks::modulate(tape, h, scale, shift)?;
        let out = blocks::apply_linear(tape, s, "global.final.proj", h)?;
        unpatchify_var(tape, out, b, f, cfg.h, cfg.w, p, cfg.latent_channels)
    }

    /// Inference-mode forward.
    pub fn predict(&self, z_t: &Tensor, t: &[f64], conds: &[Condition], branches: Branches) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let y = self.forward(&mut tape, z_t, t, conds, branches)?;
        Ok(tape.value(y).clone())
    }

    /// Scalar count of parameters with the given prefix.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.params.count_prefix(prefix)
    }
}

/// Mask raster of a whole story at latent resolution, one per frame.
pub fn story_masks(story: &StorySequence) -> Result<Vec<RasterMask>> {
    let (h, w) = (story.frames[0].shape()[0], story.frames[0].shape()[1]);
    story
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| Ok(crate::layout::rasterize_bbox(b, h, w)?.with_frame(i)))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests;
