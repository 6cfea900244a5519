//! Bounding boxes, rasterized subject masks and the additive attention biases
//! derived from them.
//!
//! Masking is key-side: every query may attend, but only to keys inside the
//! subject region of the relevant frame. Query positions outside the box skip
//! subject cross-attention entirely (the bypass flags of [`CrossBias`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor, NEG_LARGE};

/// Longest caption, in tokens, the text encoder accepts.
pub const TOKEN_CAP: usize = 120;

/// Axis-aligned box in normalized coordinates, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BoundingBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub const FULL: BoundingBox = BoundingBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite())
            && 0.0 <= self.x0
            && self.x0 <= self.x1
            && self.x1 <= 1.0
            && 0.0 <= self.y0
            && self.y0 <= self.y1
            && self.y1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidBox {
                x0: self.x0,
                y0: self.y0,
                x1: self.x1,
                y1: self.y1,
            })
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x <= self.x1 && self.y0 <= y && y <= self.y1
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Quadrant name of the box center.
    pub fn quadrant(&self) -> &'static str {
        let (cx, cy) = self.center();
        match (cy < 0.5, cx < 0.5) {
            (true, true) => "top-left",
            (true, false) => "top-right",
            (false, true) => "bottom-left",
            (false, false) => "bottom-right",
        }
    }
}

/// Binary `h x w` grid marking the subject region of one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterMask {
    pub h: usize,
    pub w: usize,
    pub grid: Vec<bool>,
    pub frame_index: usize,
}

impl RasterMask {
    pub fn full(h: usize, w: usize) -> Self {
        RasterMask {
            h,
            w,
            grid: vec![true; h * w],
            frame_index: 0,
        }
    }

    pub fn with_frame(mut self, frame_index: usize) -> Self {
        self.frame_index = frame_index;
        self
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&c| c).count()
    }

    pub fn is_full(&self) -> bool {
        self.grid.iter().all(|&c| c)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.grid[i * self.w + j]
    }

    /// 1.0 inside, 0.0 outside, row-major.
    pub fn as_f64(&self) -> Vec<f64> {
        self.grid.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }
}

/// Cell `(i, j)` is set iff its center lies inside the box; a box containing no
/// cell center marks the single cell holding its center.
pub fn rasterize_bbox(bbox: &BoundingBox, h: usize, w: usize) -> Result<RasterMask> {
    bbox.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::BadShape {
            op: "rasterize_bbox",
            detail: format!("grid {h}x{w}"),
        });
    }
    let mut grid = vec![false; h * w];
    for i in 0..h {
        let cy = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let cx = (j as f64 + 0.5) / w as f64;
            grid[i * w + j] = bbox.contains(cx, cy);
        }
    }
    if !grid.iter().any(|&c| c) {
        let (cx, cy) = bbox.center();
        let j = ((cx * w as f64) as usize).min(w - 1);
        let i = ((cy * h as f64) as usize).min(h - 1);
        grid[i * w + j] = true;
    }
    Ok(RasterMask {
        h,
        w,
        grid,
        frame_index: 0,
    })
}

/// Rasterize an optional box; an absent box covers the whole frame.
pub fn rasterize_optional(bbox: Option<&BoundingBox>, h: usize, w: usize) -> Result<RasterMask> {
    match bbox {
        Some(b) => rasterize_bbox(b, h, w),
        None => Ok(RasterMask::full(h, w)),
    }
}

fn check_masks(masks: &[RasterMask], b: usize, f: usize) -> Result<(usize, usize)> {
    if masks.len() != b * f || masks.is_empty() {
        return Err(Error::BadShape {
            op: "attention bias",
            detail: format!("{} masks for b = {b}, f = {f}", masks.len()),
        });
    }
    let (h, w) = (masks[0].h, masks[0].w);
    for (i, m) in masks.iter().enumerate() {
        if m.h != h || m.w != w {
            return Err(Error::shape("attention bias", &[h, w], &[m.h, m.w]));
        }
        if m.count() == 0 {
            return Err(Error::EmptyMask(i % f));
        }
    }
    Ok((h, w))
}

fn key_bias(m: &RasterMask) -> impl Iterator<Item = f64> + '_ {
    m.grid.iter().map(|&c| if c { 0.0 } else { -NEG_LARGE })
}

/// Per-frame self-attention bias `(b, f, hw, hw)`; `masks` is ordered `[sample][frame]`.
pub fn build_self_bias(masks: &[RasterMask], b: usize, f: usize, h: usize, w: usize) -> Result<Tensor> {
    let (mh, mw) = check_masks(masks, b, f)?;
    if (mh, mw) != (h, w) {
        return Err(Error::shape("build_self_bias", &[h, w], &[mh, mw]));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(b * f * hw * hw);
    for m in masks {
        let row: Vec<f64> = key_bias(m).collect();
        for _ in 0..hw {
            data.extend_from_slice(&row);
        }
    }
    Tensor::new(&[b, f, hw, hw], data)
}

/// Cross-attention bias against a caption of `l` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossBias {
    /// `(b, f, hw, l)`, all zeros: in-box queries see every caption token.
    pub bias: Tensor,
    /// `(b, f, hw)`, 1.0 where the query lies outside the box and skips cross-attention.
    pub bypass: Tensor,
}

pub fn build_cross_bias(masks: &[RasterMask], b: usize, f: usize, l: usize) -> Result<CrossBias> {
    if l > TOKEN_CAP {
        return Err(Error::CaptionTooLong {
            len: l,
            cap: TOKEN_CAP,
        });
    }
    if l == 0 {
        return Err(Error::EmptyCaption);
    }
    let (h, w) = check_masks(masks, b, f)?;
    let hw = h * w;
    let bypass: Vec<f64> = masks
        .iter()
        .flat_map(|m| m.grid.iter().map(|&c| if c { 0.0 } else { 1.0 }))
        .collect();
    Ok(CrossBias {
        bias: Tensor::zeros(&[b, f, hw, l]),
        bypass: Tensor::new(&[b, f, hw], bypass)?,
    })
}

/// Bias `(b, f*hw, f*hw)` over the flattened frame-by-space axis: key `(frame, pos)`
/// is permitted iff `pos` is inside that frame's mask.
pub fn build_temporal_bias(masks: &[RasterMask], b: usize, f: usize) -> Result<Tensor> {
    let (h, w) = check_masks(masks, b, f)?;
    let n = f * h * w;
    let mut data = Vec::with_capacity(b * n * n);
    for s in 0..b {
        let row: Vec<f64> = masks[s * f..(s + 1) * f].iter().flat_map(key_bias).collect();
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
    }
    Tensor::new(&[b, n, n], data)
}

/// The three subject-branch biases for a batch, held in their compact key-mask form.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBiasSet {
    pub b: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
    /// `[sample][frame]` order.
    pub masks: Vec<RasterMask>,
}

impl AttentionBiasSet {
    pub fn from_masks(masks: Vec<RasterMask>, b: usize, f: usize) -> Result<Self> {
        let (h, w) = check_masks(&masks, b, f)?;
        Ok(AttentionBiasSet { b, f, h, w, masks })
    }

    /// Rasterize per-sample optional boxes (absent boxes cover the frame).
    pub fn from_boxes(boxes: &[Option<Vec<BoundingBox>>], f: usize, h: usize, w: usize) -> Result<Self> {
        let mut masks = Vec::with_capacity(boxes.len() * f);
        for sample in boxes {
            for fr in 0..f {
                let bb = match sample {
                    Some(v) => Some(v.get(fr).ok_or_else(|| Error::BadShape {
                        op: "AttentionBiasSet::from_boxes",
                        detail: format!("{} boxes for {f} frames", v.len()),
                    })?),
                    None => None,
                };
                masks.push(rasterize_optional(bb, h, w)?.with_frame(fr));
            }
        }
        Self::from_masks(masks, boxes.len(), f)
    }

    pub fn all_valid(b: usize, f: usize, h: usize, w: usize) -> Self {
        let masks = (0..b * f)
            .map(|i| RasterMask::full(h, w).with_frame(i % f))
            .collect();
        AttentionBiasSet { b, f, h, w, masks }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_is_all_valid(&self, s: usize) -> bool {
        self.masks[s * self.f..(s + 1) * self.f].iter().all(RasterMask::is_full)
    }

    pub fn self_bias(&self) -> Result<Tensor> {
        build_self_bias(&self.masks, self.b, self.f, self.h, self.w)
    }

    pub fn cross_bias(&self, l: usize) -> Result<CrossBias> {
        build_cross_bias(&self.masks, self.b, self.f, l)
    }

    pub fn temporal_bias(&self) -> Result<Tensor> {
        build_temporal_bias(&self.masks, self.b, self.f)
    }

    /// Key bias `(b*f, hw)` for per-frame attention.
    pub fn self_keys(&self) -> Tensor {
        let data = self.masks.iter().flat_map(key_bias).collect();
        Tensor::new(&[self.b * self.f, self.hw()], data).expect("mask sizes checked")
    }

    /// Key bias `(b, f*hw)` for attention across frames.
    pub fn temporal_keys(&self) -> Tensor {
        let data = self.masks.iter().flat_map(key_bias).collect();
        Tensor::new(&[self.b, self.f * self.hw()], data).expect("mask sizes checked")
    }

    /// In-box indicator `(b, f*hw, 1)`; multiplies the cross-attention residual.
    pub fn in_box(&self) -> Tensor {
        let data = self.masks.iter().flat_map(|m| m.as_f64()).collect();
        Tensor::new(&[self.b, self.f * self.hw(), 1], data).expect("mask sizes checked")
    }

    fn clear_sample(&mut self, s: usize) {
        for m in &mut self.masks[s * self.f..(s + 1) * self.f] {
            m.grid.iter_mut().for_each(|c| *c = true);
        }
    }
}

/// Per-sample Bernoulli(`p`) decision keyed by sample id on a labeled child stream,
/// so the outcome for a sample does not depend on its batch position.
pub fn sample_decision(rng: &RngStream, label: &str, sample_id: u64, p: f64) -> bool {
    if p <= 0.0 {
        return false;
    }
    if p >= 1.0 {
        return true;
    }
    rng.child(format!("{label}/{sample_id}")).bernoulli(p)
}

/// With probability `p` per sample, replace all of that sample's biases by
/// all-valid ones (no forbidden keys, no bypassed queries).
pub fn apply_layout_dropout(
    biases: &AttentionBiasSet,
    p: f64,
    rng: &RngStream,
    sample_ids: &[u64],
) -> Result<(AttentionBiasSet, Vec<bool>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("layout dropout probability {p} outside [0, 1]")));
    }
    if sample_ids.len() != biases.b {
        return Err(Error::BadShape {
            op: "apply_layout_dropout",
            detail: format!("{} ids for batch {}", sample_ids.len(), biases.b),
        });
    }
    let mut out = biases.clone();
    let mut dropped = Vec::with_capacity(biases.b);
    for (s, &id) in sample_ids.iter().enumerate() {
        let d = sample_decision(rng, "layout-dropout", id, p);
        if d {
            out.clear_sample(s);
        }
        dropped.push(d);
    }
    Ok((out, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn full_box_fills_grid() {
        assert!(rasterize_bbox(&BoundingBox::FULL, 4, 4).unwrap().is_full());
    }

    #[test]
    fn quarter_box_is_top_left_block() {
        let m = rasterize_bbox(&bb(0.0, 0.0, 0.5, 0.5), 4, 4).unwrap();
        // cell-center containment: centers at 0.125, 0.375 are inside, 0.625 is not
        for i in 0..4 {
            for j in 0..4 {
                let cx = (j as f64 + 0.5) / 4.0;
                let cy = (i as f64 + 0.5) / 4.0;
                assert_eq!(m.get(i, j), cx <= 0.5 && cy <= 0.5);
            }
        }
        assert_eq!(m.count(), 4);
    }

    #[test]
    fn degenerate_box_marks_containing_cell() {
        let m = rasterize_bbox(&bb(0.3, 0.3, 0.3, 0.3), 4, 4).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(1, 1));
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert!(BoundingBox::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.1, 1.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn all_ones_self_bias_is_zero() {
        let masks = vec![RasterMask::full(2, 2); 2];
        let b = build_self_bias(&masks, 1, 2, 2, 2).unwrap();
        assert!(b.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn self_bias_rows_have_k_permitted_keys() {
        let m = rasterize_bbox(&bb(0.0, 0.0, 0.5, 0.75), 4, 4).unwrap();
        let k = m.count();
        let b = build_self_bias(std::slice::from_ref(&m), 1, 1, 4, 4).unwrap();
        for row in b.data().chunks(16) {
            assert_eq!(row.iter().filter(|&&x| x == 0.0).count(), k);
            assert!(row.iter().all(|&x| x == 0.0 || x == -NEG_LARGE));
        }
    }

    #[test]
    fn per_frame_biases_differ_only_by_frame() {
        let m0 = rasterize_bbox(&bb(0.0, 0.0, 0.5, 0.5), 2, 2).unwrap();
        let m1 = rasterize_bbox(&bb(0.5, 0.5, 1.0, 1.0), 2, 2).unwrap();
        let b = build_self_bias(&[m0.clone(), m1], 1, 2, 2, 2).unwrap();
        let single = build_self_bias(&[m0], 1, 1, 2, 2).unwrap();
        assert_eq!(&b.data()[..16], single.data());
        assert_ne!(&b.data()[..16], &b.data()[16..]);
    }

    #[test]
    fn cross_bias_bypass_complements_raster() {
        let m = rasterize_bbox(&bb(0.0, 0.0, 0.5, 1.0), 4, 4).unwrap();
        let c = build_cross_bias(std::slice::from_ref(&m), 1, 1, 7).unwrap();
        assert_eq!(c.bias.shape(), &[1, 1, 16, 7]);
        assert!(c.bias.data().iter().all(|&x| x == 0.0));
        for (flag, inside) in c.bypass.data().iter().zip(&m.grid) {
            assert_eq!(*flag == 1.0, !inside);
        }
        let full = build_cross_bias(&[RasterMask::full(4, 4)], 1, 1, 3).unwrap();
        assert!(full.bypass.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn caption_over_cap_is_rejected() {
        let m = [RasterMask::full(2, 2)];
        assert!(build_cross_bias(&m, 1, 1, 120).is_ok());
        assert!(matches!(
            build_cross_bias(&m, 1, 1, 121),
            Err(Error::CaptionTooLong { len: 121, cap: 120 })
        ));
    }

    #[test]
    fn temporal_single_frame_equals_self_bias() {
        let m = rasterize_bbox(&bb(0.2, 0.1, 0.7, 0.6), 3, 3).unwrap();
        let t = build_temporal_bias(std::slice::from_ref(&m), 1, 1).unwrap();
        let s = build_self_bias(std::slice::from_ref(&m), 1, 1, 3, 3).unwrap();
        assert_eq!(t.data(), s.data());
    }

    #[test]
    fn temporal_all_ones_two_frames_is_zero() {
        let t = build_temporal_bias(&[RasterMask::full(2, 2), RasterMask::full(2, 2)], 1, 2).unwrap();
        assert_eq!(t.shape(), &[1, 8, 8]);
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn temporal_rows_count_both_frames() {
        let m0 = rasterize_bbox(&bb(0.0, 0.0, 0.5, 0.5), 4, 4).unwrap();
        let m1 = rasterize_bbox(&bb(0.25, 0.25, 1.0, 1.0), 4, 4).unwrap();
        let (k1, k2) = (m0.count(), m1.count());
        let t = build_temporal_bias(&[m0, m1], 1, 2).unwrap();
        for row in t.data().chunks(32) {
            assert_eq!(row.iter().filter(|&&x| x == 0.0).count(), k1 + k2);
        }
    }

    #[test]
    fn compact_forms_expand_to_dense_builders() {
        let boxes = vec![
            Some(vec![bb(0.0, 0.0, 0.5, 0.5), bb(0.5, 0.0, 1.0, 0.6)]),
            None,
        ];
        let set = AttentionBiasSet::from_boxes(&boxes, 2, 3, 3).unwrap();
        let dense = set.self_bias().unwrap();
        let keys = set.self_keys();
        for bf in 0..4 {
            for q in 0..9 {
                for k in 0..9 {
                    assert_eq!(dense.get(&[bf / 2, bf % 2, q, k]), keys.get(&[bf, k]));
                }
            }
        }
        let t = set.temporal_bias().unwrap();
        let tk = set.temporal_keys();
        for s in 0..2 {
            for q in 0..18 {
                for k in 0..18 {
                    assert_eq!(t.get(&[s, q, k]), tk.get(&[s, k]));
                }
            }
        }
        assert!(set.sample_is_all_valid(1));
        assert!(!set.sample_is_all_valid(0));
    }

    fn some_set(b: usize) -> AttentionBiasSet {
        let boxes: Vec<_> = (0..b)
            .map(|i| {
                let x = (i % 4) as f64 * 0.2;
                Some(vec![bb(x, 0.0, x + 0.3, 0.4); 2])
            })
            .collect();
        AttentionBiasSet::from_boxes(&boxes, 2, 4, 4).unwrap()
    }

    #[test]
    fn dropout_extremes() {
        let set = some_set(5);
        let ids: Vec<u64> = (0..5).collect();
        let rng = RngStream::new(1, "d");
        let (same, d) = apply_layout_dropout(&set, 0.0, &rng, &ids).unwrap();
        assert_eq!(same, set);
        assert!(d.iter().all(|&x| !x));
        let (all, _) = apply_layout_dropout(&set, 1.0, &rng, &ids).unwrap();
        assert!((0..5).all(|s| all.sample_is_all_valid(s)));
    }

    #[test]
    fn dropout_rate_quarter_over_10k() {
        let rng = RngStream::new(2024, "train");
        let n = 10_000u64;
        let hits = (0..n)
            .filter(|&id| sample_decision(&rng, "layout-dropout", id, 0.25))
            .count();
        let frac = hits as f64 / n as f64;
        assert!((0.235..=0.265).contains(&frac), "{frac}");
    }

    #[test]
    fn dropout_commutes_with_batch_permutation() {
        let set = some_set(4);
        let rng = RngStream::new(9, "d");
        let ids = [10u64, 11, 12, 13];
        let (out, _) = apply_layout_dropout(&set, 0.5, &rng, &ids).unwrap();
        let perm = [2usize, 0, 3, 1];
        let pmasks = perm
            .iter()
            .flat_map(|&s| set.masks[s * 2..s * 2 + 2].to_vec())
            .collect();
        let pset = AttentionBiasSet::from_masks(pmasks, 4, 2).unwrap();
        let pids: Vec<u64> = perm.iter().map(|&s| ids[s]).collect();
        let (pout, _) = apply_layout_dropout(&pset, 0.5, &rng, &pids).unwrap();
        for (pi, &s) in perm.iter().enumerate() {
            assert_eq!(pout.masks[pi * 2..pi * 2 + 2], out.masks[s * 2..s * 2 + 2]);
        }
    }

    proptest! {
        #[test]
        fn rasterization_is_monotone(
            x0 in 0.0f64..1.0, y0 in 0.0f64..1.0, wd in 0.0f64..1.0, ht in 0.0f64..1.0,
            grow in 0.0f64..0.5, h in 1usize..9, w in 1usize..9,
        ) {
            let small = bb(x0, y0, (x0 + wd).min(1.0), (y0 + ht).min(1.0));
            let big = bb(
                (small.x0 - grow).max(0.0), (small.y0 - grow).max(0.0),
                (small.x1 + grow).min(1.0), (small.y1 + grow).min(1.0),
            );
            let ms = rasterize_bbox(&small, h, w).unwrap();
            let mb = rasterize_bbox(&big, h, w).unwrap();
            // Canonicalized single cells are not covered by monotonicity of containment.
            if ms.count() > 1 || small.contains((0.5) / w as f64, 0.5 / h as f64) || {
                let (cx, cy) = small.center();
                let j = ((cx * w as f64) as usize).min(w - 1);
                let i = ((cy * h as f64) as usize).min(h - 1);
                big.contains((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64) || mb.count() == 1
            } {
                for (a, b) in ms.grid.iter().zip(&mb.grid) {
                    prop_assert!(!a || *b || ms.count() == 1 && mb.count() == 1);
                }
            }
            prop_assert!(ms.count() >= 1);
        }
    }
}
