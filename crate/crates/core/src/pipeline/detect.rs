use crate::error::{Error, Result};
use crate::layout::BoundingBox;
use crate::numerics::Tensor;

/// Anything that returns the single subject box of a latent frame `(h, w, c)`.
pub trait Detector {
    fn detect(&self, latent: &Tensor) -> Result<BoundingBox>;
}

/// [`detect_subject_stub`] as a [`Detector`].
#[derive(Clone, Copy, Debug, Default)]
pub struct StubDetector;

impl Detector for StubDetector {
    fn detect(&self, latent: &Tensor) -> Result<BoundingBox> {
        detect_subject_stub(latent)
    }
}

/// Tight box of the largest 4-connected component of cells whose channel-0
/// magnitude reaches half the frame maximum. Equal-size components resolve to the
/// one met first in row-major order.
pub fn detect_subject_stub(latent: &Tensor) -> Result<BoundingBox> {
    let s = latent.shape();
    if s.len() != 3 || s[2] == 0 || s[0] == 0 || s[1] == 0 {
        return Err(Error::BadShape {
            op: "detect_subject_stub",
            detail: format!("expected (h, w, c), got {s:?}"),
        });
    }
    if !latent.all_finite() {
        return Err(Error::NonFinite("detector input"));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mag: Vec<f64> = (0..h * w).map(|p| latent.data()[p * c].abs()).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::NoSubject);
    }
    let on: Vec<bool> = mag.iter().map(|&m| m >= 0.5 * max).collect();
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, [usize; 4])> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut n, mut bb) = (0, [h, w, 0, 0]);
        while let Some(p) = stack.pop() {
            let (i, j) = (p / w, p % w);
            n += 1;
            bb = [bb[0].min(i), bb[1].min(j), bb[2].max(i), bb[3].max(j)];
            let mut push = |q: usize| {
                if on[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if i > 0 {
                push(p - w);
            }
            if i + 1 < h {
                push(p + w);
            }
            if j > 0 {
                push(p - 1);
            }
            if j + 1 < w {
                push(p + 1);
            }
        }
        if best.is_none_or(|(bn, _)| n > bn) {
            best = Some((n, bb));
        }
    }
    let (_, [i0, j0, i1, j1]) = best.ok_or(Error::NoSubject)?;
    BoundingBox::new(
        j0 as f64 / w as f64,
        i0 as f64 / h as f64,
        (j1 + 1) as f64 / w as f64,
        (i1 + 1) as f64 / h as f64,
    )
}
