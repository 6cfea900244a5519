use serde::{Deserialize, Serialize};

use super::schedule::DiffusionSchedule;
use super::EpsModel;
use crate::error::{Error, Result};
use crate::model::Condition;
use crate::numerics::{RngStream, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Deterministic implicit sampler (eta = 0).
    Ddim,
    /// Ancestral sampler, the eta = 1 member of the same family.
    Ddpm,
}

impl Sampler {
    fn eta(self) -> f64 {
        match self {
            Sampler::Ddim => 0.0,
            Sampler::Ddpm => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSpec {
    pub steps: usize,
    pub guidance_scale: f64,
    pub sampler: Sampler,
    pub seed: u64,
    /// Samples per forward pass; results do not depend on it.
    pub chunk: usize,
    /// Clamp the predicted clean latent to `[-c, c]` at every step.
    pub clip_x0: Option<f64>,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            steps: 25,
            guidance_scale: 4.5,
            sampler: Sampler::Ddim,
            seed: 0,
            chunk: 8,
            clip_x0: None,
        }
    }
}

/// Evenly spaced increasing timesteps `t_k = ceil((k + 1) T / S)`, ending at `T`.
pub fn timestep_subsequence(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::BadSpec(format!("sampling steps {steps} not in 1..={t_max}")));
    }
    Ok((0..steps).map(|k| ((k + 1) * t_max).div_ceil(steps)).collect())
}

/// Classifier-free guidance `eps_u + s (eps_c - eps_u)`. `s = 1` returns `eps_c`
/// bit-for-bit and `s = 0` returns `eps_u`.
pub fn guide(eps_c: &Tensor, eps_u: &Tensor, s: f64) -> Result<Tensor> {
    if !s.is_finite() {
        return Err(Error::BadSpec(format!("guidance scale {s}")));
    }
    if eps_c.shape() != eps_u.shape() {
        return Err(Error::shape("guide", eps_c.shape(), eps_u.shape()));
    }
    if s == 1.0 {
        return Ok(eps_c.clone());
    }
    if s == 0.0 {
        return Ok(eps_u.clone());
    }
    eps_c.zip_map(eps_u, |c, u| u + s * (c - u))
}

fn guided_eps(model: &dyn EpsModel, z: &Tensor, t: usize, conds: &[Condition], s: f64) -> Result<Tensor> {
    let n = conds.len();
    let mut tape = Tape::inference();
    if s == 1.0 {
        let v = model.eps(&mut tape, z, &vec![t as f64; n], conds)?;
        return Ok(tape.value(v).clone());
    }
    // one forward over [conditional; unconditional]
    let per = z.numel() / n;
    let mut data = z.data().to_vec();
    data.extend_from_slice(z.data());
    let mut shape = z.shape().to_vec();
    shape[0] = 2 * n;
    let zz = Tensor::new(&shape, data)?;
    let mut cc = conds.to_vec();
    cc.extend(std::iter::repeat_n(Condition::unconditional(), n));
    let v = model.eps(&mut tape, &zz, &vec![t as f64; 2 * n], &cc)?;
    let out = tape.value(v).data();
    let eps_c = Tensor::new(z.shape(), out[..n * per].to_vec())?;
    let eps_u = Tensor::new(z.shape(), out[n * per..].to_vec())?;
    guide(&eps_c, &eps_u, s)
}

/// Draw latents `(n, frames, h, w, c)` for `n = conds.len()` conditions.
///
/// Each sample owns the noise stream `sample/noise/{i}` under `spec.seed`, so the
/// output is independent of `spec.chunk`.
pub fn sample(
    model: &dyn EpsModel,
    schedule: &DiffusionSchedule,
    spec: &SampleSpec,
    conds: &[Condition],
    frames: usize,
    (h, w, c): (usize, usize, usize),
) -> Result<Tensor> {
    if spec.chunk == 0 || frames == 0 {
        return Err(Error::BadSpec("chunk and frames must be positive".into()));
    }
    if let Some(clip) = spec.clip_x0 {
        if !(clip > 0.0) {
            return Err(Error::BadSpec(format!("clip_x0 {clip} must be positive")));
        }
    }
    let ts = timestep_subsequence(schedule.t_max(), spec.steps)?;
    let eta = spec.sampler.eta();
    let per = frames * h * w * c;
    let mut out = Vec::with_capacity(conds.len() * per);
    for (ci, chunk) in conds.chunks(spec.chunk).enumerate() {
        let base = ci * spec.chunk;
        let mut rngs: Vec<RngStream> = (0..chunk.len())
            .map(|i| RngStream::new(spec.seed, format!("sample/noise/{}", base + i)))
            .collect();
        let mut z: Vec<f64> = rngs.iter_mut().flat_map(|r| (0..per).map(|_| r.normal()).collect::<Vec<_>>()).collect();
        let shape = [chunk.len(), frames, h, w, c];
        for k in (0..ts.len()).rev() {
            let t = ts[k];
            let ab = schedule.alpha_bar_at(t);
            let ab_prev = if k == 0 { 1.0 } else { schedule.alpha_bar_at(ts[k - 1]) };
            let zt = Tensor::new(&shape, z)?;
            let eps = guided_eps(model, &zt, t, chunk, spec.guidance_scale)?;
            if !eps.all_finite() {
                return Err(Error::NonFinite("predicted noise"));
            }
            let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
            let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
            let mut next = zt.into_data();
            for (i, r) in rngs.iter_mut().enumerate() {
                for j in i * per..(i + 1) * per {
                    let e = eps.data()[j];
                    let mut x0 = (next[j] - (1.0 - ab).sqrt() * e) / ab.sqrt();
                    if let Some(clip) = spec.clip_x0 {
                        x0 = x0.clamp(-clip, clip);
                    }
                    let noise = if sigma > 0.0 { sigma * r.normal() } else { 0.0 };
                    next[j] = ab_prev.sqrt() * x0 + dir * e + noise;
                }
            }
            z = next;
        }
        out.extend(z);
    }
    Tensor::new(&[conds.len(), frames, h, w, c], out)
}
