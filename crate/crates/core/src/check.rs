//! The invariant and oracle suite behind `l2s check` and the acceptance target.
//!
//! Each check is tagged with the acceptance criterion it supports. A check returns
//! whether it passed plus a one-line detail; an error counts as a failure.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::blocks::{
    global_block, init_attention, init_global_block, init_subject_block, init_timestep_trunk, init_zero_linear,
    masked_attention, subject_block, timestep_trunk, zero_inject, BlockConfig,
};
use crate::config::RunConfig;
use crate::diffusion::{guide, q_sample, q_step, reconstruct_z0, ScheduleConfig};
use crate::error::Result;
use crate::eval::{fid, recall_at_1, subject_consistency};
use crate::layout::{rasterize_bbox, AttentionBiasSet, BoundingBox};
use crate::model::{inject_name, Branches, Condition, LayoutCondition, Model, ModelConfig, Reference};
use crate::numerics::{finite_diff_check, finite_diff_check_sampled, AttnBias, ParameterStore, RngStream, Tape, Tensor, Var, NEG_LARGE};
use crate::pipeline::cluster::{exhaustive_inertia, K_FULL, K_PARTIAL, WINDOW};
use crate::pipeline::manifest::{build_manifest, ManifestEntry, ManifestRules, Split};
use crate::pipeline::{group_frames, kmeans, window_k, LengthDist};
use crate::Error;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub struct Check {
    pub name: &'static str,
    pub criterion: u8,
    run: fn() -> Result<(bool, String)>,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub criterion: u8,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Check {
    pub fn run(&self) -> CheckResult {
        let start = Instant::now();
        let (passed, detail) = match (self.run)() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        CheckResult {
            name: self.name,
            criterion: self.criterion,
            passed,
            detail,
            elapsed: start.elapsed(),
        }
    }
}

macro_rules! check {
    ($c:expr, $f:ident) => {
        Check {
            name: stringify!($f),
            criterion: $c,
            run: $f,
        }
    };
}

pub fn suite() -> Vec<Check> {
    vec![
        check!(1, attention_matches_loop_oracle),
        check!(1, zero_bias_is_unmasked_attention),
        check!(2, fresh_model_equals_global_branch),
        check!(2, perturbed_zero_linear_changes_output),
        check!(3, gradcheck_attention),
        check!(3, gradcheck_global_block),
        check!(3, gradcheck_subject_block),
        check!(3, gradcheck_zero_inject),
        check!(3, gradcheck_toy_denoiser),
        check!(4, q_sample_reconstruction),
        check!(4, stepwise_matches_closed_form),
        check!(4, unit_guidance_is_identity),
        check!(5, default_config_constants),
        check!(5, cluster_window_rule),
        check!(5, grouping_distribution_constants),
        check!(6, grouped_length_frequencies),
        check!(6, kmeans_matches_exhaustive_oracle),
        check!(6, split_leaks_detected),
        check!(7, bench_arithmetic),
        check!(8, metric_identities),
    ]
}

pub fn run_criterion(c: u8) -> Vec<CheckResult> {
    suite().iter().filter(|k| k.criterion == c).map(Check::run).collect()
}

fn rand_t(shape: &[usize], seed: u64, label: &str) -> Tensor {
    Tensor::randn(shape, 1.0, &mut RngStream::new(seed, label))
}

/// The small denoiser used by the togglability and gradient checks: d_model 8,
/// two frames of a 3×3 latent.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        n_global_blocks: 2,
        d_model: 8,
        n_heads: 2,
        h: 3,
        w: 3,
        max_frames: 2,
        vocab_dim: 4,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

/// A layout condition with random boxes, captions and reference latent.
pub fn random_layout_condition(rng: &mut RngStream, f: usize, h: usize, w: usize) -> Result<Condition> {
    let boxes = (0..f)
        .map(|_| {
            let x0 = rng.uniform_range(0.0, 0.5);
            let y0 = rng.uniform_range(0.0, 0.5);
            BoundingBox::new(x0, y0, x0 + rng.uniform_range(0.2, 0.5), y0 + rng.uniform_range(0.2, 0.5))
        })
        .collect::<Result<Vec<_>>>()?;
    let frame = rng.below(f);
    let mask = rasterize_bbox(&boxes[frame], h, w)?;
    Ok(Condition {
        global_caption: "a red dotted blob | drifting right".into(),
        layout: Some(LayoutCondition {
            subject_captions: (0..f).map(|i| format!("red dotted blob {}", boxes[i].quadrant())).collect(),
            boxes,
            reference: Some(Reference {
                frame,
                latent: Tensor::randn(&[h, w, 4], 1.0, rng),
                mask: Tensor::new(&[h, w, 1], mask.as_f64())?,
            }),
            all_valid_masks: false,
        }),
    })
}

/// Loop-based multi-head attention, `xq (1, tq, d)`, `xkv (1, tk, d)`, projections
/// `w`/`b` ordered q, k, v, o, additive `bias (tq, tk)`.
pub fn attention_loop_oracle(
    xq: &Tensor,
    xkv: &Tensor,
    w: [&Tensor; 4],
    b: [&Tensor; 4],
    bias: Option<&Tensor>,
    heads: usize,
) -> Tensor {
    let (tq, d) = (xq.shape()[1], xq.shape()[2]);
    let tk = xkv.shape()[1];
    let dk = d / heads;
    let proj = |x: &Tensor, t: usize, wi: usize| -> Vec<Vec<f64>> {
        (0..t)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let mut s = b[wi].data()[j];
                        for p in 0..d {
                            s += x.get(&[0, i, p]) * w[wi].get(&[p, j]);
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    };
    let q = proj(xq, tq, 0);
    let k = proj(xkv, tk, 1);
    let v = proj(xkv, tk, 2);
    let mut cat = vec![vec![0.0; d]; tq];
    for h in 0..heads {
        for i in 0..tq {
            let mut logits: Vec<f64> = (0..tk)
                .map(|j| {
                    let mut s = 0.0;
                    for c in h * dk..(h + 1) * dk {
                        s += q[i][c] * k[j][c];
                    }
                    s / (dk as f64).sqrt() + bias.map_or(0.0, |b| b.get(&[i, j]))
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - mx).exp();
                z += *l;
            }
            for c in h * dk..(h + 1) * dk {
                cat[i][c] = (0..tk).map(|j| logits[j] / z * v[j][c]).sum();
            }
        }
    }
    Tensor::from_fn(&[1, tq, d], |idx| {
        let (i, j) = (idx / d, idx % d);
        let mut s = b[3].data()[j];
        for p in 0..d {
            s += cat[i][p] * w[3].get(&[p, j]);
        }
        s
    })
}

/// Attention parameters under prefix `a`, with nonzero biases so they are exercised.
pub fn attention_store(d: usize, seed: u64) -> Result<ParameterStore> {
    let mut s = ParameterStore::new(seed);
    init_attention(&mut s, "a", d)?;
    for p in ["q", "k", "v", "o"] {
        let n = format!("a.{p}.b");
        let t = Tensor::randn(&[d], 0.3, &mut s.init_rng(&format!("{n}/check")));
        s.set(&n, t)?;
    }
    Ok(s)
}

fn run_attention(s: &ParameterStore, xq: &Tensor, xkv: &Tensor, bias: &AttnBias, heads: usize) -> Result<Tensor> {
    let mut t = Tape::inference();
    let q = t.constant(xq.clone());
    let kv = t.constant(xkv.clone());
    let o = masked_attention(&mut t, s, "a", q, kv, bias, heads, 1)?;
    Ok(t.value(o).clone())
}

fn oracle_for(s: &ParameterStore, xq: &Tensor, xkv: &Tensor, bias: Option<&Tensor>, heads: usize) -> Result<Tensor> {
    let mut w = Vec::new();
    let mut b = Vec::new();
    for p in ["q", "k", "v", "o"] {
        w.push(s.value(&format!("a.{p}.w"))?);
        b.push(s.value(&format!("a.{p}.b"))?);
    }
    Ok(attention_loop_oracle(xq, xkv, [w[0], w[1], w[2], w[3]], [b[0], b[1], b[2], b[3]], bias, heads))
}

/// Random bias `(tq, tk)`: about 30% forbidden keys, never a fully forbidden row.
fn random_bias(tq: usize, tk: usize, rng: &mut RngStream) -> Tensor {
    let mut bias = Tensor::from_fn(&[tq, tk], |_| if rng.bernoulli(0.3) { -NEG_LARGE } else { rng.normal() });
    for i in 0..tq {
        let keep = rng.below(tk);
        bias.set(&[i, keep], rng.normal());
    }
    bias
}

fn attention_matches_loop_oracle() -> Result<(bool, String)> {
    let mut rng = RngStream::new(1, "check/attention");
    let mut worst: f64 = 0.0;
    let cases = 200;
    for case in 0..cases {
        let heads = 1 + rng.below(4);
        let dk = 1 + rng.below(8);
        let (tq, tk) = (1 + rng.below(16), 1 + rng.below(16));
        let d = heads * dk;
        let s = attention_store(d, case)?;
        let xq = Tensor::randn(&[1, tq, d], 1.0, &mut rng);
        let xkv = Tensor::randn(&[1, tk, d], 1.0, &mut rng);
        let bias = random_bias(tq, tk, &mut rng);
        let got = run_attention(&s, &xq, &xkv, &AttnBias::Dense(bias.clone().reshape(&[1, tq, tk])?), heads)?;
        let want = oracle_for(&s, &xq, &xkv, Some(&bias), heads)?;
        worst = worst.max(got.max_abs_diff(&want)?);
    }
    Ok((worst < 1e-10, format!("{cases} instances, max abs err {worst:.2e} (< 1e-10)")))
}

fn zero_bias_is_unmasked_attention() -> Result<(bool, String)> {
    let mut rng = RngStream::new(2, "check/zero-bias");
    let mut exact = true;
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let heads = 1 + rng.below(4);
        let d = heads * (1 + rng.below(8));
        let (tq, tk) = (1 + rng.below(16), 1 + rng.below(16));
        let s = attention_store(d, 100 + case)?;
        let xq = Tensor::randn(&[1, tq, d], 1.0, &mut rng);
        let xkv = Tensor::randn(&[1, tk, d], 1.0, &mut rng);
        let zero = run_attention(&s, &xq, &xkv, &AttnBias::Dense(Tensor::zeros(&[1, tq, tk])), heads)?;
        let plain = run_attention(&s, &xq, &xkv, &AttnBias::None, heads)?;
        exact &= zero == plain;
        worst = worst.max(plain.max_abs_diff(&oracle_for(&s, &xq, &xkv, None, heads)?)?);
    }
    Ok((exact && worst < 1e-10, format!("bit-identical to unmasked path: {exact}; unmasked vs loop oracle {worst:.2e}")))
}

fn toggle_inputs(cfg: &ModelConfig, i: u64) -> Result<(Tensor, Vec<f64>, Vec<Condition>)> {
    let mut rng = RngStream::new(i, "check/toggle");
    let (f, h, w) = (1 + rng.below(cfg.max_frames), cfg.h, cfg.w);
    let b = 1 + rng.below(2);
    let z = Tensor::randn(&[b, f, h, w, 4], 1.0, &mut rng);
    let t: Vec<f64> = (0..b).map(|_| (1 + rng.below(1000)) as f64).collect();
    let conds = (0..b)
        .map(|_| {
            if rng.bernoulli(0.75) {
                random_layout_condition(&mut rng, f, h, w)
            } else {
                Ok(Condition::caption("a blue striped blob | rising"))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((z, t, conds))
}

fn fresh_model_equals_global_branch() -> Result<(bool, String)> {
    let cfg = toy_config();
    let m = Model::new(cfg.clone(), 7)?;
    let mut same = 0;
    for i in 0..100 {
        let (z, t, conds) = toggle_inputs(&cfg, i)?;
        let full = m.predict(&z, &t, &conds, Branches::Full)?;
        let glob = m.predict(&z, &t, &conds, Branches::Global)?;
        same += usize::from(full == glob);
    }
    Ok((same == 100, format!("{same}/100 inputs bit-identical")))
}

fn perturbed_zero_linear_changes_output() -> Result<(bool, String)> {
    let cfg = toy_config();
    let base = Model::new(cfg.clone(), 7)?;
    let (z, t, _) = toggle_inputs(&cfg, 0)?;
    let mut rng = RngStream::new(3, "check/perturb");
    let conds = (0..z.shape()[0])
        .map(|_| random_layout_condition(&mut rng, z.shape()[1], cfg.h, cfg.w))
        .collect::<Result<Vec<_>>>()?;
    let before = base.predict(&z, &t, &conds, Branches::Full)?;
    let n = cfg.n_subject_blocks();
    let mut changed = 0;
    for k in 0..n {
        for wb in ["w", "b"] {
            let mut m = base.clone();
            let name = format!("{}.{wb}", inject_name(k));
            let mut p = m.params.value(&name)?.clone();
            p.data_mut()[0] = 1e-3;
            m.params.set(&name, p)?;
            changed += usize::from(m.predict(&z, &t, &conds, Branches::Full)? != before);
        }
    }
    Ok((changed == 2 * n, format!("{changed}/{} zero-linear perturbations changed the output", 2 * n)))
}

fn readout(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_t(&shape, seed, "check/readout"));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn summarize(reports: &[(String, crate::numerics::GradCheckReport)]) -> (bool, String) {
    let passed = reports.iter().all(|(_, r)| r.passed);
    let worst = reports
        .iter()
        .filter_map(|(label, r)| r.worst().map(|(n, e)| (e, format!("{label}:{n}"))))
        .max_by(|a, b| a.0.total_cmp(&b.0));
    let checked: usize = reports.iter().map(|(_, r)| r.elements_checked).sum();
    let detail = match worst {
        Some((e, at)) => format!("{checked} elements, worst rel err {e:.2e} at {at} (tol {GRAD_TOL:.0e})"),
        None => "nothing to check".into(),
    };
    (passed, detail)
}

fn gradcheck_attention() -> Result<(bool, String)> {
    let mut reports = Vec::new();
    for (seed, heads, tq, tk) in [(1u64, 1usize, 3usize, 4usize), (2, 2, 5, 2)] {
        let s = attention_store(4, seed)?;
        let mut rng = RngStream::new(seed, "check/grad-attn");
        let xq = Tensor::randn(&[1, tq, 4], 1.0, &mut rng);
        let xkv = Tensor::randn(&[1, tk, 4], 1.0, &mut rng);
        let bias = AttnBias::Dense(random_bias(tq, tk, &mut rng).reshape(&[1, tq, tk])?);
        let r = finite_diff_check(
            |tape, s| {
                let q = tape.constant(xq.clone());
                let kv = tape.constant(xkv.clone());
                let o = masked_attention(tape, s, "a", q, kv, &bias, heads, 1)?;
                readout(tape, o, seed)
            },
            &s,
            GRAD_EPS,
            GRAD_TOL,
        )?;
        reports.push((format!("heads={heads}"), r));
    }
    Ok(summarize(&reports))
}

fn gradcheck_global_block() -> Result<(bool, String)> {
    let mut reports = Vec::new();
    for (d, hw) in [(4usize, 4usize), (8, 9)] {
        let cfg = BlockConfig::new(d, 2, true)?;
        let mut s = ParameterStore::new(d as u64);
        init_timestep_trunk(&mut s, "g", d)?;
        init_global_block(&mut s, "g.blk", &cfg)?;
        let z = rand_t(&[2, hw, d], 1, "check/z");
        let text = rand_t(&[2, 3, d], 2, "check/text");
        let r = finite_diff_check(
            |tape, s| {
                let zc = tape.constant(z.clone());
                let tc = tape.constant(text.clone());
                let (_, t6) = timestep_trunk(tape, s, "g", &[12.0, 600.0], d)?;
                let y = global_block(tape, s, "g.blk", zc, tc, &AttnBias::None, 1, t6, &cfg)?;
                readout(tape, y, 3)
            },
            &s,
            GRAD_EPS,
            GRAD_TOL,
        )?;
        reports.push((format!("d={d}"), r));
    }
    Ok(summarize(&reports))
}

fn gradcheck_subject_block() -> Result<(bool, String)> {
    let mut reports = Vec::new();
    for (d, side, f) in [(4usize, 2usize, 1usize), (8, 3, 2)] {
        let cfg = BlockConfig::new(d, 2, false)?;
        let mut s = ParameterStore::new(10 + d as u64);
        init_timestep_trunk(&mut s, "g", d)?;
        init_subject_block(&mut s, "s.blk", &cfg)?;
        let mut rng = RngStream::new(d as u64, "check/grad-subject");
        let boxes: Vec<BoundingBox> = (0..f)
            .map(|_| {
                let x0 = rng.uniform_range(0.0, 0.5);
                let y0 = rng.uniform_range(0.0, 0.5);
                BoundingBox::new(x0, y0, x0 + 0.5, y0 + 0.5)
            })
            .collect::<Result<_>>()?;
        let biases = AttentionBiasSet::from_boxes(&[Some(boxes)], f, side, side)?;
        let z = rand_t(&[f, side * side, d], 4, "check/z");
        let text = rand_t(&[f, 3, d], 5, "check/text");
        let r = finite_diff_check(
            |tape, s| {
                let zc = tape.constant(z.clone());
                let tc = tape.constant(text.clone());
                let (_, t6) = timestep_trunk(tape, s, "g", &vec![77.0; f], d)?;
                let y = subject_block(tape, s, "s.blk", zc, tc, &AttnBias::None, &biases, t6, &cfg)?;
                readout(tape, y, 6)
            },
            &s,
            GRAD_EPS,
            GRAD_TOL,
        )?;
        reports.push((format!("d={d},f={f}"), r));
    }
    Ok(summarize(&reports))
}

fn gradcheck_zero_inject() -> Result<(bool, String)> {
    let d = 4;
    let mut s = ParameterStore::new(5);
    init_zero_linear(&mut s, "inj", d)?;
    // away from zero so the weight gradient is not the only thing exercised
    s.set("inj.w", rand_t(&[d, d], 6, "check/inj"))?;
    let zg = rand_t(&[2, 3, d], 7, "check/zg");
    let zs = rand_t(&[2, 3, d], 8, "check/zs");
    let r = finite_diff_check(
        |tape, s| {
            let a = tape.constant(zg.clone());
            let b = tape.constant(zs.clone());
            let o = zero_inject(tape, s, "inj", a, b)?;
            let o = tape.mul(o, o)?;
            readout(tape, o, 9)
        },
        &s,
        GRAD_EPS,
        GRAD_TOL,
    )?;
    Ok(summarize(&[("inject".into(), r)]))
}

fn gradcheck_toy_denoiser() -> Result<(bool, String)> {
    let cfg = toy_config();
    let mut m = Model::new(cfg.clone(), 13)?;
    // nonzero injections so gradients reach the subject branch
    for k in 0..cfg.n_subject_blocks() {
        for wb in ["w", "b"] {
            let n = format!("{}.{wb}", inject_name(k));
            let shape = m.params.value(&n)?.shape().to_vec();
            m.params.set(&n, Tensor::randn(&shape, 0.3, &mut RngStream::new(5, &n)))?;
        }
    }
    let mut rng = RngStream::new(6, "check/e2e");
    let z = Tensor::randn(&[1, 2, 3, 3, 4], 1.0, &mut rng);
    let target = Tensor::randn(&[1, 2, 3, 3, 4], 1.0, &mut rng);
    let conds = vec![random_layout_condition(&mut rng, 2, 3, 3)?];
    let r = finite_diff_check_sampled(
        |tape, s| {
            let mm = Model { cfg: cfg.clone(), params: s.clone() };
            let y = mm.forward(tape, &z, &[250.0], &conds, Branches::Full)?;
            tape.mse(y, &target)
        },
        &m.params,
        GRAD_EPS,
        GRAD_TOL,
        Some(12),
    )?;
    let (ok, detail) = summarize(&[("model".into(), r)]);
    Ok((ok, format!("{} params sampled; {detail}", m.params.len())))
}

fn q_sample_reconstruction() -> Result<(bool, String)> {
    let s = ScheduleConfig::default().build()?;
    let mut rng = RngStream::new(4, "check/recon");
    let mut worst: f64 = 0.0;
    for t in (1..=s.t_max()).step_by(7).chain([s.t_max()]) {
        let z0 = Tensor::randn(&[64], 1.0, &mut rng);
        let eps = Tensor::randn(&[64], 1.0, &mut rng);
        let zt = q_sample(&z0, t, &eps, &s)?;
        worst = worst.max(reconstruct_z0(&zt, t, &eps, &s)?.max_abs_diff(&z0)?);
    }
    Ok((worst <= 1e-10, format!("max reconstruction err {worst:.2e} (<= 1e-10)")))
}

fn stepwise_matches_closed_form() -> Result<(bool, String)> {
    let s = ScheduleConfig::default().build()?;
    let n = 100_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for (pair, (z0, t)) in [(1.5, 10usize), (-0.7, 200), (0.3, 1000)].into_iter().enumerate() {
        let mut r = RngStream::new(pair as u64, "check/stepwise");
        let mut z = Tensor::full(&[n], z0);
        for k in 1..=t {
            let e = Tensor::from_fn(&[n], |_| r.normal());
            z = q_step(&z, k, &e, &s)?;
        }
        let mean = z.sum() / n as f64;
        let var = z.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let ab = s.alpha_bar_at(t);
        let (want_mean, want_var) = (ab.sqrt() * z0, 1.0 - ab);
        // relative tolerance, with an absolute floor of one standard deviation for means near zero
        let mean_err = (mean - want_mean).abs() / want_mean.abs().max(want_var.sqrt());
        let var_err = (var - want_var).abs() / want_var;
        ok &= mean_err <= 0.01 && var_err <= 0.02;
        parts.push(format!("t={t}: mean {mean_err:.4} var {var_err:.4}"));
    }
    Ok((ok, format!("{} (1e5 draws; tol 0.01 / 0.02)", parts.join(", "))))
}

fn unit_guidance_is_identity() -> Result<(bool, String)> {
    let mut rng = RngStream::new(5, "check/guide");
    let mut exact = true;
    for _ in 0..100 {
        let c = Tensor::randn(&[2, 3, 4], 3.0, &mut rng);
        let u = Tensor::randn(&[2, 3, 4], 3.0, &mut rng);
        exact &= guide(&c, &u, 1.0)? == c && guide(&c, &u, 0.0)? == u;
    }
    Ok((exact, format!("guide(c, u, 1) == c bit-exactly: {exact}")))
}

fn default_config_constants() -> Result<(bool, String)> {
    let c = RunConfig::default();
    c.validate()?;
    let got = (
        c.sample.steps,
        c.sample.guidance_scale,
        c.model.token_cap,
        c.training.p_layout,
        c.training.p_caption,
    );
    let ok = got == (25, 4.5, 120, 0.25, 0.25);
    Ok((
        ok,
        format!(
            "steps={} guidance={} token_cap={} p_layout={} p_caption={}",
            got.0, got.1, got.2, got.3, got.4
        ),
    ))
}

fn cluster_window_rule() -> Result<(bool, String)> {
    let ok = WINDOW == 150
        && K_FULL == 12
        && K_PARTIAL == 6
        && window_k(150) == 12
        && window_k(149) == 6
        && window_k(60) == 6;
    Ok((ok, format!("window {WINDOW}: k({WINDOW})={} k(149)={}", window_k(150), window_k(149))))
}

fn grouping_distribution_constants() -> Result<(bool, String)> {
    let d = LengthDist::default();
    d.validate()?;
    let ok = d.lengths == [4, 5, 6] && d.probs == [0.5, 0.3, 0.2];
    Ok((ok, format!("lengths {:?} probs {:?}", d.lengths, d.probs)))
}

fn grouped_length_frequencies() -> Result<(bool, String)> {
    let dist = LengthDist::default();
    let mut r = RngStream::new(42, "check/group-stats");
    let mut counts = [0usize; 3];
    let (mut n, mut start) = (0, 0);
    while n < 10_000 {
        let members: Vec<usize> = (start..start + 5000).collect();
        start += 5000;
        for s in group_frames(&members, &dist, &mut r) {
            if n == 10_000 {
                break;
            }
            counts[s.len() - 4] += 1;
            n += 1;
        }
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let ok = freqs.iter().zip([0.5, 0.3, 0.2]).all(|(f, p)| (f - p).abs() <= 0.015);
    Ok((ok, format!("10000 sequences: {:.4}/{:.4}/{:.4} (target .5/.3/.2 ± .015)", freqs[0], freqs[1], freqs[2])))
}

fn kmeans_matches_exhaustive_oracle() -> Result<(bool, String)> {
    let mut r = RngStream::new(5, "check/kmeans");
    let cases = 300;
    let mut misses = 0u64;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let k = 1 + r.below(3);
        let n = k + r.below(9 - k);
        let f = Tensor::randn(&[n, 2], 1.0, &mut RngStream::new(1000 + case, "check/pts"));
        let gap = (kmeans(&f, k, 100, case)?.inertia - exhaustive_inertia(&f, k)).abs();
        worst = worst.max(gap);
        misses += u64::from(gap > 1e-9);
    }
    Ok((misses == 0, format!("{}/{cases} instances optimal (n <= 8, k <= 3); worst gap {worst:.2e}", cases - misses)))
}

fn entry(id: u64, video: &str, cat: &str, len: usize) -> ManifestEntry {
    ManifestEntry {
        id,
        video_id: video.into(),
        category: cat.into(),
        frame_indices: (0..len).collect(),
        latents: (0..len).map(|i| format!("{video}/{i}.l2sa")).collect(),
        boxes: vec![BoundingBox::FULL; len],
        global_caption: "blob | rising".into(),
        subject_captions: vec!["blob".into(); len],
        ref_frame: 0,
        meta: None,
    }
}

fn split_leaks_detected() -> Result<(bool, String)> {
    let mut r = RngStream::new(8, "check/leaks");
    let mut caught = 0;
    for case in 0..100 {
        let n_train = 5 + r.below(40);
        let train: Vec<_> = (0..n_train).map(|i| entry(i as u64, &format!("t{case}-{i}"), "c", 4)).collect();
        let mut bench: Vec<_> = (0..10).map(|i| entry(1000 + i, &format!("b{case}-{i}"), &format!("c{i}"), 4)).collect();
        let victim = train[r.below(n_train)].video_id.clone();
        let slot = r.below(bench.len() + 1);
        bench.insert(slot, entry(2000, &victim, "z", 4 + r.below(3)));
        if let Err(Error::SplitLeak(v)) = build_manifest(bench, Split::Bench, &ManifestRules::default(), Some(&train), 0) {
            caught += usize::from(v == [victim]);
        }
    }
    Ok((caught == 100, format!("{caught}/100 injected leaks caught")))
}

fn bench_arithmetic() -> Result<(bool, String)> {
    let mut es = Vec::new();
    for (count, len) in [(375, 4), (180, 5), (100, 6)] {
        for _ in 0..count {
            let id = es.len() as u64;
            es.push(entry(id, &format!("v{id}"), &format!("c{id}"), len));
        }
    }
    let m = build_manifest(es, Split::Bench, &ManifestRules::default(), None, 0)?;
    let ok = m.header.sets == 655
        && m.header.prompts == 3000
        && m.header.length_histogram == BTreeMap::from([(4, 375), (5, 180), (6, 100)]);
    Ok((ok, format!("{} sets, {} prompts", m.header.sets, m.header.prompts)))
}

fn metric_identities() -> Result<(bool, String)> {
    let mut rng = RngStream::new(9, "check/metrics");
    let a = Tensor::randn(&[200, 6], 1.0, &mut rng);
    let self_fid = fid(&a, &a)?;
    let shift: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
    let b = Tensor::from_fn(&[200, 6], |i| a.data()[i] + shift[i % 6]);
    let want: f64 = shift.iter().map(|x| x * x).sum();
    let shift_err = (fid(&a, &b)? - want).abs();
    let recall = recall_at_1(&Tensor::eye(16))?;
    let frame = Tensor::randn(&[16, 16, 4], 1.0, &mut rng);
    let bx = BoundingBox::new(0.2, 0.3, 0.7, 0.8)?;
    let sc = subject_consistency(&vec![frame; 4], &[bx; 4])?;
    let ok = self_fid.abs() <= 1e-8 && shift_err <= 1e-6 && recall == 1.0 && (sc - 1.0).abs() <= 1e-9;
    Ok((
        ok,
        format!("fid(a,a)={self_fid:.1e} shift err {shift_err:.1e} recall@1(I)={recall} consistency={sc:.12}"),
    ))
}

pub fn report_line(r: &CheckResult) -> String {
    format!(
        "[{}] c{} {:<36} {:>8.2}s  {}",
        if r.passed { "PASS" } else { "FAIL" },
        r.criterion,
        r.name,
        r.elapsed.as_secs_f64(),
        r.detail
    )
}

/// One line per check, then a totals line.
pub fn report(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&report_line(r));
        s.push('\n');
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    s.push_str(&format!("{} checks, {failed} failed\n", results.len()));
    s
}
