use super::*;
use crate::numerics::{finite_diff_check_sampled, RngStream};

pub(crate) fn tiny_config() -> ModelConfig {
    crate::check::toy_config()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut RngStream::new(seed, "model-test"))
}

fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

fn layout_cond(seed: u64, f: usize, h: usize, w: usize) -> Condition {
    let mut r = RngStream::new(seed, "cond");
    let boxes = (0..f)
        .map(|_| {
            let x0 = r.uniform_range(0.0, 0.5);
            let y0 = r.uniform_range(0.0, 0.5);
            bx(x0, y0, x0 + 0.4, y0 + 0.5)
        })
        .collect::<Vec<_>>();
    let mask = crate::layout::rasterize_bbox(&boxes[0], h, w).unwrap();
    Condition {
        global_caption: "a red blob | drifting".into(),
        layout: Some(LayoutCondition {
            boxes,
            subject_captions: (0..f).map(|i| format!("red blob frame {i} top-left")).collect(),
            reference: Some(Reference {
                frame: f - 1,
                latent: randn(&[h, w, 4], seed + 100),
                mask: Tensor::new(&[h, w, 1], mask.as_f64()).unwrap(),
            }),
            all_valid_masks: false,
        }),
    }
}

fn randomize_injection(m: &mut Model, seed: u64) {
    for k in 0..m.cfg.n_subject_blocks() {
        for wb in ["w", "b"] {
            let n = format!("{}.{wb}", inject_name(k));
            let shape = m.params.value(&n).unwrap().shape().to_vec();
            m.params.set(&n, Tensor::randn(&shape, 0.3, &mut RngStream::new(seed, &n))).unwrap();
        }
    }
}

#[test]
fn config_defaults_and_validation() {
    let c = ModelConfig::default();
    assert_eq!(c.token_cap, 120);
    assert_eq!(c.n_subject_blocks(), 2);
    c.validate().unwrap();
    let odd = ModelConfig { n_global_blocks: 3, ..c.clone() };
    assert!(odd.validate().is_err());
    let heads = ModelConfig { n_heads: 5, ..c };
    assert!(heads.validate().is_err());
}

#[test]
fn concat_reference_layout() {
    let z = randn(&[2, 3, 2, 2, 4], 1);
    let rl = randn(&[2, 2, 2, 4], 2);
    let rm = Tensor::ones(&[2, 2, 2, 1]);
    let cat = concat_reference(&z, &rl, &rm, &[1, 2]).unwrap();
    assert_eq!(cat.shape(), &[2, 3, 2, 2, 9]);
    for b in 0..2 {
        for f in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    for c in 0..4 {
                        assert_eq!(cat.get(&[b, f, i, j, c]), z.get(&[b, f, i, j, c]));
                    }
                    let is_ref = f == [1, 2][b];
                    for c in 4..8 {
                        let want = if is_ref { rl.get(&[b, i, j, c - 4]) } else { 0.0 };
                        assert_eq!(cat.get(&[b, f, i, j, c]), want);
                    }
                    assert_eq!(cat.get(&[b, f, i, j, 8]), if is_ref { 1.0 } else { 0.0 });
                }
            }
        }
    }
    assert!(matches!(
        concat_reference(&z, &rl, &rm, &[0, 3]),
        Err(Error::BadRefFrame { frame: 3, frames: 3 })
    ));
    assert!(concat_reference(&z, &rm, &rm, &[0, 0]).is_err());
}

#[test]
fn identity_conv_passes_latent_through() {
    let m = Model::new(tiny_config(), 1).unwrap();
    let z = randn(&[1, 2, 3, 3, 4], 3);
    let cat = concat_reference(&z, &randn(&[1, 3, 3, 4], 4), &Tensor::ones(&[1, 3, 3, 1]), &[0]).unwrap();
    let mut t = Tape::inference();
    let x = t.constant(cat);
    let y = blocks::apply_linear(&mut t, &m.params, "subject.conv", x).unwrap();
    assert_eq!(t.value(y), &z);
}

#[test]
fn fresh_model_equals_standalone_global_branch() {
    let cfg = tiny_config();
    let m = Model::new(cfg, 7).unwrap();
    for seed in 0..5 {
        let z = randn(&[2, 2, 3, 3, 4], seed);
        let conds = vec![layout_cond(seed, 2, 3, 3), Condition::caption("blue blob")];
        let full = m.predict(&z, &[3.0, 900.0], &conds, Branches::Full).unwrap();
        let glob = m.predict(&z, &[3.0, 900.0], &conds, Branches::Global).unwrap();
        assert_eq!(full, glob);
    }
}

#[test]
fn perturbed_injection_changes_output() {
    let mut m = Model::new(tiny_config(), 8).unwrap();
    let z = randn(&[1, 2, 3, 3, 4], 1);
    let conds = vec![layout_cond(1, 2, 3, 3)];
    let before = m.predict(&z, &[50.0], &conds, Branches::Full).unwrap();
    let mut w = m.params.value("subject.inject.0.w").unwrap().clone();
    w.set(&[0, 0], 1e-3);
    m.params.set("subject.inject.0.w", w).unwrap();
    let after = m.predict(&z, &[50.0], &conds, Branches::Full).unwrap();
    assert_ne!(before, after);
}

#[test]
fn fresh_model_ignores_layout_inputs() {
    let m = Model::new(tiny_config(), 9).unwrap();
    let z = randn(&[1, 2, 3, 3, 4], 5);
    let a = m.predict(&z, &[10.0], &[layout_cond(1, 2, 3, 3)], Branches::Full).unwrap();
    let b = m.predict(&z, &[10.0], &[layout_cond(2, 2, 3, 3)], Branches::Full).unwrap();
    let c = m.predict(&z, &[10.0], &[Condition::caption("a red blob | drifting")], Branches::Full).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn omitted_layout_equals_explicit_fallback() {
    let mut m = Model::new(tiny_config(), 10).unwrap();
    randomize_injection(&mut m, 3);
    let z = randn(&[1, 2, 3, 3, 4], 6);
    let cap = "green dotted blob | rising";
    let omitted = Condition::caption(cap);
    let explicit = Condition {
        global_caption: cap.into(),
        layout: Some(LayoutCondition {
            boxes: vec![BoundingBox::FULL; 2],
            subject_captions: vec![cap.into(); 2],
            reference: None,
            all_valid_masks: false,
        }),
    };
    let a = m.predict(&z, &[400.0], &[omitted], Branches::Full).unwrap();
    let b = m.predict(&z, &[400.0], &[explicit], Branches::Full).unwrap();
    assert_eq!(a, b);
    let c = m.predict(&z, &[400.0], &[layout_cond(4, 2, 3, 3)], Branches::Full).unwrap();
    assert_ne!(a, c);
}

#[test]
fn identical_frames_without_positions_give_identical_outputs() {
    let mut m = Model::new(tiny_config(), 11).unwrap();
    randomize_injection(&mut m, 4);
    m.params.set("subject.frame_pos", Tensor::zeros(&[2, 8])).unwrap();
    let frame = randn(&[1, 1, 3, 3, 4], 7);
    let z = Tensor::stack(&[frame.index_axis0(0), frame.index_axis0(0)])
        .unwrap()
        .reshape(&[1, 2, 3, 3, 4])
        .unwrap();
    let b = bx(0.1, 0.1, 0.7, 0.8);
    let cond = Condition {
        global_caption: "blob".into(),
        layout: Some(LayoutCondition {
            boxes: vec![b; 2],
            subject_captions: vec!["blob left".into(); 2],
            reference: None,
            all_valid_masks: false,
        }),
    };
    let out = m.predict(&z, &[20.0], &[cond], Branches::Full).unwrap();
    let o = out.index_axis0(0);
    assert_eq!(o.index_axis0(0), o.index_axis0(1));
}

#[test]
fn subject_branch_is_smaller_than_global() {
    let m = Model::new(ModelConfig::default(), 0).unwrap();
    assert!(m.param_count("subject.") <= m.param_count("global."));
}

#[test]
fn copy_init_copies_block_2m() {
    let mut m = Model::new(tiny_config(), 12).unwrap();
    m.copy_init_subject().unwrap();
    let p = &m.params;
    assert_eq!(p.value("subject.blocks.0.attn.q.w").unwrap(), p.value("global.blocks.1.attn.q.w").unwrap());
    assert_eq!(p.value("subject.blocks.0.attn3d.v.w").unwrap(), p.value("global.blocks.1.attn.v.w").unwrap());
    assert_eq!(p.value("subject.blocks.0.cross.o.b").unwrap(), p.value("global.blocks.1.cross.o.b").unwrap());
    assert_eq!(p.value("subject.text.proj.w").unwrap(), p.value("global.text.proj.w").unwrap());
    assert!(p.value("subject.inject.0.w").unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn end_to_end_gradient_check() {
    let mut m = Model::new(tiny_config(), 13).unwrap();
    randomize_injection(&mut m, 5);
    let z = randn(&[1, 2, 3, 3, 4], 8);
    let target = randn(&[1, 2, 3, 3, 4], 9);
    let conds = vec![layout_cond(6, 2, 3, 3)];
    let cfg = m.cfg.clone();
    let r = finite_diff_check_sampled(
        |tape, s| {
            let mm = Model { cfg: cfg.clone(), params: s.clone() };
            let y = mm.forward(tape, &z, &[250.0], &conds, Branches::Full)?;
            tape.mse(y, &target)
        },
        &m.params,
        1e-5,
        1e-4,
        Some(6),
    )
    .unwrap();
    assert!(r.passed, "{:?}", r.worst());
}

#[test]
fn caption_substitution_rates() {
    let rng = RngStream::new(77, "train");
    let caps = vec!["a".to_string(), "b".to_string()];
    let (same, hit) = substitute_captions(&caps, "g", 0.0, &rng, 1);
    assert_eq!(same, caps);
    assert!(!hit);
    let (all, _) = substitute_captions(&caps, "g", 1.0, &rng, 1);
    assert!(all.iter().all(|c| c == "g"));
    let n = 10_000u64;
    let hits = (0..n).filter(|&id| substitute_captions(&caps, "g", 0.25, &rng, id).1).count();
    let frac = hits as f64 / n as f64;
    assert!((0.235..=0.265).contains(&frac), "{frac}");
}

#[test]
fn caption_and_layout_events_are_independent() {
    let rng = RngStream::new(5, "train");
    let n = 10_000u64;
    let mut both = 0;
    for id in 0..n {
        let a = sample_decision(&rng, "caption-substitution", id, 0.25);
        let b = sample_decision(&rng, "layout-dropout", id, 0.25);
        both += usize::from(a && b);
    }
    let frac = both as f64 / n as f64;
    // 1/16 with a binomial 4-sigma band
    assert!((frac - 0.0625).abs() < 4.0 * (0.0625f64 * 0.9375 / n as f64).sqrt(), "{frac}");
}
