use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn store_with(entries: &[(&str, Tensor)]) -> ParameterStore {
    let mut s = ParameterStore::new(11);
    for (n, t) in entries {
        s.insert(*n, t.clone()).unwrap();
    }
    s
}

#[test]
fn backward_of_sum_is_ones() {
    let s = store_with(&[("p", Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap())]);
    let mut t = Tape::new();
    let p = t.param(&s, "p").unwrap();
    let l = t.sum(p);
    let g = t.backward(l, &s).unwrap();
    assert_eq!(g["p"], Tensor::ones(&[2, 3]));
}

#[test]
fn backward_of_sum_of_squares() {
    let s = store_with(&[("p", Tensor::new(&[2], vec![1., 2.]).unwrap())]);
    let mut t = Tape::new();
    let p = t.param(&s, "p").unwrap();
    let sq = t.mul(p, p).unwrap();
    let l = t.sum(sq);
    let g = t.backward(l, &s).unwrap();
    assert_eq!(g["p"].data(), &[2., 4.]);
}

#[test]
fn unreachable_parameters_get_zero_gradients() {
    let s = store_with(&[
        ("a", Tensor::ones(&[2])),
        ("b", Tensor::ones(&[3])),
    ]);
    let mut t = Tape::new();
    let a = t.param(&s, "a").unwrap();
    let l = t.sum(a);
    let g = t.backward(l, &s).unwrap();
    assert_eq!(g["b"], Tensor::zeros(&[3]));
}

#[test]
fn backward_without_recording_is_no_tape() {
    let s = store_with(&[("p", Tensor::ones(&[2]))]);
    let mut t = Tape::inference();
    let p = t.param(&s, "p").unwrap();
    let l = t.sum(p);
    assert!(matches!(t.backward(l, &s), Err(Error::NoTape)));
}

#[test]
fn frozen_parameters_receive_zero() {
    let mut s = store_with(&[("p", Tensor::ones(&[2])), ("q", Tensor::ones(&[2]))]);
    s.set_frozen(|n| n == "q");
    let mut t = Tape::new();
    let p = t.param(&s, "p").unwrap();
    let q = t.param(&s, "q").unwrap();
    let pq = t.mul(p, q).unwrap();
    let l = t.sum(pq);
    let g = t.backward(l, &s).unwrap();
    assert_eq!(g["p"], Tensor::ones(&[2]));
    assert_eq!(g["q"], Tensor::zeros(&[2]));
}

#[test]
fn kernels_are_bit_reproducible() {
    let mut rng = RngStream::new(5, "repro");
    let a = Tensor::randn(&[6, 5], 1.0, &mut rng);
    let b = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let bias = Tensor::zeros(&[1, 4]);
    for _ in 0..3 {
        assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
        let m = matmul(&a, &b).unwrap();
        assert_eq!(
            softmax_with_bias(&m, &bias).unwrap(),
            softmax_with_bias(&m, &bias).unwrap()
        );
        assert_eq!(layer_norm(&a, 1e-5).unwrap(), layer_norm(&a, 1e-5).unwrap());
    }
}

/// Scalar readout that mixes every output element with a fixed random weight, so
/// that gradient errors in any element show up.
fn readout(t: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = t.shape(y).to_vec();
    let mut rng = RngStream::new(seed, "readout");
    let w = t.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let yw = t.mul(y, w).unwrap();
    t.sum(yw)
}

fn check(store: &ParameterStore, f: impl Fn(&mut Tape, &ParameterStore) -> crate::error::Result<Var>) {
    let r = finite_diff_check(f, store, 1e-6, 1e-4).unwrap();
    assert!(r.passed, "{:?}", r.max_rel_err);
}

fn rand_store(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParameterStore {
    let mut rng = RngStream::new(seed, "params");
    let mut s = ParameterStore::new(seed);
    for (n, sh) in shapes {
        s.insert(*n, Tensor::randn(sh, 1.0, &mut rng)).unwrap();
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matmul_gradients(m in 1usize..4, k in 1usize..4, n in 1usize..4, batch in 1usize..3, seed in 0u64..1000) {
        let s = rand_store(&[("a", vec![batch, m, k]), ("b", vec![k, n]), ("c", vec![batch, k, n])], seed);
        check(&s, |t, s| {
            let a = t.param(s, "a")?;
            let b = t.param(s, "b")?;
            let c = t.param(s, "c")?;
            let y1 = t.matmul(a, b)?;
            let y2 = t.matmul(a, c)?;
            let y = t.add(y1, y2)?;
            Ok(readout(t, y, seed))
        });
    }

    #[test]
    fn elementwise_and_broadcast_gradients(r in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
        let s = rand_store(&[("x", vec![2, r, c]), ("row", vec![1, 1, c]), ("col", vec![2, r, 1])], seed);
        check(&s, |t, s| {
            let x = t.param(s, "x")?;
            let row = t.param(s, "row")?;
            let col = t.param(s, "col")?;
            let a = t.add(x, row)?;
            let m = t.mul(a, col)?;
            let g = t.gelu(m);
            let si = t.silu(g);
            let d = t.sub(si, x)?;
            let sc = t.scale(d, 0.7);
            Ok(readout(t, sc, seed))
        });
    }

    #[test]
    fn layer_norm_and_softmax_gradients(r in 1usize..4, d in 2usize..6, seed in 0u64..1000) {
        let s = rand_store(&[("x", vec![r, d])], seed);
        let mut brng = RngStream::new(seed, "bias");
        let bias = Tensor::from_fn(&[1, d], |j| if j == 0 { 0.0 } else if brng.bernoulli(0.3) { -NEG_LARGE } else { brng.normal() });
        check(&s, |t, s| {
            let x = t.param(s, "x")?;
            let n = t.layer_norm(x, 1e-5)?;
            let p = t.softmax_with_bias(n, &bias)?;
            Ok(readout(t, p, seed))
        });
    }

    #[test]
    fn shape_op_gradients(a in 1usize..4, b in 1usize..4, seed in 0u64..1000) {
        let s = rand_store(&[("x", vec![a, b, 3])], seed);
        check(&s, |t, s| {
            let x = t.param(s, "x")?;
            let p = t.permute(x, &[2, 0, 1])?;
            let r = t.reshape(p, &[3, a * b])?;
            let n = t.narrow(r, 0, 1, 2)?;
            let m = t.mean(n);
            let nn = t.narrow(x, 2, 0, 2)?;
            let ro = readout(t, nn, seed);
            let target = Tensor::zeros(&[a, b, 3]);
            let l = t.mse(x, &target)?;
            let s1 = t.add(m, ro)?;
            t.add(s1, l)
        });
    }

    #[test]
    fn attention_gradients(tq in 1usize..5, tk in 1usize..5, heads in 1usize..3, group in 1usize..3, seed in 0u64..1000) {
        let d = 2 * heads;
        let s = rand_store(&[("q", vec![2 * group, tq, d]), ("k", vec![2, tk, d]), ("v", vec![2, tk, d])], seed);
        let mut brng = RngStream::new(seed, "kbias");
        let keys = Tensor::from_fn(&[2, tk], |i| if i % tk == 0 || brng.bernoulli(0.6) { 0.0 } else { -NEG_LARGE });
        for bias in [AttnBias::None, AttnBias::Keys(keys.clone())] {
            check(&s, |t, s| {
                let q = t.param(s, "q")?;
                let k = t.param(s, "k")?;
                let v = t.param(s, "v")?;
                let o = t.attention(q, k, v, &bias, heads, group)?;
                Ok(readout(t, o, seed))
            });
        }
    }
}
