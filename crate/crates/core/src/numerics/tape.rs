//! Reverse-mode differentiation by operation recording.
//!
//! A [`Tape`] owns every value produced during one forward pass. Ops append nodes
//! and return [`Var`] handles; [`Tape::backward`] consumes the tape, walks the
//! nodes in reverse and returns gradients keyed by parameter name.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

use super::kernels::{self, Broadcast, FORBIDDEN_THRESHOLD};
use super::params::ParameterStore;
use super::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gradients by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Additive attention bias.
#[derive(Clone, Debug)]
pub enum AttnBias {
    None,
    /// Full bias of shape `(1 | q_batch, queries, keys)`.
    Dense(Tensor),
    /// Key-side bias of shape `(kv_batch, keys)`, shared by every query.
    /// Keys at or below `-NEG_LARGE / 2` are skipped outright; their softmax weight
    /// underflows to exactly zero in the dense formulation, so the result is identical.
    Keys(Tensor),
}

struct AttnSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    group: usize,
    tq: usize,
    tk: usize,
    /// Permitted key indices per kv batch.
    keys: Vec<Vec<usize>>,
    /// Softmax weights, laid out `[q_batch][head][query][permitted key]`.
    probs: Vec<f64>,
    prob_offsets: Vec<usize>,
}

enum Op {
    Leaf,
    Add { a: Var, b: Var, bc: Option<Broadcast> },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var, bc: Option<Broadcast> },
    Scale { a: Var, c: f64 },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared: bool },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax { x: Var },
    Attention(Box<AttnSaved>),
    Gelu { x: Var },
    Silu { x: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, dim: usize, start: usize },
    Sum { x: Var },
    Mean { x: Var },
    Mse { a: Var, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    params: HashMap<String, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape; `backward` is available.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            params: HashMap::new(),
        }
    }

    /// A non-recording tape for inference; saves no backward state.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced");
        let needs_grad = needs_grad && self.recording;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Parameter `name` from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let trainable = p.requires_grad;
        let v = self.push(p.value.clone(), Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `a + b`, where `b` may be broadcast into `a`'s shape (same rank, size-1 axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bc = if sa == sb { None } else { Some(Broadcast::new(&sa, &sb, "add")?) };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<f64> = match &bc {
            None => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            Some(bc) => av
                .iter()
                .zip(&bc.small_index)
                .map(|(x, &j)| x + bv[j])
                .collect(),
        };
        let ng = self.ng(a) || self.ng(b);
        let out = Tensor::new(&sa, data)?;
        Ok(self.push(out, Op::Add { a, b, bc }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub { a, b }, ng))
    }

    /// Elementwise product, with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bc = if sa == sb { None } else { Some(Broadcast::new(&sa, &sb, "mul")?) };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<f64> = match &bc {
            None => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            Some(bc) => av
                .iter()
                .zip(&bc.small_index)
                .map(|(x, &j)| x * bv[j])
                .collect(),
        };
        let ng = self.ng(a) || self.ng(b);
        let out = Tensor::new(&sa, data)?;
        Ok(self.push(out, Op::Mul { a, b, bc }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, c }, ng)
    }

    /// `a[..., m, k] x b[k, n]` (shared right operand) or `a[..., m, k] x b[..., k, n]`
    /// with identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let shared = sb.len() == 2;
        if !shared && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (batch, m) = if shared {
            (1, sa[..sa.len() - 1].iter().product::<usize>())
        } else {
            (sa[..sa.len() - 2].iter().product(), sa[sa.len() - 2])
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let boff = if shared { 0 } else { bi * k * n };
                kernels::matmul_into(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::MatMul { a, b, batch, m, k, n, shared }, ng))
    }

    /// `x w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            None => Ok(y),
            Some(b) => {
                let rank = self.shape(y).len();
                let n = self.shape(b).iter().product::<usize>();
                let mut bs = vec![1; rank];
                bs[rank - 1] = n;
                let b = self.reshape(b, &bs)?;
                self.add(y, b)
            }
        }
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || eps <= 0.0 {
            return Err(Error::BadShape {
                op: "layer_norm",
                detail: format!("d = {d}, eps = {eps}"),
            });
        }
        let mut data = self.value(x).data().to_vec();
        let rstd: Vec<f64> = data
            .chunks_mut(d)
            .map(|row| kernels::layer_norm_row(row, eps))
            .collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::LayerNorm { x, rstd }, ng))
    }

    /// Softmax of `x + bias` over the last axis; `bias` is a constant broadcast like [`Tape::add`].
    pub fn softmax_with_bias(&mut self, x: Var, bias: &Tensor) -> Result<Var> {
        let out = kernels::softmax_with_bias(self.value(x), bias)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax { x }, ng))
    }

    /// Multi-head scaled dot-product attention core: per head,
    /// `softmax(q k^T / sqrt(d_k) + bias) v`, heads concatenated along the feature axis.
    ///
    /// `q` is `(q_batch, tq, d)`, `k` and `v` are `(kv_batch, tk, d)` with
    /// `q_batch = kv_batch * group`; query batch `i` reads kv batch `i / group`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: &AttnBias,
        heads: usize,
        group: usize,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        let sv = self.shape(v).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[2] != sk[2] {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let (bq, tq, d) = (sq[0], sq[1], sq[2]);
        let (bk, tk) = (sk[0], sk[1]);
        if heads == 0 || d % heads != 0 || group == 0 || bq != bk * group {
            return Err(Error::BadShape {
                op: "attention",
                detail: format!("q {sq:?}, kv {sk:?}, heads {heads}, group {group}"),
            });
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let keys: Vec<Vec<usize>> = match bias {
            AttnBias::Keys(kb) => {
                if kb.shape() != [bk, tk] {
                    return Err(Error::shape("attention key bias", kb.shape(), &[bk, tk]));
                }
                (0..bk)
                    .map(|b| {
                        (0..tk)
                            .filter(|&j| kb.data()[b * tk + j] > FORBIDDEN_THRESHOLD)
                            .collect()
                    })
                    .collect()
            }
            AttnBias::Dense(db) => {
                let s = db.shape();
                if s.len() != 3 || (s[0] != 1 && s[0] != bq) || s[1] != tq || s[2] != tk {
                    return Err(Error::shape("attention dense bias", s, &[bq, tq, tk]));
                }
                vec![(0..tk).collect(); bk]
            }
            AttnBias::None => vec![(0..tk).collect(); bk],
        };

        let mut prob_offsets = Vec::with_capacity(bq);
        let mut total = 0;
        for b in 0..bq {
            prob_offsets.push(total);
            total += heads * tq * keys[b / group].len();
        }
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; bq * tq * d];
        {
            let qv = self.value(q).data();
            let kv = self.value(k).data();
            let vv = self.value(v).data();
            for b in 0..bq {
                let kb = b / group;
                let klist = &keys[kb];
                let nk = klist.len();
                for h in 0..heads {
                    for i in 0..tq {
                        let qrow = &qv[(b * tq + i) * d + h * dk..][..dk];
                        let prow = &mut probs[prob_offsets[b] + (h * tq + i) * nk..][..nk];
                        for (p, &j) in prow.iter_mut().zip(klist) {
                            let krow = &kv[(kb * tk + j) * d + h * dk..][..dk];
                            *p = kernels::dot(qrow, krow) * scale;
                        }
                        let row_bias: Box<dyn Iterator<Item = f64>> = match bias {
                            AttnBias::Keys(kbias) => {
                                let kd = &kbias.data()[kb * tk..(kb + 1) * tk];
                                Box::new(klist.iter().map(move |&j| kd[j]))
                            }
                            AttnBias::Dense(db) => {
                                let bb = if db.shape()[0] == 1 { 0 } else { b };
                                let row = &db.data()[(bb * tq + i) * tk..][..tk];
                                Box::new(row.iter().copied())
                            }
                            AttnBias::None => Box::new(std::iter::repeat(0.0)),
                        };
                        if nk == 0 {
                            return Err(Error::AllMaskedRow { row: b * tq + i });
                        }
                        kernels::softmax_row(prow, row_bias, b * tq + i)?;
                        let orow = &mut out[(b * tq + i) * d + h * dk..][..dk];
                        for (&p, &j) in prow.iter().zip(klist) {
                            if p == 0.0 {
                                continue;
                            }
                            let vrow = &vv[(kb * tk + j) * d + h * dk..][..dk];
                            for (o, &x) in orow.iter_mut().zip(vrow) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let saved = AttnSaved {
            q,
            k,
            v,
            heads,
            group,
            tq,
            tk,
            keys,
            probs: if ng && self.recording { probs } else { Vec::new() },
            prob_offsets,
        };
        let out = Tensor::new(&[bq, tq, d], out)?;
        Ok(self.push(out, Op::Attention(Box::new(saved)), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        let ng = self.ng(x);
        self.push(out, Op::Gelu { x }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::silu);
        let ng = self.ng(x);
        self.push(out, Op::Silu { x }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape { x }, ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// Slice `[start, start + len)` along `dim`.
    pub fn narrow(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if dim >= shape.len() || start + len > shape[dim] {
            return Err(Error::BadShape {
                op: "narrow",
                detail: format!("{shape:?} dim {dim} [{start}, {})", start + len),
            });
        }
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[dim] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[dim] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Narrow { x, dim, start }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, ng)
    }

    /// Mean squared difference to a constant target.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != target.shape() {
            return Err(Error::shape("mse", av.shape(), target.shape()));
        }
        let n = av.numel() as f64;
        let s = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Mse {
                a,
                target: target.clone(),
            },
            ng,
        ))
    }

    /// Gradients of scalar `loss` for every parameter in `store`; parameters the loss
    /// does not reach (or that are frozen) get zeros. Consumes the tape.
    pub fn backward(self, loss: Var, store: &ParameterStore) -> Result<GradMap> {
        if !self.recording {
            return Err(Error::NoTape);
        }
        let lshape = self.shape(loss).to_vec();
        if lshape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(lshape));
        }
        let Tape { nodes, params, .. } = self;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let mut out = GradMap::new();
        for (name, p) in store.iter() {
            let g = params
                .get(name)
                .and_then(|v| grads[v.0].take())
                .map(|g| Tensor::new(p.value.shape(), g))
                .transpose()?
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b, bc } => {
            accumulate(grads, nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            accumulate(grads, nodes, *b, |gb| match bc {
                None => gb.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                Some(bc) => {
                    for (&j, &y) in bc.small_index.iter().zip(g) {
                        gb[j] += y;
                    }
                }
            });
        }
        Op::Sub { a, b } => {
            accumulate(grads, nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            accumulate(grads, nodes, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul { a, b, bc } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            accumulate(grads, nodes, *a, |ga| match bc {
                None => ga
                    .iter_mut()
                    .zip(g.iter().zip(bv))
                    .for_each(|(x, (y, w))| *x += y * w),
                Some(bc) => ga
                    .iter_mut()
                    .zip(g.iter().zip(&bc.small_index))
                    .for_each(|(x, (y, &j))| *x += y * bv[j]),
            });
            accumulate(grads, nodes, *b, |gb| match bc {
                None => gb
                    .iter_mut()
                    .zip(g.iter().zip(av))
                    .for_each(|(x, (y, w))| *x += y * w),
                Some(bc) => {
                    for ((&j, &y), &w) in bc.small_index.iter().zip(g).zip(av) {
                        gb[j] += y * w;
                    }
                }
            });
        }
        Op::Scale { a, c } => {
            accumulate(grads, nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
        }
        Op::MatMul { a, b, batch, m, k, n, shared } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            accumulate(grads, nodes, *a, |ga| {
                for bi in 0..batch {
                    let boff = if *shared { 0 } else { bi * k * n };
                    kernels::matmul_nt_into(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bv[boff..boff + k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for bi in 0..batch {
                    let boff = if *shared { 0 } else { bi * k * n };
                    kernels::matmul_tn_into(
                        &av[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[boff..boff + k * n],
                        m,
                        k,
                        n,
                    );
                }
            });
        }
        Op::LayerNorm { x, rstd } => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap();
            accumulate(grads, nodes, *x, |gx| {
                for (r, &rs) in rstd.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] += rs * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
            });
        }
        Op::Softmax { x } => {
            let y = node.value.data();
            let n = *node.value.shape().last().unwrap();
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..y.len() / n {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += yr[j] * (gr[j] - s);
                    }
                }
            });
        }
        Op::Attention(saved) => attention_backward(nodes, saved, g, grads),
        Op::Gelu { x } => {
            let xv = nodes[x.0].value.data();
            accumulate(grads, nodes, *x, |gx| {
                for ((o, &y), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *o += y * kernels::gelu_grad(xi);
                }
            });
        }
        Op::Silu { x } => {
            let xv = nodes[x.0].value.data();
            accumulate(grads, nodes, *x, |gx| {
                for ((o, &y), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *o += y * kernels::silu_grad(xi);
                }
            });
        }
        Op::Reshape { x } => {
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let gt = Tensor::new(node.value.shape(), g.to_vec())
                .and_then(|t| t.permute(&inv))
                .expect("permute backward");
            accumulate(grads, nodes, *x, |gx| {
                gx.iter_mut().zip(gt.data()).for_each(|(a, b)| *a += b)
            });
        }
        Op::Narrow { x, dim, start } => {
            let in_shape = nodes[x.0].value.shape();
            let len = node.value.shape()[*dim];
            let outer: usize = in_shape[..*dim].iter().product();
            let inner: usize = in_shape[*dim + 1..].iter().product();
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    let dst = (o * in_shape[*dim] + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        gx[dst + i] += g[src + i];
                    }
                }
            });
        }
        Op::Sum { x } => {
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0]));
        }
        Op::Mean { x } => {
            let n = nodes[x.0].value.numel() as f64;
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
        }
        Op::Mse { a, target } => {
            let av = nodes[a.0].value.data();
            let n = av.len() as f64;
            accumulate(grads, nodes, *a, |ga| {
                for ((o, &x), &t) in ga.iter_mut().zip(av).zip(target.data()) {
                    *o += g[0] * 2.0 * (x - t) / n;
                }
            });
        }
    }
}

fn attention_backward(nodes: &[Node], s: &AttnSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let qv = nodes[s.q.0].value.data();
    let kv = nodes[s.k.0].value.data();
    let vv = nodes[s.v.0].value.data();
    let d = nodes[s.q.0].value.shape()[2];
    let bq = nodes[s.q.0].value.shape()[0];
    let (heads, tq, tk, group) = (s.heads, s.tq, s.tk, s.group);
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut gq = vec![0.0; qv.len()];
    let mut gk = vec![0.0; kv.len()];
    let mut gv = vec![0.0; vv.len()];
    let mut dp = Vec::new();
    for b in 0..bq {
        let kb = b / group;
        let klist = &s.keys[kb];
        let nk = klist.len();
        dp.resize(nk, 0.0);
        for h in 0..heads {
            for i in 0..tq {
                let prow = &s.probs[s.prob_offsets[b] + (h * tq + i) * nk..][..nk];
                let grow = &g[(b * tq + i) * d + h * dk..][..dk];
                let mut sum = 0.0;
                for ((dpj, &p), &j) in dp.iter_mut().zip(prow).zip(klist) {
                    let voff = (kb * tk + j) * d + h * dk;
                    *dpj = kernels::dot(grow, &vv[voff..voff + dk]);
                    sum += p * *dpj;
                    if p != 0.0 {
                        for (gvx, &gy) in gv[voff..voff + dk].iter_mut().zip(grow) {
                            *gvx += p * gy;
                        }
                    }
                }
                let qoff = (b * tq + i) * d + h * dk;
                for ((&dpj, &p), &j) in dp.iter().zip(prow).zip(klist) {
                    let ds = p * (dpj - sum) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let koff = (kb * tk + j) * d + h * dk;
                    for c in 0..dk {
                        gq[qoff + c] += ds * kv[koff + c];
                        gk[koff + c] += ds * qv[qoff + c];
                    }
                }
            }
        }
    }
    let add = |dst: &mut [f64], src: &[f64]| dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
    accumulate(grads, nodes, s.q, |x| add(x, &gq));
    accumulate(grads, nodes, s.k, |x| add(x, &gk));
    accumulate(grads, nodes, s.v, |x| add(x, &gv));
}
