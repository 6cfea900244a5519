use crate::error::{Error, Result};

use super::params::ParameterStore;
use super::tape::GradMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// Parameters with `requires_grad == false` are left untouched, moments included.
/// `step_index` counts from 1.
pub fn adamw_step(
    store: &mut ParameterStore,
    grads: &GradMap,
    opt: &AdamW,
    step_index: u64,
) -> Result<()> {
    assert!(step_index >= 1, "step_index counts from 1");
    for name in store.names() {
        if !grads.contains_key(name) {
            return Err(Error::MissingGrad(name.clone()));
        }
    }
    let (b1, b2) = opt.betas;
    let c1 = 1.0 - b1.powi(step_index as i32);
    let c2 = 1.0 - b2.powi(step_index as i32);
    for (name, p) in store.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        let g = grads[name].data();
        if g.len() != p.value.numel() {
            return Err(Error::shape("adamw_step", p.value.shape(), grads[name].shape()));
        }
        let n = g.len();
        let (m, v) = p
            .moments
            .get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let decay = 1.0 - opt.lr * opt.weight_decay;
        for (((x, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x = *x * decay - opt.lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn single(p: f64) -> ParameterStore {
        let mut s = ParameterStore::new(0);
        s.insert("p", Tensor::new(&[1], vec![p]).unwrap()).unwrap();
        s
    }

    fn grad(g: f64) -> GradMap {
        let mut m = GradMap::new();
        m.insert("p".into(), Tensor::new(&[1], vec![g]).unwrap());
        m
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut s = single(0.7);
        adamw_step(&mut s, &grad(3.0), &AdamW::new(0.0, 0.03), 1).unwrap();
        assert_eq!(s.value("p").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = single(0.0);
        adamw_step(&mut s, &grad(1.0), &AdamW::new(0.1, 0.0), 1).unwrap();
        assert!((s.value("p").unwrap().data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn three_steps_on_quadratic_match_scalar_recurrence() {
        // f(p) = (p - 2)^2, grad = 2 (p - 2)
        let opt = AdamW::new(0.05, 0.01);
        let mut s = single(0.5);
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=3u64 {
            let g = 2.0 * (s.value("p").unwrap().data()[0] - 2.0);
            adamw_step(&mut s, &grad(g), &opt, t).unwrap();

            let g = 2.0 * (p - 2.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            p = p * (1.0 - 0.05 * 0.01) - 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((s.value("p").unwrap().data()[0] - p).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = single(0.0);
        assert!(matches!(
            adamw_step(&mut s, &GradMap::new(), &AdamW::new(0.1, 0.0), 1),
            Err(Error::MissingGrad(_))
        ));
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut s = single(1.0);
        s.set_frozen(|_| true);
        adamw_step(&mut s, &grad(1.0), &AdamW::new(0.1, 0.5), 1).unwrap();
        assert_eq!(s.value("p").unwrap().data(), &[1.0]);
        assert!(s.get("p").unwrap().moments.is_none());
    }
}
