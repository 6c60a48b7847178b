use std::borrow::{Borrow, BorrowMut};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<P: Borrow<Tensor>>(params: &[P]) -> Self {
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| Tensor::zeros(p.borrow().shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.borrow().shape())).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Forget the moments of selected rows of parameter `param`.
    pub fn reset_rows(&mut self, param: usize, rows: &[usize]) {
        for t in [&mut self.m[param], &mut self.v[param]] {
            for &r in rows {
                t.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<P: BorrowMut<Tensor>>(
    params: &mut [P],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let p = p.borrow();
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::dim(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pv, gv) = (p.borrow_mut().values_mut(), g.values());
        let (mv, vv) = (m.values_mut(), v.values_mut());
        for j in 0..pv.len() {
            mv[j] = b1 * mv[j] + (1.0 - b1) * gv[j];
            vv[j] = b2 * vv[j] + (1.0 - b2) * gv[j] * gv[j];
            let mhat = mv[j] / c1;
            let vhat = vv[j] / c2;
            pv[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut params = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::zeros(&[2])], &mut state, 0.1).unwrap();
        assert_eq!(params[0].values(), &[1.0, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = vec![Tensor::from_vec(vec![0.0, 0.0, 0.0])];
        let mut state = AdamState::new(&params);
        let g = Tensor::from_vec(vec![3.0, -0.5, 1e-3]);
        adam_step(&mut params, &[g.clone()], &mut state, 0.01).unwrap();
        // mhat = g, vhat = g², so the update is lr·g/(|g| + eps).
        for (p, gv) in params[0].values().iter().zip(g.values()) {
            let expect = -0.01 * gv / (gv.abs() + 1e-8);
            assert!((p - expect).abs() < 1e-15);
            assert!(p.signum() == -gv.signum());
            assert!((p.abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn descends_a_scalar_quadratic() {
        let mut params = vec![Tensor::from_vec(vec![1.0])];
        let mut state = AdamState::new(&params);
        let mut last = 1.0f64;
        for _ in 0..10 {
            let g = Tensor::from_vec(vec![2.0 * params[0].values()[0]]);
            adam_step(&mut params, &[g], &mut state, 0.05).unwrap();
            let x = params[0].values()[0];
            assert!(x.abs() < last.abs());
            last = x;
        }
        assert!(last.abs() < 1.0);
        assert_eq!(state.step, 10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(&[3])];
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &[Tensor::zeros(&[2])], &mut state, 0.1);
        assert!(matches!(err, Err(Error::Dimension(_))));
        assert_eq!(state.step, 0);
    }
}
