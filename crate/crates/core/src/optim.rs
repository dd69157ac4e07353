//! First-order optimizers with per-parameter moment accumulators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimKind {
    Adam { beta1: f64, beta2: f64 },
    RmsProp { alpha: f64 },
}

#[derive(Clone, Debug)]
pub struct OptimState {
    kind: OptimKind,
    lr: f64,
    eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl OptimState {
    /// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn adam(lr: f64) -> Self {
        Self::with_kind(OptimKind::Adam { beta1: 0.9, beta2: 0.999 }, lr)
    }

    /// RMSProp with α = 0.99, ε = 1e-8, no momentum.
    pub fn rmsprop(lr: f64) -> Self {
        Self::with_kind(OptimKind::RmsProp { alpha: 0.99 }, lr)
    }

    pub fn with_kind(kind: OptimKind, lr: f64) -> Self {
        OptimState {
            kind,
            lr,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            shapes: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn check(&mut self, params: &[Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("optimizer", format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        if self.shapes.is_empty() {
            self.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.shapes.len() != params.len()
            || self.shapes.iter().zip(params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::shape("optimizer", "parameter set changed between steps"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("optimizer gradient".into()));
        }
        Ok(())
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        match self.kind {
            OptimKind::Adam { .. } => self.adam_step(params, grads),
            OptimKind::RmsProp { .. } => self.rmsprop_step(params, grads),
        }
    }

    pub fn adam_step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let OptimKind::Adam { beta1, beta2 } = self.kind else {
            return Err(Error::invalid("adam_step on a non-Adam state"));
        };
        self.check(params, grads)?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let data: Vec<f64> = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (&w, &gi))| {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    w - self.lr * mhat / (vhat.sqrt() + self.eps)
                })
                .collect();
            *p = Tensor::from_raw(p.shape().to_vec(), data);
        }
        Ok(())
    }

    pub fn rmsprop_step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let OptimKind::RmsProp { alpha } = self.kind else {
            return Err(Error::invalid("rmsprop_step on a non-RMSProp state"));
        };
        self.check(params, grads)?;
        self.step += 1;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let v = &mut self.second[k];
            let data: Vec<f64> = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (&w, &gi))| {
                    v[i] = alpha * v[i] + (1.0 - alpha) * gi * gi;
                    w - self.lr * gi / (v[i].sqrt() + self.eps)
                })
                .collect();
            *p = Tensor::from_raw(p.shape().to_vec(), data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_adam(x0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
            out.push(x);
        }
        out
    }

    fn scalar_rmsprop(x0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (alpha, eps) = (0.99, 1e-8);
        let (mut x, mut v) = (x0, 0.0f64);
        let mut out = Vec::new();
        for _ in 0..steps {
            let g = 2.0 * x;
            v = alpha * v + (1.0 - alpha) * g * g;
            x -= lr * g / (v.sqrt() + eps);
            out.push(x);
        }
        out
    }

    fn run(mut state: OptimState, steps: usize) -> Vec<f64> {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut out = Vec::new();
        for _ in 0..steps {
            let g = vec![Tensor::scalar(2.0 * p[0].item().unwrap())];
            state.step(&mut p, &g).unwrap();
            out.push(p[0].item().unwrap());
        }
        out
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        let got = run(OptimState::adam(0.1), 3);
        for (a, b) in got.iter().zip(scalar_adam(1.0, 0.1, 3)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsprop_matches_scalar_oracle() {
        let got = run(OptimState::rmsprop(0.1), 3);
        for (a, b) in got.iter().zip(scalar_rmsprop(1.0, 0.1, 3)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_is_exact_noop() {
        for mut state in [OptimState::adam(1.0), OptimState::rmsprop(1.0)] {
            let orig = Tensor::from_fn([3, 2], |i| i as f64 - 2.5);
            let mut p = vec![orig.clone()];
            for _ in 0..5 {
                state.step(&mut p, &[Tensor::zeros([3, 2])]).unwrap();
            }
            assert_eq!(p[0], orig);
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut state = OptimState::adam(0.01);
        let mut p = vec![Tensor::zeros([4])];
        let g = Tensor::new([4], vec![3.0, -0.5, 100.0, -7.0]).unwrap();
        state.step(&mut p, &[g.clone()]).unwrap();
        for (w, gi) in p[0].data().iter().zip(g.data()) {
            assert!((w + 0.01 * gi.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn rmsprop_constant_gradient_saturates_to_lr() {
        let mut state = OptimState::rmsprop(0.01);
        let mut p = vec![Tensor::zeros([1])];
        let g = Tensor::full([1], 4.0);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..3000 {
            state.step(&mut p, &[g.clone()]).unwrap();
            let now = p[0].data()[0];
            last_step = prev - now;
            prev = now;
        }
        assert!((last_step - 0.01).abs() < 1e-6, "{last_step}");
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut state = OptimState::adam(0.1);
        let mut p = vec![Tensor::zeros([2])];
        assert!(state.step(&mut p, &[Tensor::zeros([3])]).is_err());
    }

    #[test]
    fn step_counter_increments() {
        let mut state = OptimState::rmsprop(0.1);
        let mut p = vec![Tensor::zeros([2])];
        state.step(&mut p, &[Tensor::zeros([2])]).unwrap();
        state.step(&mut p, &[Tensor::zeros([2])]).unwrap();
        assert_eq!(state.steps(), 2);
    }
}
