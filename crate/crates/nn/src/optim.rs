//! Adam optimizer.

use crate::{ParamSet, Scalar, Tensor};

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamSet<F>, lr: f64) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.value(crate::ParamId(i)).raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, t: 0 }
    }

    /// Apply one update. `grads` is aligned with the parameter set; `None`
    /// entries (parameters absent from the graph) are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Option<Tensor<F>>]) {
        assert_eq!(grads.len(), params.len(), "grads misaligned with params");
        self.t += 1;
        let b1 = F::c(self.beta1);
        let b2 = F::c(self.beta2);
        let one = F::one();
        let bc1 = F::c(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::c(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::c(self.lr);
        let eps = F::c(self.eps);
        for (i, gopt) in grads.iter().enumerate() {
            let Some(g) = gopt else { continue };
            let pid = crate::ParamId(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.value_mut(pid);
            let (ms, vs, ps, gs) = (
                m.as_slice_mut().unwrap(),
                v.as_slice_mut().unwrap(),
                p.as_slice_mut().unwrap(),
                g.as_slice().unwrap(),
            );
            for k in 0..gs.len() {
                ms[k] = b1 * ms[k] + (one - b1) * gs[k];
                vs[k] = b2 * vs[k] + (one - b2) * gs[k] * gs[k];
                let mhat = ms[k] / bc1;
                let vhat = vs[k] / bc2;
                ps[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
