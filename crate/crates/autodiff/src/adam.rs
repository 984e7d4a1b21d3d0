//! Adam optimizer with bias correction, operating on plain tensors.

use crate::graph::Tensor;

/// Serializable optimizer state: step counter plus first/second moments, one
/// pair per parameter, in parameter order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update over a parameter list. Order and shapes must be identical
    /// across calls; moments are allocated lazily on the first step.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.raw_dim())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer state does not match parameter list");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
            let ps = p.as_slice_mut().unwrap();
            let gs = g.as_slice().unwrap();
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            for i in 0..ps.len() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gs[i];
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn snapshot(&self) -> AdamState {
        AdamState { t: self.t, m: self.m.clone(), v: self.v.clone() }
    }

    pub fn restore(&mut self, state: AdamState) {
        self.t = state.t;
        self.m = state.m;
        self.v = state.v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn converges_on_quadratic_bowl() {
        // f(p) = sum (p - c)^2, gradient 2(p - c). Run with the textbook
        // betas; the low-momentum GAN betas deliberately under-damp and orbit
        // the optimum at ~lr scale, which is not what this test is about.
        let target = ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut p = ArrayD::<f64>::zeros(IxDyn(&[4]));
        let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let g = (&p - &target).mapv(|d| 2.0 * d);
            opt.step(&mut [&mut p], &[&g]);
        }
        let worst = (&p - &target).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(worst < 1e-4, "worst residual {worst}");
    }

    #[test]
    fn snapshot_restore_resumes_identically() {
        let grad = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, -0.7, 1.1]).unwrap();
        let mut p1 = ArrayD::<f64>::zeros(IxDyn(&[3]));
        let mut o1 = Adam::new(0.01, 0.5, 0.9, 1e-8);
        for _ in 0..5 {
            o1.step(&mut [&mut p1], &[&grad]);
        }
        let saved = o1.snapshot();
        let mut p2 = p1.clone();
        let mut o2 = Adam::new(0.01, 0.5, 0.9, 1e-8);
        o2.restore(saved);
        for _ in 0..5 {
            o1.step(&mut [&mut p1], &[&grad]);
            o2.step(&mut [&mut p2], &[&grad]);
        }
        assert_eq!(p1, p2);
    }
}
