//! Dense layers, parameter traversal, and the Adam optimizer shared by the
//! actor and the critic.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{structural, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &mut Array2<f64>) {
        if self == Activation::Relu {
            x.mapv_inplace(|v| v.max(0.0));
        }
    }

    /// Masks `grad` in place given the activation's output.
    pub fn backprop(self, out: &Array2<f64>, grad: &mut Array2<f64>) {
        if self == Activation::Relu {
            ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
        }
    }
}

/// Affine map `y = x W + b` over row-major batches. `w` is `(in, out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
        let b = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..=bound));
        Self { w, b }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Array2::zeros((fan_in, fan_out)), b: Array1::zeros(fan_out) }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.fan_in(), self.fan_out())
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: &Array2<f64>, grads: &mut Dense) -> Array2<f64> {
        grads.w += &x.t().dot(dy);
        grads.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    /// Input gradient only; parameters untouched.
    pub fn backward_input(&self, dy: &Array2<f64>) -> Array2<f64> {
        dy.dot(&self.w.t())
    }

    fn tensors(&self) -> [&[f64]; 2] {
        [self.w.as_slice().expect("standard layout"), self.b.as_slice().expect("standard layout")]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Flat, ordered access to every parameter tensor of a network. Order is the
/// declaration order and is what checkpoints, optimizers and soft updates
/// rely on.
pub trait Parameterized {
    fn layers(&self) -> Vec<&Dense>;
    fn layers_mut(&mut self) -> Vec<&mut Dense>;

    fn tensors(&self) -> Vec<&[f64]> {
        self.layers().into_iter().flat_map(Dense::tensors).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut().into_iter().flat_map(Dense::tensors_mut).collect()
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn shapes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

/// `target <- (1 - tau) * target + tau * online`, elementwise.
pub fn soft_update<P: Parameterized>(online: &P, target: &mut P, tau: f64) -> Result<()> {
    if online.shapes() != target.shapes() {
        return Err(structural("soft update between networks of different shape"));
    }
    for (src, dst) in online.tensors().into_iter().zip(target.tensors_mut()) {
        for (s, d) in src.iter().zip(dst.iter_mut()) {
            *d = (1.0 - tau) * *d + tau * s;
        }
    }
    Ok(())
}

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one descent step using `grads`, whose tensors must line up with
    /// `params`. Moment buffers grow when the network grows.
    pub fn apply<P: Parameterized, G: Parameterized>(&mut self, params: &mut P, grads: &G) -> Result<()> {
        let gt = grads.tensors();
        let mut pt = params.tensors_mut();
        if gt.len() != pt.len() || gt.iter().zip(pt.iter()).any(|(g, p)| g.len() != p.len()) {
            return Err(structural("gradient shape does not match parameters"));
        }
        while self.m.len() < pt.len() {
            let n = pt[self.m.len()].len();
            self.m.push(vec![0.0; n]);
            self.v.push(vec![0.0; n]);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in pt.iter_mut().zip(gt.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Scalar variant for single learnable values such as `log_alpha`.
    pub fn apply_scalar(&mut self, param: &mut f64, grad: f64) {
        if self.m.is_empty() {
            self.m.push(vec![0.0]);
            self.v.push(vec![0.0]);
        }
        self.step += 1;
        let t = self.step as i32;
        let m = &mut self.m[0][0];
        let v = &mut self.v[0][0];
        *m = self.beta1 * *m + (1.0 - self.beta1) * grad;
        *v = self.beta2 * *v + (1.0 - self.beta2) * grad * grad;
        let mh = *m / (1.0 - self.beta1.powi(t));
        let vh = *v / (1.0 - self.beta2.powi(t));
        *param -= self.lr * mh / (vh.sqrt() + self.eps);
    }
}

/// Row-stacks vectors into a batch matrix.
pub fn stack_rows(rows: &[&[f64]]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), cols));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(*src));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    struct One(Dense);

    impl Parameterized for One {
        fn layers(&self) -> Vec<&Dense> {
            vec![&self.0]
        }
        fn layers_mut(&mut self) -> Vec<&mut Dense> {
            vec![&mut self.0]
        }
    }

    fn scalar(v: f64) -> One {
        One(Dense { w: array![[v]], b: array![v] })
    }

    #[test]
    fn soft_update_endpoints() {
        let online = scalar(0.0);
        let mut target = scalar(1.0);
        soft_update(&online, &mut target, 0.005).unwrap();
        assert_eq!(target.0.w[[0, 0]], 0.995);
        let mut target = scalar(1.0);
        soft_update(&online, &mut target, 0.0).unwrap();
        assert_eq!(target.0.w[[0, 0]], 1.0);
        let online = scalar(0.3);
        soft_update(&online, &mut target, 1.0).unwrap();
        assert_eq!(target.flat(), online.flat());
    }

    #[test]
    fn soft_update_shape_mismatch() {
        let online = One(Dense::zeros(2, 3));
        let mut target = One(Dense::zeros(3, 2));
        // same element count, different tensor split? still rejected when shapes differ
        let mut t2 = One(Dense::zeros(1, 1));
        assert!(soft_update(&online, &mut t2, 0.5).is_err());
        assert!(soft_update(&online, &mut target, 0.5).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = scalar(1.0);
        let g = scalar(0.5);
        let mut adam = Adam::new(0.1);
        adam.apply(&mut p, &g).unwrap();
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p.0.w[[0, 0]] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn dense_backward_matches_manual() {
        let layer = Dense { w: array![[1.0, 2.0], [3.0, 4.0]], b: array![0.5, -0.5] };
        let x = array![[1.0, -1.0]];
        let y = layer.forward(x.view());
        assert_eq!(y, array![[-1.5, -2.5]]);
        let mut g = layer.zeros_like();
        let dx = layer.backward(x.view(), &array![[1.0, 0.0]], &mut g);
        assert_eq!(dx, array![[1.0, 3.0]]);
        assert_eq!(g.w, array![[1.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(g.b, array![1.0, 0.0]);
    }
}
