//! Fully connected tanh network used as the approximate control law.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    XavierUniform,
    Zeros,
}

/// Affine maps between physical and network coordinates:
/// `z = (x - x_offset) / x_scale` on the way in and
/// `u = u_offset + u_scale * y` on the way out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x_offset: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub u_offset: Vec<f64>,
    pub u_scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(n_x: usize, n_u: usize) -> Self {
        Self {
            x_offset: vec![0.0; n_x],
            x_scale: vec![1.0; n_x],
            u_offset: vec![0.0; n_u],
            u_scale: vec![1.0; n_u],
        }
    }

    /// Maps the boxes `[x_lo, x_hi]` and `[u_lo, u_hi]` onto `[-1, 1]`.
    pub fn from_boxes(x_lo: &[f64], x_hi: &[f64], u_lo: &[f64], u_hi: &[f64]) -> Result<Self> {
        check_dim("state box", x_lo.len(), x_hi.len())?;
        check_dim("input box", u_lo.len(), u_hi.len())?;
        let half = |lo: &[f64], hi: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut off = Vec::new();
            let mut scale = Vec::new();
            for (l, h) in lo.iter().zip(hi) {
                if !(h > l) {
                    return Err(Error::InvalidArgument(format!("normalization box [{l}, {h}] is empty")));
                }
                off.push(0.5 * (l + h));
                scale.push(0.5 * (h - l));
            }
            Ok((off, scale))
        };
        let (x_offset, x_scale) = half(x_lo, x_hi)?;
        let (u_offset, u_scale) = half(u_lo, u_hi)?;
        Ok(Self {
            x_offset,
            x_scale,
            u_offset,
            u_scale,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major `n_out × n_in`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpPolicy {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    pub normalization: Normalization,
}

impl MlpPolicy {
    pub fn init(seed: u64, layer_sizes: &[usize], scheme: InitScheme, normalization: Normalization) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {layer_sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let weights = match scheme {
                    InitScheme::Zeros => vec![0.0; n_in * n_out],
                    InitScheme::XavierUniform => {
                        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                        (0..n_in * n_out).map(|_| rng.gen_range(-limit..limit)).collect()
                    }
                };
                Layer {
                    weights,
                    biases: vec![0.0; n_out],
                }
            })
            .collect();
        let policy = Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            normalization,
        };
        policy.validate()?;
        Ok(policy)
    }

    /// Network whose output is `u` everywhere.
    pub fn constant(layer_sizes: &[usize], normalization: Normalization, u: &[f64]) -> Result<Self> {
        let mut p = Self::init(0, layer_sizes, InitScheme::Zeros, normalization)?;
        check_dim("constant output", p.n_u(), u.len())?;
        let n = &p.normalization;
        let y: Vec<f64> = u.iter().enumerate().map(|(j, v)| (v - n.u_offset[j]) / n.u_scale[j]).collect();
        p.layers.last_mut().expect("at least one layer").biases = y;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() + 1 != self.layer_sizes.len() {
            return Err(Error::InvalidArgument("layer count does not match layer sizes".into()));
        }
        for (l, w) in self.layers.iter().zip(self.layer_sizes.windows(2)) {
            check_dim("layer weights", w[0] * w[1], l.weights.len())?;
            check_dim("layer biases", w[1], l.biases.len())?;
        }
        let n = &self.normalization;
        check_dim("input offset", self.n_x(), n.x_offset.len())?;
        check_dim("input scale", self.n_x(), n.x_scale.len())?;
        check_dim("output offset", self.n_u(), n.u_offset.len())?;
        check_dim("output scale", self.n_u(), n.u_scale.len())?;
        if n.x_scale.iter().chain(&n.u_scale).any(|s| *s == 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument("normalization scales must be finite and nonzero".into()));
        }
        if self.parameters().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("policy parameters are not finite".into()));
        }
        Ok(())
    }

    pub fn n_x(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_u(&self) -> usize {
        *self.layer_sizes.last().expect("validated sizes")
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Flat θ: per layer, weights row-major then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_parameters(&mut self, theta: &[f64]) -> Result<()> {
        check_dim("parameter vector", self.n_params(), theta.len())?;
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&theta[at..at + nw]);
            at += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&theta[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Activations per layer: `acts[0]` is the normalized input, `acts[k]`
    /// the output of layer `k` (tanh on hidden layers, raw on the last).
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n = &self.normalization;
        let z: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v - n.x_offset[i]) / n.x_scale[i]).collect();
        let mut acts = vec![z];
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let input = &acts[k];
            let n_in = input.len();
            let out: Vec<f64> = l
                .biases
                .iter()
                .enumerate()
                .map(|(r, b)| {
                    let pre = b + l.weights[r * n_in..(r + 1) * n_in].iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
                    if k == last {
                        pre
                    } else {
                        pre.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_x());
        let y = self.activations(x).pop().expect("output layer");
        let n = &self.normalization;
        y.iter().enumerate().map(|(j, v)| n.u_offset[j] + n.u_scale[j] * v).collect()
    }

    /// `∂(adjointᵀ u)/∂θ` at `x`, laid out like [`parameters`](Self::parameters).
    pub fn param_grad(&self, x: &[f64], adjoint: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.n_params()];
        self.accumulate_param_grad(x, adjoint, &mut grad);
        grad
    }

    /// Adds `∂(adjointᵀ u)/∂θ` into `grad`.
    pub fn accumulate_param_grad(&self, x: &[f64], adjoint: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(adjoint.len(), self.n_u());
        let acts = self.activations(x);
        let n = &self.normalization;
        let mut delta: Vec<f64> = adjoint.iter().enumerate().map(|(j, a)| a * n.u_scale[j]).collect();
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |at, l| {
                let o = *at;
                *at += l.weights.len() + l.biases.len();
                Some(o)
            })
            .collect();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let input = &acts[k];
            let n_in = input.len();
            let off = offsets[k];
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (c, a) in input.iter().enumerate() {
                    grad[off + r * n_in + c] += d * a;
                }
                grad[off + l.weights.len() + r] += d;
            }
            if k == 0 {
                break;
            }
            // back through the weights, then through tanh of the previous layer
            delta = (0..n_in)
                .map(|c| {
                    let s: f64 = delta.iter().enumerate().map(|(r, d)| d * l.weights[r * n_in + c]).sum();
                    s * (1.0 - input[c] * input[c])
                })
                .collect();
        }
    }

    /// Lipschitz constant bound of `x ↦ u` in the Euclidean norm: the
    /// product of the layer spectral norms with the normalization scales.
    pub fn lipschitz_bound(&self) -> f64 {
        let n = &self.normalization;
        let inv_x = n.x_scale.iter().fold(0.0f64, |m, s| m.max(1.0 / s.abs()));
        let out = n.u_scale.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let layers: f64 = self
            .layers
            .iter()
            .zip(self.layer_sizes.windows(2))
            .map(|(l, w)| {
                let m = DMatrix::from_row_slice(w[1], w[0], &l.weights);
                m.singular_values().amax()
            })
            .product();
        inv_x * layers * out
    }

    /// Bound on `|u_j - u_offset_j|` valid for every input, available when
    /// the output layer sits on a tanh layer.
    pub fn output_bound(&self) -> Option<Vec<f64>> {
        if self.layers.len() < 2 {
            return None;
        }
        let l = self.layers.last()?;
        let n_in = self.layer_sizes[self.layer_sizes.len() - 2];
        Some(
            l.biases
                .iter()
                .enumerate()
                .map(|(r, b)| {
                    let w1: f64 = l.weights[r * n_in..(r + 1) * n_in].iter().map(|v| v.abs()).sum();
                    self.normalization.u_scale[r].abs() * (w1 + b.abs())
                })
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn box_norm() -> Normalization {
        Normalization::from_boxes(&[0.0632, 0.4519], &[0.4632, 0.8519], &[0.0], &[2.0]).unwrap()
    }

    fn random_policy(seed: u64, sizes: &[usize]) -> MlpPolicy {
        let norm = if sizes[0] == 2 && sizes[sizes.len() - 1] == 1 {
            box_norm()
        } else {
            Normalization::identity(sizes[0], sizes[sizes.len() - 1])
        };
        let mut p = MlpPolicy::init(seed, sizes, InitScheme::XavierUniform, norm).unwrap();
        // nonzero biases so every parameter is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for l in &mut p.layers {
            for b in &mut l.biases {
                *b = rand::Rng::gen_range(&mut rng, -0.5..0.5);
            }
        }
        p
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpPolicy::init(1, &[2, 5, 5, 5, 1], InitScheme::Zeros, Normalization::identity(2, 1)).unwrap();
        for x in [[0.0, 0.0], [0.3, -2.0], [10.0, 4.0]] {
            assert_eq!(p.forward(&x), vec![0.0]);
        }
    }

    #[test]
    fn single_affine_layer() {
        let mut p = MlpPolicy::init(0, &[1, 1], InitScheme::Zeros, Normalization::identity(1, 1)).unwrap();
        p.set_parameters(&[2.0, 1.0]).unwrap();
        assert_eq!(p.forward(&[3.0]), vec![7.0]);
        assert_eq!(p.param_grad(&[3.0], &[1.0]), vec![3.0, 1.0]);
        assert_eq!(p.param_grad(&[3.0], &[0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn constant_policy() {
        let p = MlpPolicy::constant(&[2, 5, 5, 5, 1], box_norm(), &[0.7583]).unwrap();
        assert!((p.forward(&[0.1, 0.5])[0] - 0.7583).abs() < 1e-15);
    }

    #[test]
    fn seeding_is_reproducible() {
        let a = MlpPolicy::init(5, &[2, 5, 5, 5, 1], InitScheme::XavierUniform, box_norm()).unwrap();
        let b = MlpPolicy::init(5, &[2, 5, 5, 5, 1], InitScheme::XavierUniform, box_norm()).unwrap();
        let c = MlpPolicy::init(6, &[2, 5, 5, 5, 1], InitScheme::XavierUniform, box_norm()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn xavier_variance() {
        let p = MlpPolicy::init(11, &[100, 100], InitScheme::XavierUniform, Normalization::identity(100, 100)).unwrap();
        let w = &p.layers[0].weights;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / 200.0;
        assert!((var / expect - 1.0).abs() < 0.2, "variance {var} vs {expect}");
    }

    fn fd_check(p: &MlpPolicy, x: &[f64], adjoint: &[f64]) {
        let grad = p.param_grad(x, adjoint);
        let theta = p.parameters();
        let f = |t: &[f64]| {
            let mut q = p.clone();
            q.set_parameters(t).unwrap();
            q.forward(x).iter().zip(adjoint).map(|(u, a)| u * a).sum::<f64>()
        };
        for i in 0..theta.len() {
            let h = 1e-6 * (1.0 + theta[i].abs());
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fd = (f(&tp) - f(&tm)) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs()).max(1e-3);
            assert!((fd - grad[i]).abs() / scale <= 1e-5, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        fd_check(&random_policy(3, &[3, 5]), &[0.2, 0.6, -0.1], &[1.0, -0.5, 0.3, 2.0, 0.1]);
        fd_check(&random_policy(4, &[2, 5, 1]), &[0.2, 0.6], &[1.3]);
        fd_check(&random_policy(5, &[2, 5, 5, 1]), &[0.3, 0.5], &[-0.7]);
        fd_check(&random_policy(6, &[2, 5, 5, 5, 1]), &[0.4, 0.8], &[1.0]);
    }

    #[test]
    fn round_trips_through_json() {
        let p = random_policy(9, &[2, 5, 5, 5, 1]);
        let text = serde_json::to_string(&p).unwrap();
        let back: MlpPolicy = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn lipschitz_bound_holds(seed in 0u64..500, a in prop::array::uniform2(0.0f64..1.0), b in prop::array::uniform2(0.0f64..1.0)) {
            let p = random_policy(seed, &[2, 5, 5, 5, 1]);
            let xa = [0.0632 + 0.4 * a[0], 0.4519 + 0.4 * a[1]];
            let xb = [0.0632 + 0.4 * b[0], 0.4519 + 0.4 * b[1]];
            let du = (p.forward(&xa)[0] - p.forward(&xb)[0]).abs();
            let dx = ((xa[0] - xb[0]).powi(2) + (xa[1] - xb[1]).powi(2)).sqrt();
            prop_assert!(du <= p.lipschitz_bound() * dx * (1.0 + 1e-12) + 1e-15);
        }

        #[test]
        fn output_is_bounded(seed in 0u64..500, x in prop::array::uniform2(-5.0f64..5.0)) {
            let p = random_policy(seed, &[2, 5, 5, 5, 1]);
            let bound = p.output_bound().unwrap()[0];
            prop_assert!((p.forward(&x)[0] - p.normalization.u_offset[0]).abs() <= bound + 1e-12);
        }

        #[test]
        fn gradient_is_linear_in_the_adjoint(seed in 0u64..200, s in -3.0f64..3.0) {
            let p = random_policy(seed, &[2, 5, 5, 5, 1]);
            let g1 = p.param_grad(&[0.2, 0.6], &[1.0]);
            let gs = p.param_grad(&[0.2, 0.6], &[s]);
            for (a, b) in g1.iter().zip(&gs) {
                prop_assert!((a * s - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}
