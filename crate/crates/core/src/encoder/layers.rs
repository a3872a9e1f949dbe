//! Dense building blocks: activations, affine layers and feed-forward stacks.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Swish,
    Sigmoid,
    Tanh,
    Elu,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Relu,
        Activation::Gelu,
        Activation::Swish,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Elu,
    ];

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "relu" => Activation::Relu,
            "gelu" => Activation::Gelu,
            "swish" => Activation::Swish,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            "elu" => Activation::Elu,
            _ => return None,
        })
    }

    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Gelu => 0.5 * z * (1.0 + gelu_inner(z).tanh()),
            Activation::Swish => z * sigmoid(z),
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = gelu_inner(z).tanh();
                let inner_d = GELU_K * (1.0 + 3.0 * GELU_C * z * z);
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * inner_d
            }
            Activation::Swish => {
                let s = sigmoid(z);
                s + z * s * (1.0 - s)
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
        }
    }
}

// tanh approximation of GELU
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu_inner(z: f64) -> f64 {
    GELU_K * (z + GELU_C * z * z * z)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `y = x W^T + b` over a batch of rows. Weights are `out x in`, row-major.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

impl Linear {
    /// Uniform(-a, a) weights with `a = sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-a..a))
            .collect();
        Linear {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
            grad_weight: vec![0.0; in_dim * out_dim],
            grad_bias: vec![0.0; out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let mut y = Vec::with_capacity(rows * self.out_dim);
        for r in 0..rows {
            let xr = &x[r * self.in_dim..(r + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let dot: f64 = w.iter().zip(xr).map(|(a, b)| a * b).sum();
                y.push(dot + self.bias[o]);
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], rows: usize) -> Vec<f64> {
        let mut dx = vec![0.0; rows * self.in_dim];
        for r in 0..rows {
            let xr = &x[r * self.in_dim..(r + 1) * self.in_dim];
            let dxr = &mut dx[r * self.in_dim..(r + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let g = dy[r * self.out_dim + o];
                if g == 0.0 {
                    continue;
                }
                self.grad_bias[o] += g;
                let base = o * self.in_dim;
                for i in 0..self.in_dim {
                    self.grad_weight[base + i] += g * xr[i];
                    dxr[i] += g * self.weight[base + i];
                }
            }
        }
        dx
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(&mut self.weight, &mut self.grad_weight);
        f(&mut self.bias, &mut self.grad_bias);
    }
}

/// Feed-forward stack of `depth` affine layers. Inner layers are
/// `dimension * ratio` wide and activated; the last layer projects to
/// `dimension` and is linear.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    cache: Vec<(Vec<f64>, Vec<f64>)>,
    rows: usize,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        dimension: usize,
        ratio: usize,
        depth: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let hidden = dimension * ratio;
        let mut layers = Vec::with_capacity(depth);
        let mut width = in_dim;
        for l in 0..depth {
            let out = if l + 1 == depth { dimension } else { hidden };
            layers.push(Linear::new(width, out, rng));
            width = out;
        }
        Ffn {
            layers,
            activation,
            cache: Vec::new(),
            rows: 0,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn forward(&mut self, x: &[f64], rows: usize) -> Vec<f64> {
        self.cache.clear();
        self.rows = rows;
        let mut h = x.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&h, rows);
            let post = if l == last {
                pre.clone()
            } else {
                pre.iter().map(|&z| self.activation.apply(z)).collect()
            };
            self.cache.push((h, pre));
            h = post;
        }
        h
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let mut g = dy.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for l in (0..self.layers.len()).rev() {
            let (input, pre) = &self.cache[l];
            if l != last {
                for (gi, &z) in g.iter_mut().zip(pre) {
                    *gi *= self.activation.derivative(z);
                }
            }
            g = self.layers[l].backward(input, &g, self.rows);
        }
        g
    }

    pub fn has_cache(&self) -> bool {
        self.cache.len() == self.layers.len() && !self.layers.is_empty()
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        for l in &mut self.layers {
            l.visit(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let h = 1e-6;
        for act in Activation::ALL {
            for &z in &[-2.3, -0.7, 0.4, 1.9] {
                let fd = (act.apply(z + h) - act.apply(z - h)) / (2.0 * h);
                assert!((fd - act.derivative(z)).abs() < 1e-7, "{act:?} at {z}");
            }
        }
    }

    #[test]
    fn single_layer_param_count() {
        let l = Linear::new(10, 32, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(l.param_count(), 352);
    }

    #[test]
    fn ffn_widths() {
        let f = Ffn::new(
            5,
            8,
            4,
            3,
            Activation::Relu,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let dims: Vec<_> = f.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect();
        assert_eq!(dims, [(5, 32), (32, 32), (32, 8)]);
    }

    #[test]
    fn init_is_bounded() {
        let l = Linear::new(6, 10, &mut ChaCha8Rng::seed_from_u64(3));
        let a = (6.0f64 / 16.0).sqrt();
        assert!(l.weight.iter().all(|w| w.abs() <= a));
        assert!(l.bias.iter().all(|&b| b == 0.0));
    }
}
