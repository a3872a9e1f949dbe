//! Multi-head self-attention followed by mean pooling over time and an FFN.
//!
//! One attention layer, no residual path, no normalization, no positional
//! encoding. The pooled `dm`-wide vector is handed to the FFN.

use rand::Rng;

use super::layers::{Activation, Ffn, Linear};

#[derive(Debug, Clone, Default)]
struct AttentionCache {
    steps: usize,
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, `steps x steps` row-stochastic weights.
    attn: Vec<Vec<f64>>,
    z: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Mhsa {
    pub heads: usize,
    pub model_dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ffn: Ffn,
    cache: Option<AttentionCache>,
}

impl Mhsa {
    /// Caller guarantees `heads` divides `model_dim`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        heads: usize,
        model_dim: usize,
        ratio: usize,
        depth: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        debug_assert_eq!(model_dim % heads, 0);
        let query = Linear::new(in_dim, model_dim, rng);
        let key = Linear::new(in_dim, model_dim, rng);
        let value = Linear::new(in_dim, model_dim, rng);
        let output = Linear::new(model_dim, model_dim, rng);
        let ffn = Ffn::new(model_dim, model_dim, ratio, depth, activation, rng);
        Mhsa {
            heads,
            model_dim,
            query,
            key,
            value,
            output,
            ffn,
            cache: None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn out_dim(&self) -> usize {
        self.ffn.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.query.param_count()
            + self.key.param_count()
            + self.value.param_count()
            + self.output.param_count()
            + self.ffn.param_count()
    }

    /// `x` is `steps x in_dim`, row-major.
    pub fn forward(&mut self, x: &[f64], steps: usize) -> Vec<f64> {
        let dm = self.model_dim;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(x, steps);
        let k = self.key.forward(x, steps);
        let v = self.value.forward(x, steps);
        let mut z = vec![0.0; steps * dm];
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * dh;
            let mut a = vec![0.0; steps * steps];
            for t in 0..steps {
                let row = &mut a[t * steps..(t + 1) * steps];
                for (s, slot) in row.iter_mut().enumerate() {
                    let dot: f64 = (0..dh)
                        .map(|c| q[t * dm + off + c] * k[s * dm + off + c])
                        .sum();
                    *slot = dot * scale;
                }
                softmax_in_place(row);
                for (s, &w) in row.iter().enumerate() {
                    for c in 0..dh {
                        z[t * dm + off + c] += w * v[s * dm + off + c];
                    }
                }
            }
            attn.push(a);
        }
        let o = self.output.forward(&z, steps);
        let mut pooled = vec![0.0; dm];
        for t in 0..steps {
            for c in 0..dm {
                pooled[c] += o[t * dm + c];
            }
        }
        for p in &mut pooled {
            *p /= steps as f64;
        }
        self.cache = Some(AttentionCache {
            steps,
            x: x.to_vec(),
            q,
            k,
            v,
            attn,
            z,
        });
        self.ffn.forward(&pooled, 1)
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some() && self.ffn.has_cache()
    }

    /// Accumulates gradients for every parameter, attention projections included.
    pub fn backward(&mut self, dy: &[f64]) {
        let Some(c) = self.cache.as_ref() else {
            return;
        };
        let (steps, dm, dh) = (c.steps, self.model_dim, self.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let dpooled = self.ffn.backward(dy);
        let mut d_o = vec![0.0; steps * dm];
        for t in 0..steps {
            for j in 0..dm {
                d_o[t * dm + j] = dpooled[j] / steps as f64;
            }
        }
        let dz = self.output.backward(&c.z, &d_o, steps);

        let mut dq = vec![0.0; steps * dm];
        let mut dk = vec![0.0; steps * dm];
        let mut dv = vec![0.0; steps * dm];
        for h in 0..self.heads {
            let off = h * dh;
            let a = &c.attn[h];
            for t in 0..steps {
                let row = &a[t * steps..(t + 1) * steps];
                // dA[t][s] = <dZ[t], V[s]>
                let da: Vec<f64> = (0..steps)
                    .map(|s| {
                        (0..dh)
                            .map(|j| dz[t * dm + off + j] * c.v[s * dm + off + j])
                            .sum()
                    })
                    .collect();
                let weighted: f64 = row.iter().zip(&da).map(|(w, d)| w * d).sum();
                for s in 0..steps {
                    for j in 0..dh {
                        dv[s * dm + off + j] += row[s] * dz[t * dm + off + j];
                    }
                    let ds = row[s] * (da[s] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..dh {
                        dq[t * dm + off + j] += ds * c.k[s * dm + off + j];
                        dk[s * dm + off + j] += ds * c.q[t * dm + off + j];
                    }
                }
            }
        }
        let x = c.x.clone();
        self.query.backward(&x, &dq, steps);
        self.key.backward(&x, &dk, steps);
        self.value.backward(&x, &dv, steps);
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.output.visit(f);
        self.ffn.visit(f);
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_attention_pooling_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Mhsa::new(3, 2, 8, 2, 2, Activation::Relu, &mut rng);
        // Zero query and key projections give all-equal scores.
        for l in [&mut m.query, &mut m.key] {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
        }
        let x: Vec<f64> = (0..24)
            .map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4)
            .collect();
        let mut permuted = Vec::new();
        for t in [5usize, 2, 7, 0, 1, 6, 3, 4] {
            permuted.extend_from_slice(&x[t * 3..t * 3 + 3]);
        }
        let a = m.forward(&x, 8);
        let b = m.forward(&permuted, 8);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = Mhsa::new(3, 4, 16, 1, 1, Activation::Relu, &mut rng);
        let x: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        m.forward(&x, 8);
        let c = m.cache.as_ref().unwrap();
        for a in &c.attn {
            for row in a.chunks(8) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
