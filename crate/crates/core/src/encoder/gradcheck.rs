//! Central finite-difference checks of the hand-written backward passes.
//!
//! The scalar loss is `<c, y>` for a fixed random `c`, so the analytic
//! gradient of a parameter is whatever `backward(c)` accumulates for it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::Mhsa;
use super::layers::{Activation, Ffn};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub probes: usize,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Visitor<'a> = dyn FnMut(&mut [f64], &mut [f64]) + 'a;

/// Reads or writes flat parameter `i` through `visit`.
fn with_param(
    visit: &mut dyn FnMut(&mut Visitor),
    i: usize,
    f: &mut dyn FnMut(&mut f64, &mut f64),
) {
    let mut offset = 0;
    visit(&mut |p: &mut [f64], g: &mut [f64]| {
        if i >= offset && i < offset + p.len() {
            f(&mut p[i - offset], &mut g[i - offset]);
        }
        offset += p.len();
    });
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Probes parameters and inputs of a three-layer FFN on a 3-row batch.
pub fn check_ffn(activation: Activation, probes: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, in_dim) = (3, 5);
    let mut ffn = Ffn::new(in_dim, 8, 2, 3, activation, &mut rng);
    let x = uniform(&mut rng, rows * in_dim);
    let c = uniform(&mut rng, rows * ffn.out_dim());
    let n_params = ffn.param_count();

    ffn.visit(&mut |_, g| g.fill(0.0));
    ffn.forward(&x, rows);
    let dx = ffn.backward(&c);

    let mut worst = 0.0f64;
    for _ in 0..probes {
        let i = rng.random_range(0..n_params + x.len());
        let (analytic, numeric) = if i < n_params {
            let mut analytic = 0.0;
            let mut loss_at = |delta: f64, ffn: &mut Ffn| {
                with_param(&mut |f| ffn.visit(f), i, &mut |p, g| {
                    *p += delta;
                    analytic = *g;
                });
                let l = dot(&c, &ffn.forward(&x, rows));
                with_param(&mut |f| ffn.visit(f), i, &mut |p, _| *p -= delta);
                l
            };
            let numeric =
                (loss_at(FD_STEP, &mut ffn) - loss_at(-FD_STEP, &mut ffn)) / (2.0 * FD_STEP);
            (analytic, numeric)
        } else {
            let j = i - n_params;
            let mut xp = x.clone();
            xp[j] += FD_STEP;
            let hi = dot(&c, &ffn.forward(&xp, rows));
            xp[j] -= 2.0 * FD_STEP;
            let lo = dot(&c, &ffn.forward(&xp, rows));
            (dx[j], (hi - lo) / (2.0 * FD_STEP))
        };
        worst = worst.max(relative_error(analytic, numeric));
    }
    GradCheck {
        probes,
        max_rel_error: worst,
    }
}

/// Probes every parameter group of an attention block over 8 time steps.
pub fn check_mhsa(heads: usize, probes: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (steps, in_dim, model_dim) = (8, 3, 16);
    let mut block = Mhsa::new(in_dim, heads, model_dim, 2, 2, Activation::Relu, &mut rng);
    let x = uniform(&mut rng, steps * in_dim);
    let c = uniform(&mut rng, block.out_dim());
    let n_params = block.param_count();

    block.visit(&mut |_, g| g.fill(0.0));
    block.forward(&x, steps);
    block.backward(&c);

    let mut worst = 0.0f64;
    for _ in 0..probes {
        let i = rng.random_range(0..n_params);
        let mut analytic = 0.0;
        let mut loss_at = |delta: f64, block: &mut Mhsa| {
            with_param(&mut |f| block.visit(f), i, &mut |p, g| {
                *p += delta;
                analytic = *g;
            });
            let l = dot(&c, &block.forward(&x, steps));
            with_param(&mut |f| block.visit(f), i, &mut |p, _| *p -= delta);
            l
        };
        let numeric =
            (loss_at(FD_STEP, &mut block) - loss_at(-FD_STEP, &mut block)) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic, numeric));
    }
    GradCheck {
        probes,
        max_rel_error: worst,
    }
}
