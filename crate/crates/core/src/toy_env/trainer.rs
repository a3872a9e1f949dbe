//! End-to-end policy-gradient training of a composite encoder on MicroFlow.
//!
//! A linear softmax head over the encoder state picks actions. Training runs
//! one continuous trajectory cut into fixed-length segments; after each
//! segment the encoder and head take a few gradient steps on the REINFORCE
//! objective with discounted returns and a moving-average baseline.
//! Evaluation is greedy on a separately seeded environment, so a trained and
//! an untrained policy with the same seed see the same capacity stream.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::env::{Action, MicroFlow, Observation, TRAFFIC_FEATURES, WINDOW};
use crate::encoder::{CompositeEncoder, EncoderError, InputShape, Linear};
use crate::signals::{
    collect_feature_info, feature_pairs, SampleMatrix, SignalError, SignalSet, DEFAULT_BINS,
    TRACE_SAMPLES,
};
use crate::space::{CompositeSpace, DesignVector};

pub const TIME_SOURCE: &str = "time";
pub const TRAFFIC_SOURCE: &str = "traffic";
pub const SEQUENCE_SOURCE: &str = "sequence";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Signals(#[from] SignalError),
    #[error("module `{0}` has no MicroFlow observation source")]
    UnknownSource(String),
    #[error("invalid budget: {0}")]
    Budget(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainEvalBudget {
    pub train_steps: usize,
    pub eval_steps: usize,
    pub episode_length: usize,
}

impl Default for TrainEvalBudget {
    fn default() -> Self {
        TrainEvalBudget {
            train_steps: 20_000,
            eval_steps: 5_000,
            episode_length: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub budget: TrainEvalBudget,
    pub learning_rate: f64,
    pub discount: f64,
    /// Weight of the newest segment in the baseline average.
    pub baseline_rate: f64,
    pub entropy_bonus: f64,
    pub grad_clip: f64,
    /// Clipped-ratio surrogate with this epsilon instead of plain REINFORCE.
    pub ppo_clip: Option<f64>,
    pub ppo_epochs: usize,
    /// Optimizer steps per segment, each on a contiguous slice of it.
    pub minibatches: usize,
    pub optimizer: OptimizerKind,
    pub trace_samples: usize,
    pub bins: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            budget: TrainEvalBudget::default(),
            learning_rate: 1e-2,
            discount: 0.99,
            baseline_rate: 0.1,
            entropy_bonus: 0.01,
            grad_clip: 1.0,
            ppo_clip: None,
            ppo_epochs: 4,
            minibatches: 4,
            optimizer: OptimizerKind::Sgd,
            trace_samples: TRACE_SAMPLES,
            bins: DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Input shapes of the three MicroFlow sources.
pub fn microflow_shapes() -> BTreeMap<String, InputShape> {
    BTreeMap::from([
        (TIME_SOURCE.to_string(), InputShape::matrix(WINDOW, 3)),
        (
            TRAFFIC_SOURCE.to_string(),
            InputShape::vector(TRAFFIC_FEATURES),
        ),
        (SEQUENCE_SOURCE.to_string(), InputShape::matrix(WINDOW, 3)),
    ])
}

pub fn encoder_inputs(obs: &Observation) -> BTreeMap<String, Vec<f64>> {
    BTreeMap::from([
        (TIME_SOURCE.to_string(), obs.time_series.clone()),
        (TRAFFIC_SOURCE.to_string(), obs.traffic_vector.clone()),
        (SEQUENCE_SOURCE.to_string(), obs.action_sequence.clone()),
    ])
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub signals: SignalSet,
    /// Latent speed at every evaluation step.
    pub eval_speeds: Vec<f64>,
    /// First `trace_samples` evaluation traces; empty when training failed.
    pub traces: BTreeMap<String, SampleMatrix>,
    pub train_rewards: Vec<f64>,
}

fn derive(seed: u64, salt: u64) -> u64 {
    crate::splitmix64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

struct Policy {
    encoder: CompositeEncoder,
    head: Linear,
}

impl Policy {
    fn logits(&mut self, obs: &Observation) -> Result<(Vec<f64>, Vec<f64>), EncoderError> {
        let (state, _) = self.encoder.forward(&encoder_inputs(obs))?;
        Ok((self.head.forward(&state, 1), state))
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.encoder.visit(f);
        self.head.visit(f);
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn greedy(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, n: usize) -> Self {
        Optimizer {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Gradient ascent on the objective whose gradient sits in the buffers.
    fn step(&mut self, policy: &mut Policy, lr: f64, clip: f64) {
        let sgd = self.kind == OptimizerKind::Sgd;
        let mut norm2 = 0.0;
        policy.visit(&mut |_, g| norm2 += g.iter().map(|x| x * x).sum::<f64>());
        let scale = if clip > 0.0 && norm2.sqrt() > clip {
            clip / norm2.sqrt()
        } else {
            1.0
        };
        self.t += 1;
        let (c1, c2) = (1.0 - Self::B1.powi(self.t), 1.0 - Self::B2.powi(self.t));
        let (m, v) = (&mut self.m, &mut self.v);
        let mut pos = 0;
        policy.visit(&mut |p, g| {
            for (pi, gi) in p.iter_mut().zip(g.iter_mut()) {
                let grad = *gi * scale;
                m[pos] = Self::B1 * m[pos] + (1.0 - Self::B1) * grad;
                v[pos] = Self::B2 * v[pos] + (1.0 - Self::B2) * grad * grad;
                if sgd {
                    *pi += lr * grad;
                } else {
                    *pi += lr * (m[pos] / c1) / ((v[pos] / c2).sqrt() + Self::EPS);
                }
                *gi = 0.0;
                pos += 1;
            }
        });
    }
}

struct Transition {
    obs: Observation,
    action: usize,
    prob: f64,
    reward: f64,
}

/// Accumulates the gradient of the segment objective into the buffers.
fn accumulate_segment(
    policy: &mut Policy,
    segment: &[Transition],
    advantages: &[f64],
    cfg: &TrainerConfig,
) -> Result<(), EncoderError> {
    let n = segment.len() as f64;
    for (tr, &adv) in segment.iter().zip(advantages) {
        let (logits, state) = policy.logits(&tr.obs)?;
        let p = softmax(&logits);
        let ratio = p[tr.action] / tr.prob;
        let weight = match cfg.ppo_clip {
            Some(eps) if (adv > 0.0 && ratio > 1.0 + eps) || (adv < 0.0 && ratio < 1.0 - eps) => {
                0.0
            }
            Some(_) => ratio * adv,
            None => adv,
        };
        let entropy: f64 = -p.iter().map(|q| q * q.max(1e-300).ln()).sum::<f64>();
        let mut dlogits = vec![0.0; p.len()];
        for (j, d) in dlogits.iter_mut().enumerate() {
            let onehot = if j == tr.action { 1.0 } else { 0.0 };
            let dent = -p[j] * (p[j].max(1e-300).ln() + entropy);
            *d = (weight * (onehot - p[j]) + cfg.entropy_bonus * dent) / n;
        }
        let dstate = policy.head.backward(&state, &dlogits, 1);
        policy.encoder.backward(&dstate)?;
    }
    Ok(())
}

fn params_finite(policy: &mut Policy) -> bool {
    let mut ok = true;
    policy.visit(&mut |p, _| ok &= p.iter().all(|x| x.is_finite()));
    ok
}

/// Trains the encoder described by `v` and evaluates it greedily.
pub fn train_and_evaluate(
    space: &CompositeSpace,
    v: &DesignVector,
    cfg: &TrainerConfig,
    seed: u64,
) -> Result<Evaluation, TrainError> {
    let budget = cfg.budget;
    if budget.eval_steps == 0 || budget.episode_length == 0 {
        return Err(TrainError::Budget(
            "eval_steps and episode_length must be positive".into(),
        ));
    }
    for m in space.modules() {
        if m.family != "fusion" && !microflow_shapes().contains_key(&m.name) {
            return Err(TrainError::UnknownSource(m.name.clone()));
        }
    }
    let encoder = CompositeEncoder::instantiate(space, v, &microflow_shapes(), derive(seed, 1))?;
    let mut head_rng = ChaCha8Rng::seed_from_u64(derive(seed, 2));
    let head = Linear::new(encoder.state_dim(), Action::ALL.len(), &mut head_rng);
    let mut policy = Policy { encoder, head };
    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive(seed, 3));
    let mut opt = Optimizer::new(
        cfg.optimizer,
        policy.encoder.param_count() + policy.head.param_count(),
    );
    policy.encoder.zero_grad();

    let (mut env, mut obs) = MicroFlow::reset(derive(seed, 4));
    let mut train_rewards = Vec::with_capacity(budget.train_steps);
    let mut baseline: Option<Vec<f64>> = None;
    let mut done = 0;
    while done < budget.train_steps {
        let len = budget.episode_length.min(budget.train_steps - done);
        let mut segment = Vec::with_capacity(len);
        for _ in 0..len {
            let (logits, _) = policy.logits(&obs)?;
            let p = softmax(&logits);
            if p.iter().any(|x| !x.is_finite()) {
                return Ok(failed(train_rewards));
            }
            let u: f64 = sample_rng.random();
            let mut action = p.len() - 1;
            let mut acc = 0.0;
            for (i, &q) in p.iter().enumerate() {
                acc += q;
                if u < acc {
                    action = i;
                    break;
                }
            }
            let (next, reward) = env.step(Action::from_index(action));
            train_rewards.push(reward);
            segment.push(Transition {
                obs: std::mem::replace(&mut obs, next),
                action,
                prob: p[action],
                reward,
            });
        }
        done += len;

        let mut returns = vec![0.0; segment.len()];
        let mut g = 0.0;
        for (i, tr) in segment.iter().enumerate().rev() {
            g = tr.reward + cfg.discount * g;
            returns[i] = g;
        }
        // Per-position baseline: truncated returns shrink toward the segment end.
        let b = baseline.get_or_insert_with(|| returns.clone());
        b.resize(returns.len().max(b.len()), 0.0);
        let mut advantages: Vec<f64> = returns.iter().zip(b.iter()).map(|(g, b)| g - b).collect();
        for (bi, g) in b.iter_mut().zip(&returns) {
            *bi += cfg.baseline_rate * (g - *bi);
        }
        let mu = mean(&advantages);
        let sd = (advantages.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>()
            / advantages.len() as f64)
            .sqrt();
        if sd > 1e-12 {
            advantages.iter_mut().for_each(|a| *a /= sd);
        }

        let epochs = if cfg.ppo_clip.is_some() {
            cfg.ppo_epochs.max(1)
        } else {
            1
        };
        let chunk = segment.len().div_ceil(cfg.minibatches.max(1));
        for _ in 0..epochs {
            for (part, adv) in segment.chunks(chunk).zip(advantages.chunks(chunk)) {
                accumulate_segment(&mut policy, part, adv, cfg)?;
                opt.step(&mut policy, cfg.learning_rate, cfg.grad_clip);
                if !params_finite(&mut policy) {
                    return Ok(failed(train_rewards));
                }
            }
        }
    }

    let (mut env, mut obs) = MicroFlow::reset(derive(seed, 5));
    let mut eval_speeds = Vec::with_capacity(budget.eval_steps);
    let mut eval_rewards = Vec::with_capacity(budget.eval_steps);
    let trace_n = cfg.trace_samples.min(budget.eval_steps);
    let mut trace_rows: BTreeMap<String, (usize, Vec<f64>)> = BTreeMap::new();
    for i in 0..budget.eval_steps {
        let (state, trace) = policy.encoder.forward(&encoder_inputs(&obs))?;
        if i < trace_n {
            for (key, snap) in trace.snapshots {
                let entry = trace_rows.entry(key).or_insert((snap.len(), Vec::new()));
                entry.1.extend(snap);
            }
        }
        let logits = policy.head.forward(&state, 1);
        if logits.iter().any(|x| !x.is_finite()) {
            return Ok(failed(train_rewards));
        }
        let (next, reward) = env.step(Action::from_index(greedy(&logits)));
        obs = next;
        eval_speeds.push(env.speed());
        eval_rewards.push(reward);
    }

    let mut traces = BTreeMap::new();
    for (key, (cols, data)) in trace_rows {
        traces.insert(key, SampleMatrix::new(trace_n, cols, data)?);
    }
    let feature_info = collect_feature_info(&traces, &feature_pairs(space), cfg.bins)?;
    let task_metric = mean(&eval_speeds);
    let tail = train_rewards.len() / 10;
    let average_reward = if tail > 0 {
        mean(&train_rewards[train_rewards.len() - tail..])
    } else {
        mean(&eval_rewards)
    };
    let signals = SignalSet::new(task_metric, average_reward, feature_info);
    if !signals.is_finite() {
        return Ok(failed(train_rewards));
    }
    Ok(Evaluation {
        signals,
        eval_speeds,
        traces,
        train_rewards,
    })
}

fn failed(train_rewards: Vec<f64>) -> Evaluation {
    Evaluation {
        signals: SignalSet::failed(),
        eval_speeds: Vec::new(),
        traces: BTreeMap::new(),
        train_rewards,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Lag in `[1, max_lag]` with the largest autocorrelation after the series
/// first turns negative. `None` if it never does.
pub fn autocorrelation_peak(xs: &[f64], max_lag: usize) -> Option<usize> {
    let n = xs.len();
    let mu = mean(xs);
    let var: f64 = xs.iter().map(|x| (x - mu) * (x - mu)).sum();
    if var == 0.0 {
        return None;
    }
    let acf = |lag: usize| -> f64 {
        (0..n - lag)
            .map(|i| (xs[i] - mu) * (xs[i + lag] - mu))
            .sum::<f64>()
            / var
    };
    let max_lag = max_lag.min(n.saturating_sub(1));
    let first_negative = (1..=max_lag).find(|&l| acf(l) < 0.0)?;
    (first_negative..=max_lag).max_by(|&a, &b| acf(a).total_cmp(&acf(b)).then(b.cmp(&a)))
}
