//! Seeded synthetic objective over design vectors.
//!
//! The noiseless landscape is a sum of per-choice utilities (uniform in
//! `[0, 1)`) plus four pairwise interaction tables (uniform in `[0, 2)`)
//! between randomly chosen choice pairs. Feature information is synthetic:
//! one entry per module whose value grows with the module's utility
//! subtotal, so module-level feedback is informative.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::signals::{FeatureEntry, FeatureInfo, SignalSet};
use crate::space::{CompositeSpace, DesignVector, SpaceError};

pub const DEFAULT_SIGMA: f64 = 0.02;
pub const INTERACTION_PAIRS: usize = 4;
pub const INTERACTION_SCALE: f64 = 2.0;
pub const REWARD_FACTOR: f64 = 0.8;
/// Largest synthetic feature-information value, in bits.
pub const FEATURE_CEILING: f64 = 3.0;
/// Spaces at most this large are optimized exactly.
pub const EXACT_OPTIMUM_LIMIT: u128 = 1_000_000;
pub const APPROXIMATE_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    /// Flat choice positions, `a < b`.
    pub a: usize,
    pub b: usize,
    /// Row-major `|a| x |b|` table.
    pub table: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub seed: u64,
    pub sigma: f64,
    /// Per flat choice, one utility per domain value.
    pub utilities: Vec<Vec<f64>>,
    pub interactions: Vec<Interaction>,
    /// Per module, the flat choice range and its min/max utility subtotal.
    module_bounds: Vec<(usize, usize, f64, f64)>,
    module_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub vector: DesignVector,
    pub value: f64,
    /// False when the value is only a best-of-samples lower bound.
    pub exact: bool,
}

impl SurrogateSpec {
    pub fn new(space: &CompositeSpace, seed: u64, sigma: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let utilities: Vec<Vec<f64>> = space
            .choices()
            .map(|(_, c)| (0..c.values.len()).map(|_| rng.random::<f64>()).collect())
            .collect();
        let n = utilities.len();
        let mut all_pairs = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                all_pairs.push((a, b));
            }
        }
        let picked = sample(
            &mut rng,
            all_pairs.len(),
            INTERACTION_PAIRS.min(all_pairs.len()),
        );
        let mut interactions: Vec<Interaction> = picked
            .into_iter()
            .map(|i| {
                let (a, b) = all_pairs[i];
                let table = (0..utilities[a].len() * utilities[b].len())
                    .map(|_| INTERACTION_SCALE * rng.random::<f64>())
                    .collect();
                Interaction { a, b, table }
            })
            .collect();
        interactions.sort_by_key(|x| (x.a, x.b));
        let module_bounds = (0..space.modules().len())
            .map(|mi| {
                let r = space.module_range(mi);
                let lo = utilities[r.clone()]
                    .iter()
                    .map(|u| u.iter().copied().fold(f64::INFINITY, f64::min))
                    .sum();
                let hi = utilities[r.clone()]
                    .iter()
                    .map(|u| u.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .sum();
                (r.start, r.end, lo, hi)
            })
            .collect();
        SurrogateSpec {
            seed,
            sigma,
            utilities,
            interactions,
            module_bounds,
            module_names: space.modules().iter().map(|m| m.name.clone()).collect(),
        }
    }

    /// Noiseless objective on flat indices.
    pub fn noiseless(&self, idx: &[usize]) -> f64 {
        let u: f64 = idx
            .iter()
            .zip(&self.utilities)
            .map(|(&i, table)| table[i])
            .sum();
        let width = |f: usize| self.utilities[f].len();
        let x: f64 = self
            .interactions
            .iter()
            .map(|it| it.table[idx[it.a] * width(it.b) + idx[it.b]])
            .sum();
        u + x
    }

    /// Utility subtotal of one module, scaled to `[0, 1]` by its range.
    pub fn module_quality(&self, idx: &[usize], module: usize) -> f64 {
        let (start, end, lo, hi) = self.module_bounds[module];
        let sub: f64 = (start..end).map(|f| self.utilities[f][idx[f]]).sum();
        if hi > lo {
            (sub - lo) / (hi - lo)
        } else {
            1.0
        }
    }

    /// Flat indices maximizing the utilities alone, choice by choice.
    pub fn greedy_indices(&self) -> Vec<usize> {
        self.utilities
            .iter()
            .map(|u| {
                let mut best = 0;
                for (i, &x) in u.iter().enumerate() {
                    if x > u[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn evaluate(
        &self,
        space: &CompositeSpace,
        v: &DesignVector,
        eval_seed: u64,
    ) -> Result<SignalSet, SpaceError> {
        let idx = space.checked_indices(v)?;
        Ok(self.evaluate_indices(&idx, eval_seed))
    }

    /// Caller guarantees `idx` is valid for the space this spec was built on.
    pub fn evaluate_indices(&self, idx: &[usize], eval_seed: u64) -> SignalSet {
        let clean = self.noiseless(idx);
        let (task_noise, reward_noise) = if self.sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::splitmix64(
                self.seed ^ crate::splitmix64(eval_seed),
            ));
            let normal = Normal::new(0.0, self.sigma).expect("sigma is finite and positive");
            (normal.sample(&mut rng), normal.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let task_metric = clean + task_noise;
        let entries = self
            .module_names
            .iter()
            .enumerate()
            .map(|(mi, name)| {
                let q = self.module_quality(idx, mi);
                let bits = FEATURE_CEILING * (1.0 - (-2.0 * q).exp()) / (1.0 - (-2.0f64).exp());
                FeatureEntry {
                    name: name.clone(),
                    mutual_information: bits,
                    redundancy: bits,
                }
            })
            .collect();
        SignalSet::new(
            task_metric,
            REWARD_FACTOR * task_metric + reward_noise,
            FeatureInfo { entries },
        )
    }

    /// Noiseless global optimum by enumeration, or the best of
    /// [`APPROXIMATE_SAMPLES`] uniform samples for large spaces.
    pub fn optimum(&self, space: &CompositeSpace) -> Optimum {
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut consider = |idx: Vec<usize>| {
            let value = self.noiseless(&idx);
            if best.as_ref().is_none_or(|(_, b)| value > *b) {
                best = Some((idx, value));
            }
        };
        let exact = space.cardinality() <= EXACT_OPTIMUM_LIMIT;
        if exact {
            space.enumerate_indices(None).for_each(&mut consider);
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::splitmix64(self.seed));
            for _ in 0..APPROXIMATE_SAMPLES {
                consider(space.sample_indices(&mut rng));
            }
        }
        let (idx, value) = best.expect("spaces are nonempty");
        Optimum {
            vector: space.vector_from_indices(&idx),
            value,
            exact,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::builtin_space;

    fn module(name: &str) -> CompositeSpace {
        builtin_space("traffic")
            .unwrap()
            .module_subspace(name)
            .unwrap()
    }

    #[test]
    fn noiseless_is_deterministic() {
        let s = builtin_space("traffic").unwrap();
        let spec = SurrogateSpec::new(&s, 3, 0.0);
        let v = s.expert_default().unwrap();
        assert_eq!(
            spec.evaluate(&s, &v, 1).unwrap(),
            spec.evaluate(&s, &v, 2).unwrap()
        );
        assert_eq!(spec, SurrogateSpec::new(&s, 3, 0.0));
    }

    #[test]
    fn noise_depends_on_eval_seed() {
        let s = builtin_space("traffic").unwrap();
        let spec = SurrogateSpec::new(&s, 3, DEFAULT_SIGMA);
        let v = s.expert_default().unwrap();
        let a = spec.evaluate(&s, &v, 1).unwrap();
        assert_eq!(a, spec.evaluate(&s, &v, 1).unwrap());
        assert_ne!(a.task_metric, spec.evaluate(&s, &v, 2).unwrap().task_metric);
    }

    #[test]
    fn enumeration_optimum_is_exact_for_a_module() {
        let s = module("time");
        let spec = SurrogateSpec::new(&s, 5, 0.0);
        let opt = spec.optimum(&s);
        assert!(opt.exact);
        let brute = s
            .enumerate(None)
            .map(|v| spec.evaluate(&s, &v, 0).unwrap().task_metric)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(opt.value, brute);
    }

    #[test]
    fn full_traffic_optimum_is_flagged_approximate() {
        let s = builtin_space("traffic").unwrap();
        let spec = SurrogateSpec::new(&s, 0, 0.5);
        let opt = spec.optimum(&s);
        assert!(!opt.exact);
        let again = SurrogateSpec::new(&s, 0, 0.0).optimum(&s);
        assert_eq!(opt.value, again.value);
    }

    #[test]
    fn feature_info_orders_best_and_worst_module_configs() {
        let s = builtin_space("traffic").unwrap();
        let spec = SurrogateSpec::new(&s, 8, 0.0);
        for (mi, m) in s.modules().iter().enumerate() {
            let r = s.module_range(mi);
            let mut base = spec.greedy_indices();
            let best_fi =
                spec.evaluate_indices(&base, 0).feature_info.entries[mi].mutual_information;
            for f in r {
                let u = &spec.utilities[f];
                base[f] = (0..u.len()).min_by(|&a, &b| u[a].total_cmp(&u[b])).unwrap();
            }
            let worst_fi =
                spec.evaluate_indices(&base, 0).feature_info.entries[mi].mutual_information;
            assert!(best_fi >= worst_fi, "{}", m.name);
            assert!((best_fi - FEATURE_CEILING).abs() < 1e-12);
            assert!(worst_fi.abs() < 1e-12);
        }
    }

    #[test]
    fn interactions_defeat_greedy_on_some_seed() {
        let s = module("time");
        let beaten = (0..10u64)
            .filter(|&seed| {
                let spec = SurrogateSpec::new(&s, seed, 0.0);
                spec.noiseless(&spec.greedy_indices()) < spec.optimum(&s).value
            })
            .count();
        assert!(beaten >= 1);
    }

    #[test]
    fn four_interaction_pairs() {
        let spec = SurrogateSpec::new(&builtin_space("minigrid").unwrap(), 1, 0.0);
        assert_eq!(spec.interactions.len(), INTERACTION_PAIRS);
        assert!(spec.interactions.iter().all(|i| i.a < i.b));
    }

    #[test]
    fn invalid_vector_is_rejected() {
        let s = builtin_space("minigrid").unwrap();
        let spec = SurrogateSpec::new(&s, 1, 0.0);
        let mut v = s.expert_default().unwrap();
        v.set("image", "pooling_layer", crate::space::Value::Number(5.0));
        v.set("image", "depth", crate::space::Value::Number(1.0));
        assert!(spec.evaluate(&s, &v, 0).is_err());
    }
}
