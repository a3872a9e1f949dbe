//! Search strategies behind one interface: given the evaluated history,
//! propose the next batch.
//!
//! Ranking uses the task metric only. Failed candidates rank below every
//! successful one and ties go to the earlier candidate.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentConfig, AgentError, DesignAgent, FeedbackFlags};
use crate::signals::SignalSet;
use crate::space::{CompositeSpace, DesignVector, SpaceError};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("invalid searcher configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearcherKind {
    Random,
    Local,
    Evolutionary,
    Llm,
}

impl std::str::FromStr for SearcherKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(SearcherKind::Random),
            "local" => Ok(SearcherKind::Local),
            "evolutionary" => Ok(SearcherKind::Evolutionary),
            "llm" => Ok(SearcherKind::Llm),
            other => Err(format!("unknown searcher `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearcherConfig {
    pub kind: SearcherKind,
    pub batch_size: usize,
    pub population: usize,
    pub tournament: usize,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub patience: usize,
    /// Ramp evaluation training steps over the run (evolutionary only).
    pub budget_schedule: bool,
    pub agent: AgentConfig,
}

impl Default for SearcherConfig {
    fn default() -> Self {
        SearcherConfig {
            kind: SearcherKind::Random,
            batch_size: 1,
            population: 10,
            tournament: 3,
            mutation_rate: 0.2,
            crossover_rate: 0.5,
            patience: 5,
            budget_schedule: false,
            agent: AgentConfig::default(),
        }
    }
}

/// One evaluated candidate as seen by a searcher.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub vector: DesignVector,
    pub signals: SignalSet,
}

/// Ranking key: failed candidates are worse than any success.
pub fn score(s: &SignalSet) -> f64 {
    if s.failed || !s.task_metric.is_finite() {
        f64::NEG_INFINITY
    } else {
        s.task_metric
    }
}

/// Index of the best candidate; ties go to the earliest.
pub fn best_index(history: &[Evaluated]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in history.iter().enumerate() {
        if best.is_none_or(|b| score(&e.signals) > score(&history[b].signals)) {
            best = Some(i);
        }
    }
    best
}

/// Indices sorted best first; stable, so ties keep evaluation order.
pub fn ranking(history: &[Evaluated]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| score(&history[b].signals).total_cmp(&score(&history[a].signals)));
    order
}

/// Everything a searcher may look at when proposing.
#[derive(Debug, Clone, Copy)]
pub struct SearchContext<'a> {
    pub history: &'a [Evaluated],
    /// The previous batch's proposals, without the expert evaluation.
    pub previous: &'a [Evaluated],
    /// The expert's evaluation when the initial evaluation is enabled.
    pub initial: Option<&'a Evaluated>,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub vectors: Vec<DesignVector>,
    /// How many trailing vectors are uniform fill after failed parsing.
    pub filled: usize,
    /// Raw agent responses, for transcripts.
    pub responses: Vec<String>,
}

impl Proposal {
    fn plain(vectors: Vec<DesignVector>) -> Self {
        Proposal {
            vectors,
            filled: 0,
            responses: Vec::new(),
        }
    }
}

pub trait Searcher: Send {
    fn propose(&mut self, ctx: &SearchContext<'_>, k: usize) -> Result<Proposal, SearchError>;
}

/// Training steps for `iteration` out of `iterations`: linear from 25% to
/// 100% of `base` when enabled, `base` otherwise.
pub fn budget_schedule(enabled: bool, iteration: usize, iterations: usize, base: usize) -> usize {
    if !enabled || iterations <= 1 {
        return base;
    }
    let frac = 0.25 + 0.75 * iteration.min(iterations - 1) as f64 / (iterations - 1) as f64;
    (base as f64 * frac).round() as usize
}

pub fn make_searcher(
    config: &SearcherConfig,
    space: &CompositeSpace,
    flags: FeedbackFlags,
    seed: u64,
) -> Result<Box<dyn Searcher>, SearchError> {
    if config.batch_size == 0 {
        return Err(SearchError::Config("batch_size must be at least 1".into()));
    }
    let rng = ChaCha8Rng::seed_from_u64(crate::splitmix64(seed ^ 0x5ea2c4));
    Ok(match config.kind {
        SearcherKind::Random => Box::new(RandomSearch::new(space, rng)),
        SearcherKind::Local => Box::new(LocalSearch::new(space, config.patience, rng)),
        SearcherKind::Evolutionary => Box::new(Evolutionary::new(space, config, rng)?),
        SearcherKind::Llm => {
            let backend = config.agent.make_backend(space, seed)?;
            let agent = DesignAgent::new(space, flags, config.agent.clone(), backend);
            Box::new(LlmSearch::new(space, agent, rng))
        }
    })
}

pub struct RandomSearch {
    space: CompositeSpace,
    rng: ChaCha8Rng,
}

impl RandomSearch {
    pub fn new(space: &CompositeSpace, rng: ChaCha8Rng) -> Self {
        RandomSearch {
            space: space.clone(),
            rng,
        }
    }
}

impl Searcher for RandomSearch {
    fn propose(&mut self, _: &SearchContext<'_>, k: usize) -> Result<Proposal, SearchError> {
        Ok(Proposal::plain(
            (0..k)
                .map(|_| self.space.random_sample(&mut self.rng))
                .collect(),
        ))
    }
}

/// Uniform vector outside `taken`, or any uniform vector if none is left.
fn uniform_unvisited<R: Rng>(
    space: &CompositeSpace,
    taken: &HashSet<Vec<usize>>,
    rng: &mut R,
) -> Vec<usize> {
    for _ in 0..256 {
        let idx = space.sample_indices(rng);
        if !taken.contains(&idx) {
            return idx;
        }
    }
    if space.cardinality() <= 200_000 {
        let free: Vec<Vec<usize>> = space
            .enumerate_indices(None)
            .filter(|i| !taken.contains(i))
            .collect();
        if !free.is_empty() {
            return free[rng.random_range(0..free.len())].clone();
        }
    }
    space.sample_indices(rng)
}

/// Hill climbing over Hamming-one neighbors of the incumbent, restarting
/// from a fresh uniform point after `patience` rounds without improvement.
pub struct LocalSearch {
    space: CompositeSpace,
    patience: usize,
    rng: ChaCha8Rng,
    /// History position where the current climb started.
    climb_start: usize,
    best_seen: f64,
    stale: usize,
}

impl LocalSearch {
    pub fn new(space: &CompositeSpace, patience: usize, rng: ChaCha8Rng) -> Self {
        LocalSearch {
            space: space.clone(),
            patience: patience.max(1),
            rng,
            climb_start: 0,
            best_seen: f64::NEG_INFINITY,
            stale: 0,
        }
    }
}

impl Searcher for LocalSearch {
    fn propose(&mut self, ctx: &SearchContext<'_>, k: usize) -> Result<Proposal, SearchError> {
        let mut taken: HashSet<Vec<usize>> = ctx
            .history
            .iter()
            .filter_map(|e| self.space.indices_of(&e.vector))
            .collect();
        if let Some(b) = best_index(ctx.history) {
            let s = score(&ctx.history[b].signals);
            if s > self.best_seen {
                self.best_seen = s;
                self.stale = 0;
            } else {
                self.stale += 1;
            }
        }
        let restart = self.stale >= self.patience;
        if restart {
            self.stale = 0;
            self.climb_start = ctx.history.len();
        }
        let climb = &ctx.history[self.climb_start.min(ctx.history.len())..];
        let anchor = best_index(climb).and_then(|i| self.space.indices_of(&climb[i].vector));
        let mut out = Vec::with_capacity(k);
        if let Some(a) = anchor {
            let mut nbrs = self.space.neighbor_indices(&a)?;
            nbrs.shuffle(&mut self.rng);
            for n in nbrs {
                if out.len() == k {
                    break;
                }
                if taken.insert(n.clone()) {
                    out.push(n);
                }
            }
        }
        while out.len() < k {
            let idx = uniform_unvisited(&self.space, &taken, &mut self.rng);
            taken.insert(idx.clone());
            out.push(idx);
        }
        Ok(Proposal::plain(
            out.iter()
                .map(|i| self.space.vector_from_indices(i))
                .collect(),
        ))
    }
}

/// Steady-state genetic search over the best `population` candidates so
/// far: tournament selection, uniform crossover, per-choice mutation.
pub struct Evolutionary {
    space: CompositeSpace,
    population: usize,
    tournament: usize,
    mutation_rate: f64,
    crossover_rate: f64,
    rng: ChaCha8Rng,
}

impl Evolutionary {
    pub fn new(
        space: &CompositeSpace,
        config: &SearcherConfig,
        rng: ChaCha8Rng,
    ) -> Result<Self, SearchError> {
        if config.population == 0 || config.tournament == 0 {
            return Err(SearchError::Config(
                "population and tournament must be positive".into(),
            ));
        }
        for (name, p) in [
            ("mutation_rate", config.mutation_rate),
            ("crossover_rate", config.crossover_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SearchError::Config(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(Evolutionary {
            space: space.clone(),
            population: config.population,
            tournament: config.tournament,
            mutation_rate: config.mutation_rate,
            crossover_rate: config.crossover_rate,
            rng,
        })
    }

    /// History indices of the current population, best first.
    pub fn population(&self, history: &[Evaluated]) -> Vec<usize> {
        let mut r = ranking(history);
        r.truncate(self.population);
        r
    }

    /// Mutates one choice to a different domain value.
    pub fn mutate(&mut self, idx: &mut [usize]) {
        let sizes: Vec<usize> = self.space.choices().map(|(_, c)| c.values.len()).collect();
        for (f, &n) in sizes.iter().enumerate() {
            if n > 1 && self.rng.random::<f64>() < self.mutation_rate {
                let other = self.rng.random_range(0..n - 1);
                idx[f] = if other >= idx[f] { other + 1 } else { other };
            }
        }
        self.space.repair_indices(idx, &mut self.rng);
    }
}

impl Searcher for Evolutionary {
    fn propose(&mut self, ctx: &SearchContext<'_>, k: usize) -> Result<Proposal, SearchError> {
        let pop: Vec<Vec<usize>> = self
            .population(ctx.history)
            .into_iter()
            .filter_map(|i| self.space.indices_of(&ctx.history[i].vector))
            .collect();
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if pop.is_empty() {
                out.push(self.space.random_sample(&mut self.rng));
                continue;
            }
            // Population is sorted best first, so the smallest drawn
            // position wins the tournament.
            let pick = |rng: &mut ChaCha8Rng| {
                (0..self.tournament)
                    .map(|_| rng.random_range(0..pop.len()))
                    .min()
                    .expect("tournament is positive")
            };
            let a = pick(&mut self.rng);
            let b = pick(&mut self.rng);
            let mut child = pop[a].clone();
            if self.rng.random::<f64>() < self.crossover_rate {
                for (f, slot) in child.iter_mut().enumerate() {
                    if self.rng.random::<bool>() {
                        *slot = pop[b][f];
                    }
                }
            }
            self.mutate(&mut child);
            out.push(self.space.vector_from_indices(&child));
        }
        Ok(Proposal::plain(out))
    }
}

/// Delegates to the design agent; pads with uniform samples when the agent
/// does not deliver `k` parseable architectures.
pub struct LlmSearch {
    space: CompositeSpace,
    agent: DesignAgent,
    rng: ChaCha8Rng,
}

impl LlmSearch {
    pub fn new(space: &CompositeSpace, agent: DesignAgent, rng: ChaCha8Rng) -> Self {
        LlmSearch {
            space: space.clone(),
            agent,
            rng,
        }
    }

    pub fn agent(&self) -> &DesignAgent {
        &self.agent
    }
}

impl Searcher for LlmSearch {
    fn propose(&mut self, ctx: &SearchContext<'_>, k: usize) -> Result<Proposal, SearchError> {
        let previous: Vec<(DesignVector, SignalSet)> = ctx
            .previous
            .iter()
            .map(|e| (e.vector.clone(), e.signals.clone()))
            .collect();
        let reply = self
            .agent
            .propose(k, &previous, ctx.initial.map(|e| &e.signals))?;
        let mut vectors = reply.vectors;
        let filled = k - vectors.len();
        for _ in 0..filled {
            vectors.push(self.space.random_sample(&mut self.rng));
        }
        Ok(Proposal {
            vectors,
            filled,
            responses: reply.responses,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::builtin_space;
    use crate::surrogate::SurrogateSpec;

    fn evaluated(space: &CompositeSpace, spec: &SurrogateSpec, v: DesignVector) -> Evaluated {
        let signals = spec.evaluate(space, &v, 0).unwrap();
        Evaluated { vector: v, signals }
    }

    fn ctx(history: &[Evaluated]) -> SearchContext<'_> {
        SearchContext {
            history,
            previous: &[],
            initial: None,
            iteration: 0,
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(budget_schedule(true, 0, 10, 20_000), 5_000);
        assert_eq!(budget_schedule(true, 9, 10, 20_000), 20_000);
        assert_eq!(budget_schedule(false, 3, 10, 20_000), 20_000);
        let s: Vec<usize> = (0..37).map(|i| budget_schedule(true, i, 37, 999)).collect();
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ranking_puts_failures_last_and_keeps_ties_in_order() {
        let space = builtin_space("traffic").unwrap();
        let v = space.expert_default().unwrap();
        let mk = |m: f64, failed: bool| Evaluated {
            vector: v.clone(),
            signals: if failed {
                SignalSet::failed()
            } else {
                SignalSet::new(m, 0.0, Default::default())
            },
        };
        let h = [
            mk(0.0, true),
            mk(1.0, false),
            mk(2.0, false),
            mk(2.0, false),
            mk(-1.0, false),
        ];
        assert_eq!(ranking(&h), [2, 3, 1, 4, 0]);
        assert_eq!(best_index(&h), Some(2));
    }

    #[test]
    fn random_is_reproducible() {
        let space = builtin_space("minigrid").unwrap();
        let run = || {
            let mut s = make_searcher(
                &SearcherConfig::default(),
                &space,
                FeedbackFlags::default(),
                4,
            )
            .unwrap();
            s.propose(&ctx(&[]), 5).unwrap().vectors
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn local_reaches_module_optimum_from_every_start() {
        let space = builtin_space("traffic")
            .unwrap()
            .module_subspace("time")
            .unwrap();
        let spec = SurrogateSpec::new(&space, 2, 0.0);
        let opt = spec.optimum(&space).value;
        for start in space.enumerate(None) {
            let mut s = LocalSearch::new(&space, 5, ChaCha8Rng::seed_from_u64(1));
            let mut history = vec![evaluated(&space, &spec, start)];
            while history.len() < 81 {
                let p = s.propose(&ctx(&history), 1).unwrap();
                history.push(evaluated(&space, &spec, p.vectors[0].clone()));
            }
            let best = history
                .iter()
                .map(|e| e.signals.task_metric)
                .fold(f64::MIN, f64::max);
            assert_eq!(best, opt);
        }
    }

    #[test]
    fn evolutionary_population_best_never_drops() {
        let space = builtin_space("minigrid").unwrap();
        let spec = SurrogateSpec::new(&space, 6, 0.02);
        let cfg = SearcherConfig {
            kind: SearcherKind::Evolutionary,
            ..SearcherConfig::default()
        };
        let mut evo = Evolutionary::new(&space, &cfg, ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut history = Vec::new();
        let mut last = f64::NEG_INFINITY;
        for _ in 0..20 {
            for v in evo.propose(&ctx(&history), 5).unwrap().vectors {
                assert!(space.validate(&v).is_valid());
                history.push(evaluated(&space, &spec, v));
            }
            let pop = evo.population(&history);
            let top = score(&history[pop[0]].signals);
            assert!(top >= last);
            last = top;
        }
    }
}
