//! The search loop: propose a batch, evaluate it, record, feed back.
//!
//! Records are appended to `run.jsonl` and flushed one at a time, so an
//! interrupted run leaves a readable prefix. Wall time is kept out of the
//! record file (it would break byte-identical reruns) and written to
//! `timings.csv` instead.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::FeedbackFlags;
use crate::encoder::check_supported;
use crate::searchers::{
    budget_schedule, make_searcher, score, Evaluated, SearchContext, SearchError, SearcherConfig,
    SearcherKind,
};
use crate::signals::{write_trace_csv, SampleMatrix, SignalSet};
use crate::space::{builtin_space, load_space, CompositeSpace, DesignVector, SpaceError};
use crate::surrogate::{SurrogateSpec, DEFAULT_SIGMA};
use crate::toy_env::{train_and_evaluate, TrainError, TrainEvalBudget, TrainerConfig};

pub const RUN_FILE: &str = "run.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const BEST_FILE: &str = "best_so_far.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const TRACE_DIR: &str = "traces";

/// Best-so-far value before any candidate has succeeded.
pub const NO_SUCCESS: f64 = f64::NEG_INFINITY;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("{0} already exists; pass overwrite to replace it")]
    Exists(PathBuf),
    #[error("run stopped after {completed} of {budget} candidates: {reason}")]
    Incomplete {
        completed: usize,
        budget: usize,
        reason: String,
    },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("log is empty")]
    EmptyLog,
    #[error("runs differ in {0}")]
    Mismatch(String),
}

impl RunError {
    /// Configuration problems are detected before any evaluation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            RunError::Config(_) | RunError::Space(_) | RunError::Exists(_) | RunError::Mismatch(_)
        )
    }
}

/// A built-in space by id, or a space definition file by path.
pub fn resolve_space(id_or_path: &str) -> Result<CompositeSpace, RunError> {
    match builtin_space(id_or_path) {
        Ok(s) => Ok(s),
        Err(_) if Path::new(id_or_path).is_file() => {
            let text =
                fs::read_to_string(id_or_path).map_err(|e| io_err(Path::new(id_or_path), e))?;
            Ok(load_space(&text)?)
        }
        Err(e) => Err(e.into()),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalBackend {
    Surrogate,
    Microflow,
}

impl std::str::FromStr for EvalBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "surrogate" => Ok(EvalBackend::Surrogate),
            "microflow" => Ok(EvalBackend::Microflow),
            other => Err(format!("unknown evaluation backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// A built-in space id, or a path to a space JSON file.
    pub space_id: String,
    pub searcher: SearcherConfig,
    pub eval_backend: EvalBackend,
    pub budget: usize,
    pub seed: u64,
    pub feedback: FeedbackFlags,
    pub budgets: TrainEvalBudget,
    pub trainer: TrainerConfig,
    pub surrogate_sigma: f64,
    /// Write each MicroFlow candidate's evaluation traces under `traces/`.
    pub dump_traces: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(skip)]
    pub overwrite: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            space_id: "traffic".into(),
            searcher: SearcherConfig::default(),
            eval_backend: EvalBackend::Surrogate,
            budget: 50,
            seed: 0,
            feedback: FeedbackFlags::default(),
            budgets: TrainEvalBudget::default(),
            trainer: TrainerConfig::default(),
            surrogate_sigma: DEFAULT_SIGMA,
            dump_traces: false,
            out_dir: None,
            overwrite: false,
        }
    }
}

impl RunConfig {
    pub fn batch_size(&self) -> usize {
        self.searcher.batch_size
    }

    pub fn iterations(&self) -> usize {
        self.budget / self.batch_size().max(1)
    }

    pub fn run_id(&self) -> String {
        let kind = match self.searcher.kind {
            SearcherKind::Random => "random",
            SearcherKind::Local => "local",
            SearcherKind::Evolutionary => "evolutionary",
            SearcherKind::Llm => "llm",
        };
        format!(
            "{}-{}-k{}-s{}",
            self.space_id,
            kind,
            self.batch_size(),
            self.seed
        )
    }

    pub fn load_space(&self) -> Result<CompositeSpace, RunError> {
        resolve_space(&self.space_id)
    }

    /// Checks everything that can be checked without evaluating.
    pub fn validate(&self, space: &CompositeSpace) -> Result<(), RunError> {
        let k = self.batch_size();
        if k == 0 {
            return Err(RunError::Config("batch size must be at least 1".into()));
        }
        if self.budget == 0 {
            return Err(RunError::Config("budget must be at least 1".into()));
        }
        if !self.budget.is_multiple_of(k) {
            return Err(RunError::Config(format!(
                "budget not divisible by batch ({} % {k} != 0)",
                self.budget
            )));
        }
        if self.feedback.initial_evaluation && !space.has_defaults() {
            return Err(RunError::Config(
                "initial evaluation needs expert defaults in the space".into(),
            ));
        }
        if !(self.surrogate_sigma >= 0.0 && self.surrogate_sigma.is_finite()) {
            return Err(RunError::Config(
                "surrogate_sigma must be finite and >= 0".into(),
            ));
        }
        if self.eval_backend == EvalBackend::Microflow {
            check_supported(space).map_err(|e| RunError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// One evaluated candidate as persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub run_id: String,
    pub iteration: usize,
    pub index: usize,
    pub vector: DesignVector,
    pub signals: SignalSet,
    pub failed: bool,
    /// Set for the expert default evaluated first.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub expert: bool,
    /// Set when the searcher padded its batch with uniform samples.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub filled: bool,
    pub train_steps: usize,
    pub eval_seed: u64,
    /// Omitted from `run.jsonl`; see `timings.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: RunConfig,
    pub records: Vec<CandidateRecord>,
    pub best_so_far: Vec<f64>,
}

impl RunLog {
    pub fn iterations(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.iteration + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn final_best(&self) -> f64 {
        self.best_so_far.last().copied().unwrap_or(NO_SUCCESS)
    }
}

/// Prefix maximum of the task metric; failed candidates never raise it.
pub fn best_so_far(records: &[CandidateRecord]) -> Result<Vec<f64>, RunError> {
    if records.is_empty() {
        return Err(RunError::EmptyLog);
    }
    let mut best = NO_SUCCESS;
    Ok(records
        .iter()
        .map(|r| {
            if !r.failed {
                best = best.max(score(&r.signals));
            }
            best
        })
        .collect())
}

fn derive_eval_seed(seed: u64, iteration: usize, index: usize) -> u64 {
    use crate::splitmix64 as sm;
    sm(sm(seed ^ 0xe7a1) ^ sm(((iteration as u64) << 20) | index as u64))
}

struct Outcome {
    signals: SignalSet,
    traces: BTreeMap<String, SampleMatrix>,
    wall: f64,
}

enum Evaluator {
    Surrogate(SurrogateSpec),
    Microflow(TrainerConfig),
}

impl Evaluator {
    fn evaluate(
        &self,
        space: &CompositeSpace,
        v: &DesignVector,
        train_steps: usize,
        eval_seed: u64,
    ) -> Result<Outcome, String> {
        let t0 = Instant::now();
        let (signals, traces) = match self {
            Evaluator::Surrogate(spec) => (
                spec.evaluate(space, v, eval_seed)
                    .map_err(|e| e.to_string())?,
                BTreeMap::new(),
            ),
            Evaluator::Microflow(base) => {
                let mut cfg = *base;
                cfg.budget.train_steps = train_steps;
                let e = train_and_evaluate(space, v, &cfg, eval_seed)
                    .map_err(|e: TrainError| e.to_string())?;
                (e.signals, e.traces)
            }
        };
        Ok(Outcome {
            signals,
            traces,
            wall: t0.elapsed().as_secs_f64(),
        })
    }
}

/// Output files of one run.
struct Sink {
    dir: PathBuf,
    run: BufWriter<File>,
    timings: BufWriter<File>,
    transcript: Option<BufWriter<File>>,
}

impl Sink {
    fn create(dir: &Path, config: &RunConfig, llm: bool) -> Result<Self, RunError> {
        let run_path = dir.join(RUN_FILE);
        if run_path.exists() && !config.overwrite {
            return Err(RunError::Exists(run_path));
        }
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        let mut echo = config.clone();
        echo.out_dir = None;
        let text = serde_json::to_string_pretty(&echo).map_err(|e| io_err(&cfg_path, e))?;
        fs::write(&cfg_path, text + "\n").map_err(|e| io_err(&cfg_path, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p)
                .map(BufWriter::new)
                .map_err(|e| io_err(&p, e))
        };
        let mut timings = open(TIMINGS_FILE)?;
        writeln!(timings, "iteration,index,wall_time_s").map_err(|e| io_err(dir, e))?;
        Ok(Sink {
            dir: dir.to_path_buf(),
            run: open(RUN_FILE)?,
            timings,
            transcript: if llm {
                Some(open(TRANSCRIPT_FILE)?)
            } else {
                None
            },
        })
    }

    fn record(&mut self, r: &CandidateRecord, wall: f64) -> Result<(), RunError> {
        let mut line = serde_json::to_string(r).map_err(|e| io_err(&self.dir, e))?;
        line.push('\n');
        let path = self.dir.join(RUN_FILE);
        self.run
            .write_all(line.as_bytes())
            .and_then(|_| self.run.flush())
            .map_err(|e| io_err(&path, e))?;
        writeln!(self.timings, "{},{},{wall:.6}", r.iteration, r.index)
            .and_then(|_| self.timings.flush())
            .map_err(|e| io_err(&self.dir.join(TIMINGS_FILE), e))
    }

    fn responses(&mut self, iteration: usize, responses: &[String]) -> Result<(), RunError> {
        let Some(t) = self.transcript.as_mut() else {
            return Ok(());
        };
        for r in responses {
            let line = serde_json::json!({ "iteration": iteration, "response": r });
            writeln!(t, "{line}").map_err(|e| io_err(&self.dir, e))?;
        }
        t.flush().map_err(|e| io_err(&self.dir, e))
    }

    fn traces(
        &mut self,
        iteration: usize,
        index: usize,
        traces: &BTreeMap<String, SampleMatrix>,
    ) -> Result<(), RunError> {
        let dir = self.dir.join(TRACE_DIR);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let path = dir.join(format!("{iteration:03}-{index:02}.csv"));
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        write_trace_csv(BufWriter::new(f), traces).map_err(|e| io_err(&path, e))
    }

    fn finish(&mut self, best: &[f64]) -> Result<(), RunError> {
        let path = self.dir.join(BEST_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        w.write_record(["candidate_index", "best_metric"])
            .map_err(|e| io_err(&path, e))?;
        for (i, b) in best.iter().enumerate() {
            w.write_record([i.to_string(), b.to_string()])
                .map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))
    }
}

/// One batch position before evaluation.
struct Slot {
    vector: DesignVector,
    expert: bool,
    filled: bool,
}

/// Runs the whole search. With an output directory, every record is
/// persisted as soon as its batch completes, also when the run aborts.
pub fn run(config: &RunConfig) -> Result<RunLog, RunError> {
    let space = config.load_space()?;
    config.validate(&space)?;
    let k = config.batch_size();
    let flags = config.feedback;
    let mut searcher =
        make_searcher(&config.searcher, &space, flags, config.seed).map_err(|e| match e {
            SearchError::Space(s) => RunError::Space(s),
            other => RunError::Config(other.to_string()),
        })?;
    let evaluator = match config.eval_backend {
        EvalBackend::Surrogate => Evaluator::Surrogate(SurrogateSpec::new(
            &space,
            config.seed,
            config.surrogate_sigma,
        )),
        EvalBackend::Microflow => {
            let mut t = config.trainer;
            t.budget = config.budgets;
            Evaluator::Microflow(t)
        }
    };
    let mut sink = match &config.out_dir {
        Some(dir) => Some(Sink::create(
            dir,
            config,
            config.searcher.kind == SearcherKind::Llm,
        )?),
        None => None,
    };
    let mut state = LoopState {
        run_id: config.run_id(),
        seed: config.seed,
        dump_traces: config.dump_traces,
        records: Vec::with_capacity(config.budget),
        history: Vec::with_capacity(config.budget),
        previous: Vec::new(),
        initial: None,
    };
    let iterations = config.iterations();
    let result = (0..iterations).try_for_each(|iteration| {
        let train_steps = budget_schedule(
            config.searcher.budget_schedule,
            iteration,
            iterations,
            config.budgets.train_steps,
        );
        let mut slots = Vec::with_capacity(k);
        if iteration == 0 && flags.initial_evaluation {
            slots.push(Slot {
                vector: space.expert_default()?,
                expert: true,
                filled: false,
            });
            // The agent's first prompt shows the expert's signals, so the
            // expert is evaluated and recorded before anything is proposed.
            let outcomes = evaluate_batch(
                &evaluator,
                &space,
                &slots,
                iteration,
                0,
                train_steps,
                config.seed,
            );
            state.commit(iteration, 0, &slots, outcomes, train_steps, sink.as_mut())?;
            slots.clear();
        }
        let offset = state.records.len() - iteration * k;
        let wanted = k - offset;
        if wanted == 0 {
            return Ok(());
        }
        let ctx = SearchContext {
            history: &state.history,
            previous: &state.previous,
            initial: state.initial.as_ref(),
            iteration,
        };
        let proposal = searcher
            .propose(&ctx, wanted)
            .map_err(|e| RunError::Incomplete {
                completed: state.records.len(),
                budget: config.budget,
                reason: e.to_string(),
            })?;
        if let Some(s) = sink.as_mut() {
            s.responses(iteration, &proposal.responses)?;
        }
        let first_fill = proposal.vectors.len() - proposal.filled;
        slots.extend(
            proposal
                .vectors
                .into_iter()
                .enumerate()
                .map(|(i, vector)| Slot {
                    vector,
                    expert: false,
                    filled: i >= first_fill,
                }),
        );
        let outcomes = evaluate_batch(
            &evaluator,
            &space,
            &slots,
            iteration,
            offset,
            train_steps,
            config.seed,
        );
        if offset == 0 {
            state.previous.clear();
        }
        state.commit(
            iteration,
            offset,
            &slots,
            outcomes,
            train_steps,
            sink.as_mut(),
        )
    });
    let best = if state.records.is_empty() {
        Vec::new()
    } else {
        best_so_far(&state.records)?
    };
    if let Some(s) = sink.as_mut() {
        if !best.is_empty() {
            s.finish(&best)?;
        }
    }
    match result {
        Ok(()) => Ok(RunLog {
            config: config.clone(),
            records: state.records,
            best_so_far: best,
        }),
        Err(RunError::Incomplete { reason, .. }) => Err(RunError::Incomplete {
            completed: state.records.len(),
            budget: config.budget,
            reason,
        }),
        Err(e) => Err(e),
    }
}

/// Evaluates every slot concurrently; results come back in slot order.
fn evaluate_batch(
    evaluator: &Evaluator,
    space: &CompositeSpace,
    slots: &[Slot],
    iteration: usize,
    offset: usize,
    train_steps: usize,
    seed: u64,
) -> Vec<Result<Outcome, String>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = slots
            .iter()
            .enumerate()
            .map(|(j, slot)| {
                let eval_seed = derive_eval_seed(seed, iteration, offset + j);
                scope.spawn(move || evaluator.evaluate(space, &slot.vector, train_steps, eval_seed))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err("evaluation panicked".into()))
            })
            .collect()
    })
}

struct LoopState {
    run_id: String,
    seed: u64,
    dump_traces: bool,
    records: Vec<CandidateRecord>,
    history: Vec<Evaluated>,
    /// Non-expert candidates of the latest batch.
    previous: Vec<Evaluated>,
    initial: Option<Evaluated>,
}

impl LoopState {
    /// Records outcomes in slot order, stopping at the first failure.
    fn commit(
        &mut self,
        iteration: usize,
        offset: usize,
        slots: &[Slot],
        outcomes: Vec<Result<Outcome, String>>,
        train_steps: usize,
        mut sink: Option<&mut Sink>,
    ) -> Result<(), RunError> {
        for (j, (slot, outcome)) in slots.iter().zip(outcomes).enumerate() {
            let outcome = outcome.map_err(|reason| RunError::Incomplete {
                completed: self.records.len(),
                budget: 0,
                reason,
            })?;
            let index = offset + j;
            let record = CandidateRecord {
                run_id: self.run_id.clone(),
                iteration,
                index,
                vector: slot.vector.clone(),
                signals: outcome.signals.clone(),
                failed: outcome.signals.failed,
                expert: slot.expert,
                filled: slot.filled,
                train_steps,
                eval_seed: derive_eval_seed(self.seed, iteration, index),
                wall_time_s: None,
            };
            if let Some(s) = sink.as_deref_mut() {
                s.record(&record, outcome.wall)?;
                if self.dump_traces && !outcome.traces.is_empty() {
                    s.traces(iteration, index, &outcome.traces)?;
                }
            }
            let e = Evaluated {
                vector: slot.vector.clone(),
                signals: outcome.signals,
            };
            if slot.expert {
                self.initial = Some(e.clone());
            } else {
                self.previous.push(e.clone());
            }
            self.history.push(e);
            self.records.push(record);
        }
        Ok(())
    }
}

/// Reads a run directory. A torn final line from an interrupted run is
/// ignored; earlier malformed lines are errors.
pub fn load_run(dir: &Path) -> Result<RunLog, RunError> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| io_err(&cfg_path, e))?;
    let mut config: RunConfig = serde_json::from_str(&text).map_err(|e| io_err(&cfg_path, e))?;
    config.out_dir = Some(dir.to_path_buf());
    let run_path = dir.join(RUN_FILE);
    let f = File::open(&run_path).map_err(|e| io_err(&run_path, e))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| io_err(&run_path, e))?;
    let mut records = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CandidateRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(io_err(&run_path, format!("line {}: {e}", i + 1))),
        }
    }
    let best_so_far = best_so_far(&records)?;
    Ok(RunLog {
        config,
        records,
        best_so_far,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub candidate_index: usize,
    pub mean_best: f64,
    pub two_se: f64,
}

/// Mean best-so-far per candidate index with twice the standard error
/// across runs. Runs must share their configuration up to the seed.
pub fn aggregate(logs: &[RunLog]) -> Result<Vec<SummaryRow>, RunError> {
    let first = logs.first().ok_or(RunError::EmptyLog)?;
    let normalize = |c: &RunConfig| {
        let mut c = c.clone();
        c.seed = 0;
        c.out_dir = None;
        c
    };
    let reference = normalize(&first.config);
    for log in &logs[1..] {
        let c = normalize(&log.config);
        if c.space_id != reference.space_id {
            return Err(RunError::Mismatch("space".into()));
        }
        if c != reference {
            return Err(RunError::Mismatch("configuration".into()));
        }
        if log.best_so_far.len() != first.best_so_far.len() {
            return Err(RunError::Mismatch("candidate count".into()));
        }
    }
    let n = logs.len() as f64;
    Ok((0..first.best_so_far.len())
        .map(|i| {
            let xs: Vec<f64> = logs.iter().map(|l| l.best_so_far[i]).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let se = if logs.len() > 1 {
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                candidate_index: i,
                mean_best: mean,
                two_se: 2.0 * se,
            }
        })
        .collect())
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(metric: f64, failed: bool) -> CandidateRecord {
        let space = builtin_space("traffic").unwrap();
        CandidateRecord {
            run_id: "t".into(),
            iteration: 0,
            index: 0,
            vector: space.expert_default().unwrap(),
            signals: if failed {
                SignalSet::failed()
            } else {
                SignalSet::new(metric, 0.0, Default::default())
            },
            failed,
            expert: false,
            filled: false,
            train_steps: 0,
            eval_seed: 0,
            wall_time_s: None,
        }
    }

    fn surrogate(kind: SearcherKind, k: usize, seed: u64) -> RunConfig {
        RunConfig {
            searcher: SearcherConfig {
                kind,
                batch_size: k,
                ..SearcherConfig::default()
            },
            seed,
            ..RunConfig::default()
        }
    }

    #[test]
    fn prefix_max_examples() {
        let s = best_so_far(&[record(1.0, false), record(3.0, false), record(2.0, false)]).unwrap();
        assert_eq!(s, [1.0, 3.0, 3.0]);
        let s = best_so_far(&[record(0.0, true), record(0.0, true)]).unwrap();
        assert_eq!(s, [NO_SUCCESS, NO_SUCCESS]);
        assert_eq!(best_so_far(&[record(0.7, false)]).unwrap(), [0.7]);
        assert!(matches!(best_so_far(&[]), Err(RunError::EmptyLog)));
        let s = best_so_far(&[record(-1.0, false), record(5.0, true)]).unwrap();
        assert_eq!(s, [-1.0, -1.0]);
    }

    #[test]
    fn batch_accounting() {
        for (k, iters) in [(5, 10), (1, 50)] {
            let log = run(&surrogate(SearcherKind::Llm, k, 3)).unwrap();
            assert_eq!(log.records.len(), 50);
            assert_eq!(log.iterations(), iters);
            assert!(log.records[0].expert);
            assert_eq!(log.records.iter().filter(|r| r.expert).count(), 1);
        }
    }

    #[test]
    fn indivisible_budget_is_a_config_error() {
        let err = run(&surrogate(SearcherKind::Random, 3, 0)).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("budget not divisible by batch"));
    }

    #[test]
    fn minigrid_on_microflow_is_rejected() {
        let cfg = RunConfig {
            space_id: "minigrid".into(),
            eval_backend: EvalBackend::Microflow,
            ..RunConfig::default()
        };
        assert!(run(&cfg).unwrap_err().is_config());
    }

    #[test]
    fn aggregate_closed_form() {
        let mut a = run(&surrogate(SearcherKind::Random, 1, 1)).unwrap();
        let mut b = a.clone();
        b.config.seed = 2;
        a.best_so_far = vec![1.0; 50];
        b.best_so_far = vec![3.0; 50];
        let rows = aggregate(&[a.clone(), b]).unwrap();
        assert_eq!(rows.len(), 50);
        assert!((rows[7].mean_best - 2.0).abs() < 1e-12);
        assert!((rows[7].two_se - 2.0).abs() < 1e-12);
        let same = aggregate(&vec![a.clone(); 8]).unwrap();
        assert!(same.iter().all(|r| r.two_se == 0.0));
        let mut c = a.clone();
        c.config.space_id = "minigrid".into();
        assert!(matches!(aggregate(&[a, c]), Err(RunError::Mismatch(_))));
    }

    #[test]
    fn persisted_run_reloads_and_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = surrogate(SearcherKind::Llm, 5, 4);
        cfg.out_dir = Some(dir.path().join("r"));
        let log = run(&cfg).unwrap();
        let back = load_run(&dir.path().join("r")).unwrap();
        assert_eq!(back.records, log.records);
        assert_eq!(back.best_so_far, log.best_so_far);
        assert!(matches!(run(&cfg), Err(RunError::Exists(_))));
        cfg.overwrite = true;
        assert!(run(&cfg).is_ok());
    }

    #[test]
    fn torn_last_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = surrogate(SearcherKind::Random, 1, 4);
        cfg.budget = 5;
        cfg.out_dir = Some(dir.path().to_path_buf());
        run(&cfg).unwrap();
        let p = dir.path().join(RUN_FILE);
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, &text[..text.len() - 20]).unwrap();
        assert_eq!(load_run(dir.path()).unwrap().records.len(), 4);
    }

    #[test]
    fn exhausted_transcript_aborts_with_persisted_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let transcript = dir.path().join("t.jsonl");
        fs::write(&transcript, "").unwrap();
        let mut cfg = surrogate(SearcherKind::Llm, 5, 1);
        cfg.searcher.agent.backend = crate::agent::BackendKind::Replay;
        cfg.searcher.agent.transcript = Some(transcript);
        cfg.out_dir = Some(dir.path().join("r"));
        match run(&cfg) {
            Err(RunError::Incomplete {
                completed, budget, ..
            }) => {
                assert_eq!((completed, budget), (1, 50));
            }
            other => panic!("{other:?}"),
        }
        let partial = load_run(&dir.path().join("r")).unwrap();
        assert_eq!(partial.records.len(), 1);
        assert!(partial.records[0].expert);
    }

    #[test]
    fn traces_are_dumped_for_microflow() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            eval_backend: EvalBackend::Microflow,
            budget: 1,
            dump_traces: true,
            budgets: TrainEvalBudget {
                train_steps: 0,
                eval_steps: 300,
                episode_length: 100,
            },
            out_dir: Some(dir.path().to_path_buf()),
            ..RunConfig::default()
        };
        let log = run(&cfg).unwrap();
        let f = File::open(dir.path().join(TRACE_DIR).join("000-00.csv")).unwrap();
        let traces = crate::signals::read_trace_csv(f).unwrap();
        let pairs = crate::signals::feature_pairs(&cfg.load_space().unwrap());
        let info = crate::signals::collect_feature_info(&traces, &pairs, 8).unwrap();
        assert_eq!(info, log.records[0].signals.feature_info);
    }
}
