//! Feedback signals: task metric, average reward and feature information.
//!
//! Feature information is estimated with plug-in histogram entropies over
//! equal-frequency bins. Vector-valued features are handled column by column:
//! the reported quantity is the mean over every `(x column, y column)` pair.
//!
//! Mutual information is computed as `H(X) - H(X|Y)` and redundancy as
//! `H(X) + H(Y) - H(X,Y)`. The two are algebraically the same quantity; they
//! are kept as separate code paths and their agreement is tested.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::CompositeSpace;

pub const DEFAULT_BINS: usize = 8;
/// Number of post-training forward passes recorded for feature information.
pub const TRACE_SAMPLES: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("non-finite value in column {column}")]
    NonFinite { column: usize },
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("entropy of an empty sequence")]
    Empty,
    #[error("sample count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("missing trace `{0}`")]
    MissingTrace(String),
    #[error("matrix shape: {0}")]
    Shape(String),
}

/// Row-major `rows x cols` matrix of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, SignalError> {
        if data.len() != rows * cols {
            return Err(SignalError::Shape(format!(
                "{} values for {rows}x{cols}",
                data.len()
            )));
        }
        if rows < 2 {
            return Err(SignalError::Shape(format!("need n >= 2 rows, got {rows}")));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(SignalError::NonFinite {
                column: i % cols.max(1),
            });
        }
        Ok(SampleMatrix { rows, cols, data })
    }

    /// Builds a matrix from equally long row vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, SignalError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SignalError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols + j])
            .collect()
    }
}

/// Column-major symbols produced by [`discretize`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolMatrix {
    pub columns: Vec<Vec<usize>>,
}

impl SymbolMatrix {
    pub fn from_columns(columns: Vec<Vec<usize>>) -> Self {
        SymbolMatrix { columns }
    }

    pub fn single(column: Vec<usize>) -> Self {
        SymbolMatrix {
            columns: vec![column],
        }
    }

    pub fn samples(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }
}

/// Maps every column to `bins` equal-frequency bins.
///
/// Edges are the column's own quantiles; a value's bin is the number of edges
/// strictly below it, so tied values always share a bin and a constant column
/// lands entirely in bin 0.
pub fn discretize(m: &SampleMatrix, bins: usize) -> Result<SymbolMatrix, SignalError> {
    if bins < 2 {
        return Err(SignalError::TooFewBins(bins));
    }
    let n = m.rows;
    let mut columns = Vec::with_capacity(m.cols);
    for j in 0..m.cols {
        let col = m.column(j);
        if col.iter().any(|x| !x.is_finite()) {
            return Err(SignalError::NonFinite { column: j });
        }
        let mut sorted = col.clone();
        sorted.sort_by(f64::total_cmp);
        let edges: Vec<f64> = (1..bins)
            .map(|k| {
                // ceil(k n / B) - 1, the last rank that belongs below edge k.
                let r = (k * n).div_ceil(bins).saturating_sub(1);
                sorted[r.min(n - 1)]
            })
            .collect();
        columns.push(
            col.iter()
                .map(|&x| edges.partition_point(|&e| e < x))
                .collect(),
        );
    }
    Ok(SymbolMatrix { columns })
}

/// Entropy in bits of a list of counts, summed in a fixed order so that the
/// result depends only on the multiset of counts.
fn entropy_of_counts(mut counts: Vec<usize>, n: usize) -> f64 {
    counts.retain(|&c| c > 0);
    counts.sort_unstable();
    let n = n as f64;
    -counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

fn counts(symbols: &[usize]) -> Vec<usize> {
    let max = symbols.iter().copied().max().unwrap_or(0);
    let mut c = vec![0usize; max + 1];
    for &s in symbols {
        c[s] += 1;
    }
    c
}

fn joint_counts(x: &[usize], y: &[usize]) -> Vec<usize> {
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&a, &b) in x.iter().zip(y) {
        *table.entry((a, b)).or_default() += 1;
    }
    table.into_values().collect()
}

/// Plug-in entropy estimate in bits.
pub fn entropy(symbols: &[usize]) -> Result<f64, SignalError> {
    if symbols.is_empty() {
        return Err(SignalError::Empty);
    }
    Ok(entropy_of_counts(counts(symbols), symbols.len()))
}

/// Plug-in `H(X|Y) = sum_y p(y) H(X | Y = y)`.
fn conditional_entropy(x: &[usize], y: &[usize]) -> f64 {
    let n = x.len() as f64;
    let mut by_y: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&a, &b) in x.iter().zip(y) {
        by_y.entry(b).or_default().push(a);
    }
    let mut terms: Vec<f64> = by_y
        .values()
        .map(|xs| xs.len() as f64 / n * entropy_of_counts(counts(xs), xs.len()))
        .collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn pair_mi(x: &[usize], y: &[usize]) -> f64 {
    let hx = entropy_of_counts(counts(x), x.len());
    let hy = entropy_of_counts(counts(y), y.len());
    let forward = hx - conditional_entropy(x, y);
    let backward = hy - conditional_entropy(y, x);
    // The two directions agree analytically; averaging them makes the
    // estimate exactly symmetric in floating point.
    0.5 * (forward + backward)
}

fn pair_redundancy(x: &[usize], y: &[usize]) -> f64 {
    let hx = entropy_of_counts(counts(x), x.len());
    let hy = entropy_of_counts(counts(y), y.len());
    let hxy = entropy_of_counts(joint_counts(x, y), x.len());
    hx + hy - hxy
}

fn pairwise_mean(
    x: &SymbolMatrix,
    y: &SymbolMatrix,
    f: impl Fn(&[usize], &[usize]) -> f64,
) -> Result<f64, SignalError> {
    let (nx, ny) = (x.samples(), y.samples());
    if x.columns.iter().chain(&y.columns).any(|c| c.len() != nx) || nx != ny {
        return Err(SignalError::LengthMismatch(nx, ny));
    }
    if nx == 0 || x.columns.is_empty() || y.columns.is_empty() {
        return Err(SignalError::Empty);
    }
    let mut values: Vec<f64> = Vec::with_capacity(x.columns.len() * y.columns.len());
    for xi in &x.columns {
        for yj in &y.columns {
            values.push(f(xi, yj));
        }
    }
    // Sorting before summation makes the mean independent of argument order.
    values.sort_by(f64::total_cmp);
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean pairwise mutual information `H(X) - H(X|Y)` in bits, clamped at 0.
pub fn mutual_information(x: &SymbolMatrix, y: &SymbolMatrix) -> Result<f64, SignalError> {
    Ok(pairwise_mean(x, y, pair_mi)?.max(0.0))
}

/// Mean pairwise redundancy `H(X) + H(Y) - H(X,Y)` in bits, clamped at 0.
pub fn redundancy(x: &SymbolMatrix, y: &SymbolMatrix) -> Result<f64, SignalError> {
    Ok(pairwise_mean(x, y, pair_redundancy)?.max(0.0))
}

/// Two trace keys whose dependence is reported to the design agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturePairSpec {
    pub name: String,
    pub x_source: String,
    pub y_source: String,
}

impl FeaturePairSpec {
    pub fn new(name: impl Into<String>, x: impl Into<String>, y: impl Into<String>) -> Self {
        FeaturePairSpec {
            name: name.into(),
            x_source: x.into(),
            y_source: y.into(),
        }
    }
}

pub const FUSED_TRACE: &str = "fused";

pub fn input_trace(module: &str) -> String {
    format!("{module}.input")
}

pub fn output_trace(module: &str) -> String {
    format!("{module}.output")
}

/// Feature pairs of a composite encoder: each source module's input against
/// its output, then each source module's output against the fused state.
/// The fusion module is the one whose family is `fusion`.
pub fn feature_pairs(space: &CompositeSpace) -> Vec<FeaturePairSpec> {
    let sources: Vec<&str> = space
        .modules()
        .iter()
        .filter(|m| m.family != "fusion")
        .map(|m| m.name.as_str())
        .collect();
    let mut pairs: Vec<FeaturePairSpec> = sources
        .iter()
        .map(|m| FeaturePairSpec::new(*m, input_trace(m), output_trace(m)))
        .collect();
    pairs.extend(
        sources
            .iter()
            .map(|m| FeaturePairSpec::new(format!("{m}-fused"), output_trace(m), FUSED_TRACE)),
    );
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub name: String,
    pub mutual_information: f64,
    pub redundancy: f64,
}

/// Feature information, one entry per declared pair, in declaration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureInfo {
    pub entries: Vec<FeatureEntry>,
}

impl FeatureInfo {
    pub fn get(&self, name: &str) -> Option<&FeatureEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One candidate's evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSet {
    pub task_metric: f64,
    pub average_reward: f64,
    #[serde(default)]
    pub feature_info: FeatureInfo,
    /// Set when training diverged; the task metric is then the sentinel 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
}

impl SignalSet {
    pub fn new(task_metric: f64, average_reward: f64, feature_info: FeatureInfo) -> Self {
        SignalSet {
            task_metric,
            average_reward,
            feature_info,
            failed: false,
        }
    }

    pub fn failed() -> Self {
        SignalSet {
            task_metric: FAILED_METRIC,
            average_reward: 0.0,
            feature_info: FeatureInfo::default(),
            failed: true,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.task_metric.is_finite()
            && self.average_reward.is_finite()
            && self
                .feature_info
                .entries
                .iter()
                .all(|e| e.mutual_information.is_finite() && e.redundancy.is_finite())
    }
}

/// Task metric recorded for candidates whose training failed.
pub const FAILED_METRIC: f64 = 0.0;

/// Discretizes the traces and estimates `{MI, redundancy}` for every pair.
pub fn collect_feature_info(
    traces: &BTreeMap<String, SampleMatrix>,
    pairs: &[FeaturePairSpec],
    bins: usize,
) -> Result<FeatureInfo, SignalError> {
    let mut n = None;
    for p in pairs {
        for key in [&p.x_source, &p.y_source] {
            let m = traces
                .get(key)
                .ok_or_else(|| SignalError::MissingTrace(key.clone()))?;
            match n {
                None => n = Some(m.rows()),
                Some(rows) if rows != m.rows() => {
                    return Err(SignalError::LengthMismatch(rows, m.rows()))
                }
                _ => {}
            }
        }
    }
    let mut symbols: BTreeMap<&str, SymbolMatrix> = BTreeMap::new();
    let mut entries = Vec::with_capacity(pairs.len());
    for p in pairs {
        for key in [&p.x_source, &p.y_source] {
            if !symbols.contains_key(key.as_str()) {
                symbols.insert(key, discretize(&traces[key], bins)?);
            }
        }
        let (x, y) = (&symbols[p.x_source.as_str()], &symbols[p.y_source.as_str()]);
        entries.push(FeatureEntry {
            name: p.name.clone(),
            mutual_information: mutual_information(x, y)?,
            redundancy: redundancy(x, y)?,
        });
    }
    Ok(FeatureInfo { entries })
}

/// Reads traces from CSV. Header cells are `<trace key>[<column>]`; rows are
/// samples. Columns of one key are ordered by their index.
pub fn read_trace_csv<R: std::io::Read>(
    reader: R,
) -> Result<BTreeMap<String, SampleMatrix>, SignalError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| SignalError::Shape(e.to_string()))?
        .clone();
    let mut layout: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (pos, h) in headers.iter().enumerate() {
        let (key, idx) =
            split_header(h).ok_or_else(|| SignalError::Shape(format!("bad trace header `{h}`")))?;
        layout.entry(key.to_string()).or_default().push((idx, pos));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| SignalError::Shape(e.to_string()))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, s)| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| SignalError::NonFinite { column: j })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    let mut out = BTreeMap::new();
    for (key, mut cols) in layout {
        cols.sort();
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|r| cols.iter().map(move |&(_, pos)| r[pos]))
            .collect();
        out.insert(key, SampleMatrix::new(rows.len(), cols.len(), data)?);
    }
    Ok(out)
}

/// Writes traces in the layout [`read_trace_csv`] expects.
pub fn write_trace_csv<W: std::io::Write>(
    writer: W,
    traces: &BTreeMap<String, SampleMatrix>,
) -> Result<(), SignalError> {
    let io = |e: csv::Error| SignalError::Shape(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> = traces
        .iter()
        .flat_map(|(k, m)| (0..m.cols()).map(move |j| format!("{k}[{j}]")))
        .collect();
    w.write_record(&header).map_err(io)?;
    let n = traces.values().next().map_or(0, SampleMatrix::rows);
    for i in 0..n {
        let row: Vec<String> = traces
            .values()
            .flat_map(|m| (0..m.cols()).map(move |j| format!("{}", m.data[i * m.cols + j])))
            .collect();
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| SignalError::Shape(e.to_string()))?;
    Ok(())
}

fn split_header(h: &str) -> Option<(&str, usize)> {
    let h = h.trim();
    let open = h.rfind('[')?;
    let idx = h[open + 1..].strip_suffix(']')?.parse().ok()?;
    Some((&h[..open], idx))
}
