//! Turning free-form LLM responses into design vectors.
//!
//! A response holds one or more blocks introduced by [`ARCHITECTURE_PREFIX`].
//! Each block is tokenized, split into per-module sections by the module
//! names, and every choice is pulled out with a regex generated from the
//! space (`<choice keyword> <value>`). Values are taken literally: anything
//! outside the declared domain is reported, never snapped.

use std::ops::Range;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::space::{ChoiceKind, CompositeSpace, DesignVector, SpaceError, Value};

/// Marker the design agent is asked to put in front of every architecture.
pub const ARCHITECTURE_PREFIX: &str = "New Architecture";

const NUMBER_CLASS: &str = r"[0-9]+(?:\.[0-9]+)?";
const LABEL_CLASS: &str = r"[a-z][a-z0-9]*";

/// Splits `response` at every occurrence of `prefix`. Each block runs from
/// its prefix up to the next prefix or the end of the response.
pub fn extract_after_prefix<'a>(response: &'a str, prefix: &str) -> Vec<&'a str> {
    if prefix.is_empty() {
        return Vec::new();
    }
    let starts: Vec<usize> = response.match_indices(prefix).map(|(i, _)| i).collect();
    starts
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let end = starts.get(k + 1).copied().unwrap_or(response.len());
            &response[s..end]
        })
        .collect()
}

/// Lowercased identifier and number tokens. Whitespace, punctuation and
/// underscores separate tokens; decimals such as `0.1` stay whole.
pub fn tokenize(block: &str) -> Vec<String> {
    token_regex()
        .find_iter(block)
        .map(|m| m.as_str().to_ascii_lowercase())
        .collect()
}

fn token_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z][A-Za-z0-9]*|[0-9]+(?:\.[0-9]+)?").unwrap())
}

/// The regex for one design choice.
#[derive(Debug, Clone)]
pub struct ChoicePattern {
    pub module: String,
    pub choice: String,
    pub kind: ChoiceKind,
    pub regex: Regex,
}

impl ChoicePattern {
    pub fn path(&self) -> String {
        format!("{}.{}", self.module, self.choice)
    }
}

/// One pattern per choice, in canonical order.
#[derive(Debug, Clone)]
pub struct PatternSet {
    patterns: Vec<ChoicePattern>,
    modules: Vec<(String, Vec<String>)>,
}

impl PatternSet {
    /// Generates the patterns mechanically: the choice name's tokens as the
    /// keyword followed by a value token of the domain's class.
    pub fn for_space(space: &CompositeSpace) -> Self {
        let patterns = space
            .choices()
            .map(|(m, c)| {
                let keyword = tokenize(&c.name)
                    .iter()
                    .map(|t| regex::escape(t))
                    .collect::<Vec<_>>()
                    .join(" ");
                let class = match c.kind {
                    ChoiceKind::Ordinal => NUMBER_CLASS,
                    ChoiceKind::Categorical => LABEL_CLASS,
                };
                let regex = Regex::new(&format!(r"(?:^| ){keyword} ({class})(?: |$)"))
                    .expect("generated pattern");
                ChoicePattern {
                    module: m.name.clone(),
                    choice: c.name.clone(),
                    kind: c.kind,
                    regex,
                }
            })
            .collect();
        let modules = space
            .modules()
            .iter()
            .map(|m| (m.name.clone(), tokenize(&m.name)))
            .collect();
        PatternSet { patterns, modules }
    }

    pub fn patterns(&self) -> &[ChoicePattern] {
        &self.patterns
    }

    /// Token range of each module's section, keyed by module name.
    fn sections(&self, tokens: &[String]) -> Vec<(String, Option<Range<usize>>)> {
        let starts: Vec<Option<usize>> = self
            .modules
            .iter()
            .map(|(_, name)| find_seq(tokens, name))
            .collect();
        self.modules
            .iter()
            .zip(&starts)
            .map(|((name, name_tokens), start)| {
                let range = start.map(|s| {
                    let end = starts
                        .iter()
                        .flatten()
                        .copied()
                        .filter(|&o| o > s)
                        .min()
                        .unwrap_or(tokens.len());
                    (s + name_tokens.len())..end
                });
                (name.clone(), range)
            })
            .collect()
    }
}

fn find_seq(tokens: &[String], seq: &[String]) -> Option<usize> {
    if seq.is_empty() || seq.len() > tokens.len() {
        return None;
    }
    (0..=tokens.len() - seq.len()).find(|&i| tokens[i..i + seq.len()] == *seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStatus {
    Matched,
    Missing,
    OutOfDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// Index of the block in order of appearance.
    pub block: usize,
    pub path: String,
    pub status: MatchStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawParseResult {
    pub expected: usize,
    pub blocks: usize,
    pub vectors: Vec<DesignVector>,
    pub diagnostics: Vec<Diagnostic>,
}

impl RawParseResult {
    pub fn problems(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics
            .iter()
            .filter(|d| d.status != MatchStatus::Matched)
    }
}

/// Applies every pattern to one block of text. Returns the vector when all
/// choices matched an in-domain value, plus one diagnostic per choice.
/// Dependency rules are not checked here.
pub fn parse_block(
    block: &str,
    index: usize,
    space: &CompositeSpace,
    patterns: &PatternSet,
) -> (Option<DesignVector>, Vec<Diagnostic>) {
    let tokens = tokenize(block);
    let sections = patterns.sections(&tokens);
    let mut vector = DesignVector::default();
    let mut complete = true;
    let mut diagnostics = Vec::with_capacity(patterns.patterns.len());
    for p in &patterns.patterns {
        let range = sections
            .iter()
            .find(|(name, _)| *name == p.module)
            .and_then(|(_, r)| r.clone());
        let found = range.and_then(|r| {
            let joined = tokens[r].join(" ");
            p.regex
                .captures(&joined)
                .map(|c| c.get(1).expect("value group").as_str().to_string())
        });
        let spec = space
            .module(&p.module)
            .and_then(|m| m.choice(&p.choice))
            .expect("pattern set built from this space");
        let (status, text) = match found {
            None => (MatchStatus::Missing, None),
            Some(text) => {
                let value = match p.kind {
                    ChoiceKind::Ordinal => text.parse::<f64>().ok().map(Value::Number),
                    ChoiceKind::Categorical => Some(Value::Label(text.clone())),
                };
                match value.filter(|v| spec.index_of(v).is_some()) {
                    Some(v) => {
                        vector.set(&p.module, &p.choice, v);
                        (MatchStatus::Matched, Some(text))
                    }
                    None => (MatchStatus::OutOfDomain, Some(text)),
                }
            }
        };
        complete &= status == MatchStatus::Matched;
        diagnostics.push(Diagnostic {
            block: index,
            path: p.path(),
            status,
            text,
        });
    }
    (complete.then_some(vector), diagnostics)
}

/// Parses every prefixed block of `response`, in order of appearance.
pub fn parse_design_vectors(
    response: &str,
    space: &CompositeSpace,
    patterns: &PatternSet,
    expected_k: usize,
) -> RawParseResult {
    let blocks = extract_after_prefix(response, ARCHITECTURE_PREFIX);
    let mut vectors = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, block) in blocks.iter().enumerate() {
        let (v, d) = parse_block(block, i, space, patterns);
        vectors.extend(v);
        diagnostics.extend(d);
    }
    RawParseResult {
        expected: expected_k,
        blocks: blocks.len(),
        vectors,
        diagnostics,
    }
}

/// One line per module: `module: choice: value, choice: value`.
pub fn render_modules(v: &DesignVector, space: &CompositeSpace) -> String {
    let mut out = String::new();
    for m in space.modules() {
        let fields: Vec<String> = m
            .choices
            .iter()
            .map(|c| match v.get(&m.name, &c.name) {
                Some(val) => format!("{}: {}", c.name, val),
                None => format!("{}: ?", c.name),
            })
            .collect();
        out.push_str(&format!("{}: {}\n", m.name, fields.join(", ")));
    }
    out
}

/// The canonical prefixed block for a valid vector.
pub fn render_design_vector(
    v: &DesignVector,
    space: &CompositeSpace,
) -> Result<String, SpaceError> {
    let report = space.validate(v);
    if !report.is_valid() {
        return Err(SpaceError::InvalidVector(report.summary()));
    }
    Ok(format!(
        "{ARCHITECTURE_PREFIX}\n{}",
        render_modules(v, space)
    ))
}
