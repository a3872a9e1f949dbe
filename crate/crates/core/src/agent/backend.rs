//! Completion backends: a deterministic feedback-driven mock, transcript
//! replay, and a chat-completion HTTP client.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::prompt::{
    split_sections, Message, Role, Section, AVERAGE_REWARD_LABEL, CANDIDATE_LABEL, FEATURE_LABEL,
    TASK_METRIC_LABEL,
};
use super::{AgentConfig, AgentError};
use crate::parser::{parse_block, render_modules, PatternSet, ARCHITECTURE_PREFIX};
use crate::space::CompositeSpace;

pub const API_KEY_VAR: &str = "LACER_LLM_API_KEY";

pub trait LlmBackend: Send {
    fn complete(
        &mut self,
        messages: &[Message],
        config: &AgentConfig,
    ) -> Result<String, AgentError>;
}

/// One evaluated architecture as read back from a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub indices: Vec<usize>,
    pub task_metric: f64,
    pub average_reward: Option<f64>,
    pub failed: bool,
    /// Feature name to mutual information.
    pub features: BTreeMap<String, f64>,
}

/// What the mock reads from a prompt.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptDigest {
    pub requested: usize,
    pub initial_architecture: Option<Vec<usize>>,
    pub observations: Vec<Observation>,
}

fn requested_count(text: &str) -> Option<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Propose exactly (\d+)").unwrap())
        .captures(text)
        .and_then(|c| c[1].parse().ok())
}

fn number_after(line: &str, sep: &str) -> Option<f64> {
    line.split_once(sep)?
        .1
        .split_whitespace()
        .next()?
        .trim_end_matches(',')
        .parse()
        .ok()
}

/// Reads architecture lines followed by performance lines.
fn read_observation(
    text: &str,
    space: &CompositeSpace,
    patterns: &PatternSet,
) -> Option<Observation> {
    let mut arch = String::new();
    let mut perf = Vec::new();
    for line in text.lines() {
        if line.starts_with(TASK_METRIC_LABEL) || !perf.is_empty() {
            perf.push(line);
        } else {
            arch.push_str(line);
            arch.push('\n');
        }
    }
    let indices = space.indices_of(&parse_block(&arch, 0, space, patterns).0?)?;
    read_performance(&perf, indices)
}

fn read_performance(lines: &[&str], indices: Vec<usize>) -> Option<Observation> {
    let first = lines.first()?;
    let task_metric = number_after(first, "): ")?;
    let mut obs = Observation {
        indices,
        task_metric,
        average_reward: None,
        failed: first.contains("failed"),
        features: BTreeMap::new(),
    };
    for line in &lines[1..] {
        if line.starts_with(AVERAGE_REWARD_LABEL) {
            obs.average_reward = number_after(line, ": ");
        } else if let Some(rest) = line.strip_prefix(FEATURE_LABEL) {
            if let Some((name, _)) = rest.trim().split_once(':') {
                if let Some(mi) = number_after(line, "mutual information ") {
                    obs.features.insert(name.trim().to_string(), mi);
                }
            }
        }
    }
    Some(obs)
}

/// Extracts the request size, the initial architecture and every evaluated
/// architecture from the user messages.
pub fn digest_prompt(
    messages: &[Message],
    space: &CompositeSpace,
    patterns: &PatternSet,
) -> PromptDigest {
    let mut d = PromptDigest {
        requested: 1,
        ..PromptDigest::default()
    };
    for m in messages.iter().filter(|m| m.role == Role::User) {
        let sections = split_sections(&m.content);
        let mut initial_arch_text = None;
        for (section, body) in &sections {
            match section {
                Some(Section::Request) => {
                    if let Some(k) = requested_count(body) {
                        d.requested = k;
                    }
                }
                Some(Section::InitialArchitecture) => {
                    let v = parse_block(body, 0, space, patterns).0;
                    d.initial_architecture = v.and_then(|v| space.indices_of(&v));
                    initial_arch_text = Some(body.clone());
                }
                Some(Section::InitialPerformance) => {
                    if let Some(arch) = &initial_arch_text {
                        let text = format!("{arch}{body}");
                        d.observations
                            .extend(read_observation(&text, space, patterns));
                    }
                }
                Some(Section::PerformanceSignals) => {
                    for block in body.split(&format!("{CANDIDATE_LABEL} ")).skip(1) {
                        let rest = block.split_once('\n').map_or("", |(_, r)| r);
                        d.observations
                            .extend(read_observation(rest, space, patterns));
                    }
                }
                _ => {}
            }
        }
    }
    d
}

/// Deterministic stand-in for an LLM: reads the feedback in the prompt and
/// proposes mutations of the most promising architectures.
///
/// Bases are the best architecture by task metric and, when feature
/// information is present, a composite that takes each module from the
/// architecture with the highest feature information for that module.
/// Mutated values are drawn from a softmax over how well each value scored.
#[derive(Debug, Clone)]
pub struct MockLlm {
    space: CompositeSpace,
    patterns: PatternSet,
    seed: u64,
}

impl MockLlm {
    pub fn new(space: &CompositeSpace, seed: u64) -> Self {
        MockLlm {
            space: space.clone(),
            patterns: PatternSet::for_space(space),
            seed,
        }
    }

    fn rng_for(&self, messages: &[Message]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        for m in messages {
            h.update(m.role.to_string().as_bytes());
            h.update([0]);
            h.update(m.content.as_bytes());
            h.update([0]);
        }
        h.update(self.seed.to_le_bytes());
        let out = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&out[..32]);
        ChaCha8Rng::from_seed(seed)
    }

    /// Module-wise composite from feature information; `None` when the
    /// prompt carries none.
    fn feature_composite(&self, obs: &[&Observation], fallback: &[usize]) -> Option<Vec<usize>> {
        if obs.iter().all(|o| o.features.is_empty()) {
            return None;
        }
        let mut out = fallback.to_vec();
        for (mi, m) in self.space.modules().iter().enumerate() {
            let best = obs
                .iter()
                .filter_map(|o| o.features.get(&m.name).map(|fi| (o, *fi)))
                .fold(None::<(&&Observation, f64)>, |acc, (o, fi)| match acc {
                    Some((_, b)) if b >= fi => acc,
                    _ => Some((o, fi)),
                });
            if let Some((o, _)) = best {
                let r = self.space.module_range(mi);
                out[r.clone()].copy_from_slice(&o.indices[r]);
            }
        }
        Some(out)
    }

    /// Per choice, a sampling weight for every domain value.
    fn value_weights(&self, obs: &[&Observation], temperature: f64) -> Vec<Vec<f64>> {
        let scores: Vec<f64> = obs.iter().map(|o| o.task_metric).collect();
        let n = scores.len().max(1) as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        let tau = temperature.max(0.05);
        self.space
            .choices()
            .enumerate()
            .map(|(f, (_, c))| {
                (0..c.values.len())
                    .map(|i| {
                        let best = obs
                            .iter()
                            .filter(|o| o.indices[f] == i)
                            .map(|o| o.task_metric)
                            .fold(f64::NEG_INFINITY, f64::max);
                        // Unseen values get a mildly optimistic score.
                        let z = if best.is_finite() && sd > 0.0 {
                            (best - mean) / sd
                        } else {
                            0.5
                        };
                        (z / tau).exp()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn propose(&self, messages: &[Message], temperature: f64) -> Vec<Vec<usize>> {
        let mut rng = self.rng_for(messages);
        let d = digest_prompt(messages, &self.space, &self.patterns);
        let usable: Vec<&Observation> = d.observations.iter().filter(|o| !o.failed).collect();
        let best = usable
            .iter()
            .copied()
            .fold(None::<&Observation>, |acc, o| match acc {
                Some(b)
                    if (b.task_metric, b.average_reward.unwrap_or(0.0))
                        >= (o.task_metric, o.average_reward.unwrap_or(0.0)) =>
                {
                    Some(b)
                }
                _ => Some(o),
            })
            .map(|o| o.indices.clone())
            .or(d.initial_architecture.clone());
        let composite = best
            .as_ref()
            .and_then(|b| self.feature_composite(&usable, b));
        let weights = self.value_weights(&usable, temperature);
        let n = self.space.num_choices();
        let rate = (1.5 * temperature.max(0.1) / n as f64).min(1.0);
        let seen: Vec<&Vec<usize>> = d.observations.iter().map(|o| &o.indices).collect();
        let mut out: Vec<Vec<usize>> = Vec::with_capacity(d.requested);
        for _ in 0..d.requested {
            let base = match (&composite, &best) {
                (Some(c), _) if rng.random::<f64>() < 0.5 => c.clone(),
                (_, Some(b)) => b.clone(),
                _ => self.space.sample_indices(&mut rng),
            };
            let mut candidate = base.clone();
            for _attempt in 0..32 {
                candidate = base.clone();
                let forced = rng.random_range(0..n);
                for f in 0..n {
                    if f == forced || rng.random::<f64>() < rate {
                        candidate[f] = draw_other(&weights[f], base[f], &mut rng);
                    }
                }
                self.space.repair_indices(&mut candidate, &mut rng);
                if !seen.contains(&&candidate) && !out.contains(&candidate) {
                    break;
                }
            }
            out.push(candidate);
        }
        out
    }
}

fn draw_other<R: Rng>(weights: &[f64], current: usize, rng: &mut R) -> usize {
    let total: f64 = weights
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != current)
        .map(|(_, w)| w)
        .sum();
    if total <= 0.0 || !total.is_finite() {
        return current;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = current;
    for (i, &w) in weights.iter().enumerate() {
        if i == current {
            continue;
        }
        last = i;
        if u < w {
            return i;
        }
        u -= w;
    }
    last
}

impl LlmBackend for MockLlm {
    fn complete(
        &mut self,
        messages: &[Message],
        config: &AgentConfig,
    ) -> Result<String, AgentError> {
        if messages.is_empty() {
            return Err(AgentError::EmptyHistory);
        }
        let proposals = self.propose(messages, config.temperature);
        let mut text = format!(
            "Here are {} proposals based on the feedback so far.\n\n",
            proposals.len()
        );
        for (i, idx) in proposals.iter().enumerate() {
            let v = self.space.vector_from_indices(idx);
            text.push_str(&format!(
                "{ARCHITECTURE_PREFIX}\n{}\nProposal {} keeps the strongest modules and varies the rest.\n\n",
                render_modules(&v, &self.space),
                i + 1
            ));
        }
        Ok(text)
    }
}

#[derive(Debug, Deserialize)]
struct TranscriptLine {
    response: String,
}

/// Returns recorded responses in order.
#[derive(Debug, Clone)]
pub struct ReplayLlm {
    responses: Vec<String>,
    next: usize,
}

impl ReplayLlm {
    pub fn new(responses: Vec<String>) -> Self {
        ReplayLlm { responses, next: 0 }
    }

    /// JSON Lines, one `{"response": ...}` per line; blank lines skipped.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, AgentError> {
        let mut responses = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| AgentError::Transcript(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptLine = serde_json::from_str(&line)
                .map_err(|e| AgentError::Transcript(format!("line {}: {e}", i + 1)))?;
            responses.push(entry.response);
        }
        Ok(ReplayLlm::new(responses))
    }

    pub fn from_path(path: &Path) -> Result<Self, AgentError> {
        let f = std::fs::File::open(path)
            .map_err(|e| AgentError::Transcript(format!("{}: {e}", path.display())))?;
        Self::from_reader(std::io::BufReader::new(f))
    }
}

impl LlmBackend for ReplayLlm {
    fn complete(&mut self, _: &[Message], _: &AgentConfig) -> Result<String, AgentError> {
        let r = self
            .responses
            .get(self.next)
            .cloned()
            .ok_or(AgentError::TranscriptExhausted(self.responses.len()))?;
        self.next += 1;
        Ok(r)
    }
}

/// One chat-completion round trip per query.
#[derive(Debug, Clone)]
pub struct HttpLlm {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
}

impl HttpLlm {
    /// Reads the key from [`API_KEY_VAR`].
    pub fn from_env(endpoint: &str) -> Result<Self, AgentError> {
        let key = std::env::var(API_KEY_VAR)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or(AgentError::MissingApiKey)?;
        Self::new(endpoint, key)
    }

    pub fn new(endpoint: &str, api_key: String) -> Result<Self, AgentError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(300))
            .build()
            .map_err(|e| AgentError::Transport(e.to_string()))?;
        Ok(HttpLlm {
            client,
            endpoint: endpoint.to_string(),
            api_key,
        })
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: String,
}

impl LlmBackend for HttpLlm {
    fn complete(
        &mut self,
        messages: &[Message],
        config: &AgentConfig,
    ) -> Result<String, AgentError> {
        let body = serde_json::json!({
            "model": config.model_id,
            "temperature": config.temperature,
            "messages": messages,
        });
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| AgentError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(AgentError::Transport(format!("HTTP {status}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| AgentError::BadResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| AgentError::BadResponse("no choices".into()))
    }
}
