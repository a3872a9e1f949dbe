//! Messages, conversation history, prompt assembly and pruning.
//!
//! User messages are made of `### <header>` sections. The header decides
//! whether a section survives pruning: task description, search space,
//! initial architecture and every performance section are kept, requests
//! and untagged text are dropped. Assistant messages are reduced to their
//! prefixed architecture blocks.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::parser::{extract_after_prefix, render_modules, ARCHITECTURE_PREFIX};
use crate::signals::SignalSet;
use crate::space::{ChoiceKind, CompositeSpace, DesignVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Result<Self, AgentError> {
        let content = content.into();
        if content.trim().is_empty() {
            return Err(AgentError::EmptyMessage(role));
        }
        Ok(Message { role, content })
    }
}

/// Section headers of user messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    TaskDescription,
    SearchSpace,
    InitialArchitecture,
    InitialPerformance,
    PerformanceSignals,
    Request,
}

impl Section {
    pub const ALL: [Section; 6] = [
        Section::TaskDescription,
        Section::SearchSpace,
        Section::InitialArchitecture,
        Section::InitialPerformance,
        Section::PerformanceSignals,
        Section::Request,
    ];

    pub fn header(self) -> &'static str {
        match self {
            Section::TaskDescription => "Task description",
            Section::SearchSpace => "Search space",
            Section::InitialArchitecture => "Initial architecture",
            Section::InitialPerformance => "Initial performance",
            Section::PerformanceSignals => "Performance signals",
            Section::Request => "Request",
        }
    }

    pub fn from_header(h: &str) -> Option<Section> {
        Section::ALL.into_iter().find(|s| s.header() == h)
    }

    /// Whether pruning keeps this section.
    pub fn retained(self) -> bool {
        self != Section::Request
    }
}

const HEADER_MARK: &str = "### ";

pub fn render_section(section: Section, body: &str) -> String {
    format!("{HEADER_MARK}{}\n{}\n", section.header(), body.trim_end())
}

/// Splits a user message into tagged sections. Text before the first header
/// or under an unknown header comes back with `None`.
pub fn split_sections(content: &str) -> Vec<(Option<Section>, String)> {
    let mut out: Vec<(Option<Section>, String)> = Vec::new();
    let mut current: Option<(Option<Section>, String)> = None;
    for line in content.lines() {
        if let Some(h) = line.strip_prefix(HEADER_MARK) {
            out.extend(current.take());
            current = Some((Section::from_header(h.trim()), String::new()));
            continue;
        }
        let slot = current.get_or_insert((None, String::new()));
        slot.1.push_str(line);
        slot.1.push('\n');
    }
    out.extend(current);
    out.retain(|(s, body)| s.is_some() || !body.trim().is_empty());
    out
}

/// Which feedback signals reach the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackFlags {
    pub feature_info: bool,
    pub average_reward: bool,
    pub initial_evaluation: bool,
}

impl Default for FeedbackFlags {
    fn default() -> Self {
        FeedbackFlags {
            feature_info: true,
            average_reward: true,
            initial_evaluation: true,
        }
    }
}

impl FeedbackFlags {
    /// Feedback reduced to the task metric alone.
    pub fn metric_only() -> Self {
        FeedbackFlags {
            feature_info: false,
            average_reward: false,
            initial_evaluation: false,
        }
    }
}

pub const TASK_METRIC_LABEL: &str = "task metric";
pub const AVERAGE_REWARD_LABEL: &str = "average reward";
pub const FEATURE_LABEL: &str = "feature information";
pub const CANDIDATE_LABEL: &str = "Candidate";

/// Labeled lines for one evaluation, values to three decimals.
pub fn render_performance(s: &SignalSet, metric_name: &str, flags: FeedbackFlags) -> String {
    let mut out = format!("{TASK_METRIC_LABEL} ({metric_name}): {:.3}", s.task_metric);
    if s.failed {
        out.push_str(" (training failed)");
    }
    out.push('\n');
    if flags.average_reward {
        out.push_str(&format!(
            "{AVERAGE_REWARD_LABEL}: {:.3}\n",
            s.average_reward
        ));
    }
    if flags.feature_info {
        for e in &s.feature_info.entries {
            out.push_str(&format!(
                "{FEATURE_LABEL} {}: mutual information {:.3}, redundancy {:.3}\n",
                e.name, e.mutual_information, e.redundancy
            ));
        }
    }
    out
}

pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a neural architecture design agent. You design \
composite state encoders for reinforcement learning agents: one encoder module per input source \
and a fusion module that merges their outputs into the state. Answer with complete \
architectures in the requested format and use only values from the search space.";

/// Everything the first prompt is made of.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParts {
    pub system_prompt: String,
    pub task_description: String,
    pub search_space_text: String,
    pub request: String,
    pub initial_architecture: Option<DesignVector>,
    /// Omitted when the initial evaluation is disabled.
    pub initial_performance: Option<SignalSet>,
}

pub fn default_task_description(space: &CompositeSpace) -> String {
    let modules: Vec<String> = space
        .modules()
        .iter()
        .map(|m| format!("{} ({})", m.name, m.family))
        .collect();
    format!(
        "Design a composite state encoder for the `{}` benchmark. Modules: {}. Every candidate \
is trained end to end with the policy and scored by {}; higher is better.",
        space.space_id(),
        modules.join(", "),
        space.task_metric()
    )
}

/// One line per module listing every choice and its domain.
pub fn render_search_space(space: &CompositeSpace) -> String {
    let mut out = String::new();
    for m in space.modules() {
        let choices: Vec<String> = m
            .choices
            .iter()
            .map(|c| {
                let vals: Vec<String> = c.values.iter().map(|v| v.to_string()).collect();
                let kind = match c.kind {
                    ChoiceKind::Ordinal => "",
                    ChoiceKind::Categorical => " (categorical)",
                };
                let dep = c
                    .dependency
                    .as_ref()
                    .map(|d| format!(" (at most {})", d.at_most))
                    .unwrap_or_default();
                format!("{} in {{{}}}{kind}{dep}", c.name, vals.join(", "))
            })
            .collect();
        out.push_str(&format!(
            "{} [{}]: {}\n",
            m.name,
            m.family,
            choices.join("; ")
        ));
    }
    out
}

pub fn default_request(k: usize) -> String {
    let noun = if k == 1 {
        "architecture"
    } else {
        "architectures"
    };
    format!(
        "Propose exactly {k} new {noun} likely to raise the task metric. Start each one with a line \
`{ARCHITECTURE_PREFIX}`, followed by one line per module in the form \
`module: choice: value, choice: value`."
    )
}

pub fn build_initial_prompt(
    parts: &PromptParts,
    space: &CompositeSpace,
    flags: FeedbackFlags,
) -> Result<Vec<Message>, AgentError> {
    for (name, text) in [
        ("system prompt", &parts.system_prompt),
        ("task description", &parts.task_description),
        ("search space", &parts.search_space_text),
        ("request", &parts.request),
    ] {
        if text.trim().is_empty() {
            return Err(AgentError::MissingPart(name));
        }
    }
    if !parts.request.contains(ARCHITECTURE_PREFIX) {
        return Err(AgentError::MissingPart("prefix in request"));
    }
    let mut user = render_section(Section::TaskDescription, &parts.task_description);
    user.push_str(&render_section(
        Section::SearchSpace,
        &parts.search_space_text,
    ));
    if let Some(a0) = &parts.initial_architecture {
        user.push_str(&render_section(
            Section::InitialArchitecture,
            &render_modules(a0, space),
        ));
    }
    if flags.initial_evaluation {
        if let Some(p0) = &parts.initial_performance {
            user.push_str(&render_section(
                Section::InitialPerformance,
                &render_performance(p0, space.task_metric(), flags),
            ));
        }
    }
    user.push_str(&render_section(Section::Request, &parts.request));
    Ok(vec![
        Message::new(Role::System, parts.system_prompt.clone())?,
        Message::new(Role::User, user)?,
    ])
}

/// Feedback on one batch: a labeled block per candidate, in order.
pub fn render_batch_feedback(
    batch: &[(DesignVector, SignalSet)],
    space: &CompositeSpace,
    flags: FeedbackFlags,
) -> String {
    let k = batch.len();
    let blocks: Vec<String> = batch
        .iter()
        .enumerate()
        .map(|(i, (v, s))| {
            format!(
                "{CANDIDATE_LABEL} {}/{k}\n{}{}",
                i + 1,
                render_modules(v, space),
                render_performance(s, space.task_metric(), flags)
            )
        })
        .collect();
    blocks.join("\n")
}

/// Ordered list of role-tagged messages.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationHistory {
    pub messages: Vec<Message>,
}

impl ConversationHistory {
    pub fn push(&mut self, m: Message) {
        self.messages.push(m);
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    /// Keeps system messages, retained user sections and assistant
    /// architecture blocks. Idempotent; never reorders.
    pub fn prune(&self) -> ConversationHistory {
        let mut out = ConversationHistory::default();
        for m in &self.messages {
            let kept = match m.role {
                Role::System => m.content.clone(),
                Role::User => split_sections(&m.content)
                    .into_iter()
                    .filter_map(|(s, body)| s.filter(|s| s.retained()).map(|s| (s, body)))
                    .map(|(s, body)| render_section(s, &body))
                    .collect::<String>(),
                Role::Assistant => prune_assistant(&m.content),
            };
            if !kept.trim().is_empty() {
                out.push(Message {
                    role: m.role,
                    content: kept,
                });
            }
        }
        out
    }
}

/// The architecture blocks of a response, each cut at its first blank line.
fn prune_assistant(content: &str) -> String {
    let blocks: Vec<String> = extract_after_prefix(content, ARCHITECTURE_PREFIX)
        .into_iter()
        .map(|b| {
            let end = blank_line(b).unwrap_or(b.len());
            b[..end].trim_end().to_string()
        })
        .collect();
    blocks.join("\n\n")
}

fn blank_line(text: &str) -> Option<usize> {
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        if pos > 0 && line.trim().is_empty() {
            return Some(pos);
        }
        pos += line.len();
    }
    None
}

/// `prune(history)` followed by one user message with the feedback on the
/// previous batch, the search space and the request.
pub fn build_iteration_prompt(
    history: &ConversationHistory,
    feedback: &str,
    search_space_text: &str,
    request: &str,
) -> Result<Vec<Message>, AgentError> {
    if history.is_empty() {
        return Err(AgentError::EmptyHistory);
    }
    let mut messages = history.prune().messages;
    let mut user = String::new();
    if !feedback.trim().is_empty() {
        user.push_str(&render_section(Section::PerformanceSignals, feedback));
    }
    user.push_str(&render_section(Section::SearchSpace, search_space_text));
    user.push_str(&render_section(Section::Request, request));
    messages.push(Message::new(Role::User, user)?);
    Ok(messages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{FeatureEntry, FeatureInfo};
    use crate::space::builtin_space;

    fn signals(pairs: usize) -> SignalSet {
        let entries = (0..pairs)
            .map(|i| FeatureEntry {
                name: format!("p{i}"),
                mutual_information: 0.5,
                redundancy: 0.5,
            })
            .collect();
        SignalSet::new(1.0, 0.5, FeatureInfo { entries })
    }

    #[test]
    fn performance_lines() {
        let s = signals(0);
        let text = render_performance(&s, "average speed", FeedbackFlags::default());
        assert_eq!(
            text,
            "task metric (average speed): 1.000\naverage reward: 0.500\n"
        );
        assert_eq!(
            render_performance(&signals(6), "x", FeedbackFlags::default())
                .lines()
                .count(),
            8
        );
        let no_fi = FeedbackFlags {
            feature_info: false,
            ..FeedbackFlags::default()
        };
        assert_eq!(
            render_performance(&signals(6), "x", no_fi).lines().count(),
            2
        );
    }

    #[test]
    fn initial_prompt_has_two_messages_in_order() {
        let space = builtin_space("traffic").unwrap();
        let parts = PromptParts {
            system_prompt: DEFAULT_SYSTEM_PROMPT.into(),
            task_description: default_task_description(&space),
            search_space_text: render_search_space(&space),
            request: default_request(5),
            initial_architecture: Some(space.expert_default().unwrap()),
            initial_performance: Some(signals(6)),
        };
        let msgs = build_initial_prompt(&parts, &space, FeedbackFlags::default()).unwrap();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].role, Role::System);
        let order: Vec<_> = split_sections(&msgs[1].content)
            .into_iter()
            .map(|(s, _)| s.unwrap())
            .collect();
        assert_eq!(
            order,
            [
                Section::TaskDescription,
                Section::SearchSpace,
                Section::InitialArchitecture,
                Section::InitialPerformance,
                Section::Request
            ]
        );
        assert!(msgs[1]
            .content
            .contains("fusion: activation: relu, dimension: 128"));
        let mut empty = parts.clone();
        empty.task_description.clear();
        assert!(build_initial_prompt(&empty, &space, FeedbackFlags::default()).is_err());
    }

    #[test]
    fn prune_drops_commentary_and_requests() {
        let mut h = ConversationHistory::default();
        h.push(Message::new(Role::System, "sys").unwrap());
        h.push(
            Message::new(
                Role::User,
                "### Task description\ntask\n### Request\nplease\n",
            )
            .unwrap(),
        );
        h.push(
            Message::new(
                Role::Assistant,
                "Thinking about it.\n\nMore rationale here.\n\nNew Architecture\ntime: heads: 2\n\nI hope this helps.",
            )
            .unwrap(),
        );
        let p = h.prune();
        assert_eq!(p.messages[1].content, "### Task description\ntask\n");
        assert_eq!(p.messages[2].content, "New Architecture\ntime: heads: 2");
        assert_eq!(p.prune(), p);
    }

    #[test]
    fn prune_fixed_points() {
        assert!(ConversationHistory::default().prune().is_empty());
        let mut h = ConversationHistory::default();
        h.push(
            Message::new(
                Role::Assistant,
                "New Architecture\na: b: 1\n\nNew Architecture\na: b: 2",
            )
            .unwrap(),
        );
        assert_eq!(h.prune(), h);
        let mut chatter = ConversationHistory::default();
        chatter.push(Message::new(Role::Assistant, "no blocks at all").unwrap());
        assert!(chatter.prune().is_empty());
    }

    #[test]
    fn iteration_prompt_needs_history() {
        let err = build_iteration_prompt(&ConversationHistory::default(), "", "x", "y");
        assert!(matches!(err, Err(AgentError::EmptyHistory)));
    }

    #[test]
    fn batch_feedback_blocks() {
        let space = builtin_space("traffic").unwrap();
        let v = space.expert_default().unwrap();
        let batch: Vec<_> = (0..5).map(|_| (v.clone(), signals(6))).collect();
        let text = render_batch_feedback(&batch, &space, FeedbackFlags::default());
        assert_eq!(text.matches("Candidate ").count(), 5);
        assert!(text.contains("Candidate 5/5"));
        let one = render_batch_feedback(&batch[..1], &space, FeedbackFlags::default());
        assert_eq!(one.matches("Candidate ").count(), 1);
        let no_ri = FeedbackFlags {
            average_reward: false,
            ..FeedbackFlags::default()
        };
        let text = render_batch_feedback(&batch, &space, no_ri);
        assert!(!text.contains("average reward"));
        assert!(text.contains("task metric"));
    }
}
