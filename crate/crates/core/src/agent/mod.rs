//! The design agent: prompt construction over a pruned conversation, and the
//! completion backends it talks to.

mod backend;
mod prompt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{parse_design_vectors, PatternSet};
use crate::signals::SignalSet;
use crate::space::{CompositeSpace, DesignVector};

pub use backend::{
    digest_prompt, HttpLlm, LlmBackend, MockLlm, Observation, PromptDigest, ReplayLlm, API_KEY_VAR,
};
pub use prompt::{
    build_initial_prompt, build_iteration_prompt, default_request, default_task_description,
    render_batch_feedback, render_performance, render_search_space, render_section, split_sections,
    ConversationHistory, FeedbackFlags, Message, PromptParts, Role, Section, DEFAULT_SYSTEM_PROMPT,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("{0} message must not be empty")]
    EmptyMessage(Role),
    #[error("prompt part missing: {0}")]
    MissingPart(&'static str),
    #[error("conversation history is empty")]
    EmptyHistory,
    #[error("replay transcript exhausted after {0} responses")]
    TranscriptExhausted(usize),
    #[error("transcript: {0}")]
    Transcript(String),
    #[error("environment variable LACER_LLM_API_KEY is not set")]
    MissingApiKey,
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed completion: {0}")]
    BadResponse(String),
    #[error("backend `{0}` needs {1}")]
    Config(String, &'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Replay,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub backend: BackendKind,
    pub model_id: String,
    pub temperature: f64,
    pub max_parse_retries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcript: Option<std::path::PathBuf>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            backend: BackendKind::Mock,
            model_id: "claude-sonnet-4".into(),
            temperature: 1.0,
            max_parse_retries: 2,
            endpoint: None,
            transcript: None,
        }
    }
}

impl AgentConfig {
    /// Builds the configured backend. The mock is seeded with `seed`.
    pub fn make_backend(
        &self,
        space: &CompositeSpace,
        seed: u64,
    ) -> Result<Box<dyn LlmBackend>, AgentError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(AgentError::Config(
                "temperature".into(),
                "a value in [0, 2]",
            ));
        }
        Ok(match self.backend {
            BackendKind::Mock => Box::new(MockLlm::new(space, seed)),
            BackendKind::Replay => {
                let path = self
                    .transcript
                    .as_ref()
                    .ok_or(AgentError::Config("replay".into(), "a transcript path"))?;
                Box::new(ReplayLlm::from_path(path)?)
            }
            BackendKind::Http => {
                let endpoint = self
                    .endpoint
                    .as_ref()
                    .ok_or(AgentError::Config("http".into(), "an endpoint URL"))?;
                Box::new(HttpLlm::from_env(endpoint)?)
            }
        })
    }
}

/// Outcome of one proposal round.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentReply {
    /// Valid vectors in order of appearance, at most the requested count.
    pub vectors: Vec<DesignVector>,
    /// Queries issued, retries included.
    pub attempts: usize,
    /// Every raw response of this round.
    pub responses: Vec<String>,
}

/// Drives one conversation with a backend.
pub struct DesignAgent {
    space: CompositeSpace,
    patterns: PatternSet,
    flags: FeedbackFlags,
    config: AgentConfig,
    backend: Box<dyn LlmBackend>,
    system_prompt: String,
    task_description: String,
    search_space_text: String,
    history: ConversationHistory,
}

impl DesignAgent {
    pub fn new(
        space: &CompositeSpace,
        flags: FeedbackFlags,
        config: AgentConfig,
        backend: Box<dyn LlmBackend>,
    ) -> Self {
        DesignAgent {
            space: space.clone(),
            patterns: PatternSet::for_space(space),
            flags,
            config,
            backend,
            system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
            task_description: default_task_description(space),
            search_space_text: render_search_space(space),
            history: ConversationHistory::default(),
        }
    }

    pub fn history(&self) -> &ConversationHistory {
        &self.history
    }

    /// The prompt for the next round. The first round shows the initial
    /// architecture and, if given, its evaluation; later rounds show the
    /// previous batch.
    pub fn prompt(
        &self,
        k: usize,
        previous: &[(DesignVector, SignalSet)],
        initial: Option<&SignalSet>,
    ) -> Result<Vec<Message>, AgentError> {
        if self.history.is_empty() {
            let parts = PromptParts {
                system_prompt: self.system_prompt.clone(),
                task_description: self.task_description.clone(),
                search_space_text: self.search_space_text.clone(),
                request: default_request(k),
                initial_architecture: self.space.expert_default().ok(),
                initial_performance: initial.cloned(),
            };
            build_initial_prompt(&parts, &self.space, self.flags)
        } else {
            build_iteration_prompt(
                &self.history,
                &render_batch_feedback(previous, &self.space, self.flags),
                &self.search_space_text,
                &default_request(k),
            )
        }
    }

    /// Queries until a response yields `k` valid vectors or the retry budget
    /// runs out. The prompt and the accepted response join the history.
    pub fn propose(
        &mut self,
        k: usize,
        previous: &[(DesignVector, SignalSet)],
        initial: Option<&SignalSet>,
    ) -> Result<AgentReply, AgentError> {
        let messages = self.prompt(k, previous, initial)?;
        let mut reply = AgentReply {
            vectors: Vec::new(),
            attempts: 0,
            responses: Vec::new(),
        };
        let mut accepted = None;
        for _ in 0..=self.config.max_parse_retries {
            reply.attempts += 1;
            let response = self.backend.complete(&messages, &self.config)?;
            let parsed = parse_design_vectors(&response, &self.space, &self.patterns, k);
            let valid: Vec<DesignVector> = parsed
                .vectors
                .into_iter()
                .filter(|v| self.space.validate(v).is_valid())
                .take(k)
                .collect();
            reply.responses.push(response.clone());
            if valid.len() > reply.vectors.len() || reply.vectors.is_empty() {
                reply.vectors = valid;
            }
            if reply.vectors.len() == k {
                accepted = Some(response);
                break;
            }
        }
        self.history = ConversationHistory { messages };
        if let Some(r) = accepted.filter(|r| !r.trim().is_empty()) {
            self.history.push(Message {
                role: Role::Assistant,
                content: r,
            });
        }
        Ok(reply)
    }
}
