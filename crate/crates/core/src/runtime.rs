//! The multi-turn rollout loop: generate a turn, check it, run the tool it
//! asks for, feed back evidence, and stop on an answer or when the budget
//! runs out.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{
    ChatBackend, ChatMessage, CompletionRequest, GatewayError, GenerationParams, Role,
};
use crate::protocol::{
    parse_turn_with, render_evidence, validate_in_context, ActionKind, EvidenceBlock, ProtocolMode,
    ProtocolOptions, ProtocolViolation, TurnRecord,
};
use crate::retrieval::{ImageRetriever, TextRetriever, DEFAULT_IMAGE_K, DEFAULT_TEXT_K};

pub const AGENT_PROMPT_ID: &str = "search-agent/v1";
pub const AGENT_PROMPT: &str = include_str!("../templates/agent_system_v1.txt");
pub const DEFAULT_BUDGET: usize = 4;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("backend: {0}")]
    Backend(#[from] GatewayError),
    #[error("trajectory file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub budget: usize,
    pub k_text: usize,
    pub k_image: usize,
    pub strict_protocol: bool,
    pub allow_caption_before_answer: bool,
    pub system_prompt: String,
    pub generation: GenerationParams,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            budget: DEFAULT_BUDGET,
            k_text: DEFAULT_TEXT_K,
            k_image: DEFAULT_IMAGE_K,
            strict_protocol: true,
            allow_caption_before_answer: false,
            system_prompt: AGENT_PROMPT.to_string(),
            generation: GenerationParams::default(),
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.budget == 0 {
            return Err(RuntimeError::Config("budget must be at least 1".into()));
        }
        if self.k_text == 0 || self.k_image == 0 {
            return Err(RuntimeError::Config(
                "k_text and k_image must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn protocol(&self) -> ProtocolOptions {
        ProtocolOptions {
            mode: if self.strict_protocol {
                ProtocolMode::Strict
            } else {
                ProtocolMode::Lenient
            },
            allow_caption_before_answer: self.allow_caption_before_answer,
        }
    }

    /// Agent turns must stop at the closing action tags whatever the caller set.
    fn agent_params(&self) -> GenerationParams {
        GenerationParams::agent(self.generation.temperature, self.generation.max_new_tokens)
            .with_stops(self.generation.stop_sequences.iter().map(String::as_str))
    }

    pub fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot {
            budget: self.budget,
            k_text: self.k_text,
            k_image: self.k_image,
            strict_protocol: self.strict_protocol,
            allow_caption_before_answer: self.allow_caption_before_answer,
            temperature: self.generation.temperature,
            max_new_tokens: self.generation.max_new_tokens,
            system_prompt_sha256: hex::encode(Sha256::digest(self.system_prompt.as_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub budget: usize,
    pub k_text: usize,
    pub k_image: usize,
    pub strict_protocol: bool,
    pub allow_caption_before_answer: bool,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub system_prompt_sha256: String,
}

#[derive(Clone)]
pub struct ToolBinding {
    pub text: Arc<dyn TextRetriever>,
    pub image: Arc<dyn ImageRetriever>,
}

impl ToolBinding {
    pub fn new(text: Arc<dyn TextRetriever>, image: Arc<dyn ImageRetriever>) -> Self {
        ToolBinding { text, image }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub image_ref: String,
    pub question: String,
    pub evidence: Vec<EvidenceBlock>,
    pub transcript: Vec<TurnRecord>,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Answered(String),
    EvidenceAdded(EvidenceBlock),
    CaptionNoted,
    ProtocolError(Vec<ProtocolViolation>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Answer,
    BudgetExhausted,
    ProtocolFailure,
}

/// A turn the loop refused, kept for debugging only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedTurn {
    pub raw: String,
    pub violations: Vec<ProtocolViolation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub image_ref: String,
    pub question: String,
    pub turns: Vec<TurnRecord>,
    pub observations: Vec<EvidenceBlock>,
    pub final_answer: Option<String>,
    pub terminated_by: Termination,
    pub config: ConfigSnapshot,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_turns: Vec<RejectedTurn>,
    /// Characters of model-visible context at termination.
    #[serde(default)]
    pub context_chars: usize,
}

impl Trajectory {
    pub fn tool_calls(&self) -> usize {
        self.turns.iter().filter(|t| t.action.is_tool()).count()
    }

    pub fn action_sequence(&self) -> Vec<ActionKind> {
        self.turns.iter().map(|t| t.action).collect()
    }

    /// The accepted conversation: system prompt, question, then each turn
    /// followed by its evidence when it called a tool.
    pub fn transcript(&self, system_prompt: &str) -> Vec<ChatMessage> {
        let mut out = vec![
            ChatMessage::system(system_prompt),
            question_message(&self.image_ref, &self.question),
        ];
        let mut obs = self.observations.iter();
        for t in &self.turns {
            out.push(ChatMessage::assistant(t.raw.clone()));
            if t.action.is_tool() {
                if let Some(o) = obs.next() {
                    out.push(ChatMessage::user(o.rendered.clone()));
                }
            }
        }
        out
    }
}

/// Flat text form of [`Trajectory::transcript`]: system prompt and question
/// separated by a blank line, each turn verbatim, each evidence block on its
/// own lines.
pub fn transcript_text(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for (i, m) in messages.iter().enumerate() {
        match (i, m.role) {
            (0, _) => out.push_str(&m.content),
            (1, _) => {
                out.push_str("\n\n");
                out.push_str(&m.content);
                out.push('\n');
            }
            (_, Role::Assistant) => out.push_str(&m.content),
            _ => {
                out.push('\n');
                out.push_str(&m.content);
                out.push('\n');
            }
        }
    }
    out
}

pub fn question_message(image_ref: &str, question: &str) -> ChatMessage {
    ChatMessage::user(format!("Image: {image_ref}\nQuestion: {question}")).with_image(image_ref)
}

pub fn init_state(
    image_ref: &str,
    question: &str,
    config: &RolloutConfig,
) -> Result<AgentState, RuntimeError> {
    if question.trim().is_empty() {
        return Err(RuntimeError::EmptyQuestion);
    }
    Ok(AgentState {
        image_ref: image_ref.to_string(),
        question: question.to_string(),
        evidence: Vec::new(),
        transcript: Vec::new(),
        messages: vec![
            ChatMessage::system(config.system_prompt.clone()),
            question_message(image_ref, question),
        ],
    })
}

fn run_tool<T, F: Fn() -> Result<T, E>, E: std::fmt::Display>(f: F) -> Result<T, String> {
    match f() {
        Ok(v) => Ok(v),
        Err(e) => {
            tracing::warn!(error = %e, "tool call failed, retrying once");
            f().map_err(|e| e.to_string())
        }
    }
}

/// Applies one parsed turn. Image search always queries the task's own image;
/// the payload is only a placeholder.
pub fn step(
    mut state: AgentState,
    turn: TurnRecord,
    tools: &ToolBinding,
    config: &RolloutConfig,
) -> (AgentState, StepOutcome) {
    let violations = validate_in_context(&turn, &state.transcript, config.protocol());
    if !violations.is_empty() {
        return (state, StepOutcome::ProtocolError(violations));
    }
    let turn_index = state.transcript.len();
    state
        .messages
        .push(ChatMessage::assistant(turn.raw.clone()));
    let action = turn.action;
    let payload = turn.action_payload.clone();
    let captioned = turn.caption.is_some();
    state.transcript.push(turn);
    let hits = match action {
        ActionKind::Answer => return (state, StepOutcome::Answered(payload)),
        ActionKind::TextSearch => {
            run_tool(|| tools.text.retrieve_text(payload.trim(), config.k_text))
        }
        ActionKind::ImageSearch => {
            run_tool(|| tools.image.retrieve_image(&state.image_ref, config.k_image))
        }
    };
    let block = match hits {
        Ok(items) => render_evidence(items, turn_index),
        Err(msg) => EvidenceBlock::tool_error(turn_index, msg),
    };
    state
        .messages
        .push(ChatMessage::user(block.rendered.clone()));
    state.evidence.push(block.clone());
    if captioned {
        tracing::debug!(turn_index, "caption noted");
    }
    (state, StepOutcome::EvidenceAdded(block))
}

fn reflection(violations: &[ProtocolViolation]) -> String {
    let mut s = String::from("Your last turn did not follow the format rules:\n");
    for v in violations {
        s.push_str(&format!("- {v}\n"));
    }
    s.push_str("Reply again with <think> followed by exactly one action tag.");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTask {
    pub task_id: String,
    pub image_ref: String,
    pub question: String,
}

pub fn rollout(
    task: &AgentTask,
    backend: &dyn ChatBackend,
    tools: &ToolBinding,
    config: &RolloutConfig,
) -> Result<Trajectory, RuntimeError> {
    config.validate()?;
    let mut state = init_state(&task.image_ref, &task.question, config)?;
    let params = config.agent_params();
    let mode = config.protocol().mode;
    let mut rejected = Vec::new();
    let mut pending_reprompt = false;
    let mut terminated_by = Termination::BudgetExhausted;
    let mut final_answer = None;

    for generation in 0..config.budget {
        let raw = {
            let req = CompletionRequest::new(&state.messages, &params, generation);
            match backend.complete(&req) {
                Err(GatewayError::EmptyGeneration { .. }) => match backend.complete(&req) {
                    Err(GatewayError::EmptyGeneration { .. }) => {
                        terminated_by = Termination::ProtocolFailure;
                        break;
                    }
                    other => other?,
                },
                other => other?,
            }
        };

        let outcome = match parse_turn_with(&raw, mode) {
            Ok(turn) => {
                let (next, outcome) = step(state, turn, tools, config);
                state = next;
                outcome
            }
            Err(v) => StepOutcome::ProtocolError(v),
        };
        match outcome {
            StepOutcome::ProtocolError(violations) => {
                if pending_reprompt {
                    rejected.push(RejectedTurn { raw, violations });
                    terminated_by = Termination::ProtocolFailure;
                    break;
                }
                state.messages.push(ChatMessage::assistant(raw.clone()));
                state
                    .messages
                    .push(ChatMessage::user(reflection(&violations)));
                rejected.push(RejectedTurn { raw, violations });
                pending_reprompt = true;
            }
            StepOutcome::Answered(a) => {
                final_answer = Some(a);
                terminated_by = Termination::Answer;
                break;
            }
            StepOutcome::EvidenceAdded(_) | StepOutcome::CaptionNoted => pending_reprompt = false,
        }
    }

    if final_answer.is_none() && terminated_by == Termination::BudgetExhausted {
        final_answer = crate::protocol::extract_final_answer(&state.transcript);
    }
    let context_chars = state
        .messages
        .iter()
        .map(|m| m.content.chars().count())
        .sum();
    Ok(Trajectory {
        task_id: task.task_id.clone(),
        image_ref: task.image_ref.clone(),
        question: task.question.clone(),
        turns: state.transcript,
        observations: state.evidence,
        final_answer,
        terminated_by,
        config: config.snapshot(),
        rejected_turns: rejected,
        context_chars,
    })
}

/// Runs independent rollouts on `threads` workers; output order follows input.
pub fn rollout_batch(
    tasks: &[AgentTask],
    backend: &dyn ChatBackend,
    tools: &ToolBinding,
    config: &RolloutConfig,
    threads: usize,
) -> Vec<Result<Trajectory, RuntimeError>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        tasks
            .par_iter()
            .map(|t| rollout(t, backend, tools, config))
            .collect()
    })
}

/// Appends JSON lines from many threads; each line is written whole.
pub struct JsonlWriter {
    path: String,
    out: Mutex<BufWriter<File>>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self, RuntimeError> {
        let p = path.display().to_string();
        let f = File::create(path).map_err(|e| RuntimeError::Io {
            path: p.clone(),
            message: e.to_string(),
        })?;
        Ok(JsonlWriter {
            path: p,
            out: Mutex::new(BufWriter::new(f)),
        })
    }

    pub fn append<T: Serialize>(&self, value: &T) -> Result<(), RuntimeError> {
        let line = serde_json::to_string(value).map_err(|e| self.err(e))?;
        let mut out = self.out.lock().expect("writer lock");
        writeln!(out, "{line}").map_err(|e| self.err(e))
    }

    pub fn finish(self) -> Result<(), RuntimeError> {
        let path = self.path.clone();
        self.out
            .into_inner()
            .expect("writer lock")
            .flush()
            .map_err(|e| RuntimeError::Io {
                path,
                message: e.to_string(),
            })
    }

    fn err(&self, e: impl std::fmt::Display) -> RuntimeError {
        RuntimeError::Io {
            path: self.path.clone(),
            message: e.to_string(),
        }
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RuntimeError> {
    let p = path.display().to_string();
    let f = File::open(path).map_err(|e| RuntimeError::Io {
        path: p.clone(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| RuntimeError::Io {
            path: p.clone(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RuntimeError::Io {
            path: p.clone(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), RuntimeError> {
    let w = JsonlWriter::create(path)?;
    for t in trajectories {
        w.append(t)?;
    }
    w.finish()
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, RuntimeError> {
    read_jsonl(path)
}
