//! Builds labeled agent trajectories from QA samples by running staged
//! answer/judge prompts and routing failures to image or text retrieval.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::answer::{
    contains_normalized, entity_matches, matches_any, normalize_answer, split_gold, MatchPolicy,
};
use crate::gateway::{ChatBackend, ChatMessage, CompletionRequest, GatewayError, GenerationParams};
use crate::protocol::{
    parse_turn, render_evidence, validate_in_context, ActionKind, EvidenceBlock, EvidenceItem,
    ProtocolOptions, TurnRecord, IMAGE_PLACEHOLDER,
};
use crate::retrieval::{DEFAULT_IMAGE_K, DEFAULT_TEXT_K};
use crate::runtime::{RolloutConfig, Termination, ToolBinding, Trajectory};

pub const DIFFICULTY_RULE_VERSION: &str = "depth-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: &'static str,
    pub text: &'static str,
}

macro_rules! template {
    ($name:ident, $id:literal, $file:literal) => {
        pub const $name: PromptTemplate = PromptTemplate {
            id: $id,
            text: include_str!(concat!("../templates/", $file)),
        };
    };
}

pub mod prompts {
    use super::PromptTemplate;
    template!(S1_ANSWER, "s1_answer/v1", "s1_answer_v1.txt");
    template!(S1_JUDGE, "s1_judge/v1", "s1_judge_v1.txt");
    template!(
        S2_IMAGE_ANSWER,
        "s2_image_answer/v1",
        "s2_image_answer_v1.txt"
    );
    template!(S2_IMAGE_JUDGE, "s2_image_judge/v1", "s2_image_judge_v1.txt");
    template!(S2_TEXT_ANSWER, "s2_text_answer/v1", "s2_text_answer_v1.txt");
    template!(S2_TEXT_JUDGE, "s2_text_judge/v1", "s2_text_judge_v1.txt");
    template!(
        S3_IMAGE_ANSWER,
        "s3_image_answer/v1",
        "s3_image_answer_v1.txt"
    );
    template!(S3_IMAGE_JUDGE, "s3_image_judge/v1", "s3_image_judge_v1.txt");
    template!(S3_TEXT_ANSWER, "s3_text_answer/v1", "s3_text_answer_v1.txt");
    template!(S3_TEXT_JUDGE, "s3_text_judge/v1", "s3_text_judge_v1.txt");

    pub const ALL: [PromptTemplate; 10] = [
        S1_ANSWER,
        S1_JUDGE,
        S2_IMAGE_ANSWER,
        S2_IMAGE_JUDGE,
        S2_TEXT_ANSWER,
        S2_TEXT_JUDGE,
        S3_IMAGE_ANSWER,
        S3_IMAGE_JUDGE,
        S3_TEXT_ANSWER,
        S3_TEXT_JUDGE,
    ];
}

/// Prompt id recorded when the verdict was computed locally without a call.
pub const LOCAL_JUDGE_ID: &str = "local/normalized_exact";

#[derive(Debug, Error)]
pub enum FactoryError {
    #[error("prediction is empty")]
    EmptyPrediction,
    #[error("judge output has neither [correct] nor [wrong]: {0:?}")]
    JudgeParseFailure(String),
    #[error("model judge needs a chat backend")]
    NoJudgeBackend,
    #[error("backend: {0}")]
    Backend(#[from] GatewayError),
    #[error("{path} line {line}: {message}")]
    Dataset {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("tier {tier} has {have} outcome(s), need {need}")]
    Deficient {
        tier: Tier,
        have: usize,
        need: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSample {
    pub sample_id: String,
    pub image_ref: String,
    pub question: String,
    #[serde(rename = "answers", deserialize_with = "de_answers")]
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_entity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_article_id: Option<String>,
    pub split: Split,
    /// Free-form evaluation tags such as `unseen_q` or `unseen_e`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

fn de_answers<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Answers {
        Joined(String),
        List(Vec<String>),
    }
    Ok(match Answers::deserialize(d)? {
        Answers::Joined(s) => split_gold(&s),
        Answers::List(v) => v
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
    })
}

pub fn load_qa_dataset(path: &Path) -> Result<Vec<QaSample>, FactoryError> {
    let p = path.display().to_string();
    let f = File::open(path).map_err(|e| FactoryError::Io {
        path: p.clone(),
        message: e.to_string(),
    })?;
    let mut out: Vec<QaSample> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| FactoryError::Io {
            path: p.clone(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| FactoryError::Dataset {
            path: p.clone(),
            line: i + 1,
            message,
        };
        let s: QaSample = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if s.gold_answers.is_empty() {
            return Err(bad("no gold answers".into()));
        }
        if s.question.trim().is_empty() {
            return Err(bad("empty question".into()));
        }
        if !seen.insert(s.sample_id.clone()) {
            return Err(bad(format!("duplicate sample_id {}", s.sample_id)));
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    S1,
    #[serde(rename = "S2_image")]
    S2Image,
    #[serde(rename = "S2_text")]
    S2Text,
    S3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStep {
    Answer,
    Judge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "correct")]
    Correct,
    #[serde(rename = "wrong")]
    Wrong,
    #[serde(rename = "n/a")]
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub step: StageStep,
    pub prompt_id: String,
    pub model_output: String,
    pub parsed_fields: BTreeMap<String, String>,
    pub verdict: Verdict,
    /// Evidence shown to the answering prompt of this stage.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evidence: Vec<EvidenceItem>,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrajectoryType {
    A,
    #[serde(rename = "I→A")]
    IA,
    #[serde(rename = "T→A")]
    TA,
    #[serde(rename = "I→T→A")]
    ITA,
    #[serde(rename = "T→T→A")]
    TTA,
    #[serde(rename = "DISCARDED")]
    Discarded,
    #[serde(rename = "FAILED")]
    Failed,
}

impl TrajectoryType {
    pub const CANONICAL: [TrajectoryType; 5] = [
        TrajectoryType::A,
        TrajectoryType::IA,
        TrajectoryType::TA,
        TrajectoryType::ITA,
        TrajectoryType::TTA,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TrajectoryType::A => "A",
            TrajectoryType::IA => "I→A",
            TrajectoryType::TA => "T→A",
            TrajectoryType::ITA => "I→T→A",
            TrajectoryType::TTA => "T→T→A",
            TrajectoryType::Discarded => "DISCARDED",
            TrajectoryType::Failed => "FAILED",
        }
    }

    /// Canonical type of an answered action sequence, if it has one.
    pub fn from_actions(actions: &[ActionKind]) -> Option<Self> {
        use ActionKind::*;
        match actions {
            [Answer] => Some(TrajectoryType::A),
            [ImageSearch, Answer] => Some(TrajectoryType::IA),
            [TextSearch, Answer] => Some(TrajectoryType::TA),
            [ImageSearch, TextSearch, Answer] => Some(TrajectoryType::ITA),
            [TextSearch, TextSearch, Answer] => Some(TrajectoryType::TTA),
            _ => None,
        }
    }
}

/// Label for any action sequence: the canonical name when there is one,
/// otherwise the letters joined by arrows (e.g. `I→I→A`, `T→T→T→T`).
pub fn action_label(actions: &[ActionKind]) -> String {
    if let Some(t) = TrajectoryType::from_actions(actions) {
        return t.label().to_string();
    }
    actions
        .iter()
        .map(|a| match a {
            ActionKind::Answer => "A",
            ActionKind::TextSearch => "T",
            ActionKind::ImageSearch => "I",
        })
        .collect::<Vec<_>>()
        .join("→")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyTier {
    pub tier: Tier,
    pub rule_version: String,
}

/// Depth rule: no tool call is easy, one is medium, two or more is hard.
pub fn assign_difficulty(traj: &Trajectory) -> DifficultyTier {
    let tier = match traj.tool_calls() {
        0 => Tier::Easy,
        1 => Tier::Medium,
        _ => Tier::Hard,
    };
    DifficultyTier {
        tier,
        rule_version: DIFFICULTY_RULE_VERSION.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchOutcome {
    pub sample_id: String,
    pub image_ref: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<Branch>,
    pub trajectory_type: TrajectoryType,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assembled: Option<Trajectory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<DifficultyTier>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discard_reason: Option<String>,
}

impl BranchOutcome {
    fn record(&self, stage: Stage, step: StageStep) -> Option<&StageRecord> {
        self.stages
            .iter()
            .find(|r| r.stage == stage && r.step == step)
    }

    fn field(&self, stage: Stage, step: StageStep, key: &str) -> Option<&str> {
        self.record(stage, step)
            .and_then(|r| r.parsed_fields.get(key))
            .map(String::as_str)
    }

    pub fn is_usable(&self) -> bool {
        TrajectoryType::CANONICAL.contains(&self.trajectory_type) && self.assembled.is_some()
    }
}

/// Replays the stored judge verdicts to recover the trajectory type.
pub fn derive_trajectory_type(outcome: &BranchOutcome, keep_failed: bool) -> TrajectoryType {
    if outcome.discard_reason.is_some() {
        return TrajectoryType::Discarded;
    }
    let verdict = |s| outcome.record(s, StageStep::Judge).map(|r| r.verdict);
    match verdict(Stage::S1) {
        Some(Verdict::Correct) => return TrajectoryType::A,
        Some(Verdict::Wrong) => {}
        _ => return TrajectoryType::Discarded,
    }
    let (s2, image) = match (verdict(Stage::S2Image), verdict(Stage::S2Text)) {
        (Some(v), None) => (v, true),
        (None, Some(v)) => (v, false),
        _ => return TrajectoryType::Discarded,
    };
    match (s2, verdict(Stage::S3)) {
        (Verdict::Correct, _) if image => TrajectoryType::IA,
        (Verdict::Correct, _) => TrajectoryType::TA,
        (Verdict::Wrong, Some(Verdict::Correct)) if image => TrajectoryType::ITA,
        (Verdict::Wrong, Some(Verdict::Correct)) => TrajectoryType::TTA,
        (Verdict::Wrong, Some(Verdict::Wrong)) if keep_failed => TrajectoryType::Failed,
        _ => TrajectoryType::Discarded,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    #[default]
    NormalizedExact,
    ModelJudge,
}

fn parse_verdict(text: &str) -> Option<Verdict> {
    let c = text.find("[correct]");
    let w = text.find("[wrong]");
    match (c, w) {
        (Some(c), Some(w)) => Some(if c < w {
            Verdict::Correct
        } else {
            Verdict::Wrong
        }),
        (Some(_), None) => Some(Verdict::Correct),
        (None, Some(_)) => Some(Verdict::Wrong),
        (None, None) => None,
    }
}

pub fn judge_answer(
    pred: &str,
    gold: &[String],
    mode: JudgeMode,
    backend: Option<&dyn ChatBackend>,
) -> Result<bool, FactoryError> {
    if pred.trim().is_empty() {
        return Err(FactoryError::EmptyPrediction);
    }
    match mode {
        JudgeMode::NormalizedExact => Ok(matches_any(pred, gold, MatchPolicy::Normalized)),
        JudgeMode::ModelJudge => {
            let backend = backend.ok_or(FactoryError::NoJudgeBackend)?;
            let msgs = vec![
                ChatMessage::system(prompts::S3_TEXT_JUDGE.text),
                ChatMessage::user(format!(
                    "[stage3_answer] {pred}\n[gold_answer] {}",
                    gold.join("|")
                )),
            ];
            let params = GenerationParams::free_form(0.0, 16);
            let out = backend.complete(&CompletionRequest::new(&msgs, &params, 0))?;
            match parse_verdict(&out) {
                Some(v) => Ok(v == Verdict::Correct),
                None => Err(FactoryError::JudgeParseFailure(out)),
            }
        }
    }
}

struct StageOutput {
    verdict: Option<Verdict>,
    tags: Vec<(String, String)>,
}

fn any_tag_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"</?[A-Za-z_][A-Za-z0-9_]*>").expect("static regex"))
}

/// Splits a stage output into an optional leading verdict marker and a flat
/// sequence of `<tag>content</tag>` elements separated by whitespace.
fn parse_stage_output(text: &str, with_verdict: bool) -> Result<StageOutput, String> {
    let mut s = text.trim();
    let mut verdict = None;
    if with_verdict {
        if let Some(rest) = s.strip_prefix("[correct]") {
            verdict = Some(Verdict::Correct);
            s = rest;
        } else if let Some(rest) = s.strip_prefix("[wrong]") {
            verdict = Some(Verdict::Wrong);
            s = rest;
        } else {
            return Err("output must start with [correct] or [wrong]".into());
        }
    }
    let mut tags = Vec::new();
    loop {
        s = s.trim_start();
        if s.is_empty() {
            break;
        }
        let open_end = s
            .find('>')
            .filter(|_| s.starts_with('<'))
            .ok_or_else(|| format!("unexpected text {:?}", truncate(s)))?;
        let name = &s[1..open_end];
        if name.is_empty()
            || name.starts_with('/')
            || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        {
            return Err(format!("bad tag <{name}>"));
        }
        let close = format!("</{name}>");
        let body_start = open_end + 1;
        let close_at = s[body_start..]
            .find(&close)
            .ok_or_else(|| format!("<{name}> is not closed"))?
            + body_start;
        let body = &s[body_start..close_at];
        if any_tag_regex().is_match(body) {
            return Err(format!("nested tag inside <{name}>"));
        }
        tags.push((name.to_string(), body.trim().to_string()));
        s = &s[close_at + close.len()..];
    }
    Ok(StageOutput { verdict, tags })
}

fn truncate(s: &str) -> String {
    s.chars().take(40).collect()
}

fn check_contract(
    out: &StageOutput,
    allowed: &[&[&str]],
) -> Result<BTreeMap<String, String>, String> {
    let names: Vec<&str> = out.tags.iter().map(|(n, _)| n.as_str()).collect();
    if !allowed.contains(&names.as_slice()) {
        return Err(format!(
            "tag sequence {names:?} not in contract {allowed:?}"
        ));
    }
    if let Some((n, _)) = out.tags.iter().find(|(_, v)| v.is_empty()) {
        return Err(format!("<{n}> is empty"));
    }
    Ok(out.tags.iter().cloned().collect())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

const ANSWER_S1: &[&[&str]] = &[&["think", "entity", "answer"]];
const ANSWER_S23: &[&[&str]] = &[&["think", "answer"]];
const JUDGE_S1_WRONG: &[&[&str]] = &[&["image_search", "choose"], &["text_search", "choose"]];
const JUDGE_S2_IMAGE_WRONG: &[&[&str]] = &[&["caption", "think", "text_search"]];
const JUDGE_S2_TEXT_WRONG: &[&[&str]] = &[&["think", "text_search"]];
const NOTHING: &[&[&str]] = &[&[]];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactoryConfig {
    pub judge: JudgeMode,
    pub keep_failed: bool,
    pub k_text: usize,
    pub k_image: usize,
    pub threads: usize,
    /// Attempts per stage call beyond the first.
    pub stage_retries: u32,
    pub generation: GenerationParams,
}

impl Default for FactoryConfig {
    fn default() -> Self {
        FactoryConfig {
            judge: JudgeMode::NormalizedExact,
            keep_failed: false,
            k_text: DEFAULT_TEXT_K,
            k_image: DEFAULT_IMAGE_K,
            threads: 1,
            stage_retries: 1,
            generation: GenerationParams::free_form(0.0, 1024),
        }
    }
}

/// Builds the user message for a stage prompt. The first two lines identify
/// the prompt and sample so scripted backends can target them.
pub fn stage_message(
    template: &PromptTemplate,
    sample: &QaSample,
    fields: &[(&str, &str)],
) -> String {
    let mut s = format!(
        "[stage] {}\n[sample_id] {}\n[question] {}\n",
        template.id, sample.sample_id, sample.question
    );
    for (k, v) in fields {
        s.push_str(&format!("[{k}] {v}\n"));
    }
    s
}

struct Discard(String);

impl From<String> for Discard {
    fn from(s: String) -> Self {
        Discard(s)
    }
}

enum Fatal {
    Backend(GatewayError),
    Discard(String),
}

impl From<Discard> for Fatal {
    fn from(d: Discard) -> Self {
        Fatal::Discard(d.0)
    }
}

struct SampleRun<'a> {
    sample: &'a QaSample,
    backend: &'a dyn ChatBackend,
    tools: &'a ToolBinding,
    config: &'a FactoryConfig,
    generation: usize,
    stages: Vec<StageRecord>,
}

struct Judged {
    correct: bool,
    fields: BTreeMap<String, String>,
}

impl<'a> SampleRun<'a> {
    fn gold(&self) -> String {
        self.sample.gold_answers.join("|")
    }

    /// Calls a stage prompt, retrying once on contract failures. `check`
    /// returns the accepted fields or a reason.
    fn call<F>(
        &mut self,
        stage: Stage,
        step: StageStep,
        template: &PromptTemplate,
        fields: &[(&str, &str)],
        evidence: Vec<EvidenceItem>,
        check: F,
    ) -> Result<(BTreeMap<String, String>, Verdict), Fatal>
    where
        F: Fn(&str) -> Result<(BTreeMap<String, String>, Verdict), String>,
    {
        let msgs = vec![
            ChatMessage::system(template.text),
            ChatMessage::user(stage_message(template, self.sample, fields))
                .with_image(&self.sample.image_ref),
        ];
        let mut last_err = String::new();
        let attempts = self.config.stage_retries + 1;
        for attempt in 1..=attempts {
            let req = CompletionRequest::new(&msgs, &self.config.generation, self.generation);
            self.generation += 1;
            let out = match self.backend.complete(&req) {
                Ok(t) => t,
                Err(GatewayError::EmptyGeneration { .. }) => {
                    last_err = format!("{}: empty generation", template.id);
                    continue;
                }
                Err(e) => return Err(Fatal::Backend(e)),
            };
            match check(&out) {
                Ok((parsed, verdict)) => {
                    self.stages.push(StageRecord {
                        stage,
                        step,
                        prompt_id: template.id.to_string(),
                        model_output: out,
                        parsed_fields: parsed.clone(),
                        verdict,
                        evidence,
                        attempts: attempt,
                    });
                    return Ok((parsed, verdict));
                }
                Err(e) => {
                    tracing::debug!(sample = %self.sample.sample_id, prompt = template.id, error = %e, "stage output rejected");
                    last_err = format!("{}: {e}", template.id);
                }
            }
        }
        Err(Fatal::Discard(last_err))
    }

    fn answer(
        &mut self,
        stage: Stage,
        template: &PromptTemplate,
        fields: &[(&str, &str)],
        evidence: Vec<EvidenceItem>,
    ) -> Result<BTreeMap<String, String>, Fatal> {
        let contract = if stage == Stage::S1 {
            ANSWER_S1
        } else {
            ANSWER_S23
        };
        let (f, _) = self.call(
            stage,
            StageStep::Answer,
            template,
            fields,
            evidence,
            |out| {
                let p = parse_stage_output(out, false)?;
                let f = check_contract(&p, contract)?;
                Ok((f, Verdict::NotApplicable))
            },
        )?;
        Ok(f)
    }

    /// Runs the judge for one stage. In normalized-exact mode the verdict is
    /// local and the prompt is only called when a rewrite is needed.
    fn judge<V>(
        &mut self,
        stage: Stage,
        template: &PromptTemplate,
        pred: &str,
        fields: &[(&str, &str)],
        wrong_contract: &'static [&'static [&'static str]],
        extra: V,
    ) -> Result<Judged, Fatal>
    where
        V: Fn(&BTreeMap<String, String>) -> Result<(), String>,
    {
        let local = match self.config.judge {
            JudgeMode::NormalizedExact => Some(matches_any(
                pred,
                &self.sample.gold_answers,
                MatchPolicy::Normalized,
            )),
            JudgeMode::ModelJudge => None,
        };
        let needs_call = match local {
            Some(true) => false,
            Some(false) => wrong_contract != NOTHING,
            None => true,
        };
        if !needs_call {
            let verdict = if local == Some(true) {
                Verdict::Correct
            } else {
                Verdict::Wrong
            };
            self.stages.push(StageRecord {
                stage,
                step: StageStep::Judge,
                prompt_id: LOCAL_JUDGE_ID.to_string(),
                model_output: String::new(),
                parsed_fields: BTreeMap::new(),
                verdict,
                evidence: Vec::new(),
                attempts: 0,
            });
            return Ok(Judged {
                correct: verdict == Verdict::Correct,
                fields: BTreeMap::new(),
            });
        }
        let (fields, verdict) = self.call(
            stage,
            StageStep::Judge,
            template,
            fields,
            Vec::new(),
            |out| {
                let p = parse_stage_output(out, true)?;
                let v = p.verdict.expect("verdict required");
                if let Some(l) = local {
                    if l != (v == Verdict::Correct) {
                        return Err("judge verdict disagrees with normalized match".into());
                    }
                }
                let f = if v == Verdict::Correct {
                    check_contract(&p, NOTHING)?
                } else {
                    check_contract(&p, wrong_contract)?
                };
                if v == Verdict::Wrong {
                    extra(&f)?;
                }
                Ok((f, v))
            },
        )?;
        Ok(Judged {
            correct: verdict == Verdict::Correct,
            fields,
        })
    }

    fn retrieve_text(&self, query: &str) -> Result<Vec<EvidenceItem>, Fatal> {
        self.tools
            .text
            .retrieve_text(query, self.config.k_text)
            .map_err(|e| Fatal::Discard(format!("text retrieval failed: {e}")))
    }

    fn run(&mut self) -> Result<(TrajectoryType, Option<Branch>), Fatal> {
        let s = self.sample;
        let gold = self.gold();
        let gold_entity = s.gold_entity.clone().unwrap_or_default();

        // Stage 1: image and question only.
        let a1 = self.answer(Stage::S1, &prompts::S1_ANSWER, &[], Vec::new())?;
        let (think1, entity1, answer1) = (&a1["think"], &a1["entity"], &a1["answer"]);
        let route_rule = s.gold_entity.as_deref().map(|g| {
            if entity_matches(entity1, g) {
                Branch::Text
            } else {
                Branch::Image
            }
        });
        let j1 = self.judge(
            Stage::S1,
            &prompts::S1_JUDGE,
            answer1,
            &[
                ("stage1_think", think1),
                ("stage1_entity", entity1),
                ("stage1_answer", answer1),
                ("gold_answer", &gold),
                ("gold_entity", &gold_entity),
            ],
            JUDGE_S1_WRONG,
            |f| {
                let chosen = if f.contains_key("image_search") {
                    Branch::Image
                } else {
                    Branch::Text
                };
                if let Some(img) = f.get("image_search") {
                    if img != IMAGE_PLACEHOLDER {
                        return Err(format!("<image_search> must hold {IMAGE_PLACEHOLDER}"));
                    }
                }
                match route_rule {
                    Some(r) if r != chosen => Err(format!(
                        "judge chose {chosen:?} but entity rule gives {r:?}"
                    )),
                    _ => Ok(()),
                }
            },
        )?;
        if j1.correct {
            return Ok((TrajectoryType::A, None));
        }
        let choose1 = j1.fields["choose"].clone();

        if let Some(q1) = j1.fields.get("text_search").map(|q| one_line(q)) {
            // Text branch.
            let hist1 = format!("<choose>{choose1}</choose>\n<text_search>{q1}</text_search>");
            let ev2 = self.retrieve_text(&q1)?;
            let ev2_text = render_evidence(ev2.clone(), 0).rendered;
            let a2 = self.answer(
                Stage::S2Text,
                &prompts::S2_TEXT_ANSWER,
                &[("stage1_output", &hist1), ("evidence", &ev2_text)],
                ev2,
            )?;
            let q1_norm = normalize_answer(&q1);
            let j2 = self.judge(
                Stage::S2Text,
                &prompts::S2_TEXT_JUDGE,
                &a2["answer"],
                &[
                    ("stage1_output", &hist1),
                    ("evidence", &ev2_text),
                    ("stage2_answer", &a2["answer"]),
                    ("gold_answer", &gold),
                ],
                JUDGE_S2_TEXT_WRONG,
                move |f| {
                    if normalize_answer(&f["text_search"]) == q1_norm {
                        Err("rewritten query equals the previous query".into())
                    } else {
                        Ok(())
                    }
                },
            )?;
            if j2.correct {
                return Ok((TrajectoryType::TA, Some(Branch::Text)));
            }
            let q2 = one_line(&j2.fields["text_search"]);
            let ev3 = self.retrieve_text(&q2)?;
            let ev3_text = render_evidence(ev3.clone(), 0).rendered;
            let a3 = self.answer(
                Stage::S3,
                &prompts::S3_TEXT_ANSWER,
                &[
                    ("stage1_output", &hist1),
                    ("stage2_answer", &a2["answer"]),
                    ("stage2_new_think", &j2.fields["think"]),
                    ("new_text_search_query", &q2),
                    ("stage3_text_search_query", &q2),
                    ("stage3_new_evidence", &ev3_text),
                ],
                ev3,
            )?;
            let j3 = self.judge(
                Stage::S3,
                &prompts::S3_TEXT_JUDGE,
                &a3["answer"],
                &[
                    ("stage1_output", &hist1),
                    ("evidence", &ev2_text),
                    ("stage2_answer", &a2["answer"]),
                    ("stage2_new_think", &j2.fields["think"]),
                    ("new_text_search_query", &q2),
                    ("stage3_new_evidence", &ev3_text),
                    ("stage3_answer", &a3["answer"]),
                    ("gold_answer", &gold),
                ],
                NOTHING,
                |_| Ok(()),
            )?;
            let t = match (j3.correct, self.config.keep_failed) {
                (true, _) => TrajectoryType::TTA,
                (false, true) => TrajectoryType::Failed,
                (false, false) => TrajectoryType::Discarded,
            };
            return Ok((t, Some(Branch::Text)));
        }

        // Image branch: always the original image.
        let hist1 =
            format!("<choose>{choose1}</choose>\n<image_search>{IMAGE_PLACEHOLDER}</image_search>");
        let ev2 = self
            .tools
            .image
            .retrieve_image(&s.image_ref, self.config.k_image)
            .map_err(|e| Fatal::Discard(format!("image retrieval failed: {e}")))?;
        let ev2_text = render_evidence(ev2.clone(), 0).rendered;
        let a2 = self.answer(
            Stage::S2Image,
            &prompts::S2_IMAGE_ANSWER,
            &[("stage1_output", &hist1), ("evidence", &ev2_text)],
            ev2,
        )?;
        let j2 = self.judge(
            Stage::S2Image,
            &prompts::S2_IMAGE_JUDGE,
            &a2["answer"],
            &[
                ("stage1_output", &hist1),
                ("evidence", &ev2_text),
                ("stage2_answer", &a2["answer"]),
                ("gold_answer", &gold),
            ],
            JUDGE_S2_IMAGE_WRONG,
            |_| Ok(()),
        )?;
        if j2.correct {
            return Ok((TrajectoryType::IA, Some(Branch::Image)));
        }
        let q2 = one_line(&j2.fields["text_search"]);
        let ev3 = self.retrieve_text(&q2)?;
        let ev3_text = render_evidence(ev3.clone(), 0).rendered;
        let a3 = self.answer(
            Stage::S3,
            &prompts::S3_IMAGE_ANSWER,
            &[
                ("stage1_output", &hist1),
                ("stage2_evidence", &ev2_text),
                ("stage2_answer", &a2["answer"]),
                ("stage2_new_caption", &j2.fields["caption"]),
                ("new_text_search_query", &q2),
                ("stage3_new_evidence", &ev3_text),
            ],
            ev3,
        )?;
        let j3 = self.judge(
            Stage::S3,
            &prompts::S3_IMAGE_JUDGE,
            &a3["answer"],
            &[
                ("stage1_output", &hist1),
                ("evidence_stage2", &ev2_text),
                ("stage2_answer", &a2["answer"]),
                ("stage2_new_caption", &j2.fields["caption"]),
                ("new_text_search_query", &q2),
                ("stage3_text_search_query", &q2),
                ("stage3_new_evidence", &ev3_text),
                ("stage3_answer", &a3["answer"]),
                ("gold_answer", &gold),
            ],
            NOTHING,
            |_| Ok(()),
        )?;
        let t = match (j3.correct, self.config.keep_failed) {
            (true, _) => TrajectoryType::ITA,
            (false, true) => TrajectoryType::Failed,
            (false, false) => TrajectoryType::Discarded,
        };
        Ok((t, Some(Branch::Image)))
    }
}

/// Runs all stages for one sample and assembles the result.
pub fn process_sample(
    sample: &QaSample,
    backend: &dyn ChatBackend,
    tools: &ToolBinding,
    config: &FactoryConfig,
) -> Result<BranchOutcome, FactoryError> {
    let mut run = SampleRun {
        sample,
        backend,
        tools,
        config,
        generation: 0,
        stages: Vec::new(),
    };
    let result = run.run();
    let mut outcome = BranchOutcome {
        sample_id: sample.sample_id.clone(),
        image_ref: sample.image_ref.clone(),
        question: sample.question.clone(),
        gold_answers: sample.gold_answers.clone(),
        branch: None,
        trajectory_type: TrajectoryType::Discarded,
        stages: std::mem::take(&mut run.stages),
        assembled: None,
        difficulty: None,
        discard_reason: None,
    };
    match result {
        Err(Fatal::Backend(e)) => return Err(e.into()),
        Err(Fatal::Discard(reason)) => {
            outcome.discard_reason = Some(reason);
            return Ok(outcome);
        }
        Ok((TrajectoryType::Discarded, branch)) => {
            outcome.branch = branch;
            outcome.discard_reason = Some("final answer judged wrong".into());
            return Ok(outcome);
        }
        Ok((t, branch)) => {
            outcome.trajectory_type = t;
            outcome.branch = branch;
        }
    }
    match assemble_agent_trajectory(&outcome).and_then(|t| leak_check(&outcome, &t).map(|_| t)) {
        Ok(t) => {
            outcome.difficulty = Some(assign_difficulty(&t));
            outcome.assembled = Some(t);
        }
        Err(reason) => {
            outcome.trajectory_type = TrajectoryType::Discarded;
            outcome.discard_reason = Some(reason);
        }
    }
    Ok(outcome)
}

fn merge_think(parts: &[&str]) -> String {
    parts
        .iter()
        .map(|p| one_line(p))
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps stage records onto agent-protocol turns and observations.
pub fn assemble_agent_trajectory(outcome: &BranchOutcome) -> Result<Trajectory, String> {
    use StageStep::{Answer, Judge};
    let t = outcome.trajectory_type;
    if !TrajectoryType::CANONICAL.contains(&t) && t != TrajectoryType::Failed {
        return Err(format!("cannot assemble a {} outcome", t.label()));
    }
    let need = |stage, step, key| {
        outcome
            .field(stage, step, key)
            .ok_or_else(|| format!("missing {key} in {stage:?} {step:?}"))
    };
    let entity = format!(
        "The main entity appears to be {}.",
        one_line(need(Stage::S1, Answer, "entity")?)
    );
    let think1 = need(Stage::S1, Answer, "think")?;

    let mut turns = Vec::new();
    let mut evidence: Vec<Vec<EvidenceItem>> = Vec::new();
    if t == TrajectoryType::A {
        turns.push(TurnRecord::new(
            merge_think(&[think1, &entity]),
            None,
            ActionKind::Answer,
            one_line(need(Stage::S1, Answer, "answer")?),
        ));
    } else {
        let choose = need(Stage::S1, Judge, "choose")?;
        let s2 = match outcome.branch {
            Some(Branch::Image) => Stage::S2Image,
            Some(Branch::Text) => Stage::S2Text,
            None => return Err("missing branch".into()),
        };
        let first = match s2 {
            Stage::S2Image => TurnRecord::new(
                merge_think(&[think1, &entity, choose]),
                None,
                ActionKind::ImageSearch,
                IMAGE_PLACEHOLDER,
            ),
            _ => TurnRecord::new(
                merge_think(&[think1, &entity, choose]),
                None,
                ActionKind::TextSearch,
                one_line(need(Stage::S1, Judge, "text_search")?),
            ),
        };
        turns.push(first);
        evidence.push(
            outcome
                .record(s2, Answer)
                .map(|r| r.evidence.clone())
                .unwrap_or_default(),
        );
        let direct = matches!(t, TrajectoryType::IA | TrajectoryType::TA);
        if direct {
            turns.push(TurnRecord::new(
                merge_think(&[need(s2, Answer, "think")?]),
                None,
                ActionKind::Answer,
                one_line(need(s2, Answer, "answer")?),
            ));
        } else {
            let caption = outcome.field(s2, Judge, "caption").map(one_line);
            turns.push(TurnRecord::new(
                merge_think(&[need(s2, Judge, "think")?]),
                caption,
                ActionKind::TextSearch,
                one_line(need(s2, Judge, "text_search")?),
            ));
            evidence.push(
                outcome
                    .record(Stage::S3, Answer)
                    .map(|r| r.evidence.clone())
                    .unwrap_or_default(),
            );
            turns.push(TurnRecord::new(
                merge_think(&[need(Stage::S3, Answer, "think")?]),
                None,
                ActionKind::Answer,
                one_line(need(Stage::S3, Answer, "answer")?),
            ));
        }
    }

    let opts = ProtocolOptions::strict();
    for (i, turn) in turns.iter().enumerate() {
        if let Err(v) = parse_turn(&turn.raw) {
            return Err(format!("assembled turn {i} is invalid: {}", v[0]));
        }
        if let Some(v) = validate_in_context(turn, &turns[..i], opts).first() {
            return Err(format!("assembled turn {i} is invalid: {v}"));
        }
    }
    let observations: Vec<EvidenceBlock> = evidence
        .into_iter()
        .enumerate()
        .map(|(i, items)| render_evidence(items, i))
        .collect();
    let final_answer = turns.last().map(|t| t.action_payload.clone());
    Ok(Trajectory {
        task_id: outcome.sample_id.clone(),
        image_ref: outcome.image_ref.clone(),
        question: outcome.question.clone(),
        turns,
        observations,
        final_answer,
        terminated_by: Termination::Answer,
        config: RolloutConfig::default().snapshot(),
        rejected_turns: Vec::new(),
        context_chars: 0,
    })
}

/// Rejects trajectories whose judge-written text names a gold answer that no
/// evidence block contains.
pub fn leak_check(outcome: &BranchOutcome, traj: &Trajectory) -> Result<(), String> {
    let judge_text: Vec<&str> = [
        outcome.field(Stage::S1, StageStep::Judge, "choose"),
        outcome.field(Stage::S2Image, StageStep::Judge, "think"),
        outcome.field(Stage::S2Image, StageStep::Judge, "caption"),
        outcome.field(Stage::S2Text, StageStep::Judge, "think"),
    ]
    .into_iter()
    .flatten()
    .collect();
    for g in &outcome.gold_answers {
        if normalize_answer(g).is_empty() {
            continue;
        }
        let in_evidence = traj
            .observations
            .iter()
            .any(|o| contains_normalized(&o.rendered, g));
        if !in_evidence && judge_text.iter().any(|t| contains_normalized(t, g)) {
            return Err(format!("judge text mentions gold answer {g:?}"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FactorySummary {
    pub processed: usize,
    pub skipped_non_train: usize,
    pub by_type: BTreeMap<String, usize>,
    pub by_tier: BTreeMap<String, usize>,
}

pub fn summarize(outcomes: &[BranchOutcome], skipped_non_train: usize) -> FactorySummary {
    let mut s = FactorySummary {
        processed: outcomes.len(),
        skipped_non_train,
        ..Default::default()
    };
    for o in outcomes {
        *s.by_type
            .entry(o.trajectory_type.label().to_string())
            .or_default() += 1;
        if let (true, Some(d)) = (o.is_usable(), &o.difficulty) {
            *s.by_tier.entry(d.tier.to_string()).or_default() += 1;
        }
    }
    s
}

/// Processes the training split on a bounded worker pool; output order
/// follows input order.
pub fn run_factory(
    samples: &[QaSample],
    backend: &dyn ChatBackend,
    tools: &ToolBinding,
    config: &FactoryConfig,
) -> Result<(Vec<BranchOutcome>, FactorySummary), FactoryError> {
    let train: Vec<&QaSample> = samples.iter().filter(|s| s.split == Split::Train).collect();
    let skipped = samples.len() - train.len();
    if skipped > 0 {
        tracing::info!(skipped, "ignoring samples outside the training split");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.max(1))
        .build()
        .expect("thread pool");
    let outcomes: Vec<BranchOutcome> = pool.install(|| {
        train
            .par_iter()
            .map(|s| process_sample(s, backend, tools, config))
            .collect::<Result<_, _>>()
    })?;
    let summary = summarize(&outcomes, skipped);
    Ok((outcomes, summary))
}

/// Draws `n_per_tier` usable outcomes from each tier without replacement.
pub fn sample_balanced(
    outcomes: &[BranchOutcome],
    n_per_tier: usize,
    seed: u64,
) -> Result<Vec<BranchOutcome>, FactoryError> {
    let mut tiers: BTreeMap<Tier, Vec<&BranchOutcome>> = [Tier::Easy, Tier::Medium, Tier::Hard]
        .into_iter()
        .map(|t| (t, Vec::new()))
        .collect();
    for o in outcomes.iter().filter(|o| o.is_usable()) {
        if let Some(d) = &o.difficulty {
            tiers.get_mut(&d.tier).expect("all tiers present").push(o);
        }
    }
    for (tier, members) in &tiers {
        if members.len() < n_per_tier {
            return Err(FactoryError::Deficient {
                tier: *tier,
                have: members.len(),
                need: n_per_tier,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * n_per_tier);
    for members in tiers.values_mut() {
        members.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let mut picked = rand::seq::index::sample(&mut rng, members.len(), n_per_tier).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| members[i].clone()));
    }
    Ok(out)
}
