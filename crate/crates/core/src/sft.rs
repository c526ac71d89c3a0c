//! Linearizes trajectories into supervised sequences where only the model's
//! own turns are trained on, and writes them as JSON Lines with a manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::factory::{BranchOutcome, Tier, TrajectoryType};
use crate::protocol::{parse_turn, validate_in_context, ProtocolOptions};
use crate::runtime::{question_message, Trajectory};

pub const EMITTER_VERSION: &str = "sft-emitter/1";
/// Roughly three characters per token over a 16k-token context.
pub const DEFAULT_MAX_CHARS: usize = 49_152;

#[derive(Debug, Error)]
pub enum SftError {
    #[error("{task_id}: {label} trajectories are not emitted")]
    RejectedLabel { task_id: String, label: String },
    #[error("{task_id}: turn {turn} fails strict validation: {message}")]
    Invalid {
        task_id: String,
        turn: usize,
        message: String,
    },
    #[error("{task_id}: {observations} observation(s) for {tool_turns} tool turn(s)")]
    Shape {
        task_id: String,
        observations: usize,
        tool_turns: usize,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentRole {
    Instruction,
    Decision,
    Observation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub role: SegmentRole,
    pub text: String,
    pub supervise: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub task_id: String,
    pub trajectory_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Tier>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearizedSample {
    pub meta: SampleMeta,
    pub segments: Vec<Segment>,
}

impl LinearizedSample {
    pub fn text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn char_len(&self) -> usize {
        self.segments.iter().map(|s| s.text.chars().count()).sum()
    }
}

/// Splits a strict-valid trajectory into instruction, decision and
/// observation segments. Only decisions are supervised.
pub fn linearize(
    traj: &Trajectory,
    system_prompt: &str,
    meta: SampleMeta,
) -> Result<LinearizedSample, SftError> {
    if meta.trajectory_type == TrajectoryType::Discarded.label()
        || meta.trajectory_type == TrajectoryType::Failed.label()
    {
        return Err(SftError::RejectedLabel {
            task_id: meta.task_id,
            label: meta.trajectory_type,
        });
    }
    for (i, t) in traj.turns.iter().enumerate() {
        let mut v = parse_turn(&t.raw).err().unwrap_or_default();
        v.extend(validate_in_context(
            t,
            &traj.turns[..i],
            ProtocolOptions::strict(),
        ));
        if let Some(first) = v.first() {
            return Err(SftError::Invalid {
                task_id: meta.task_id,
                turn: i,
                message: first.to_string(),
            });
        }
    }
    if traj.observations.len() != traj.tool_calls() {
        return Err(SftError::Shape {
            task_id: meta.task_id,
            observations: traj.observations.len(),
            tool_turns: traj.tool_calls(),
        });
    }
    let question = question_message(&traj.image_ref, &traj.question).content;
    let mut segments = vec![Segment {
        role: SegmentRole::Instruction,
        text: format!("{system_prompt}\n\n{question}\n"),
        supervise: false,
    }];
    let mut obs = traj.observations.iter();
    for t in &traj.turns {
        segments.push(Segment {
            role: SegmentRole::Decision,
            text: t.raw.clone(),
            supervise: true,
        });
        if t.action.is_tool() {
            let o = obs.next().expect("checked above");
            segments.push(Segment {
                role: SegmentRole::Observation,
                text: format!("\n{}\n", o.rendered),
                supervise: false,
            });
        }
    }
    Ok(LinearizedSample { meta, segments })
}

pub fn linearize_outcome(
    outcome: &BranchOutcome,
    system_prompt: &str,
) -> Result<LinearizedSample, SftError> {
    let meta = SampleMeta {
        task_id: outcome.sample_id.clone(),
        trajectory_type: outcome.trajectory_type.label().to_string(),
        difficulty: outcome.difficulty.as_ref().map(|d| d.tier),
    };
    match &outcome.assembled {
        Some(t) => linearize(t, system_prompt, meta),
        None => Err(SftError::RejectedLabel {
            task_id: meta.task_id,
            label: meta.trajectory_type,
        }),
    }
}

fn evidence_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)<evidence>.*?</evidence>").expect("static regex"))
}

fn decision_regexes() -> &'static [Regex] {
    static RE: OnceLock<Vec<Regex>> = OnceLock::new();
    RE.get_or_init(|| {
        ["think", "caption", "answer", "text_search", "image_search"]
            .iter()
            .map(|t| Regex::new(&format!(r"(?s)<{t}>.*?</{t}>")).expect("static regex"))
            .collect()
    })
}

/// Scans the text after the instruction and reports supervised bytes inside
/// evidence spans and unsupervised bytes inside decision-tag spans.
pub fn mask_violations(sample: &LinearizedSample) -> Vec<String> {
    let mut out = Vec::new();
    let Some(first) = sample.segments.first() else {
        return vec!["no segments".into()];
    };
    if first.role != SegmentRole::Instruction || first.supervise {
        out.push("first segment must be an unsupervised instruction".into());
    }
    let body: String = sample.segments[1..]
        .iter()
        .map(|s| s.text.as_str())
        .collect();
    let mut supervised = Vec::with_capacity(body.len());
    for s in &sample.segments[1..] {
        supervised.extend(std::iter::repeat_n(s.supervise, s.text.len()));
    }
    for m in evidence_regex().find_iter(&body) {
        if supervised[m.start()..m.end()].iter().any(|&b| b) {
            out.push(format!(
                "supervised text inside evidence at byte {}",
                m.start()
            ));
        }
    }
    for re in decision_regexes() {
        for m in re.find_iter(&body) {
            if !supervised[m.start()..m.end()].iter().all(|&b| b) {
                out.push(format!("unsupervised decision span at byte {}", m.start()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub emitter_version: String,
    pub max_chars: usize,
    pub total: usize,
    pub dropped_over_cap: usize,
    /// Inputs that were never linearized, by label.
    pub skipped: BTreeMap<String, usize>,
    pub by_type: BTreeMap<String, usize>,
    pub by_difficulty: BTreeMap<String, usize>,
    /// Sample counts keyed by the smallest power of two (at least 1024)
    /// not below the sample's character length.
    pub length_histogram: BTreeMap<usize, usize>,
    pub sources: Vec<SourceFile>,
    pub output_sha256: String,
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let stem = dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    dataset.with_file_name(format!("{stem}.manifest.json"))
}

pub fn sha256_file(path: &Path) -> Result<String, SftError> {
    let bytes = fs::read(path).map_err(|e| SftError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn length_bucket(n: usize) -> usize {
    n.max(1024).next_power_of_two()
}

/// Writes the samples that fit under `max_chars` plus a manifest beside the
/// file. On any write error neither file is left behind.
pub fn emit_dataset(
    samples: &[LinearizedSample],
    skipped: BTreeMap<String, usize>,
    path: &Path,
    max_chars: usize,
    sources: &[PathBuf],
) -> Result<DatasetManifest, SftError> {
    let io = |p: &Path, e: &dyn std::fmt::Display| SftError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    let mut source_files = Vec::new();
    for s in sources {
        source_files.push(SourceFile {
            path: s.display().to_string(),
            sha256: sha256_file(s)?,
        });
    }
    let mut manifest = DatasetManifest {
        emitter_version: EMITTER_VERSION.to_string(),
        max_chars,
        total: 0,
        dropped_over_cap: 0,
        skipped,
        by_type: BTreeMap::new(),
        by_difficulty: BTreeMap::new(),
        length_histogram: BTreeMap::new(),
        sources: source_files,
        output_sha256: String::new(),
    };
    let tmp = path.with_extension("jsonl.partial");
    let write = |manifest: &mut DatasetManifest| -> Result<(), SftError> {
        let mut w = BufWriter::new(File::create(&tmp).map_err(|e| io(&tmp, &e))?);
        for s in samples {
            let len = s.char_len();
            if len > max_chars {
                manifest.dropped_over_cap += 1;
                continue;
            }
            let line = serde_json::to_string(s).map_err(|e| io(&tmp, &e))?;
            writeln!(w, "{line}").map_err(|e| io(&tmp, &e))?;
            manifest.total += 1;
            *manifest
                .by_type
                .entry(s.meta.trajectory_type.clone())
                .or_default() += 1;
            let tier = s
                .meta
                .difficulty
                .map_or_else(|| "unknown".to_string(), |t| t.to_string());
            *manifest.by_difficulty.entry(tier).or_default() += 1;
            *manifest
                .length_histogram
                .entry(length_bucket(len))
                .or_default() += 1;
        }
        w.flush().map_err(|e| io(&tmp, &e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| io(path, &e))?;
        manifest.output_sha256 = sha256_file(path)?;
        let mp = manifest_path(path);
        let text = serde_json::to_string_pretty(manifest).map_err(|e| io(&mp, &e))?;
        fs::write(&mp, text + "\n").map_err(|e| io(&mp, &e))
    };
    if let Err(e) = write(&mut manifest) {
        let _ = fs::remove_file(&tmp);
        let _ = fs::remove_file(path);
        let _ = fs::remove_file(manifest_path(path));
        return Err(e);
    }
    Ok(manifest)
}

pub fn read_dataset(path: &Path) -> Result<Vec<LinearizedSample>, SftError> {
    crate::runtime::read_jsonl(path).map_err(|e| SftError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
