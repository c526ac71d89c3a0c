//! Scoring, trajectory-level reports, and the top-k and knowledge-base-size
//! sweeps built on top of them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{matches_any, MatchPolicy};
use crate::embed::EmbeddingProvider;
use crate::factory::{
    action_label, judge_answer, FactoryError, JudgeMode, QaSample, Split, TrajectoryType,
};
use crate::gateway::{ChatBackend, GatewayError};
use crate::kb::{subsample_corpus, Corpus, KbError};
use crate::retrieval::{KnowledgeTools, RetrievalError};
use crate::runtime::{
    rollout_batch, AgentTask, ConfigSnapshot, RolloutConfig, ToolBinding, Trajectory,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to aggregate")]
    Empty,
    #[error("{0}")]
    Data(String),
    #[error("judge output could not be parsed: {0:?}")]
    Unscored(String),
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    /// Normalized exact match against any gold answer.
    #[default]
    Em,
    /// Byte-exact match, no normalization.
    RawEm,
    /// Delegates to a model judge.
    Judge,
}

/// Empty predictions score false. A judge reply without a verdict marker is
/// returned as [`EvalError::Unscored`].
pub fn score_answer(
    pred: &str,
    gold: &[String],
    metric: ScoreMetric,
    judge: Option<&dyn ChatBackend>,
) -> Result<bool, EvalError> {
    if pred.trim().is_empty() {
        return Ok(false);
    }
    match metric {
        ScoreMetric::Em => Ok(matches_any(pred, gold, MatchPolicy::Normalized)),
        ScoreMetric::RawEm => Ok(matches_any(pred, gold, MatchPolicy::Raw)),
        ScoreMetric::Judge => {
            judge_answer(pred, gold, JudgeMode::ModelJudge, judge).map_err(|e| match e {
                FactoryError::JudgeParseFailure(out) => EvalError::Unscored(out),
                FactoryError::Backend(g) => EvalError::Backend(g),
                other => EvalError::Data(other.to_string()),
            })
        }
    }
}

/// `None` when the trajectory made no tool call.
pub fn hit_at_any_turn(traj: &Trajectory, gold_article_id: &str) -> Option<bool> {
    if traj.tool_calls() == 0 {
        return None;
    }
    Some(
        traj.observations
            .iter()
            .flat_map(|o| &o.items)
            .any(|h| h.article_id == gold_article_id),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub trajectory_type: String,
    pub answer_correct: bool,
    pub retrieval_hit: Option<bool>,
    pub n_tool_calls: usize,
    #[serde(default)]
    pub split_tags: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSet {
    pub records: Vec<EvalRecord>,
    /// Judge replies that could not be parsed; those samples have no record.
    pub unscored: usize,
    pub empty_predictions: usize,
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Label used in reports: the action shape for answered runs, and the shape
/// without a final answer otherwise (`T→T→T→T` for an exhausted budget).
pub fn record_label(traj: &Trajectory) -> String {
    let actions = traj.action_sequence();
    if actions.is_empty() {
        TrajectoryType::Failed.label().to_string()
    } else {
        action_label(&actions)
    }
}

/// Scores each trajectory against its sample. Records come back sorted by
/// sample id whatever the input order.
pub fn build_records(
    trajectories: &[Trajectory],
    samples: &[QaSample],
    metric: ScoreMetric,
    judge: Option<&dyn ChatBackend>,
    threads: usize,
) -> Result<RecordSet, EvalError> {
    let by_id: BTreeMap<&str, &QaSample> =
        samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    let scored: Vec<Result<(EvalRecord, bool), EvalError>> = pool.install(|| {
        trajectories
            .par_iter()
            .map(|t| {
                let s = by_id.get(t.task_id.as_str()).ok_or_else(|| {
                    EvalError::Data(format!("trajectory {} has no dataset sample", t.task_id))
                })?;
                let gold_article = s.gold_article_id.as_deref().ok_or_else(|| {
                    EvalError::Data(format!("sample {} has no gold_article_id", s.sample_id))
                })?;
                let pred = t.final_answer.as_deref().unwrap_or("");
                let answer_correct = score_answer(pred, &s.gold_answers, metric, judge)?;
                let mut split_tags = vec![split_name(s.split).to_string()];
                split_tags.extend(s.tags.iter().cloned());
                let rec = EvalRecord {
                    sample_id: s.sample_id.clone(),
                    trajectory_type: record_label(t),
                    answer_correct,
                    retrieval_hit: hit_at_any_turn(t, gold_article),
                    n_tool_calls: t.tool_calls(),
                    split_tags,
                };
                Ok((rec, pred.trim().is_empty()))
            })
            .collect()
    });
    let mut set = RecordSet::default();
    for r in scored {
        match r {
            Ok((rec, empty)) => {
                set.empty_predictions += usize::from(empty);
                set.records.push(rec);
            }
            Err(EvalError::Unscored(_)) => set.unscored += 1,
            Err(e) => return Err(e),
        }
    }
    set.records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeRow {
    pub trajectory_type: String,
    pub count: usize,
    pub proportion: f64,
    /// Only over records with at least one tool call; `None` when there are none.
    pub recall: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub tag: String,
    pub count: usize,
    pub accuracy: f64,
}

/// Retrieval correctness against answer correctness, over records that made
/// at least one tool call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    pub hit_correct: usize,
    pub hit_wrong: usize,
    pub miss_correct: usize,
    pub miss_wrong: usize,
}

fn pct(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

impl Contingency {
    pub fn total(&self) -> usize {
        self.hit_correct + self.hit_wrong + self.miss_correct + self.miss_wrong
    }

    /// Row-normalized (answer correct %, answer wrong %) for retrieval hits.
    pub fn hit_row(&self) -> Option<(f64, f64)> {
        let n = self.hit_correct + self.hit_wrong;
        Some((pct(self.hit_correct, n)?, pct(self.hit_wrong, n)?))
    }

    pub fn miss_row(&self) -> Option<(f64, f64)> {
        let n = self.miss_correct + self.miss_wrong;
        Some((pct(self.miss_correct, n)?, pct(self.miss_wrong, n)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n_records: usize,
    pub overall_accuracy: f64,
    pub retrieval_recall: Option<f64>,
    pub per_split: Vec<SplitRow>,
    pub per_type: Vec<TypeRow>,
    pub contingency: Contingency,
    pub unscored: usize,
    pub empty_predictions: usize,
    pub rollout_errors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ConfigSnapshot>,
}

#[derive(Default)]
struct Tally {
    n: usize,
    correct: usize,
    tool: usize,
    hits: usize,
}

impl Tally {
    fn add(&mut self, r: &EvalRecord) {
        self.n += 1;
        self.correct += usize::from(r.answer_correct);
        if let Some(h) = r.retrieval_hit {
            self.tool += 1;
            self.hits += usize::from(h);
        }
    }
}

fn type_order(label: &str) -> (usize, &str) {
    let pos = TrajectoryType::CANONICAL
        .iter()
        .position(|t| t.label() == label);
    (pos.unwrap_or(TrajectoryType::CANONICAL.len()), label)
}

/// Counts and rates over `records`. The result does not depend on record order.
pub fn aggregate(records: &[EvalRecord]) -> Result<Report, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut all = Tally::default();
    let mut types: BTreeMap<&str, Tally> = BTreeMap::new();
    let mut splits: BTreeMap<&str, Tally> = BTreeMap::new();
    let mut c = Contingency::default();
    for r in records {
        all.add(r);
        types.entry(&r.trajectory_type).or_default().add(r);
        let tags: BTreeSet<&str> = r.split_tags.iter().map(String::as_str).collect();
        for t in tags {
            splits.entry(t).or_default().add(r);
        }
        match (r.retrieval_hit, r.answer_correct) {
            (Some(true), true) => c.hit_correct += 1,
            (Some(true), false) => c.hit_wrong += 1,
            (Some(false), true) => c.miss_correct += 1,
            (Some(false), false) => c.miss_wrong += 1,
            (None, _) => {}
        }
    }
    let n = all.n;
    let mut per_type: Vec<TypeRow> = types
        .into_iter()
        .map(|(label, t)| TypeRow {
            trajectory_type: label.to_string(),
            count: t.n,
            proportion: 100.0 * t.n as f64 / n as f64,
            recall: pct(t.hits, t.tool),
            accuracy: 100.0 * t.correct as f64 / t.n as f64,
        })
        .collect();
    per_type.sort_by(|a, b| type_order(&a.trajectory_type).cmp(&type_order(&b.trajectory_type)));
    let per_split = splits
        .into_iter()
        .map(|(tag, t)| SplitRow {
            tag: tag.to_string(),
            count: t.n,
            accuracy: 100.0 * t.correct as f64 / t.n as f64,
        })
        .collect();
    Ok(Report {
        n_records: n,
        overall_accuracy: 100.0 * all.correct as f64 / n as f64,
        retrieval_recall: pct(all.hits, all.tool),
        per_split,
        per_type,
        contingency: c,
        unscored: 0,
        empty_predictions: 0,
        rollout_errors: 0,
        config: None,
    })
}

/// Aggregates a record set and carries its side counts into the report.
pub fn report_for(set: &RecordSet) -> Result<Report, EvalError> {
    let mut r = aggregate(&set.records)?;
    r.unscored = set.unscored;
    r.empty_predictions = set.empty_predictions;
    Ok(r)
}

fn fmt1(v: Option<f64>) -> String {
    v.map_or_else(|| "–".to_string(), |x| format!("{x:.1}"))
}

impl Report {
    pub fn type_row(&self, label: &str) -> Option<&TypeRow> {
        self.per_type.iter().find(|r| r.trajectory_type == label)
    }

    /// Aligned plain-text rendering, one decimal place.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>10}", "records", self.n_records);
        let _ = writeln!(
            s,
            "{:<16}{:>10}",
            "accuracy",
            fmt1(Some(self.overall_accuracy))
        );
        let _ = writeln!(
            s,
            "{:<16}{:>10}",
            "retrieval hit",
            fmt1(self.retrieval_recall)
        );
        if self.unscored + self.empty_predictions + self.rollout_errors > 0 {
            let _ = writeln!(s, "{:<16}{:>10}", "unscored", self.unscored);
            let _ = writeln!(s, "{:<16}{:>10}", "empty answers", self.empty_predictions);
            let _ = writeln!(s, "{:<16}{:>10}", "rollout errors", self.rollout_errors);
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<16}{:>10}{:>10}{:>10}{:>10}",
            "type", "count", "share", "recall", "accuracy"
        );
        for r in &self.per_type {
            let _ = writeln!(
                s,
                "{:<16}{:>10}{:>10}{:>10}{:>10}",
                r.trajectory_type,
                r.count,
                fmt1(Some(r.proportion)),
                fmt1(r.recall),
                fmt1(Some(r.accuracy))
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16}{:>10}{:>10}", "split", "count", "accuracy");
        for r in &self.per_split {
            let _ = writeln!(
                s,
                "{:<16}{:>10}{:>10}",
                r.tag,
                r.count,
                fmt1(Some(r.accuracy))
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16}{:>10}{:>10}", "retrieval", "correct", "wrong");
        let c = &self.contingency;
        for (name, row) in [("hit", c.hit_row()), ("miss", c.miss_row())] {
            let _ = writeln!(
                s,
                "{:<16}{:>10}{:>10}",
                name,
                fmt1(row.map(|r| r.0)),
                fmt1(row.map(|r| r.1))
            );
        }
        s
    }

    /// One row per figure: `section,key,count,proportion,recall,accuracy`.
    /// Contingency rows put the answer-correct percentage in `accuracy`.
    pub fn render_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_default();
        let mut s = String::from("section,key,count,proportion,recall,accuracy\n");
        let _ = writeln!(
            s,
            "overall,all,{},100.0,{},{:.1}",
            self.n_records,
            opt(self.retrieval_recall),
            self.overall_accuracy
        );
        for r in &self.per_type {
            let _ = writeln!(
                s,
                "type,{},{},{:.1},{},{:.1}",
                r.trajectory_type,
                r.count,
                r.proportion,
                opt(r.recall),
                r.accuracy
            );
        }
        for r in &self.per_split {
            let _ = writeln!(s, "split,{},{},,,{:.1}", r.tag, r.count, r.accuracy);
        }
        let c = &self.contingency;
        let _ = writeln!(
            s,
            "contingency,hit,{},,,{}",
            c.hit_correct + c.hit_wrong,
            opt(c.hit_row().map(|r| r.0))
        );
        let _ = writeln!(
            s,
            "contingency,miss,{},,,{}",
            c.miss_correct + c.miss_wrong,
            opt(c.miss_row().map(|r| r.0))
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Writes `<stem>.txt`, `<stem>.csv` and `<stem>.json` under `dir`.
pub fn write_report(dir: &Path, stem: &str, report: &Report) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut out = Vec::new();
    for (ext, body) in [
        ("txt", report.render_text()),
        ("csv", report.render_csv()),
        ("json", report.to_json()),
    ] {
        let p = dir.join(format!("{stem}.{ext}"));
        fs::write(&p, body).map_err(|e| io_err(&p, e))?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<(), EvalError> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    crate::runtime::read_jsonl(path).map_err(|e| io_err(path, e))
}

pub fn tasks_from_samples(samples: &[QaSample]) -> Vec<AgentTask> {
    samples
        .iter()
        .map(|s| AgentTask {
            task_id: s.sample_id.clone(),
            image_ref: s.image_ref.clone(),
            question: s.question.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub metric: ScoreMetric,
    pub threads: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            metric: ScoreMetric::Em,
            threads: 1,
        }
    }
}

pub struct Evaluation {
    pub trajectories: Vec<Trajectory>,
    pub records: RecordSet,
    pub report: Report,
}

/// Rolls out every sample, scores the runs and aggregates. Rollouts that fail
/// with a backend error are counted in `rollout_errors` and left out.
pub fn evaluate(
    samples: &[QaSample],
    backend: &dyn ChatBackend,
    tools: &ToolBinding,
    config: &RolloutConfig,
    settings: EvalSettings,
    judge: Option<&dyn ChatBackend>,
) -> Result<Evaluation, EvalError> {
    config
        .validate()
        .map_err(|e| EvalError::Data(e.to_string()))?;
    let tasks = tasks_from_samples(samples);
    let mut trajectories = Vec::with_capacity(tasks.len());
    let mut rollout_errors = 0;
    for r in rollout_batch(&tasks, backend, tools, config, settings.threads) {
        match r {
            Ok(t) => trajectories.push(t),
            Err(e) => {
                tracing::warn!(error = %e, "rollout failed");
                rollout_errors += 1;
            }
        }
    }
    let records = build_records(
        &trajectories,
        samples,
        settings.metric,
        judge,
        settings.threads,
    )?;
    let mut report = report_for(&records)?;
    report.rollout_errors = rollout_errors;
    report.config = Some(config.snapshot());
    Ok(Evaluation {
        trajectories,
        records,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub k_text: usize,
    pub k_image: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<Report>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkGrid {
    pub text_ks: Vec<usize>,
    pub image_ks: Vec<usize>,
    /// Row-major: text k outer, image k inner.
    pub cells: Vec<GridCell>,
}

impl TopkGrid {
    pub fn cell(&self, k_text: usize, k_image: usize) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.k_text == k_text && c.k_image == k_image)
    }

    fn value(c: &GridCell) -> String {
        c.report.as_ref().map_or_else(
            || "ERR".to_string(),
            |r| format!("{:.1}", r.overall_accuracy),
        )
    }

    /// Accuracy matrix with text k down the rows and image k across.
    pub fn render_text(&self) -> String {
        let mut s = format!("{:<8}image k\n", "");
        let _ = write!(s, "{:<8}", "text k");
        for ki in &self.image_ks {
            let _ = write!(s, "{ki:>8}");
        }
        s.push('\n');
        for kt in &self.text_ks {
            let _ = write!(s, "{kt:<8}");
            for ki in &self.image_ks {
                let v = self
                    .cell(*kt, *ki)
                    .map_or_else(|| "-".to_string(), Self::value);
                let _ = write!(s, "{v:>8}");
            }
            s.push('\n');
        }
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("text_k");
        for ki in &self.image_ks {
            let _ = write!(s, ",image_k={ki}");
        }
        s.push('\n');
        for kt in &self.text_ks {
            let _ = write!(s, "{kt}");
            for ki in &self.image_ks {
                let v = self.cell(*kt, *ki).map_or_else(String::new, Self::value);
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// One full evaluation per (text k, image k) pair, identical otherwise. A
/// failing cell records its error and the grid carries on.
pub fn run_topk_grid(
    samples: &[QaSample],
    backend: &dyn ChatBackend,
    tools: &ToolBinding,
    base: &RolloutConfig,
    text_ks: &[usize],
    image_ks: &[usize],
    settings: EvalSettings,
) -> Result<TopkGrid, EvalError> {
    if text_ks.is_empty() || image_ks.is_empty() {
        return Err(EvalError::Data(
            "top-k grid needs at least one text k and one image k".into(),
        ));
    }
    let mut cells = Vec::new();
    for &k_text in text_ks {
        for &k_image in image_ks {
            let config = RolloutConfig {
                k_text,
                k_image,
                ..base.clone()
            };
            let cell = match evaluate(samples, backend, tools, &config, settings, None) {
                Ok(e) => GridCell {
                    k_text,
                    k_image,
                    report: Some(e.report),
                    error: None,
                },
                Err(e) => {
                    tracing::warn!(k_text, k_image, error = %e, "grid cell failed");
                    GridCell {
                        k_text,
                        k_image,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            cells.push(cell);
        }
    }
    Ok(TopkGrid {
        text_ks: text_ks.to_vec(),
        image_ks: image_ks.to_vec(),
        cells,
    })
}

/// Writes `cell_t{k}_i{k}.json` per cell plus `topk_grid.{txt,csv,json}`.
pub fn write_grid(dir: &Path, grid: &TopkGrid) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut out = Vec::new();
    for c in &grid.cells {
        let p = dir.join(format!("cell_t{}_i{}.json", c.k_text, c.k_image));
        fs::write(
            &p,
            serde_json::to_string_pretty(c).expect("cell serializes") + "\n",
        )
        .map_err(|e| io_err(&p, e))?;
        out.push(p);
    }
    let json = serde_json::to_string_pretty(grid).expect("grid serializes") + "\n";
    for (name, body) in [
        ("topk_grid.txt", grid.render_text()),
        ("topk_grid.csv", grid.render_csv()),
        ("topk_grid.json", json),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))?;
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub size: usize,
    pub n_sections: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<Report>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbScaleSeries {
    pub seed: u64,
    pub points: Vec<ScalePoint>,
}

impl KbScaleSeries {
    pub fn render_csv(&self) -> String {
        let mut s = String::from("size,sections,accuracy,retrieval_recall\n");
        for p in &self.points {
            let (acc, rec) = match &p.report {
                Some(r) => (
                    format!("{:.1}", r.overall_accuracy),
                    r.retrieval_recall
                        .map(|x| format!("{x:.1}"))
                        .unwrap_or_default(),
                ),
                None => ("ERR".to_string(), String::new()),
            };
            let _ = writeln!(s, "{},{},{acc},{rec}", p.size, p.n_sections);
        }
        s
    }

    pub fn render_text(&self) -> String {
        let mut s = format!(
            "{:>8}{:>10}{:>10}{:>10}\n",
            "size", "sections", "accuracy", "recall"
        );
        for p in &self.points {
            let (acc, rec) = match &p.report {
                Some(r) => (fmt1(Some(r.overall_accuracy)), fmt1(r.retrieval_recall)),
                None => ("ERR".to_string(), "-".to_string()),
            };
            let _ = writeln!(s, "{:>8}{:>10}{acc:>10}{rec:>10}", p.size, p.n_sections);
        }
        s
    }
}

/// Evaluates against seeded subsamples of `corpus`, one per size, each
/// keeping every sample's gold article and rebuilding both indexes.
#[allow(clippy::too_many_arguments)]
pub fn run_kb_scale(
    samples: &[QaSample],
    corpus: &Corpus,
    sizes: &[usize],
    seed: u64,
    backend: &dyn ChatBackend,
    text_provider: Arc<EmbeddingProvider>,
    image_provider: Arc<EmbeddingProvider>,
    config: &RolloutConfig,
    settings: EvalSettings,
) -> Result<KbScaleSeries, EvalError> {
    if sizes.is_empty() {
        return Err(EvalError::Data(
            "kb-scale sweep needs at least one size".into(),
        ));
    }
    let mut gold = BTreeSet::new();
    for s in samples {
        let id = s.gold_article_id.clone().ok_or_else(|| {
            EvalError::Data(format!("sample {} has no gold_article_id", s.sample_id))
        })?;
        gold.insert(id);
    }
    let mut points = Vec::new();
    for &size in sizes {
        let run = || -> Result<(usize, Report), EvalError> {
            let sub = Arc::new(subsample_corpus(corpus, size, seed, &gold)?);
            let n_sections = sub.stats().n_sections;
            let kt = Arc::new(KnowledgeTools::build(
                sub,
                text_provider.clone(),
                image_provider.clone(),
            )?);
            let tools = ToolBinding::new(kt.clone(), kt);
            Ok((
                n_sections,
                evaluate(samples, backend, &tools, config, settings, None)?.report,
            ))
        };
        points.push(match run() {
            Ok((n_sections, report)) => ScalePoint {
                size,
                n_sections,
                report: Some(report),
                error: None,
            },
            Err(e) => {
                tracing::warn!(size, error = %e, "kb-scale point failed");
                ScalePoint {
                    size,
                    n_sections: 0,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    Ok(KbScaleSeries { seed, points })
}

/// Writes `kb_{i}_{size}.json` per point plus `kb_scale.{txt,csv,json}`.
pub fn write_kb_scale(dir: &Path, series: &KbScaleSeries) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut out = Vec::new();
    for (i, p) in series.points.iter().enumerate() {
        let path = dir.join(format!("kb_{i}_{}.json", p.size));
        fs::write(
            &path,
            serde_json::to_string_pretty(p).expect("point serializes") + "\n",
        )
        .map_err(|e| io_err(&path, e))?;
        out.push(path);
    }
    let json = serde_json::to_string_pretty(series).expect("series serializes") + "\n";
    for (name, body) in [
        ("kb_scale.txt", series.render_text()),
        ("kb_scale.csv", series.render_csv()),
        ("kb_scale.json", json),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))?;
        out.push(p);
    }
    Ok(out)
}
