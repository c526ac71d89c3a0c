//! `validate`: checks files against the same rules the producers enforce.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;

use kbsearch_core::factory::{load_qa_dataset, BranchOutcome, TrajectoryType};
use kbsearch_core::gateway::load_script;
use kbsearch_core::kb::load_corpus;
use kbsearch_core::protocol::{validate_in_context, ProtocolMode, ProtocolOptions};
use kbsearch_core::runtime::Trajectory;
use kbsearch_core::sft::{
    manifest_path, mask_violations, sha256_file, DatasetManifest, LinearizedSample,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::ValidateArgs;

/// Reads JSON Lines and applies `check` to each record; problems come back as
/// `path:line: message`.
fn scan<T: DeserializeOwned>(
    path: &Path,
    mut check: impl FnMut(&T) -> Vec<String>,
) -> (usize, Vec<String>) {
    let mut problems = Vec::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) => return (0, vec![format!("{}: {e}", path.display())]),
    };
    let mut n = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                problems.push(format!("{}:{}: {e}", path.display(), i + 1));
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(v) => {
                n += 1;
                problems.extend(
                    check(&v)
                        .into_iter()
                        .map(|m| format!("{}:{}: {m}", path.display(), i + 1)),
                );
            }
            Err(e) => problems.push(format!("{}:{}: schema: {e}", path.display(), i + 1)),
        }
    }
    (n, problems)
}

fn check_trajectory(t: &Trajectory) -> Vec<String> {
    let opts = ProtocolOptions {
        mode: if t.config.strict_protocol {
            ProtocolMode::Strict
        } else {
            ProtocolMode::Lenient
        },
        allow_caption_before_answer: t.config.allow_caption_before_answer,
    };
    let mut out = Vec::new();
    for (i, turn) in t.turns.iter().enumerate() {
        for v in validate_in_context(turn, &t.turns[..i], opts) {
            out.push(format!("{}: turn {i}: {v}", t.task_id));
        }
    }
    if t.turns.len() > t.config.budget {
        out.push(format!(
            "{}: {} turns exceed the budget of {}",
            t.task_id,
            t.turns.len(),
            t.config.budget
        ));
    }
    if t.observations.len() != t.tool_calls() {
        out.push(format!(
            "{}: {} observations for {} tool calls",
            t.task_id,
            t.observations.len(),
            t.tool_calls()
        ));
    }
    out
}

fn check_outcome(o: &BranchOutcome) -> Vec<String> {
    let Some(t) = &o.assembled else {
        return if TrajectoryType::CANONICAL.contains(&o.trajectory_type) {
            vec![format!(
                "{}: {} outcome has no trajectory",
                o.sample_id,
                o.trajectory_type.label()
            )]
        } else {
            Vec::new()
        };
    };
    let mut out = check_trajectory(t);
    if TrajectoryType::from_actions(&t.action_sequence()) != Some(o.trajectory_type) {
        out.push(format!(
            "{}: label {} does not match the action sequence",
            o.sample_id,
            o.trajectory_type.label()
        ));
    }
    out
}

fn check_sft(s: &LinearizedSample) -> Vec<String> {
    let mut out: Vec<String> = mask_violations(s)
        .into_iter()
        .map(|m| format!("{}: {m}", s.meta.task_id))
        .collect();
    if [
        TrajectoryType::Discarded.label(),
        TrajectoryType::Failed.label(),
    ]
    .contains(&s.meta.trajectory_type.as_str())
    {
        out.push(format!(
            "{}: {} samples must not be emitted",
            s.meta.task_id, s.meta.trajectory_type
        ));
    }
    out
}

fn check_manifest(dataset: &Path) -> Vec<String> {
    let mp = manifest_path(dataset);
    let Ok(text) = std::fs::read_to_string(&mp) else {
        return Vec::new();
    };
    let m: DatasetManifest = match serde_json::from_str(&text) {
        Ok(m) => m,
        Err(e) => return vec![format!("{}: schema: {e}", mp.display())],
    };
    match sha256_file(dataset) {
        Ok(h) if h == m.output_sha256 => Vec::new(),
        Ok(_) => vec![format!(
            "{}: output_sha256 does not match {}",
            mp.display(),
            dataset.display()
        )],
        Err(e) => vec![e.to_string()],
    }
}

pub fn run(cfg: &RunConfig, args: &ValidateArgs) -> Result<(), CliError> {
    let mut problems = Vec::new();
    let mut report = |kind: &str, path: &Path, n: usize, mut p: Vec<String>| {
        if p.is_empty() {
            println!("ok {kind} {} ({n} records)", path.display());
        }
        problems.append(&mut p);
    };
    let mut checked = 0;
    if let Some(p) = &cfg.paths.corpus {
        checked += 1;
        match load_corpus(p) {
            Ok(c) => report("corpus", p, c.stats().n_articles, vec![]),
            Err(e) => report("corpus", p, 0, vec![format!("{}: {e}", p.display())]),
        }
    }
    if let Some(p) = &cfg.paths.dataset {
        checked += 1;
        match load_qa_dataset(p) {
            Ok(d) => report("dataset", p, d.len(), vec![]),
            Err(e) => report("dataset", p, 0, vec![e.to_string()]),
        }
    }
    if let Some(p) = &cfg.paths.script {
        checked += 1;
        match load_script(p) {
            Ok(s) => report("script", p, s.rules().len(), vec![]),
            Err(e) => report("script", p, 0, vec![e.to_string()]),
        }
    }
    for p in &args.trajectories {
        checked += 1;
        let (n, v) = scan(p, check_trajectory);
        report("trajectories", p, n, v);
    }
    for p in &args.outcomes {
        checked += 1;
        let (n, v) = scan(p, check_outcome);
        report("outcomes", p, n, v);
    }
    for p in &args.sft {
        checked += 1;
        let (n, mut v) = scan(p, check_sft);
        v.extend(check_manifest(p));
        report("sft", p, n, v);
    }
    if checked == 0 {
        return Err(CliError::Usage("nothing to validate".into()));
    }
    if problems.is_empty() {
        return Ok(());
    }
    for p in &problems {
        eprintln!("{p}");
    }
    Err(CliError::data(format!(
        "{} problem(s) found",
        problems.len()
    )))
}
