use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use kbsearch_core::embed::{EmbeddingProvider, Modality, RemoteEmbedder, RemoteOptions};
use kbsearch_core::eval::{self, EvalSettings, ScoreMetric};
use kbsearch_core::factory::{self, BranchOutcome, FactoryConfig, JudgeMode, QaSample};
use kbsearch_core::gateway::{
    load_script, ChatBackend, RemoteChatBackend, RemoteChatOptions, ScriptedBackend,
};
use kbsearch_core::kb::{load_corpus, Corpus};
use kbsearch_core::retrieval::{
    build_image_index, build_text_index, ImageEvidenceScope, ImageIndex, KnowledgeTools, TextIndex,
    VectorIndex,
};
use kbsearch_core::runtime::{self, transcript_text, AgentTask, ToolBinding};
use kbsearch_core::{seeds, sft, synth};

use crate::config::RunConfig;
use crate::error::{Classify, CliError};
use crate::{
    validate, AgentCmd, Command, DatasetCmd, EvalCmd, FactoryCmd, IndexCmd, JudgeArg, MetricArg,
    SynthArgs,
};

pub fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<(), CliError> {
    cfg.rollout_config()
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    match cmd {
        Command::Index {
            action: IndexCmd::Build { out },
        } => index_build(cfg, out),
        Command::Agent {
            action:
                AgentCmd::Run {
                    question,
                    image,
                    out,
                },
        } => agent_run(cfg, question, image, out.as_deref()),
        Command::Agent {
            action: AgentCmd::Batch { out },
        } => agent_batch(cfg, out),
        Command::Factory {
            action:
                FactoryCmd::Build {
                    out,
                    judge,
                    keep_failed,
                    balanced,
                },
        } => factory_build(cfg, out, *judge, *keep_failed, *balanced),
        Command::Dataset {
            action:
                DatasetCmd::Emit {
                    outcomes,
                    out,
                    max_chars,
                },
        } => dataset_emit(outcomes, out, *max_chars),
        Command::Eval {
            action:
                EvalCmd::Report {
                    trajectories,
                    out_dir,
                    metric,
                },
        } => eval_report(cfg, trajectories, out_dir, *metric),
        Command::Eval {
            action:
                EvalCmd::TopkGrid {
                    text_k,
                    image_k,
                    out_dir,
                },
        } => eval_grid(cfg, text_k, image_k, out_dir),
        Command::Eval {
            action: EvalCmd::KbScale { sizes, out_dir },
        } => eval_kb_scale(cfg, sizes, out_dir),
        Command::Validate(args) => validate::run(cfg, args),
        Command::Synth(args) => synth_cmd(cfg, args),
    }
}

/// A configured path that must exist before any work starts.
fn input<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    let p = p
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("{flag} is required for this command")))?;
    exists(p)?;
    Ok(p)
}

fn exists(p: &Path) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::data(format!(
            "{}: no such file or directory",
            p.display()
        )))
    }
}

fn ctx(p: &Path) -> String {
    p.display().to_string()
}

fn chat_backend(cfg: &RunConfig) -> Result<Box<dyn ChatBackend>, CliError> {
    if let Some(script) = &cfg.paths.script {
        exists(script)?;
        let b: ScriptedBackend = load_script(script).classify(&ctx(script))?;
        return Ok(Box::new(b));
    }
    if let Some(url) = &cfg.backend.chat_url {
        let opts = RemoteChatOptions {
            api_key: cfg.backend.api_key.expose().map(str::to_string),
            ..Default::default()
        };
        return Ok(Box::new(
            RemoteChatBackend::new(url, opts).classify("chat backend")?,
        ));
    }
    Err(CliError::Usage(
        "no chat backend: pass --script or set DBAGENT_CHAT_URL".into(),
    ))
}

/// Identifies the embedder an index was built with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct IndexMeta {
    provider: String,
    text_dimension: usize,
    image_dimension: usize,
}

fn providers(
    cfg: &RunConfig,
) -> Result<(Arc<EmbeddingProvider>, Arc<EmbeddingProvider>, IndexMeta), CliError> {
    let (td, id) = (cfg.embedding.text_dimension, cfg.embedding.image_dimension);
    match &cfg.backend.embed_url {
        Some(url) => {
            let opts = RemoteOptions {
                api_key: cfg.backend.api_key.expose().map(str::to_string),
                ..Default::default()
            };
            let t = RemoteEmbedder::new(url, td, opts.clone()).classify("embedding backend")?;
            let i = RemoteEmbedder::new(url, id, opts).classify("embedding backend")?;
            Ok((
                Arc::new(EmbeddingProvider::new(Modality::Text, Box::new(t))),
                Arc::new(EmbeddingProvider::new(Modality::Image, Box::new(i))),
                IndexMeta {
                    provider: format!("remote:{url}"),
                    text_dimension: td,
                    image_dimension: id,
                },
            ))
        }
        None => {
            let (ts, is) = (
                seeds::substream(cfg.seed, seeds::EMBED_TEXT),
                seeds::substream(cfg.seed, seeds::EMBED_IMAGE),
            );
            Ok((
                Arc::new(EmbeddingProvider::hashing(Modality::Text, td, ts)),
                Arc::new(EmbeddingProvider::hashing(Modality::Image, id, is)),
                IndexMeta {
                    provider: format!("hashing:{ts}:{is}"),
                    text_dimension: td,
                    image_dimension: id,
                },
            ))
        }
    }
}

fn load_corpus_at(p: &Path) -> Result<Corpus, CliError> {
    load_corpus(p).classify(&ctx(p))
}

fn load_dataset(p: &Path) -> Result<Vec<QaSample>, CliError> {
    factory::load_qa_dataset(p).classify(&ctx(p))
}

/// Tools over `corpus`, from `--index-dir` when it holds a matching index.
fn tools(cfg: &RunConfig, corpus: Arc<Corpus>) -> Result<ToolBinding, CliError> {
    let (tp, ip, meta) = providers(cfg)?;
    let kt = match &cfg.paths.index_dir {
        Some(dir) => {
            exists(dir)?;
            let mp = dir.join("index.json");
            let stored: IndexMeta =
                serde_json::from_str(&fs::read_to_string(&mp).classify(&ctx(&mp))?)
                    .classify(&ctx(&mp))?;
            if stored != meta {
                return Err(CliError::data(format!(
                    "{}: index was built with {stored:?} but the current configuration gives {meta:?}",
                    mp.display()
                )));
            }
            let tpath = dir.join("text.idx");
            let ipath = dir.join("image.idx");
            let text =
                TextIndex(VectorIndex::load(&tpath, meta.text_dimension).classify(&ctx(&tpath))?);
            let image =
                ImageIndex(VectorIndex::load(&ipath, meta.image_dimension).classify(&ctx(&ipath))?);
            KnowledgeTools {
                corpus,
                text_index: Arc::new(text),
                image_index: Arc::new(image),
                text_provider: tp,
                image_provider: ip,
                image_scope: ImageEvidenceScope::LeadSection,
            }
        }
        None => KnowledgeTools::build(corpus, tp, ip).classify("building indexes")?,
    };
    let kt = Arc::new(kt);
    Ok(ToolBinding::new(kt.clone(), kt))
}

fn create_parent(p: &Path) -> Result<(), CliError> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).classify(&ctx(d))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(p: &Path, v: &T) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(v).classify(&ctx(p))? + "\n";
    fs::write(p, s).classify(&ctx(p))
}

fn write_jsonl<T: Serialize>(p: &Path, items: &[T]) -> Result<(), CliError> {
    create_parent(p)?;
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).classify(&ctx(p))?);
        s.push('\n');
    }
    fs::write(p, s).classify(&ctx(p))
}

fn sibling(p: &Path, suffix: &str) -> PathBuf {
    let stem = p
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    p.with_file_name(format!("{stem}{suffix}"))
}

fn index_build(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let cp = input(&cfg.paths.corpus, "--corpus")?;
    let corpus = load_corpus_at(cp)?;
    let (tp, ip, meta) = providers(cfg)?;
    let text = build_text_index(&corpus, &tp).classify("text index")?;
    let image = build_image_index(&corpus, &ip).classify("image index")?;
    fs::create_dir_all(out).classify(&ctx(out))?;
    text.0.save(&out.join("text.idx")).classify(&ctx(out))?;
    image.0.save(&out.join("image.idx")).classify(&ctx(out))?;
    write_json(&out.join("index.json"), &meta)?;
    println!(
        "indexed {} sections and {} images into {}",
        text.0.len(),
        image.0.len(),
        out.display()
    );
    Ok(())
}

fn agent_run(
    cfg: &RunConfig,
    question: &str,
    image: &str,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let cp = input(&cfg.paths.corpus, "--corpus")?;
    let backend = chat_backend(cfg)?;
    let tools = tools(cfg, Arc::new(load_corpus_at(cp)?))?;
    let rc = cfg.rollout_config();
    let task = AgentTask {
        task_id: "cli".into(),
        image_ref: image.into(),
        question: question.into(),
    };
    let traj = runtime::rollout(&task, backend.as_ref(), &tools, &rc).classify("rollout")?;
    let mut stdout = std::io::stdout().lock();
    let _ = write!(
        stdout,
        "{}",
        transcript_text(&traj.transcript(&rc.system_prompt))
    );
    let _ = writeln!(stdout, "\n[terminated] {:?}", traj.terminated_by);
    let _ = writeln!(
        stdout,
        "[answer] {}",
        traj.final_answer.as_deref().unwrap_or("")
    );
    if let Some(p) = out {
        create_parent(p)?;
        write_json(p, &traj)?;
    }
    Ok(())
}

fn agent_batch(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let dp = input(&cfg.paths.dataset, "--dataset")?;
    let cp = input(&cfg.paths.corpus, "--corpus")?;
    let samples = load_dataset(dp)?;
    let backend = chat_backend(cfg)?;
    let tools = tools(cfg, Arc::new(load_corpus_at(cp)?))?;
    let tasks = eval::tasks_from_samples(&samples);
    let mut ok = Vec::new();
    let mut first_err = None;
    let mut failed = 0;
    for (task, r) in tasks.iter().zip(runtime::rollout_batch(
        &tasks,
        backend.as_ref(),
        &tools,
        &cfg.rollout_config(),
        cfg.threads,
    )) {
        match r {
            Ok(t) => ok.push(t),
            Err(e) => {
                tracing::error!(task = %task.task_id, error = %e, "rollout failed");
                failed += 1;
                first_err.get_or_insert((task.task_id.clone(), e));
            }
        }
    }
    create_parent(out)?;
    runtime::write_trajectories(out, &ok).classify(&ctx(out))?;
    println!("wrote {} trajectories to {}", ok.len(), out.display());
    match first_err {
        Some((id, e)) => {
            Err::<(), _>(e).classify(&format!("{failed} rollout(s) failed, first at sample {id}"))
        }
        None => Ok(()),
    }
}

fn factory_build(
    cfg: &RunConfig,
    out: &Path,
    judge: JudgeArg,
    keep_failed: bool,
    balanced: Option<usize>,
) -> Result<(), CliError> {
    let dp = input(&cfg.paths.dataset, "--dataset")?;
    let cp = input(&cfg.paths.corpus, "--corpus")?;
    let samples = load_dataset(dp)?;
    let backend = chat_backend(cfg)?;
    let tools = tools(cfg, Arc::new(load_corpus_at(cp)?))?;
    let fc = FactoryConfig {
        judge: match judge {
            JudgeArg::Exact => JudgeMode::NormalizedExact,
            JudgeArg::Model => JudgeMode::ModelJudge,
        },
        keep_failed,
        k_text: cfg.rollout.k_text,
        k_image: cfg.rollout.k_image,
        threads: cfg.threads,
        ..Default::default()
    };
    let (outcomes, summary) =
        factory::run_factory(&samples, backend.as_ref(), &tools, &fc).classify("factory")?;
    write_jsonl(out, &outcomes)?;
    write_json(&sibling(out, ".summary.json"), &summary)?;
    if let Some(n) = balanced {
        let picked =
            factory::sample_balanced(&outcomes, n, seeds::substream(cfg.seed, seeds::SAMPLING))
                .classify("balanced sampling")?;
        write_jsonl(&sibling(out, ".balanced.jsonl"), &picked)?;
    }
    println!("{}", serde_json::to_string(&summary).classify("summary")?);
    Ok(())
}

fn dataset_emit(outcome_files: &[PathBuf], out: &Path, max_chars: usize) -> Result<(), CliError> {
    for p in outcome_files {
        exists(p)?;
    }
    let mut samples = Vec::new();
    let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
    for p in outcome_files {
        let outcomes: Vec<BranchOutcome> = runtime::read_jsonl(p).classify(&ctx(p))?;
        for o in &outcomes {
            if !o.is_usable() {
                *skipped
                    .entry(o.trajectory_type.label().to_string())
                    .or_default() += 1;
                continue;
            }
            match sft::linearize_outcome(o, kbsearch_core::runtime::AGENT_PROMPT) {
                Ok(s) => samples.push(s),
                Err(e) => {
                    tracing::warn!(sample = %o.sample_id, error = %e, "outcome not emitted");
                    *skipped.entry("invalid".to_string()).or_default() += 1;
                }
            }
        }
    }
    create_parent(out)?;
    let manifest =
        sft::emit_dataset(&samples, skipped, out, max_chars, outcome_files).classify(&ctx(out))?;
    println!(
        "wrote {} samples to {} ({} over the length cap, skipped {:?})",
        manifest.total,
        out.display(),
        manifest.dropped_over_cap,
        manifest.skipped
    );
    Ok(())
}

fn metric(m: MetricArg) -> ScoreMetric {
    match m {
        MetricArg::Em => ScoreMetric::Em,
        MetricArg::Raw => ScoreMetric::RawEm,
        MetricArg::Judge => ScoreMetric::Judge,
    }
}

fn eval_report(
    cfg: &RunConfig,
    trajectories: &Path,
    out_dir: &Path,
    m: MetricArg,
) -> Result<(), CliError> {
    exists(trajectories)?;
    let dp = input(&cfg.paths.dataset, "--dataset")?;
    let samples = load_dataset(dp)?;
    let judge = match m {
        MetricArg::Judge => Some(chat_backend(cfg)?),
        _ => None,
    };
    let trajs = runtime::read_trajectories(trajectories).classify(&ctx(trajectories))?;
    let set = eval::build_records(&trajs, &samples, metric(m), judge.as_deref(), cfg.threads)
        .classify("scoring")?;
    let mut report = eval::report_for(&set).classify(&ctx(trajectories))?;
    report.config = trajs.first().map(|t| t.config.clone());
    eval::write_report(out_dir, "report", &report).classify(&ctx(out_dir))?;
    eval::write_records(&out_dir.join("records.jsonl"), &set.records).classify(&ctx(out_dir))?;
    print!("{}", report.render_text());
    Ok(())
}

fn settings(cfg: &RunConfig) -> EvalSettings {
    EvalSettings {
        metric: ScoreMetric::Em,
        threads: cfg.threads,
    }
}

fn eval_grid(
    cfg: &RunConfig,
    text_k: &[usize],
    image_k: &[usize],
    out_dir: &Path,
) -> Result<(), CliError> {
    let dp = input(&cfg.paths.dataset, "--dataset")?;
    let cp = input(&cfg.paths.corpus, "--corpus")?;
    if text_k.contains(&0) || image_k.contains(&0) {
        return Err(CliError::Usage("k values must be at least 1".into()));
    }
    let samples = load_dataset(dp)?;
    let backend = chat_backend(cfg)?;
    let tools = tools(cfg, Arc::new(load_corpus_at(cp)?))?;
    let grid = eval::run_topk_grid(
        &samples,
        backend.as_ref(),
        &tools,
        &cfg.rollout_config(),
        text_k,
        image_k,
        settings(cfg),
    )
    .classify("top-k grid")?;
    eval::write_grid(out_dir, &grid).classify(&ctx(out_dir))?;
    print!("{}", grid.render_text());
    Ok(())
}

fn eval_kb_scale(cfg: &RunConfig, sizes: &[usize], out_dir: &Path) -> Result<(), CliError> {
    let dp = input(&cfg.paths.dataset, "--dataset")?;
    let cp = input(&cfg.paths.corpus, "--corpus")?;
    let samples = load_dataset(dp)?;
    let corpus = load_corpus_at(cp)?;
    let n = corpus.stats().n_articles;
    if let Some(bad) = sizes.iter().find(|&&s| s > n) {
        return Err(CliError::Usage(format!(
            "size {bad} exceeds the corpus ({n} articles)"
        )));
    }
    let backend = chat_backend(cfg)?;
    let (tp, ip, _) = providers(cfg)?;
    let series = eval::run_kb_scale(
        &samples,
        &corpus,
        sizes,
        seeds::substream(cfg.seed, seeds::SUBSAMPLE),
        backend.as_ref(),
        tp,
        ip,
        &cfg.rollout_config(),
        settings(cfg),
    )
    .classify("kb-scale sweep")?;
    eval::write_kb_scale(out_dir, &series).classify(&ctx(out_dir))?;
    print!("{}", series.render_text());
    Ok(())
}

fn synth_cmd(cfg: &RunConfig, args: &SynthArgs) -> Result<(), CliError> {
    if args.questions > args.articles {
        return Err(CliError::Usage(
            "--questions cannot exceed --articles".into(),
        ));
    }
    let world = synth::synthetic_world(args.articles, cfg.seed);
    let dir = &args.out_dir;
    fs::create_dir_all(dir).classify(&ctx(dir))?;
    world
        .corpus
        .save(&dir.join("corpus.jsonl"))
        .classify(&ctx(dir))?;
    let facts = &world.facts[..args.questions];
    let qa: Vec<QaSample> = facts
        .iter()
        .enumerate()
        .map(|(i, f)| synth::qa_sample(&format!("q{i:04}"), f, factory::Split::Test))
        .collect();
    write_jsonl(&dir.join("qa.jsonl"), &qa)?;
    let policy = ScriptedBackend::new(synth::evidence_policy_rules(facts));
    fs::write(dir.join("policy.jsonl"), policy.to_jsonl()).classify(&ctx(dir))?;
    let plan = synth::factory_plan_60();
    if world.facts.len() >= plan.len() {
        let (samples, rules) = synth::factory_fixture(&world, &plan);
        write_jsonl(&dir.join("factory_qa.jsonl"), &samples)?;
        fs::write(
            dir.join("factory_script.jsonl"),
            ScriptedBackend::new(rules).to_jsonl(),
        )
        .classify(&ctx(dir))?;
    }
    println!(
        "wrote synthetic data for {} articles to {}",
        args.articles,
        dir.display()
    );
    Ok(())
}
