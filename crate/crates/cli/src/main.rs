mod commands;
mod config;
mod error;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{EnvConfig, FlagConfig};
use error::CliError;

/// Knowledge-base search agent toolkit: indexing, rollouts, trajectory
/// construction, SFT data emission and evaluation.
#[derive(Parser, Debug)]
#[command(name = "kbsearch", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct GlobalArgs {
    /// TOML config file. Flags override environment, which overrides the file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the merged configuration as TOML and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
    /// More logging on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Master seed; subsampling and balanced sampling use named substreams of it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for rollouts, factory and scoring.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Knowledge base as JSON Lines, one article per line.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// QA dataset as JSON Lines.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Directory written by `index build`; indexes are rebuilt in memory when absent.
    #[arg(long, global = true)]
    pub index_dir: Option<PathBuf>,
    /// Scripted chat backend (JSON Lines rules); takes priority over a chat URL.
    #[arg(long, global = true)]
    pub script: Option<PathBuf>,
    /// Chat endpoint base URL (also DBAGENT_CHAT_URL).
    #[arg(long, global = true)]
    pub chat_url: Option<String>,
    /// Embedding endpoint base URL (also DBAGENT_EMBED_URL). The seeded hashing embedder is used when unset.
    #[arg(long, global = true)]
    pub embed_url: Option<String>,
    /// Maximum number of actions per rollout.
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    #[arg(long, global = true)]
    pub k_text: Option<usize>,
    #[arg(long, global = true)]
    pub k_image: Option<usize>,
    /// Only check intra-turn grammar.
    #[arg(long, global = true)]
    pub lenient: bool,
    #[arg(long, global = true)]
    pub allow_caption_before_answer: bool,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub max_new_tokens: Option<u32>,
    #[arg(long, global = true)]
    pub text_dim: Option<usize>,
    #[arg(long, global = true)]
    pub image_dim: Option<usize>,
}

impl GlobalArgs {
    fn flags(&self) -> FlagConfig {
        FlagConfig {
            seed: self.seed,
            threads: self.threads,
            corpus: self.corpus.clone(),
            dataset: self.dataset.clone(),
            index_dir: self.index_dir.clone(),
            script: self.script.clone(),
            chat_url: self.chat_url.clone(),
            embed_url: self.embed_url.clone(),
            budget: self.budget,
            k_text: self.k_text,
            k_image: self.k_image,
            lenient: self.lenient,
            allow_caption_before_answer: self.allow_caption_before_answer,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            text_dimension: self.text_dim,
            image_dimension: self.image_dim,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Embed the corpus and write text and image indexes.
    Index {
        #[command(subcommand)]
        action: IndexCmd,
    },
    /// Run the search agent.
    Agent {
        #[command(subcommand)]
        action: AgentCmd,
    },
    /// Build staged trajectories from a training dataset.
    Factory {
        #[command(subcommand)]
        action: FactoryCmd,
    },
    /// Turn factory outcomes into a masked SFT file.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Score trajectories and run ablation sweeps.
    Eval {
        #[command(subcommand)]
        action: EvalCmd,
    },
    /// Lint files: the configured corpus, dataset and script, plus any
    /// trajectory, outcome or SFT files given.
    Validate(ValidateArgs),
    /// Write a seeded synthetic corpus, datasets and scripted policies.
    Synth(SynthArgs),
}

#[derive(Subcommand, Debug)]
pub enum IndexCmd {
    Build {
        /// Output directory for text.idx, image.idx and index.json.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum AgentCmd {
    /// Answer one question and print the transcript.
    Run {
        #[arg(long)]
        question: String,
        #[arg(long)]
        image: String,
        /// Also write the trajectory as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out every dataset sample into a trajectory file.
    Batch {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum JudgeArg {
    Exact,
    Model,
}

#[derive(Subcommand, Debug)]
pub enum FactoryCmd {
    Build {
        /// Outcomes as JSON Lines; a `.summary.json` is written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "exact")]
        judge: JudgeArg,
        /// Keep agent-answerable but wrong samples as FAILED instead of dropping them.
        #[arg(long)]
        keep_failed: bool,
        /// Also write a tier-balanced subset with this many samples per tier.
        #[arg(long)]
        balanced: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
pub enum DatasetCmd {
    Emit {
        /// Factory outcome files.
        #[arg(long, required = true, num_args = 1..)]
        outcomes: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = kbsearch_core::sft::DEFAULT_MAX_CHARS)]
        max_chars: usize,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum MetricArg {
    Em,
    Raw,
    Judge,
}

#[derive(Subcommand, Debug)]
pub enum EvalCmd {
    /// Score a trajectory file against the dataset.
    Report {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "em")]
        metric: MetricArg,
    },
    /// Evaluate every (text k, image k) pair.
    TopkGrid {
        #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5])]
        text_k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3])]
        image_k: Vec<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate against nested subsamples of the corpus.
    KbScale {
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long)]
    pub trajectories: Vec<PathBuf>,
    #[arg(long)]
    pub outcomes: Vec<PathBuf>,
    #[arg(long)]
    pub sft: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub articles: usize,
    /// Test questions, drawn from the first articles.
    #[arg(long, default_value_t = 50)]
    pub questions: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.global.config {
        Some(p) => config::read_file_config(p)?,
        None => Default::default(),
    };
    let cfg = config::merge(cli.global.flags(), EnvConfig::from_process(), file);
    if cli.global.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    tracing::debug!(config = ?cfg, "effective configuration");
    commands::dispatch(&cli.command, &cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.global.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
