mod corpus_cmd;
mod eval_cmd;
mod gen_cmd;
mod io;
mod ir_cmd;
mod model_cmd;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use sefun_core::harness::PipelineConfig;
use sefun_core::nncore::TrainConfig;
use sefun_core::taxonomy::{Level1, Level2};

#[derive(Parser)]
#[command(name = "sefun", version, about = "Sentence-function-aware short-text conversation toolkit")]
struct Cli {
    /// Seed for data generation and model training; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with optional `[train]` and `[pipeline]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the label table.
    Taxonomy,
    #[command(subcommand)]
    Corpus(corpus_cmd::CorpusCmd),
    #[command(subcommand)]
    Cfm(model_cmd::CfmCmd),
    #[command(subcommand)]
    Cft(model_cmd::CftCmd),
    #[command(subcommand)]
    Ir(ir_cmd::IrCmd),
    #[command(subcommand)]
    Gen(gen_cmd::GenCmd),
    #[command(subcommand)]
    Eval(eval_cmd::EvalCmd),
    /// Train, run and score every configured system end to end.
    Pipeline {
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    train: TrainConfig,
    pipeline: PipelineConfig,
}

/// Settings shared by every subcommand.
pub struct Settings {
    pub seed: u64,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
}

impl Settings {
    fn load(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => FileConfig::default(),
        };
        let mut train = file.train;
        let mut pipeline = file.pipeline;
        if let Some(seed) = cli.seed {
            train.seed = seed;
            pipeline.seed = seed;
        }
        Ok(Settings { seed: train.seed, train, pipeline })
    }

    /// Training settings with an optional epoch override.
    pub fn train_with(&self, epochs: Option<usize>) -> TrainConfig {
        let mut cfg = self.train.clone();
        if let Some(e) = epochs {
            cfg.max_epochs = e;
        }
        cfg
    }
}

fn taxonomy_table() -> Result<String> {
    let mut s = String::new();
    for l1 in Level1::ALL {
        writeln!(s, "{} {} ({})", l1.abbrev(), l1.full_name(), l1.chinese_name())?;
        for l2 in l1.children() {
            writeln!(s, "  {:>2}  {:<28} {}", l2.code(), format!("{}:{}", l1.abbrev(), l2.name()), l2.chinese_name())?;
        }
    }
    writeln!(s, "{} coarse, {} fine-grained labels", Level1::COUNT, Level2::COUNT)?;
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(&cli)?;
    match cli.command {
        Command::Taxonomy => io::emit(&taxonomy_table()?),
        Command::Corpus(cmd) => corpus_cmd::run(cmd, &settings),
        Command::Cfm(cmd) => model_cmd::run_cfm(cmd, &settings),
        Command::Cft(cmd) => model_cmd::run_cft(cmd, &settings),
        Command::Ir(cmd) => ir_cmd::run(cmd),
        Command::Gen(cmd) => gen_cmd::run(cmd, &settings),
        Command::Eval(cmd) => eval_cmd::run(cmd),
        Command::Pipeline { out_dir } => {
            let mut config = settings.pipeline;
            if let Some(dir) = out_dir {
                config.output_dir = dir;
            }
            let report = sefun_core::harness::run_pipeline(&config)?;
            io::emit(&format!("{}outputs written to {}\n", report.render(), config.output_dir.display()))
        }
    }
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    if let Err(e) = run(cli) {
        if io::is_broken_pipe(&e) {
            return;
        }
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
