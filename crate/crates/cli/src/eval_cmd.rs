use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Subcommand;

use sefun_core::harness::{evaluate, ingest_grading_sheets};
use sefun_core::taxonomy::{Level, TargetFunction};

#[derive(Subcommand)]
pub enum EvalCmd {
    /// Accuracy and F1 of predicted labels against gold labels, one label
    /// per line in each file.
    Metrics {
        gold: PathBuf,
        pred: PathBuf,
        /// Compare at level 1 even when the files hold level-2 labels.
        #[arg(long)]
        level: Option<Level>,
    },
    /// Mean normalised grades per system from filled-in grading sheets.
    Grades {
        #[arg(long)]
        key: PathBuf,
        #[arg(required = true)]
        sheets: Vec<PathBuf>,
    },
}

fn read_labels(path: &Path, level: Option<Level>) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let t: TargetFunction = l.trim().parse().with_context(|| format!("{} line {}", path.display(), i + 1))?;
            Ok(match (level, t) {
                (Some(Level::One), TargetFunction::Level2(_)) => TargetFunction::Level1(t.level1()),
                (Some(Level::Two), TargetFunction::Level1(_)) => {
                    bail!("{} line {}: `{}` is a level-1 label", path.display(), i + 1, l.trim())
                }
                _ => t,
            }
            .to_string())
        })
        .collect()
}

pub fn run(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Metrics { gold, pred, level } => {
            let g = read_labels(&gold, level)?;
            let p = read_labels(&pred, level)?;
            crate::io::emit(&evaluate(&g, &p)?.to_string())
        }
        EvalCmd::Grades { key, sheets } => {
            let paths: Vec<&Path> = sheets.iter().map(PathBuf::as_path).collect();
            crate::io::emit(&ingest_grading_sheets(&paths, &key)?.to_string())
        }
    }
}
