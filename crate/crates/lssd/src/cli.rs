//! Command-line front end: corpus generation, training, evaluation,
//! deficit analysis and run comparison.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data/validation errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};

use crate::analysis::{compute_dub, corpus_bleu, token_accuracy, DubReport, EvalReport, LangEval};
use crate::config::Config;
use crate::data::{export_dir, generate_corpus, load_dir, Split};
use crate::error::{Error, Result};
use crate::model::from_snapshot;
use crate::snapshot::Snapshot;
use crate::train::{run_training, write_run_dir, RunLog};

#[derive(Parser)]
#[command(name = "lssd", version, about = "Multilingual seq2seq training laboratory with language-specific self-distillation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic corpus and write it to a directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full training and write the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split: token accuracy and corpus BLEU.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// One of: overall, final, lang:<name>
        #[arg(long)]
        checkpoint: CheckpointSel,
        /// One of: dev, test
        #[arg(long)]
        split: SplitSel,
        /// Floor-smooth zero n-gram counts (tiny dev sets)
        #[arg(long)]
        smooth_bleu: bool,
    },
    /// Compute the performance-deficit (DUB) report for one run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
    },
    /// Compare runs: total DUB, best average dev loss, BLEU deltas.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CheckpointSel {
    Overall,
    Final,
    Lang(String),
}

impl FromStr for CheckpointSel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "overall" => Ok(CheckpointSel::Overall),
            "final" => Ok(CheckpointSel::Final),
            _ => s
                .strip_prefix("lang:")
                .filter(|n| !n.is_empty())
                .map(|n| CheckpointSel::Lang(n.to_string()))
                .ok_or_else(|| format!("expected overall, final or lang:<name>, got {s:?}")),
        }
    }
}

impl CheckpointSel {
    fn label(&self) -> String {
        match self {
            CheckpointSel::Overall => "overall".into(),
            CheckpointSel::Final => "final".into(),
            CheckpointSel::Lang(n) => format!("lang:{n}"),
        }
    }

    fn path(&self, run: &Path) -> PathBuf {
        match self {
            CheckpointSel::Overall => run.join("checkpoints").join("overall_best.lssd"),
            CheckpointSel::Final => run.join("final.lssd"),
            CheckpointSel::Lang(n) => run.join("checkpoints").join(format!("best_{n}.lssd")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SplitSel(Split);

impl FromStr for SplitSel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dev" => Ok(SplitSel(Split::Dev)),
            "test" => Ok(SplitSel(Split::Test)),
            _ => Err(format!("expected dev or test, got {s:?}")),
        }
    }
}

/// Parses argv and executes; returns the process exit status.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { config, out } => gen_data(&config, &out),
        Cmd::Train { config, data, out } => train(&config, &data, &out),
        Cmd::Eval { run, data, checkpoint, split, smooth_bleu } => {
            let report = evaluate(&run, &data, &checkpoint, split.0, smooth_bleu)?;
            std::fs::write(run.join("eval_report.txt"), report.to_kv())?;
            print!("{}", report.render_table());
            Ok(())
        }
        Cmd::Analyze { run } => {
            let report = analyze(&run)?;
            std::fs::write(run.join("dub_report.txt"), report.render())?;
            print!("{}", report.render());
            Ok(())
        }
        Cmd::Compare { runs } => {
            print!("{}", compare(&runs)?);
            Ok(())
        }
    }
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let (cfg, _) = Config::load(config)?;
    let corpus = generate_corpus(&cfg.data.languages, cfg.vocab_payload, cfg.data.seed)?;
    export_dir(&corpus, out)?;
    println!(
        "wrote {} languages, vocabulary {} to {}",
        corpus.num_languages(),
        corpus.vocab_size(),
        out.display()
    );
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let (cfg, echo) = Config::load(config)?;
    let corpus = load_dir(data)?;
    let outcome = run_training(&corpus, &cfg.model_config(), &cfg.train)?;
    write_run_dir(out, &echo, &corpus, &outcome)?;
    let last = outcome.log.epochs.last().unwrap();
    println!(
        "trained {} epochs; final avg dev loss {:.6}; run directory {}",
        last.epoch,
        last.avg_dev_loss,
        out.display()
    );
    Ok(())
}

fn evaluate(
    run: &Path,
    data: &Path,
    checkpoint: &CheckpointSel,
    split: Split,
    smooth_bleu: bool,
) -> Result<EvalReport> {
    let (cfg, _) = Config::load(&run.join("config.txt"))?;
    let corpus = load_dir(data)?;
    let snap = Snapshot::load(&checkpoint.path(run))?;
    let model = from_snapshot(&cfg.model_config(), &snap)?;
    let cap = model.config.max_seq_len;

    let mut langs = Vec::new();
    for (l, name) in corpus.languages.iter().enumerate() {
        let pairs = corpus.data[l].split(split);
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "empty {} split for language {name}",
                split.name()
            )));
        }
        let mut hyps = Vec::with_capacity(pairs.len());
        let mut refs = Vec::with_capacity(pairs.len());
        for pair in pairs {
            hyps.push(model.greedy_decode(&pair.src, cap)?);
            refs.push(pair.tgt.clone());
        }
        langs.push(LangEval {
            language: name.clone(),
            token_accuracy: token_accuracy(&hyps, &refs)?,
            bleu: corpus_bleu(&hyps, &refs, 4, smooth_bleu)?,
            sentences: pairs.len(),
        });
    }
    Ok(EvalReport { checkpoint: checkpoint.label(), split: split.name().into(), langs })
}

fn analyze(run: &Path) -> Result<DubReport> {
    let log = RunLog::from_run_dir(run)?;
    compute_dub(&log)
}

/// One row per run: total DUB, average dev loss at the overall best epoch,
/// and per-language BLEU deltas versus the first run (from each run's
/// `eval_report.txt` if present).
fn compare(runs: &[PathBuf]) -> Result<String> {
    struct Row {
        name: String,
        total_dub: f64,
        best_avg: f64,
        bleu: Option<EvalReport>,
    }
    let mut rows = Vec::new();
    let mut languages: Vec<String> = Vec::new();
    for run in runs {
        let log = RunLog::from_run_dir(run)?;
        let dub = compute_dub(&log)?;
        let best_avg = log
            .epochs
            .iter()
            .find(|e| e.epoch == dub.overall_best_epoch)
            .unwrap()
            .avg_dev_loss;
        for l in &log.languages {
            if !languages.contains(l) {
                languages.push(l.clone());
            }
        }
        let report_path = run.join("eval_report.txt");
        let bleu = if report_path.exists() {
            let text = std::fs::read_to_string(&report_path)?;
            Some(EvalReport::from_kv(&text, &report_path.display().to_string())?)
        } else {
            None
        };
        rows.push(Row { name: run.display().to_string(), total_dub: dub.total_dub, best_avg, bleu });
    }

    let lang_bleu = |row: &Row, lang: &str| -> Option<f64> {
        row.bleu
            .as_ref()
            .and_then(|r| r.langs.iter().find(|l| l.language == lang))
            .map(|l| l.bleu)
    };
    let mut out = String::new();
    write!(out, "{:<28} {:>12} {:>14}", "run", "total_dub", "best_avg_loss").unwrap();
    for l in &languages {
        write!(out, " {:>12}", format!("dBLEU({l})")).unwrap();
    }
    writeln!(out).unwrap();
    for row in &rows {
        write!(out, "{:<28} {:>12.6} {:>14.6}", row.name, row.total_dub, row.best_avg).unwrap();
        for l in &languages {
            let cell = match (lang_bleu(row, l), lang_bleu(&rows[0], l)) {
                (Some(b), Some(base)) => format!("{:+.3}", b - base),
                _ => "-".into(),
            };
            write!(out, " {cell:>12}").unwrap();
        }
        writeln!(out).unwrap();
    }
    Ok(out)
}
