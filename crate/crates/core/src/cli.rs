//! Command-line front end: build-vocab, train, eval, complete, analyze.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{build_vocab, encode, read_text, split_corpus, EncodedCorpus, TokenMode, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{
    attach_answers, dynamic_evaluate, evaluate, parse_questions, score_completions, spectral_stats,
    timescale_report, DropoutInference, EvalReport, ScoringMode,
};
use crate::model::{ModelParams, Recurrent};
use crate::train::{initial_params, train_from, EpochRecord, TrainObserver};

#[derive(Debug, Parser)]
#[command(name = "irlm", version, about = "Train and evaluate recurrent language models")]
pub struct Cli {
    /// Only print errors and requested results.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count tokens in a corpus and write the vocabulary TSV.
    BuildVocab(BuildVocabArgs),
    /// Train a model and write checkpoints on validation improvement.
    Train(TrainArgs),
    /// Report tokens, NLL, perplexity and bits per token on a corpus.
    Eval(EvalArgs),
    /// Score multiple-choice sentence completions.
    Complete(CompleteArgs),
    /// Timescales of a diagonal model or spectral statistics of a dense one.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Word,
    Char,
}

impl From<ModeArg> for TokenMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Word => TokenMode::Word,
            ModeArg::Char => TokenMode::Character,
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "word")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    pub min_count: u64,
    /// Output file (standard output when absent).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Training text; split 80/10/10 when --valid is absent.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Configuration override `key=value`; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Also append the per-epoch log lines to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Adapt parameters while scoring with this learning rate.
    #[arg(long, value_name = "LR")]
    pub dynamic: Option<f64>,
    /// Segment length for dynamic evaluation.
    #[arg(long, default_value_t = 20)]
    pub segment_length: usize,
    /// Average over random dropout masks instead of using the mean mask.
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScoringArg {
    Full,
    LcuOnly,
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Question TSV: qid, candidate index, tokens.
    #[arg(long)]
    pub questions: PathBuf,
    /// Answer TSV: qid, correct index.
    #[arg(long)]
    pub answers: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    pub scoring: ScoringArg,
    /// Candidates per question.
    #[arg(long, default_value_t = 5)]
    pub choices: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Checked against the checkpoint's vocabulary hash when given.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

fn load_model(model: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ck = Checkpoint::load(model)?;
    ck.check_vocab(&vocab.content_hash())?;
    Ok(ck)
}

fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<EncodedCorpus> {
    encode(&read_text(path)?, vocab)
}

struct CliObserver<'a> {
    model: &'a Path,
    vocab_hash: String,
    cfg: &'a TrainConfig,
    out: &'a mut dyn Write,
    log: Option<File>,
    quiet: bool,
}

impl CliObserver<'_> {
    fn checkpoint(&self, params: &ModelParams, step: u64, epoch: usize) -> Checkpoint {
        Checkpoint {
            params: params.clone(),
            vocab_hash: self.vocab_hash.clone(),
            token_mode: self.cfg.token_mode,
            dropout_prob: self.cfg.dropout_prob,
            step,
            epoch,
            extra: self
                .cfg
                .to_pairs()
                .into_iter()
                .map(|(k, v)| (format!("config.{k}"), v))
                .collect(),
        }
    }
}

impl TrainObserver for CliObserver<'_> {
    fn on_epoch(&mut self, record: &EpochRecord, params: &ModelParams, step: u64) -> Result<()> {
        let line = record.log_line();
        if !self.quiet {
            writeln!(self.out, "{line}").map_err(|e| Error::io("<stdout>", e))?;
        }
        if let Some(f) = self.log.as_mut() {
            writeln!(f, "{line}").map_err(|e| Error::io("<log>", e))?;
        }
        if record.improved {
            self.checkpoint(params, step, record.epoch).save(self.model)?;
        }
        Ok(())
    }
}

fn cmd_build_vocab(args: &BuildVocabArgs, out: &mut dyn Write) -> Result<()> {
    let text = read_text(&args.corpus)?;
    let vocab = build_vocab(&text, args.mode.into(), args.min_count)?;
    match &args.vocab {
        Some(path) => vocab.save(path),
        None => out
            .write_all(vocab.to_tsv().as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn cmd_train(args: &TrainArgs, quiet: bool, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let vocab = Vocabulary::load(&args.vocab)?;
    if vocab.mode() != cfg.token_mode {
        return Err(Error::usage(format!(
            "vocabulary is {}-level but token_mode is {}",
            vocab.mode().name(),
            cfg.token_mode.name()
        )));
    }
    let (train, valid) = match &args.valid {
        Some(v) => (load_corpus(&args.corpus, &vocab)?, load_corpus(v, &vocab)?),
        None => {
            let (t, v, _) = split_corpus(&load_corpus(&args.corpus, &vocab)?, (0.8, 0.1, 0.1))?;
            (t, v)
        }
    };
    let params = initial_params(&cfg, vocab.len())?;
    let log = match &args.log {
        Some(p) => Some(File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut obs = CliObserver {
        model: &args.model,
        vocab_hash: vocab.content_hash(),
        cfg: &cfg,
        out,
        log,
        quiet,
    };
    if cfg.epochs == 0 {
        return obs.checkpoint(&params, 0, 0).save(&args.model);
    }
    train_from(&cfg, params, &train, &valid, &mut obs)?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let ck = load_model(&args.model, &vocab)?;
    let corpus = load_corpus(&args.corpus, &vocab)?;
    let mode = match args.mc_samples {
        Some(samples) => DropoutInference::MonteCarlo {
            drop_prob: ck.dropout_prob,
            samples,
            seed: args.seed,
        },
        None => DropoutInference::for_drop_prob(ck.dropout_prob),
    };
    let report: EvalReport = match args.dynamic {
        Some(lr) => {
            let scales = match &args.config {
                Some(p) => TrainConfig::load(p)?.lr_scales,
                None => Default::default(),
            };
            dynamic_evaluate(&ck.params, &corpus, lr, args.segment_length, &scales, mode)?
        }
        None => evaluate(&ck.params, &corpus, mode)?,
    };
    writeln!(
        out,
        "tokens\tnll\tppl\tbpc\n{}\t{:.6}\t{:.4}\t{:.6}",
        report.token_count, report.mean_nll, report.perplexity, report.bits_per_token
    )
    .map_err(|e| Error::io("<stdout>", e))
}

fn cmd_complete(args: &CompleteArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let ck = load_model(&args.model, &vocab)?;
    let text = std::fs::read_to_string(&args.questions).map_err(|e| Error::io(&args.questions, e))?;
    let mut questions = parse_questions(&text, &vocab, args.choices)?;
    if let Some(a) = &args.answers {
        let answers = std::fs::read_to_string(a).map_err(|e| Error::io(a, e))?;
        attach_answers(&mut questions, &answers)?;
    }
    let mode = match args.scoring {
        ScoringArg::Full => ScoringMode::Full,
        ScoringArg::LcuOnly => ScoringMode::LcuOnly,
    };
    let scale = (ck.dropout_prob > 0.0).then_some(1.0 - ck.dropout_prob);
    let report = score_completions(&ck.params, &questions, mode, scale)?;
    let mut text = String::new();
    for r in &report.results {
        text.push_str(&r.qid);
        text.push('\t');
        text.push_str(&r.choice.to_string());
        for s in &r.scores {
            text.push_str(&format!("\t{s:.6}"));
        }
        text.push('\n');
    }
    if let Some(acc) = report.accuracy {
        text.push_str(&format!("accuracy\t{acc:.6}\n"));
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn cmd_analyze(args: &AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&args.model)?;
    if let Some(v) = &args.vocab {
        ck.check_vocab(&Vocabulary::load(v)?.content_hash())?;
    }
    let mut text = String::new();
    match &ck.params.recurrent {
        Recurrent::Diagonal(_) => {
            let rep = timescale_report(&ck.params)?;
            text.push_str("unit\tr\ttimescale\n");
            for u in &rep.units {
                text.push_str(&format!("{}\t{:.6}\t{:.4}\n", u.unit, u.r, u.timescale));
            }
        }
        _ => {
            let s = spectral_stats(&ck.params)?;
            text.push_str(&format!("radius\t{:.8}\nconverged\t{}\niterations\t{}\n", s.radius, s.converged, s.iterations));
            if let (Some(r), Some(f)) = (s.exact_radius, s.fraction_above_0_9) {
                text.push_str(&format!("exact_radius\t{r:.8}\nfraction_above_0.9\t{f:.6}\n"));
            }
        }
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::BuildVocab(a) => cmd_build_vocab(a, out),
        Command::Train(a) => cmd_train(a, cli.quiet, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Complete(a) => cmd_complete(a, out),
        Command::Analyze(a) => cmd_analyze(a, out),
    }
}
