//! Command-line surface binding the subsystems together.
//!
//! Subcommands: `decode` (verified or reference autoregressive decoding of
//! a serialized model), `simulate` (Monte Carlo acceptance model),
//! `train` (two-stage toy recipe on a token corpus), `fuse` (clip JSONL
//! through fusion + concatenation), `score` (error rates between
//! reference and hypothesis files). Every command is deterministic given
//! its seed flag.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::decoder::{
    acceptance_summary, autoregressive_decode, simulate_acceptance, verified_decode, DecodeConfig,
};
use crate::metrics::score_corpus;
use crate::model::{
    train_two_stage, LinearMtpModel, TrainStage, TrainStageConfig, DEFAULT_STAGE1_LR,
    DEFAULT_STAGE2_LR,
};
use crate::mtp::{MtpConfig, Token};
use crate::rover::{
    concatenate_segments, fuse_clip, refine_sample, ClipRecord, FusionResult, IdentityRefiner,
    DEFAULT_DISAGREEMENT_THRESHOLD,
};

#[derive(Debug, Parser)]
#[command(name = "mtpdec", version, about = "Verified MTP decoding, fusion, and scoring tools")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode a serialized model from a prompt, writing tokens and stats.
    Decode(DecodeArgs),
    /// Monte Carlo simulation of strict per-position acceptance rates.
    Simulate(SimulateArgs),
    /// Two-stage training of the linear MTP model on a token corpus.
    Train(TrainArgs),
    /// Fuse three-system clip hypotheses and build long-form samples.
    Fuse(FuseArgs),
    /// Score hypothesis transcripts against references.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// Serialized model file.
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated prompt token ids.
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    /// Lookahead branches to use (must not exceed the model's).
    #[arg(long, default_value_t = MtpConfig::DEFAULT_NUM_BRANCHES)]
    branches: usize,
    #[arg(long, default_value_t = MtpConfig::DEFAULT_DECAY)]
    alpha: f64,
    #[arg(long)]
    eos: Option<Token>,
    /// Output token file (one id per line).
    #[arg(long)]
    out: PathBuf,
    /// Acceptance stats report (JSON). Ignored with --force-autoregressive.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Run the reference autoregressive path instead of verified decoding;
    /// the token output must be byte-identical either way.
    #[arg(long)]
    force_autoregressive: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Comma-separated strict per-position rates, e.g. 0.95,0.88,0.80.
    #[arg(long)]
    rates: String,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    seed: u64,
    /// Report output (JSON); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Corpus file: one sequence of whitespace-separated token ids per line.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = MtpConfig::DEFAULT_NUM_BRANCHES)]
    branches: usize,
    #[arg(long, default_value_t = MtpConfig::DEFAULT_DECAY)]
    alpha: f64,
    #[arg(long, default_value_t = 2)]
    window: usize,
    #[arg(long, default_value_t = 200)]
    stage1_steps: usize,
    #[arg(long, default_value_t = DEFAULT_STAGE1_LR)]
    stage1_lr: f64,
    #[arg(long, default_value_t = 100)]
    stage2_steps: usize,
    #[arg(long, default_value_t = DEFAULT_STAGE2_LR)]
    stage2_lr: f64,
    #[arg(long)]
    seed: u64,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Optional loss trajectory output (one loss per line).
    #[arg(long)]
    losses: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// Input JSONL, one clip record per line.
    #[arg(long)]
    input: PathBuf,
    /// Per-clip fusion results (JSONL).
    #[arg(long)]
    output: PathBuf,
    /// Long-form samples (JSONL).
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DISAGREEMENT_THRESHOLD)]
    threshold: f64,
    /// Duration budget per long-form sample, seconds.
    #[arg(long, default_value_t = 300.0)]
    max_duration: f64,
    /// Worker threads for clip fusion; output order is deterministic
    /// regardless.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Reference transcripts, one utterance per line.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Hypothesis transcripts, paired by line number.
    #[arg(long)]
    hyp: PathBuf,
    /// Report output (JSON); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse argv and run. Returns the process exit status.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Clap renders its own usage/version text with the right code.
            return e.exit_code_with_print();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

trait ClapExitExt {
    fn exit_code_with_print(self) -> i32;
}

impl ClapExitExt for clap::Error {
    fn exit_code_with_print(self) -> i32 {
        let code = self.exit_code();
        let _ = self.print();
        code
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decode(args) => cmd_decode(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Score(args) => cmd_score(args),
    }
}

fn parse_token_list(s: &str) -> Result<Vec<Token>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<Token>()
                .with_context(|| format!("bad token id {p:?}"))
        })
        .collect()
}

fn parse_rate_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad rate {p:?}"))
        })
        .collect()
}

fn write_json<T: serde::Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => {
            std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_decode(args: DecodeArgs) -> Result<()> {
    let file = File::open(&args.model)
        .with_context(|| format!("opening model {}", args.model.display()))?;
    let model = LinearMtpModel::load(BufReader::new(file))
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let prompt = parse_token_list(&args.prompt)?;
    if prompt.iter().any(|&t| (t as usize) >= model.vocab_size) {
        bail!("prompt token out of range for vocab {}", model.vocab_size);
    }
    let config = DecodeConfig::new(
        MtpConfig::new(args.branches, args.alpha)?,
        args.max_tokens,
        args.eos,
    )?;
    let tokens = if args.force_autoregressive {
        autoregressive_decode(&model, &prompt, &config)?
    } else {
        let (tokens, stats) = verified_decode(&model, &prompt, &config)?;
        if let Some(stats_path) = &args.stats {
            let report = acceptance_summary(&stats)?;
            write_json(&report, Some(stats_path))?;
        }
        tokens
    };
    let mut out = BufWriter::new(
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?,
    );
    for t in tokens {
        writeln!(out, "{t}")?;
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let rates = parse_rate_list(&args.rates)?;
    let stats = simulate_acceptance(&rates, args.steps, args.seed)?;
    let report = acceptance_summary(&stats)?;
    write_json(&report, args.out.as_deref())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = File::open(&args.corpus)
        .with_context(|| format!("opening corpus {}", args.corpus.display()))?;
    let mut data: Vec<Vec<Token>> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: Result<Vec<Token>> = line
            .split_whitespace()
            .map(|p| {
                p.parse::<Token>()
                    .with_context(|| format!("line {}: bad token id {p:?}", lineno + 1))
            })
            .collect();
        let seq = seq?;
        if seq.iter().any(|&t| (t as usize) >= args.vocab) {
            bail!("line {}: token out of range for vocab {}", lineno + 1, args.vocab);
        }
        data.push(seq);
    }
    if data.is_empty() {
        bail!("corpus {} contains no sequences", args.corpus.display());
    }
    let mtp = MtpConfig::new(args.branches, args.alpha)?;
    let model = LinearMtpModel::random(args.vocab, args.hidden, args.branches, args.window, args.seed)
        .init_branches_from_backbone(args.seed.wrapping_add(1));
    let stage1 = TrainStageConfig::new(
        TrainStage::FrozenBranchAlignment,
        args.stage1_lr,
        args.stage1_steps,
        args.seed,
    )?;
    let stage2 = TrainStageConfig::new(
        TrainStage::JointCalibration,
        args.stage2_lr,
        args.stage2_steps,
        args.seed,
    )?;
    let outcome = train_two_stage(model, &data, stage1, stage2, mtp)?;
    let out = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    outcome.model.save(BufWriter::new(out))?;
    if let Some(losses_path) = &args.losses {
        let mut w = BufWriter::new(File::create(losses_path)?);
        for l in &outcome.losses {
            writeln!(w, "{l}")?;
        }
    }
    Ok(())
}

/// Per-clip output line: the record id plus its fusion result.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ClipFusionLine {
    clip_id: String,
    #[serde(flatten)]
    result: FusionResult,
}

fn cmd_fuse(args: FuseArgs) -> Result<()> {
    let file = File::open(&args.input)
        .with_context(|| format!("opening {}", args.input.display()))?;
    let mut clips: Vec<ClipRecord> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let clip: ClipRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: bad clip record", args.input.display(), lineno + 1))?;
        clips.push(clip);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.max(1))
        .build()
        .context("building thread pool")?;
    // Clips fuse independently; the indexed collect keeps output order
    // identical for any thread count.
    let results: Result<Vec<FusionResult>> = pool.install(|| {
        clips
            .par_iter()
            .map(|c| fuse_clip(c, args.threshold).map_err(anyhow::Error::from))
            .collect()
    });
    let results = results?;

    let mut out = BufWriter::new(
        File::create(&args.output)
            .with_context(|| format!("creating {}", args.output.display()))?,
    );
    for (clip, result) in clips.iter().zip(&results) {
        let line = ClipFusionLine {
            clip_id: clip.clip_id.clone(),
            result: result.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    drop(out);

    let paired: Vec<(ClipRecord, FusionResult)> =
        clips.into_iter().zip(results.into_iter()).collect();
    let samples = concatenate_segments(&paired, args.max_duration);
    let mut out = BufWriter::new(
        File::create(&args.samples)
            .with_context(|| format!("creating {}", args.samples.display()))?,
    );
    for sample in samples {
        let sample = refine_sample(&IdentityRefiner, sample);
        writeln!(out, "{}", serde_json::to_string(&sample)?)?;
    }
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let read_lines = |path: &Path| -> Result<Vec<String>> {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        BufReader::new(file)
            .lines()
            .map(|l| l.map_err(anyhow::Error::from))
            .collect()
    };
    let refs = read_lines(&args.reference)?;
    let hyps = read_lines(&args.hyp)?;
    if refs.len() != hyps.len() {
        bail!(
            "reference has {} lines but hypothesis has {}",
            refs.len(),
            hyps.len()
        );
    }
    let pairs: Vec<(Vec<String>, Vec<String>)> = refs
        .iter()
        .zip(&hyps)
        .map(|(r, h)| {
            (
                crate::rover::normalize_text(r, None),
                crate::rover::normalize_text(h, None),
            )
        })
        .collect();
    let report = score_corpus(&pairs)?;
    write_json(&report, args.out.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_list_parsing() {
        assert_eq!(parse_token_list("1,2, 3").unwrap(), vec![1, 2, 3]);
        assert!(parse_token_list("1,x").is_err());
    }

    #[test]
    fn rate_list_parsing() {
        assert_eq!(
            parse_rate_list("0.95,0.88").unwrap(),
            vec![0.95, 0.88]
        );
        assert!(parse_rate_list("0.9,oops").is_err());
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_ne!(dispatch(["mtpdec", "frobnicate"]), 0);
    }
}
