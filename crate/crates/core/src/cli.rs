//! The `upplda` command line.
//!
//! Exit status is 0 on success, 2 for usage errors and 1 for data errors.
//! Every output file is written atomically.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{ArgGroup, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::LevelFilter;

use crate::embedding::{EmbeddingArchive, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::{self, DcfParams, ScoreSet};
use crate::plda::{score_batch, train_em_traced, ScoringMode, TrainConfig};
use crate::pooling::{pool_posterior, propagate_through_head, GaussianPrior};
use crate::preprocess::{self, center, length_scale, LengthNormalizer, LengthScaleForm};
use crate::storage::{self, UncertaintyPolicy};
use crate::synthetic::{self, SimConfig};

#[derive(Debug, Parser)]
#[command(
    name = "upplda",
    version,
    about = "PLDA back-end with embedding uncertainty propagation"
)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (0: one per core). Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// off, error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a random model, training and evaluation sets, and trials.
    Simulate(SimulateArgs),
    /// Train a PLDA model by EM.
    Train(TrainArgs),
    /// Apply centering, length normalization or length scaling, left to right.
    Transform(TransformArgs),
    /// Pool frame estimates into embeddings with uncertainty.
    Pool(PoolArgs),
    /// Score a trial list.
    Score(ScoreArgs),
    /// Print EER and minDCF of a labelled score file.
    Eval(EvalArgs),
    /// Print a markdown table of EER and minDCF for several score files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Speaker subspace size; defaults to --dim.
    #[arg(long)]
    speaker_dim: Option<usize>,
    /// Speakers in each of the training and evaluation sets.
    #[arg(long, default_value_t = 50)]
    speakers: usize,
    #[arg(long, default_value_t = 10)]
    utts: usize,
    /// Evaluation trials, half of them target.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 1.0)]
    duration_min: f64,
    #[arg(long, default_value_t = 10.0)]
    duration_max: f64,
    /// Duration range of the training set; defaults to the evaluation range.
    #[arg(long)]
    train_duration_min: Option<f64>,
    #[arg(long)]
    train_duration_max: Option<f64>,
    /// `c` in Φ_U = (c / duration) I.
    #[arg(long, default_value_t = 1.0)]
    uncertainty_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    between_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    within_scale: f64,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").args(["data", "embeddings"]).required(true)))]
struct TrainArgs {
    /// Directory holding train.upe1 and train.utt2spk.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, requires = "utt2spk")]
    embeddings: Option<PathBuf>,
    #[arg(long, requires = "embeddings")]
    utt2spk: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
    #[arg(long)]
    speaker_dim: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    variance_floor: f64,
    /// Also write the mean and total covariance of the training embeddings.
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("steps").args(["center", "ln", "ls", "up_ls"]).required(true).multiple(true)))]
#[command(group(ArgGroup::new("scaling").args(["ln", "ls", "up_ls"])))]
struct TransformArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Centering statistics.
    #[arg(long)]
    stats: PathBuf,
    /// Replace the statistics mean with the mean of this archive.
    #[arg(long, value_name = "ARCHIVE")]
    adapt_mean: Option<PathBuf>,
    /// Subtract the statistics mean.
    #[arg(long)]
    center: bool,
    /// Whiten and length-normalize.
    #[arg(long)]
    ln: bool,
    /// Length scaling (mahalanobis or literal).
    #[arg(long, value_name = "FORM")]
    ls: Option<LengthScaleForm>,
    /// Length scaling with the utterance covariance added (mahalanobis or literal).
    #[arg(long, value_name = "FORM")]
    up_ls: Option<LengthScaleForm>,
    /// Treat a missing uncertainty as zero.
    #[arg(long)]
    assume_zero_uncertainty: bool,
}

#[derive(Debug, Args)]
struct PoolArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    /// plda or up-plda.
    #[arg(long, default_value = "up-plda")]
    mode: ScoringMode,
    #[arg(long)]
    out: PathBuf,
    /// Treat a missing uncertainty as zero.
    #[arg(long)]
    assume_zero_uncertainty: bool,
}

#[derive(Debug, Args)]
struct DcfArgs {
    #[arg(long, default_value_t = 0.01)]
    p_target: f64,
    #[arg(long, default_value_t = 1.0)]
    c_fa: f64,
    #[arg(long, default_value_t = 1.0)]
    c_miss: f64,
}

impl DcfArgs {
    fn params(&self) -> Result<DcfParams> {
        DcfParams::new(self.p_target, self.c_fa, self.c_miss)
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Write the (threshold, FAR, FRR) sweep as CSV.
    #[arg(long)]
    det_csv: Option<PathBuf>,
    #[command(flatten)]
    dcf: DcfArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// A condition, as NAME=PATH; repeatable.
    #[arg(long = "score", value_name = "NAME=PATH", required = true, value_parser = parse_named_path)]
    scores: Vec<(String, PathBuf)>,
    #[command(flatten)]
    dcf: DcfArgs,
}

fn parse_named_path(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_owned(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got `{s}`")),
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let _ = env_logger::Builder::new().filter_level(cli.log_level).try_init();

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 1;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match pool.install(|| dispatch(&cli, sub)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: &Cli, sub: &ArgMatches) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a, cli.seed),
        Command::Train(a) => train(a),
        Command::Transform(a) => transform(a, sub),
        Command::Pool(a) => pool(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn simulate(a: &SimulateArgs, seed: u64) -> Result<()> {
    let eval_cfg = SimConfig {
        dim: a.dim,
        speaker_dim: a.speaker_dim,
        n_speakers: a.speakers,
        utts_per_speaker: a.utts,
        n_trials: a.trials,
        duration_min: a.duration_min,
        duration_max: a.duration_max,
        uncertainty_scale: a.uncertainty_scale,
        between_scale: a.between_scale,
        within_scale: a.within_scale,
        speaker_prefix: "eval".into(),
        seed,
    };
    let model = synthetic::random_model(&eval_cfg)?;
    let train_cfg = SimConfig {
        n_trials: 0,
        duration_min: a.train_duration_min.unwrap_or(a.duration_min),
        duration_max: a.train_duration_max.unwrap_or(a.duration_max),
        speaker_prefix: "train".into(),
        seed: synthetic::derive_seed(seed, 1),
        ..eval_cfg.clone()
    };
    let eval_cfg = SimConfig {
        seed: synthetic::derive_seed(seed, 2),
        ..eval_cfg
    };
    let (train_set, _) = synthetic::sample_from_model(&model, &train_cfg)?;
    let (eval_set, trials) = synthetic::sample_from_model(&model, &eval_cfg)?;

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (name, set) in [("train", &train_set), ("eval", &eval_set)] {
        let (archive, utt2spk) = set.to_archive(true)?;
        storage::write_embeddings(a.out.join(format!("{name}.upe1")), &archive)?;
        storage::write_utt2spk(a.out.join(format!("{name}.utt2spk")), &utt2spk)?;
    }
    storage::write_trials(a.out.join("trials.txt"), &trials)?;
    storage::write_model(a.out.join("true_model.upm1"), &model)?;
    log::info!(
        "wrote {} training and {} evaluation utterances, {} trials",
        train_set.num_utterances(),
        eval_set.num_utterances(),
        trials.len()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let (emb, utt2spk) = match (&a.data, &a.embeddings, &a.utt2spk) {
        (Some(dir), _, _) => (dir.join("train.upe1"), dir.join("train.utt2spk")),
        (None, Some(e), Some(u)) => (e.clone(), u.clone()),
        _ => unreachable!("enforced by the argument groups"),
    };
    let archive = storage::read_embeddings(&emb, UncertaintyPolicy::Optional)?;
    let ds = LabeledDataset::from_archive(&archive, &storage::read_utt2spk(&utt2spk)?)?;
    let cfg = TrainConfig {
        em_iterations: a.iterations,
        variance_floor: a.variance_floor,
        speaker_dim: a.speaker_dim,
    };
    let trained = train_em_traced(&ds, &cfg)?;
    log::info!(
        "trained on {} speakers, {} utterances; final log-likelihood {}",
        ds.num_speakers(),
        ds.num_utterances(),
        trained.log_likelihood.last().copied().unwrap_or(f64::NAN)
    );
    storage::write_model(&a.out, &trained.model)?;
    if let Some(path) = &a.stats_out {
        let stats = preprocess::estimate_stats(archive.entries().iter().map(|e| e.vector()))?;
        storage::write_stats(path, &stats)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Center,
    Ln,
    Ls(LengthScaleForm),
    UpLs(LengthScaleForm),
}

fn transform_steps(a: &TransformArgs, m: &ArgMatches) -> Vec<Step> {
    let mut steps = Vec::new();
    let mut push = |id: &str, step: Step| {
        if let Some(i) = m.index_of(id) {
            steps.push((i, step));
        }
    };
    if a.center {
        push("center", Step::Center);
    }
    if a.ln {
        push("ln", Step::Ln);
    }
    if let Some(f) = a.ls {
        push("ls", Step::Ls(f));
    }
    if let Some(f) = a.up_ls {
        push("up_ls", Step::UpLs(f));
    }
    steps.sort_by_key(|(i, _)| *i);
    steps.into_iter().map(|(_, s)| s).collect()
}

fn transform(a: &TransformArgs, m: &ArgMatches) -> Result<()> {
    let steps = transform_steps(a, m);
    let policy = if a.assume_zero_uncertainty {
        UncertaintyPolicy::AssumeZero
    } else if steps.iter().any(|s| matches!(s, Step::UpLs(_))) {
        UncertaintyPolicy::Require
    } else {
        UncertaintyPolicy::Optional
    };
    let input = storage::read_embeddings(&a.input, policy)?;
    let mut stats = storage::read_stats(&a.stats)?;
    if let Some(dev) = &a.adapt_mean {
        let dev = storage::read_embeddings(dev, UncertaintyPolicy::Optional)?;
        stats = stats.adapt_mean(dev.entries().iter().map(|e| e.vector()))?;
    }
    let normalizer = steps
        .iter()
        .any(|s| matches!(s, Step::Ln))
        .then(|| LengthNormalizer::new(&stats));
    let out = input.try_map(input.has_uncertainty(), |e| {
        let mut e = e.clone();
        for step in &steps {
            e = match *step {
                Step::Center => center(&e, &stats)?,
                Step::Ln => normalizer.as_ref().expect("built above").apply_uncertain(&e)?,
                Step::Ls(form) => length_scale(&e, &stats, form, false)?,
                Step::UpLs(form) => length_scale(&e, &stats, form, true)?,
            };
        }
        Ok(e)
    })?;
    storage::write_embeddings(&a.out, &out)
}

fn pool(a: &PoolArgs) -> Result<()> {
    let (dim, records) = storage::read_frames(&a.frames)?;
    let head = storage::read_head(&a.head)?;
    crate::error::check_dim(head.input_dim(), dim)?;
    let prior = GaussianPrior::standard(dim);
    let entries = records
        .iter()
        .map(|r| propagate_through_head(r.id.clone(), &pool_posterior(&r.frames, &prior)?, &head))
        .collect::<Result<Vec<_>>>()?;
    let archive = EmbeddingArchive::new(head.output_dim(), true, entries)?;
    storage::write_embeddings(&a.out, &archive)
}

fn score(a: &ScoreArgs) -> Result<()> {
    let model = storage::read_model(&a.model)?;
    let policy = match (a.mode, a.assume_zero_uncertainty) {
        (_, true) => UncertaintyPolicy::AssumeZero,
        (ScoringMode::UpPlda, false) => UncertaintyPolicy::Require,
        (ScoringMode::Plda, false) => UncertaintyPolicy::Optional,
    };
    let archive = storage::read_embeddings(&a.embeddings, policy)?;
    let trials = storage::read_trials(&a.trials)?;
    let scores = score_batch(&model, &archive, &trials, a.mode)?;
    storage::write_scores(&a.out, &scores)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let scores = storage::read_scores(&a.scores)?;
    let params = a.dcf.params()?;
    let points = metrics::operating_points(&scores)?;
    if let Some(path) = &a.det_csv {
        let mut csv = String::from("threshold,far,frr\n");
        for p in &points {
            let _ = writeln!(csv, "{},{},{}", p.threshold, p.far, p.frr);
        }
        storage::write_atomic(path, csv.as_bytes())?;
    }
    print!(
        "eer {:.6}\nmin_dcf {:.6}\n",
        metrics::eer(&scores)?,
        metrics::min_dcf(&scores, &params)?
    );
    Ok(())
}

/// One row per condition: name, trial counts, EER in percent and minDCF.
pub fn report_table(conditions: &[(String, ScoreSet)], params: &DcfParams) -> Result<String> {
    let mut out = String::from("| condition | targets | nontargets | EER (%) | minDCF |\n|---|---:|---:|---:|---:|\n");
    for (name, scores) in conditions {
        let counts = scores.label_counts();
        let _ = writeln!(
            out,
            "| {name} | {} | {} | {:.3} | {:.4} |",
            counts.target,
            counts.nontarget,
            100.0 * metrics::eer(scores)?,
            metrics::min_dcf(scores, params)?
        );
    }
    Ok(out)
}

fn report(a: &ReportArgs) -> Result<()> {
    let params = a.dcf.params()?;
    let conditions = a
        .scores
        .iter()
        .map(|(name, path)| Ok((name.clone(), storage::read_scores(path)?)))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", report_table(&conditions, &params)?);
    Ok(())
}
