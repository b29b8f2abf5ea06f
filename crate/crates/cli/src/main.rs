use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Arg, ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use towerlab::clicks::{estimate_propensities, simulate, SessionLog};
use towerlab::corpus;
use towerlab::data::{parse_letor, preprocess, write_letor, Dataset, LabelTable, ScoreTable, Split};
use towerlab::diagnostics::{build_swap_graph, feature_overlap, residual_report};
use towerlab::eval::{bias_recovery, ranking_report};
use towerlab::experiment::{self, ExperimentConfig, FeatureSubset, LabelSource, CONFIG_KEYS};
use towerlab::model::{read_params, train, write_params, LossKind, TowerKind, TrainConfig, TwoTowerModel};
use towerlab::policy::{expert_policy, train_pointwise_policy, LoggingPolicy, PolicyKind, PolicyTrainConfig};
use towerlab::report;
use towerlab::synth::{generate_labels, LabelerKind, SyntheticLabeler, DEFAULT_NOISE_SIGMA};

#[derive(Parser)]
#[command(name = "towerlab", version, about = "Position-bias simulation and two-tower click models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Truncate, filter and log1p-normalize a LETOR file (or a bundled split).
    Ingest(IngestArgs),
    /// Write ground-truth relevance labels for a dataset.
    SynthLabels(SynthArgs),
    /// Fit a logging policy and write its relevance scores.
    TrainPolicy(PolicyArgs),
    /// Simulate a click log under an interpolated epsilon-greedy policy.
    Simulate(SimulateArgs),
    /// Fit a two-tower model on a click log.
    Train(TrainArgs),
    /// Compare a model's bias logits with the truth and compute nDCG@10.
    Evaluate(EvaluateArgs),
    /// Swap graph, propensities, residuals and feature overlap of a log.
    Diagnose(DiagnoseArgs),
    /// Run an experiment grid from a config file.
    Run(RunArgs),
    /// Aggregate completed runs into summary.csv and SVG panels.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// LETOR file; the bundled corpus split is used when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value_t = 25)]
    truncate: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Preprocessed LETOR file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "linear")]
    labels: String,
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
    label_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "trained")]
    policy: String,
    #[arg(long, default_value = "mlp")]
    policy_tower: String,
    #[arg(long, default_value = "all")]
    policy_features: String,
    #[arg(long, default_value_t = PolicyTrainConfig::default().epochs)]
    policy_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Policy relevance scores from `train-policy`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    #[arg(long, default_value_t = 200_000)]
    sessions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write counted propensities here.
    #[arg(long)]
    propensities: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    train_log: PathBuf,
    #[arg(long)]
    valid_log: PathBuf,
    #[arg(long, default_value = "linear")]
    tower: String,
    #[arg(long, default_value = "nll")]
    loss: String,
    #[arg(long, default_value = "all")]
    model_features: String,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    aggregate: Option<bool>,
    #[arg(long)]
    ips_clip: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset for nDCG; restricted to the model's feature count.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    log: PathBuf,
    /// Adds residual and feature-overlap reports.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Cells computed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of `run`.
    #[arg(long)]
    runs: PathBuf,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "validation" | "vali" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split '{other}'")),
    }
}

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

/// The derived command plus one `--<key>` override per config key on `run`.
fn command() -> clap::Command {
    Cli::command().mut_subcommand("run", |mut run| {
        for key in CONFIG_KEYS {
            run = run.arg(
                Arg::new(*key)
                    .long(flag(key))
                    .value_name("VALUE")
                    .allow_hyphen_values(true)
                    .action(ArgAction::Set)
                    .help(format!("Override the `{key}` config key")),
            );
        }
        run
    })
}

fn writer(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).map_err(|e| towerlab::Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn load(path: &Path) -> towerlab::Result<Dataset> {
    parse_letor(path, Split::Train)
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    let raw = match &a.input {
        Some(p) => parse_letor(p, a.split)?,
        None => corpus::bundled(a.split)?,
    };
    let (ds, report) = preprocess(&raw, a.truncate)?;
    write_letor(&ds, writer(&a.out)?)?;
    println!(
        "queries={} documents={} features={} removed_queries={} removed_fraction={:.4}",
        ds.queries.len(),
        ds.n_docs(),
        ds.feature_dim,
        report.removed,
        report.fraction_removed()
    );
    Ok(())
}

fn synth_labels(a: SynthArgs) -> anyhow::Result<()> {
    let ds = load(&a.data)?;
    let labels = match a.labels.parse::<LabelSource>()? {
        LabelSource::Expert => LabelTable::expert(&ds),
        LabelSource::Linear => generate_labels(
            &ds,
            &SyntheticLabeler::random(LabelerKind::Linear, ds.feature_dim, a.label_noise, a.seed),
        )?,
        LabelSource::Nonlinear => generate_labels(
            &ds,
            &SyntheticLabeler::random(LabelerKind::Nonlinear, ds.feature_dim, a.label_noise, a.seed),
        )?,
    };
    labels.write_csv(&ds, "label", writer(&a.out)?)?;
    Ok(())
}

fn train_policy(a: PolicyArgs) -> anyhow::Result<()> {
    let ds = load(&a.data)?;
    let labels = LabelTable::read_csv(&ds, &a.labels)?;
    let scores = match a.policy.parse::<PolicyKind>()? {
        PolicyKind::Expert => expert_policy(&labels),
        PolicyKind::Trained => {
            let sub = a.policy_features.parse::<FeatureSubset>()?.apply(&ds)?;
            let cfg = PolicyTrainConfig {
                tower: a.policy_tower.parse()?,
                epochs: a.policy_epochs,
                seed: a.seed,
                ..Default::default()
            };
            let policy = train_pointwise_policy(&sub, &labels, &cfg)?;
            eprintln!("policy train_mse={}", policy.train_mse);
            policy.scores(&sub)?
        }
    };
    scores.write_csv(&ds, "score", writer(&a.out)?)?;
    Ok(())
}

fn simulate_cmd(a: SimulateArgs) -> anyhow::Result<()> {
    let ds = load(&a.data)?;
    let labels = LabelTable::read_csv(&ds, &a.labels)?;
    let gamma_hat = ScoreTable::read_csv(&ds, &a.scores)?;
    let policy = LoggingPolicy::interpolated(&ds, &gamma_hat, a.alpha, a.tau, a.seed)?;
    let log = simulate(&ds, &labels, &policy, a.sessions, a.seed)?;
    log.write_csv(&ds, writer(&a.out)?)?;
    if let Some(p) = &a.propensities {
        estimate_propensities(&log)?.write_csv(&ds, writer(p)?)?;
    }
    println!(
        "sessions={} impressions={} clicks={}",
        log.n_sessions,
        log.len(),
        log.n_clicks()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let full = load(&a.data)?;
    let train_log = SessionLog::read_csv(&full, &a.train_log)?;
    let valid_log = SessionLog::read_csv(&full, &a.valid_log)?;
    let ds = a.model_features.parse::<FeatureSubset>()?.apply(&full)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        max_epochs: a.max_epochs.unwrap_or(d.max_epochs),
        patience: a.patience.unwrap_or(d.patience),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        aggregate: a.aggregate.unwrap_or(d.aggregate),
        ips_clip: a.ips_clip.unwrap_or(d.ips_clip),
        loss: a.loss.parse::<LossKind>()?,
        seed: a.seed,
        ..d
    };
    let tower: TowerKind = a.tower.parse()?;
    let max_rank = train_log.max_rank.max(valid_log.max_rank);
    let init = TwoTowerModel::new(tower, &ds, max_rank, a.seed);
    let (model, trace) = train(init, &ds, &train_log, &valid_log, &cfg)?;
    for e in &trace.epochs {
        eprintln!(
            "epoch={} train_loss={} valid_loss={}",
            e.epoch, e.train_loss, e.valid_loss
        );
    }
    println!(
        "best_epoch={} best_valid_loss={} stopped_early={}",
        trace.best_epoch, trace.best_valid_loss, trace.stopped_early
    );
    let mut out = writer(&a.out)?;
    write_params(&model, &mut out)?;
    out.flush()?;
    Ok(())
}

fn read_model(path: &Path) -> anyhow::Result<TwoTowerModel> {
    let f = File::open(path).map_err(|e| towerlab::Error::io(path, e))?;
    Ok(read_params(io::BufReader::new(f))?)
}

/// The dataset restricted to as many leading features as `model` uses.
fn model_view(model: &TwoTowerModel, ds: &Dataset) -> towerlab::Result<Dataset> {
    match model.relevance.feature_dim() {
        Some(n) if n < ds.feature_dim => FeatureSubset::First(n).apply(ds),
        _ => Ok(ds.clone()),
    }
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let model = read_model(&a.model)?;
    let full = load(&a.data)?;
    let ds = model_view(&model, &full)?;
    let labels = LabelTable::read_csv(&full, &a.labels)?;
    let rec = bias_recovery(model.theta(), model.max_rank())?;
    println!("rank,theta_true,theta_hat,abs_err");
    for r in &rec.ranks {
        println!("{},{},{},{}", r.rank, r.theta_true, r.theta_hat, r.abs_err);
    }
    let scores = model.relevance_scores(&ds)?;
    let ranking = ranking_report(&ds, &scores, &labels, a.k)?;
    println!(
        "mae={} max_err={} ndcg@{}={} excluded_queries={}",
        rec.mae, rec.max_err, a.k, ranking.mean_ndcg, ranking.excluded
    );
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> anyhow::Result<()> {
    let full = load(&a.data)?;
    let log = SessionLog::read_csv(&full, &a.log)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let graph = build_swap_graph(&log);
    graph.write_edges_csv(writer(&a.out.join("swap_edges.csv"))?)?;
    graph.write_components_csv(writer(&a.out.join("swap_components.csv"))?)?;
    println!("{}", graph.verdict());
    let props = estimate_propensities(&log)?;
    props.write_csv(&full, writer(&a.out.join("propensities.csv"))?)?;
    if let Some(path) = &a.model {
        let model = read_model(path)?;
        let ds = model_view(&model, &full)?;
        let res = residual_report(&model, &ds, &log, &props)?;
        res.write_ranks_csv(writer(&a.out.join("residual_ranks.csv"))?)?;
        res.write_cells_csv(&ds, writer(&a.out.join("residual_cells.csv"))?)?;
        println!(
            "residual_policy_correlation={} max_abs_mean_residual={} max_bias_sum={} max_relevance_sum={}",
            res.correlation,
            res.max_abs_mean_residual(),
            res.max_bias_sum,
            res.max_relevance_sum
        );
        if model.kind() != TowerKind::Embedding {
            let overlap = feature_overlap(&log, &ds, None, None)?;
            overlap.write_csv(writer(&a.out.join("feature_overlap.csv"))?)?;
            println!("feature_overlap eps={} {}", overlap.eps, overlap.graph.verdict());
        }
    }
    Ok(())
}

fn run_cmd(a: RunArgs, matches: &ArgMatches) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.config).map_err(|e| towerlab::Error::io(&a.config, e))?;
    // Overrides are applied before validation so that a flag can repair an
    // otherwise invalid file.
    let mut cfg = ExperimentConfig::default();
    cfg.apply_text(&text)?;
    for key in CONFIG_KEYS {
        if let Some(v) = matches.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    let records = experiment::run(&cfg, a.jobs)?;
    let computed = records.iter().filter(|r| r.computed).count();
    for r in &records {
        println!(
            "{} alpha={} tau={} seed={} {}",
            r.run_id,
            r.cell.alpha,
            r.cell.tau,
            r.cell.seed,
            if r.computed { "computed" } else { "resumed" }
        );
    }
    println!(
        "cells={} computed={} resumed={} out={}",
        records.len(),
        computed,
        records.len() - computed,
        cfg.out.display()
    );
    Ok(())
}

fn report_cmd(a: ReportArgs) -> anyhow::Result<()> {
    let rep = report::report(&a.runs)?;
    println!(
        "summary={} rows={}",
        a.runs.join("summary.csv").display(),
        rep.rows.len()
    );
    for (name, path) in &rep.panels {
        println!("panel {name} {}", path.display());
    }
    if rep.rows.iter().any(|r| r.single_seed) {
        println!("warning: some groups have a single seed; their intervals collapse to the point");
    }
    Ok(())
}

fn dispatch(cli: Cli, matches: &ArgMatches) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::SynthLabels(a) => synth_labels(a),
        Command::TrainPolicy(a) => train_policy(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Run(a) => {
            let sub = matches.subcommand_matches("run").expect("run matches");
            run_cmd(a, sub)
        }
        Command::Report(a) => report_cmd(a),
    }
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<towerlab::Error>())
        .map_or("internal", towerlab::Error::kind);
    // towerlab errors already print their source.
    let text = if err.is::<towerlab::Error>() {
        err.to_string()
    } else {
        format!("{err:#}")
    };
    let message = text.replace('\\', "\\\\").replace('"', "\\\"");
    format!("error: kind={kind} message=\"{message}\"")
}

fn main() -> ExitCode {
    let matches = command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match dispatch(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
