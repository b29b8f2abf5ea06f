//! Experiment grids: configuration, the per-cell pipeline and run
//! directories.
//!
//! A config is a flat `key = value` file. List-valued keys (`alpha`, `tau`,
//! `seeds`) take comma-separated values and expand into a grid of cells.
//! Each cell gets a directory named by a hash of its resolved config, so
//! re-running a config only computes the cells that are missing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::clicks::{estimate_propensities, simulate, SessionLog};
use crate::corpus;
use crate::data::{parse_letor, preprocess, Dataset, LabelTable, ScoreTable, Split};
use crate::diagnostics::{build_swap_graph, feature_overlap, residual_report, SwapGraph};
use crate::error::{Error, Result};
use crate::eval::{anchor_bias, bias_recovery, ranking_report, BiasRecoveryReport};
use crate::model::{train, write_params, TowerKind, TrainConfig, TrainTrace, TwoTowerModel};
use crate::policy::{
    expert_policy, first_features, train_pointwise_policy, LoggingPolicy, PolicyKind,
    PolicyTrainConfig,
};
use crate::rng::StreamKey;
use crate::synth::{generate_split_labels, LabelerKind, SyntheticLabeler};

pub const NDCG_CUTOFF: usize = 10;

const METRICS_HEADER: &str =
    "run_id,alpha,tau,tower,loss,seed,rank,theta_true,theta_hat,abs_err,ndcg10,swap_connected";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSource {
    Expert,
    Linear,
    Nonlinear,
}

impl std::fmt::Display for LabelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelSource::Expert => "expert",
            LabelSource::Linear => "linear",
            LabelSource::Nonlinear => "nonlinear",
        })
    }
}

impl FromStr for LabelSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(LabelSource::Expert),
            "linear" => Ok(LabelSource::Linear),
            "nonlinear" => Ok(LabelSource::Nonlinear),
            other => Err(Error::Config(format!("unknown label source '{other}'"))),
        }
    }
}

/// Which feature columns a component sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSubset {
    All,
    First(usize),
}

impl std::fmt::Display for FeatureSubset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureSubset::All => f.write_str("all"),
            FeatureSubset::First(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for FeatureSubset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(FeatureSubset::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(FeatureSubset::First(n)),
            _ => Err(Error::Config(format!(
                "feature subset must be 'all' or a positive count, got '{s}'"
            ))),
        }
    }
}

impl FeatureSubset {
    pub fn apply(self, ds: &Dataset) -> Result<Dataset> {
        match self {
            FeatureSubset::All => Ok(ds.clone()),
            FeatureSubset::First(n) => first_features(ds, n),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `None` selects the bundled corpus.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub truncate: usize,
    pub labels: LabelSource,
    pub label_noise: f64,
    pub policy: PolicyKind,
    pub policy_tower: TowerKind,
    pub policy_epochs: usize,
    pub policy_features: FeatureSubset,
    pub model_features: FeatureSubset,
    pub alphas: Vec<f64>,
    pub taus: Vec<f64>,
    pub tower: TowerKind,
    pub train_sessions: usize,
    pub valid_sessions: usize,
    pub seeds: Vec<u64>,
    /// Optimizer settings; the seed is replaced by each cell's seed.
    pub training: TrainConfig,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train_path: None,
            test_path: None,
            truncate: 25,
            labels: LabelSource::Linear,
            label_noise: crate::synth::DEFAULT_NOISE_SIGMA,
            policy: PolicyKind::Trained,
            policy_tower: TowerKind::Mlp,
            policy_epochs: PolicyTrainConfig::default().epochs,
            policy_features: FeatureSubset::All,
            model_features: FeatureSubset::All,
            alphas: vec![1.0],
            taus: vec![0.0, 0.2, 1.0],
            tower: TowerKind::Linear,
            train_sessions: 200_000,
            valid_sessions: 100_000,
            seeds: vec![1, 2, 3],
            training: TrainConfig::default(),
            out: PathBuf::from("runs"),
        }
    }
}

/// Every key accepted in a config file, in snapshot order.
pub const CONFIG_KEYS: &[&str] = &[
    "train_path",
    "test_path",
    "truncate",
    "labels",
    "label_noise",
    "policy",
    "policy_tower",
    "policy_epochs",
    "policy_features",
    "model_features",
    "alpha",
    "tau",
    "tower",
    "loss",
    "train_sessions",
    "valid_sessions",
    "seeds",
    "learning_rate",
    "weight_decay",
    "max_epochs",
    "patience",
    "batch_size",
    "aggregate",
    "ips_clip",
    "early_stop_unweighted",
    "out",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn with_config_err<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text` without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", i + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value. Does not re-validate the whole
    /// config; call [`ExperimentConfig::validate`] afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = |v: &str| (!v.is_empty() && v != "bundled").then(|| PathBuf::from(v));
        match key {
            "train_path" => self.train_path = path(value),
            "test_path" => self.test_path = path(value),
            "truncate" => self.truncate = parse_value(key, value)?,
            "labels" => self.labels = value.parse()?,
            "label_noise" => self.label_noise = parse_value(key, value)?,
            "policy" => self.policy = with_config_err(value.parse())?,
            "policy_tower" => self.policy_tower = with_config_err(value.parse())?,
            "policy_epochs" => self.policy_epochs = parse_value(key, value)?,
            "policy_features" => self.policy_features = value.parse()?,
            "model_features" => self.model_features = value.parse()?,
            "alpha" => self.alphas = parse_list(key, value)?,
            "tau" => self.taus = parse_list(key, value)?,
            "tower" => self.tower = with_config_err(value.parse())?,
            "loss" => self.training.loss = with_config_err(value.parse())?,
            "train_sessions" => self.train_sessions = parse_value(key, value)?,
            "valid_sessions" => self.valid_sessions = parse_value(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "learning_rate" => self.training.learning_rate = parse_value(key, value)?,
            "weight_decay" => self.training.weight_decay = parse_value(key, value)?,
            "max_epochs" => self.training.max_epochs = parse_value(key, value)?,
            "patience" => self.training.patience = parse_value(key, value)?,
            "batch_size" => self.training.batch_size = parse_value(key, value)?,
            "aggregate" => self.training.aggregate = parse_value(key, value)?,
            "ips_clip" => self.training.ips_clip = parse_value(key, value)?,
            "early_stop_unweighted" => {
                self.training.early_stop_unweighted = parse_value(key, value)?
            }
            "out" => self.out = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.taus.is_empty() {
            return Err(Error::Config("alpha and tau need at least one value".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(-1.0..=1.0).contains(*a)) {
            return Err(Error::Config(format!("alpha {a} outside [-1, 1]")));
        }
        if let Some(t) = self.taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Config(format!("tau {t} outside [0, 1]")));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.train_sessions == 0 || self.valid_sessions == 0 {
            return Err(Error::Config("session counts must be positive".into()));
        }
        if self.truncate == 0 {
            return Err(Error::Config("truncate must be at least 1".into()));
        }
        if !(self.label_noise >= 0.0) {
            return Err(Error::Config("label_noise must be non-negative".into()));
        }
        if self.policy == PolicyKind::Trained && self.policy_tower == TowerKind::Embedding {
            return Err(Error::Config("policy_tower must be linear or mlp".into()));
        }
        if self.tower == TowerKind::Embedding && self.model_features != FeatureSubset::All {
            return Err(Error::Config(
                "model_features has no effect on the embedding tower".into(),
            ));
        }
        self.training.validate()
    }

    /// Value of `key` as written in snapshots.
    fn value_of(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or_else(|| "bundled".to_string(), |p| p.display().to_string())
        };
        let t = &self.training;
        match key {
            "train_path" => path(&self.train_path),
            "test_path" => path(&self.test_path),
            "truncate" => self.truncate.to_string(),
            "labels" => self.labels.to_string(),
            "label_noise" => self.label_noise.to_string(),
            "policy" => self.policy.to_string(),
            "policy_tower" => self.policy_tower.to_string(),
            "policy_epochs" => self.policy_epochs.to_string(),
            "policy_features" => self.policy_features.to_string(),
            "model_features" => self.model_features.to_string(),
            "alpha" => join(&self.alphas),
            "tau" => join(&self.taus),
            "tower" => self.tower.to_string(),
            "loss" => t.loss.to_string(),
            "train_sessions" => self.train_sessions.to_string(),
            "valid_sessions" => self.valid_sessions.to_string(),
            "seeds" => join(&self.seeds),
            "learning_rate" => t.learning_rate.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "patience" => t.patience.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "aggregate" => t.aggregate.to_string(),
            "ips_clip" => t.ips_clip.to_string(),
            "early_stop_unweighted" => t.early_stop_unweighted.to_string(),
            "out" => self.out.display().to_string(),
            _ => unreachable!("unlisted config key {key}"),
        }
    }

    /// The whole config in `key = value` form; parses back to itself.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(s, "{key} = {}", self.value_of(key));
        }
        s
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &alpha in &self.alphas {
            for &tau in &self.taus {
                for &seed in &self.seeds {
                    out.push(Cell { alpha, tau, seed });
                }
            }
        }
        out
    }

    /// Resolved single-cell config text, without the output directory. This
    /// is what `run_id` hashes.
    pub fn snapshot(&self, cell: Cell) -> String {
        let mut one = self.clone();
        one.alphas = vec![cell.alpha];
        one.taus = vec![cell.tau];
        one.seeds = vec![cell.seed];
        let mut s = String::new();
        for key in CONFIG_KEYS.iter().filter(|k| **k != "out") {
            let _ = writeln!(s, "{key} = {}", one.value_of(key));
        }
        s
    }

    pub fn run_id(&self, cell: Cell) -> String {
        let digest = Sha256::digest(self.snapshot(cell).as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub alpha: f64,
    pub tau: f64,
    pub seed: u64,
}

/// Preprocessed training and test splits.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Dataset,
    pub test: Dataset,
}

impl Corpus {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let load = |path: &Option<PathBuf>, split: Split| match path {
            Some(p) => parse_letor(p, split),
            None => corpus::bundled(split),
        };
        let (train, _) = preprocess(&load(&cfg.train_path, Split::Train)?, cfg.truncate)?;
        let (test, _) = preprocess(&load(&cfg.test_path, Split::Test)?, cfg.truncate)?;
        if train.queries.is_empty() {
            return Err(Error::EmptyDataset("no training queries after filtering".into()));
        }
        if test.feature_dim != train.feature_dim {
            let mut test = test;
            if test.feature_dim < train.feature_dim {
                for d in test.queries.iter_mut().flat_map(|q| q.docs.iter_mut()) {
                    d.features.resize(train.feature_dim, 0.0);
                }
                test.feature_dim = train.feature_dim;
                return Ok(Corpus { train, test });
            }
            return Err(Error::DimensionMismatch {
                expected: train.feature_dim,
                actual: test.feature_dim,
            });
        }
        Ok(Corpus { train, test })
    }
}

// Sub-streams derived from a cell seed.
const LOG_TRAIN: u64 = 1;
const LOG_VALID: u64 = 2;

/// Ground-truth labels on both splits and the policy's relevance estimate
/// on the training split. Depends on the seed but not on `alpha`/`tau`.
#[derive(Clone, Debug)]
pub struct Environment {
    pub train_labels: LabelTable,
    pub test_labels: LabelTable,
    pub gamma_hat: ScoreTable,
}

pub fn build_environment(cfg: &ExperimentConfig, corpus: &Corpus, seed: u64) -> Result<Environment> {
    let (train_labels, test_labels) = match cfg.labels {
        LabelSource::Expert => (
            LabelTable::expert(&corpus.train),
            LabelTable::expert(&corpus.test),
        ),
        LabelSource::Linear | LabelSource::Nonlinear => {
            let kind = if cfg.labels == LabelSource::Linear {
                LabelerKind::Linear
            } else {
                LabelerKind::Nonlinear
            };
            let gen = SyntheticLabeler::random(kind, corpus.train.feature_dim, cfg.label_noise, seed);
            let (_, mut tables) = generate_split_labels(&[&corpus.train, &corpus.test], &gen)?;
            let test = tables.pop().expect("two splits");
            (tables.pop().expect("two splits"), test)
        }
    };
    let gamma_hat = match cfg.policy {
        PolicyKind::Expert => expert_policy(&train_labels),
        PolicyKind::Trained => {
            let ds = cfg.policy_features.apply(&corpus.train)?;
            let pcfg = PolicyTrainConfig {
                tower: cfg.policy_tower,
                epochs: cfg.policy_epochs,
                seed,
                ..Default::default()
            };
            train_pointwise_policy(&ds, &train_labels, &pcfg)?.scores(&ds)?
        }
    };
    Ok(Environment {
        train_labels,
        test_labels,
        gamma_hat,
    })
}

/// Everything a cell produces.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: Cell,
    pub run_id: String,
    pub model: TwoTowerModel,
    pub trace: TrainTrace,
    pub recovery: BiasRecoveryReport,
    /// Mean nDCG@10 on training queries for the embedding tower, on the test
    /// split otherwise.
    pub ndcg10: f64,
    pub swap: SwapGraph,
    pub train_log: SessionLog,
}

impl CellOutcome {
    pub fn metrics_csv(&self, cfg: &ExperimentConfig) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.recovery.ranks {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                self.run_id,
                self.cell.alpha,
                self.cell.tau,
                cfg.tower,
                cfg.training.loss,
                self.cell.seed,
                r.rank,
                r.theta_true,
                r.theta_hat,
                r.abs_err,
                self.ndcg10,
                self.swap.is_connected()
            );
        }
        s
    }
}

/// Simulates, trains and evaluates one cell in memory.
pub fn run_cell(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    env: &Environment,
    cell: Cell,
) -> Result<CellOutcome> {
    let ds = &corpus.train;
    let policy = LoggingPolicy::interpolated(ds, &env.gamma_hat, cell.alpha, cell.tau, cell.seed)?;
    let key = StreamKey::new(cell.seed);
    let train_log = simulate(
        ds,
        &env.train_labels,
        &policy,
        cfg.train_sessions,
        key.with(LOG_TRAIN).value(),
    )?;
    let valid_log = simulate(
        ds,
        &env.train_labels,
        &policy,
        cfg.valid_sessions,
        key.with(LOG_VALID).value(),
    )?;
    let model_ds = cfg.model_features.apply(ds)?;
    let max_rank = ds.max_docs_per_query();
    let init = TwoTowerModel::new(cfg.tower, &model_ds, max_rank, cell.seed);
    let tcfg = TrainConfig {
        seed: cell.seed,
        ..cfg.training.clone()
    };
    let (model, trace) = train(init, &model_ds, &train_log, &valid_log, &tcfg)?;
    let recovery = bias_recovery(model.theta(), max_rank)?;
    let ndcg10 = if cfg.tower == TowerKind::Embedding {
        let scores = model.relevance_scores(&model_ds)?;
        ranking_report(&model_ds, &scores, &env.train_labels, NDCG_CUTOFF)?.mean_ndcg
    } else {
        let test = cfg.model_features.apply(&corpus.test)?;
        let scores = model.relevance_scores(&test)?;
        ranking_report(&test, &scores, &env.test_labels, NDCG_CUTOFF)?.mean_ndcg
    };
    let swap = build_swap_graph(&train_log);
    Ok(CellOutcome {
        cell,
        run_id: cfg.run_id(cell),
        model,
        trace,
        recovery,
        ndcg10,
        swap,
        train_log,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Writes a cell's artifacts into `dir`.
fn write_cell(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    out: &CellOutcome,
    dir: &Path,
) -> Result<()> {
    let diag = dir.join("diagnostics");
    fs::create_dir_all(&diag).map_err(|e| Error::io(&diag, e))?;
    write_file(&dir.join("config.snapshot"), cfg.snapshot(out.cell).as_bytes())?;
    write_file(&dir.join("metrics.csv"), out.metrics_csv(cfg).as_bytes())?;

    let mut theta = String::from("rank,theta,theta_anchored\n");
    for (i, (t, a)) in out
        .model
        .theta()
        .iter()
        .zip(anchor_bias(out.model.theta()))
        .enumerate()
    {
        let _ = writeln!(theta, "{},{t},{a}", i + 1);
    }
    write_file(&dir.join("theta.csv"), theta.as_bytes())?;

    let mut trace = String::from("epoch,train_loss,valid_loss\n");
    for e in &out.trace.epochs {
        let _ = writeln!(trace, "{},{},{}", e.epoch, e.train_loss, e.valid_loss);
    }
    write_file(&diag.join("training.csv"), trace.as_bytes())?;

    write_file(
        &diag.join("swap_edges.csv"),
        &csv_bytes(|b| out.swap.write_edges_csv(b))?,
    )?;
    write_file(
        &diag.join("swap_components.csv"),
        &csv_bytes(|b| out.swap.write_components_csv(b))?,
    )?;

    let model_ds = cfg.model_features.apply(&corpus.train)?;
    let props = estimate_propensities(&out.train_log)?;
    write_file(
        &diag.join("propensities.csv"),
        &csv_bytes(|b| props.write_csv(&corpus.train, b))?,
    )?;
    let residuals = residual_report(&out.model, &model_ds, &out.train_log, &props)?;
    write_file(
        &diag.join("residual_ranks.csv"),
        &csv_bytes(|b| residuals.write_ranks_csv(b))?,
    )?;
    write_file(
        &diag.join("residual_cells.csv"),
        &csv_bytes(|b| residuals.write_cells_csv(&model_ds, b))?,
    )?;
    if cfg.tower != TowerKind::Embedding {
        let overlap = feature_overlap(&out.train_log, &model_ds, None, None)?;
        write_file(
            &diag.join("feature_overlap.csv"),
            &csv_bytes(|b| overlap.write_csv(b))?,
        )?;
    }

    let mut params = Vec::new();
    write_params(&out.model, &mut params)?;
    write_file(&dir.join("model.params"), &params)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub cell: Cell,
    pub dir: PathBuf,
    /// False when the directory already existed and the cell was skipped.
    pub computed: bool,
}

/// Runs every missing cell of the grid, at most `jobs` at a time, and
/// returns one record per cell in grid order.
pub fn run(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let cells = cfg.cells();
    let pending: Vec<Cell> = cells
        .iter()
        .copied()
        .filter(|&c| !cfg.out.join(cfg.run_id(c)).join("metrics.csv").exists())
        .collect();
    if !pending.is_empty() {
        let corpus = Corpus::load(cfg)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| {
            pending
                .par_iter()
                .try_for_each(|&cell| execute(cfg, &corpus, cell))
        })?;
    }
    Ok(cells
        .into_iter()
        .map(|cell| {
            let run_id = cfg.run_id(cell);
            RunRecord {
                dir: cfg.out.join(&run_id),
                computed: pending.contains(&cell),
                run_id,
                cell,
            }
        })
        .collect())
}

fn execute(cfg: &ExperimentConfig, corpus: &Corpus, cell: Cell) -> Result<()> {
    let wrap = |e: Error| Error::Cell {
        alpha: cell.alpha,
        tau: cell.tau,
        seed: cell.seed,
        source: Box::new(e),
    };
    let env = build_environment(cfg, corpus, cell.seed).map_err(wrap)?;
    let outcome = run_cell(cfg, corpus, &env, cell).map_err(wrap)?;
    // Artifacts go to a scratch directory first so an interrupted run never
    // leaves a directory that looks complete.
    let final_dir = cfg.out.join(&outcome.run_id);
    let tmp = cfg.out.join(format!(".{}.partial", outcome.run_id));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    write_cell(cfg, corpus, &outcome, &tmp).map_err(wrap)?;
    // A directory without metrics.csv is an incomplete cell; replace it.
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
    }
    fs::rename(&tmp, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
    Ok(())
}
