//! The end-to-end experiment pipeline.
//!
//! Per seed: build (or load) the S0–S5 suite, train a plain and a fixed-bias
//! model per step, split a clean dev sample off the test set, estimate the
//! source and target priors, and evaluate five methods on the held-out
//! remainder: `original`, `max-thres`, `ent-thres`, `ba-set` and `ba-fix`.
//! Everything is seeded; two runs with the same config produce byte-identical
//! reports.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{
    apply_threshold, ba_fix_predict, ba_set_predict, clean_dev_split, estimate_label_distribution,
    grid_with_steps, AdjustmentSpec, ThresholdKind,
};
use crate::corpus::{build_vocab, load_instances};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::{aggregate_seeds, evaluate, gold_indices, EvalReport};
use crate::model::{Instance, LabelDistribution, LabelVocab, ModelKind, SoftmaxClassifier};
use crate::synth::{
    build_shift_suite, random_distribution, shift_report, ShiftReport, ShiftSuite, SynthGenSpec,
    NUM_SHIFT_STEPS,
};
use crate::train::{train, train_ba_fix, TrainConfig, TrainLog};

/// The five evaluation methods, in report order.
pub const METHODS: [&str; 5] = ["original", "max-thres", "ent-thres", "ba-set", "ba-fix"];

/// Full configuration of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Load a pre-built suite (`train_S0.jsonl`..`train_S5.jsonl`,
    /// `test.jsonl`) from this directory instead of generating one.
    pub suite_dir: Option<PathBuf>,

    // Synthetic suite parameters (ignored in load mode).
    pub num_labels: usize,
    pub none_share: f64,
    pub vocab_size: usize,
    pub feats_per_instance: usize,
    /// Feature mass each relation concentrates on its own vocabulary block.
    pub block_mass: f64,
    pub suite_seed: u64,
    pub n_train: usize,
    pub n_test: usize,

    // Model.
    pub model_kind: ModelKind,
    pub embedding_dim: usize,

    // Training.
    pub lr0: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub input_dropout: f64,
    pub pool_dropout: f64,
    pub l2: f64,
    /// Fraction of each train set split off as the noisy dev set.
    pub noisy_dev_fraction: f64,

    // Adaptation.
    pub clean_dev_fraction: f64,
    /// Additive smoothing for prior estimation.
    pub alpha: f64,
    /// Points in each threshold grid.
    pub grid_steps: usize,

    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            suite_dir: None,
            num_labels: 7,
            none_share: 0.75,
            vocab_size: 210,
            feats_per_instance: 16,
            block_mass: 0.45,
            suite_seed: 13,
            n_train: 5000,
            n_test: 3000,
            model_kind: ModelKind::SparseLinear,
            embedding_dim: crate::model::DEFAULT_EMBEDDING_DIM,
            // Batch-1 SGD over indicator features wants a cooler rate than
            // the library-wide lr0 = 1.0 default; 1.0 overshoots so badly
            // that dev loss never beats the untrained baseline.
            lr0: 0.1,
            decay_factor: 0.1,
            patience: 3,
            max_epochs: 20,
            batch_size: 1,
            input_dropout: 0.0,
            pool_dropout: 0.0,
            l2: 0.0,
            noisy_dev_fraction: 0.1,
            clean_dev_fraction: 0.2,
            alpha: 1.0,
            grid_steps: 101,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("no seeds configured".into()));
        }
        if self.grid_steps < 2 {
            return Err(Error::InvalidConfig(
                "grid needs at least two points".into(),
            ));
        }
        if !(self.clean_dev_fraction > 0.0 && self.clean_dev_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "clean-dev fraction {} not in (0, 1)",
                self.clean_dev_fraction
            )));
        }
        if !(self.noisy_dev_fraction > 0.0 && self.noisy_dev_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "noisy-dev fraction {} not in (0, 1)",
                self.noisy_dev_fraction
            )));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::InvalidConfig(
                "prior smoothing must be positive so adjusted priors stay off zero".into(),
            ));
        }
        self.train_config(0).validate()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            decay_factor: self.decay_factor,
            patience: self.patience,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            input_dropout: self.input_dropout,
            pool_dropout: self.pool_dropout,
            l2: self.l2,
            seed,
        }
    }
}

/// Hex SHA-256 of the canonical JSON encoding of a config.
pub fn config_hash(cfg: &RunConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serialization cannot fail");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One (seed, step, method) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub step: usize,
    pub method: String,
    /// Tuned threshold value, for the threshold methods.
    pub threshold: Option<f64>,
    pub report: EvalReport,
}

/// Mean/std of micro-F1 over seeds for one (method, step) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStepAggregate {
    pub method: String,
    pub step: usize,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub n_runs: usize,
}

/// Training trace of one (seed, step) model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub seed: u64,
    pub step: usize,
    /// `plain` or `ba-fix`.
    pub variant: String,
    pub log: TrainLog,
}

/// Everything one experiment produced, including the provenance needed to
/// reproduce it: seeds, config hash, and every estimated distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config_hash: String,
    pub config: RunConfig,
    pub vocab: LabelVocab,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    /// Interpolated train priors S0..=S5.
    pub step_priors: Vec<Vec<f64>>,
    pub test_prior: Vec<f64>,
    /// Smoothed source-prior estimates per step.
    pub p_src_by_step: Vec<Vec<f64>>,
    /// Smoothed clean-dev target estimates per seed.
    pub p_tgt_by_seed: Vec<Vec<f64>>,
    /// Per-step shift between the train set and the shared test set.
    pub shift_reports: Vec<ShiftReport>,
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<MethodStepAggregate>,
    pub train_logs: Vec<TrainLogRecord>,
}

impl ExperimentResult {
    /// Aggregate row for one (method, step) cell.
    pub fn aggregate(&self, method: &str, step: usize) -> Option<&MethodStepAggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.step == step)
    }

    /// Per-seed micro-F1 of one (method, step) cell, in seed order.
    pub fn f1_by_seed(&self, method: &str, step: usize) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.method == method && r.step == step)
            .map(|r| r.report.micro_f1)
            .collect()
    }
}

fn build_suite(cfg: &RunConfig) -> Result<ShiftSuite> {
    if let Some(dir) = &cfg.suite_dir {
        return load_suite(dir);
    }
    let spec = SynthGenSpec::with_block_classes(
        cfg.num_labels,
        cfg.none_share,
        cfg.vocab_size,
        cfg.feats_per_instance,
        cfg.block_mass,
        cfg.suite_seed,
    )?;
    let s0 = spec.test_prior();
    let s5 = random_distribution(cfg.num_labels, derive_seed(cfg.suite_seed, 5))?;
    build_shift_suite(
        &spec,
        &s0,
        &s5,
        &s0,
        cfg.n_train,
        cfg.n_test,
        cfg.suite_seed,
    )
}

/// Loads a suite previously written by [`write_suite`].
pub fn load_suite(dir: impl AsRef<Path>) -> Result<ShiftSuite> {
    let dir = dir.as_ref();
    let mut train_sets = Vec::with_capacity(NUM_SHIFT_STEPS);
    let mut everything: Vec<Instance> = Vec::new();
    for i in 0..NUM_SHIFT_STEPS {
        let set = load_instances(dir.join(format!("train_S{i}.jsonl")))?;
        everything.extend(set.iter().cloned());
        train_sets.push(set);
    }
    let test_set = load_instances(dir.join("test.jsonl"))?;
    everything.extend(test_set.iter().cloned());
    let vocab = build_vocab(&everything, crate::model::DEFAULT_NONE_NAME)?;
    let step_priors = train_sets
        .iter()
        .map(|set| estimate_label_distribution(set, &vocab, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let test_prior = estimate_label_distribution(&test_set, &vocab, 0.0)?;
    Ok(ShiftSuite {
        vocab,
        train_sets,
        step_priors,
        test_set,
        test_prior,
    })
}

/// Writes a suite as `train_S0.jsonl`..`train_S5.jsonl`, `test.jsonl` and a
/// `priors.json` sidecar.
pub fn write_suite(suite: &ShiftSuite, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut written = Vec::new();
    for (i, set) in suite.train_sets.iter().enumerate() {
        let path = dir.join(format!("train_S{i}.jsonl"));
        crate::corpus::save_dataset(&path, set)?;
        written.push(path);
    }
    let test_path = dir.join("test.jsonl");
    crate::corpus::save_dataset(&test_path, &suite.test_set)?;
    written.push(test_path);

    #[derive(Serialize)]
    struct Priors<'a> {
        labels: &'a [String],
        step_priors: Vec<&'a [f64]>,
        test_prior: &'a [f64],
    }
    let priors = Priors {
        labels: suite.vocab.labels(),
        step_priors: suite.step_priors.iter().map(|p| p.probs()).collect(),
        test_prior: suite.test_prior.probs(),
    };
    let priors_path = dir.join("priors.json");
    fs::write(&priors_path, serde_json::to_string_pretty(&priors)?)
        .map_err(|e| Error::io(priors_path.display().to_string(), e))?;
    written.push(priors_path);
    Ok(written)
}

fn method_record(
    seed: u64,
    step: usize,
    method: &str,
    threshold: Option<f64>,
    labels: &[usize],
    golds: &[usize],
    vocab: &LabelVocab,
) -> Result<RunRecord> {
    Ok(RunRecord {
        seed,
        step,
        method: method.to_string(),
        threshold,
        report: evaluate(labels, golds, vocab)?,
    })
}

/// Runs the full pipeline for every configured seed and interpolation step.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let suite = build_suite(cfg)?;
    let vocab = suite.vocab.clone();

    let mut p_src_by_step = Vec::with_capacity(suite.train_sets.len());
    let mut shift_reports = Vec::with_capacity(suite.train_sets.len());
    for train_set in &suite.train_sets {
        p_src_by_step.push(estimate_label_distribution(train_set, &vocab, cfg.alpha)?);
        let train_mle = estimate_label_distribution(train_set, &vocab, 0.0)?;
        shift_reports.push(shift_report(&train_mle, &suite.test_set, &vocab)?);
    }

    let mut runs = Vec::new();
    let mut train_logs = Vec::new();
    let mut p_tgt_by_seed = Vec::with_capacity(cfg.seeds.len());

    for &seed in &cfg.seeds {
        let (clean, held) = clean_dev_split(
            &suite.test_set,
            cfg.clean_dev_fraction,
            derive_seed(seed, 31),
        )?;
        let p_tgt = estimate_label_distribution(&clean, &vocab, cfg.alpha)?;
        let held_golds = gold_indices(&held, &vocab)?;

        for (step, full_train) in suite.train_sets.iter().enumerate() {
            // Noisy dev: a slice of the (distantly supervised) train set.
            let (noisy_dev, train_part) = clean_dev_split(
                full_train,
                cfg.noisy_dev_fraction,
                derive_seed(seed, 100 + step as u64),
            )?;
            let feature_ids = SoftmaxClassifier::feature_ids_from(&train_part);
            let init = match cfg.model_kind {
                ModelKind::SparseLinear => {
                    SoftmaxClassifier::sparse_linear(vocab.clone(), feature_ids)
                }
                ModelKind::EmbeddingAverage => SoftmaxClassifier::embedding_average(
                    vocab.clone(),
                    feature_ids,
                    cfg.embedding_dim,
                    derive_seed(seed, 300 + step as u64),
                )?,
            };
            let tcfg = cfg.train_config(derive_seed(seed, 200 + step as u64));
            let p_src = &p_src_by_step[step];
            let (plain, plain_log) = train(init.clone(), &train_part, &noisy_dev, &tcfg)?;
            let (fixed, fixed_log) = train_ba_fix(init, &train_part, &noisy_dev, &tcfg, p_src)?;
            train_logs.push(TrainLogRecord {
                seed,
                step,
                variant: "plain".into(),
                log: plain_log,
            });
            train_logs.push(TrainLogRecord {
                seed,
                step,
                variant: "ba-fix".into(),
                log: fixed_log,
            });

            let base: Vec<LabelDistribution> = held.iter().map(|x| plain.predict(x)).collect();

            // original
            let labels: Vec<usize> = base.iter().map(|p| p.argmax()).collect();
            runs.push(method_record(
                seed,
                step,
                METHODS[0],
                None,
                &labels,
                &held_golds,
                &vocab,
            )?);

            // max-thres / ent-thres, tuned on the clean dev.
            for (method, kind) in [
                (METHODS[1], ThresholdKind::Max),
                (METHODS[2], ThresholdKind::Entropy),
            ] {
                let grid = grid_with_steps(kind, vocab.len(), cfg.grid_steps);
                let spec = crate::adapt::tune_threshold(&plain, &clean, kind, &grid)?;
                let labels: Vec<usize> = base
                    .iter()
                    .map(|p| apply_threshold(p, &spec, &vocab))
                    .collect();
                runs.push(method_record(
                    seed,
                    step,
                    method,
                    Some(spec.value),
                    &labels,
                    &held_golds,
                    &vocab,
                )?);
            }

            // ba-set on the plain model.
            let adjustment = AdjustmentSpec::new(p_src.clone(), p_tgt.clone())?;
            let labels: Vec<usize> = held
                .iter()
                .map(|x| ba_set_predict(&plain, x, &adjustment).map(|p| p.argmax()))
                .collect::<Result<_>>()?;
            runs.push(method_record(
                seed,
                step,
                METHODS[3],
                None,
                &labels,
                &held_golds,
                &vocab,
            )?);

            // ba-fix on the fixed-bias model.
            let labels: Vec<usize> = held
                .iter()
                .map(|x| ba_fix_predict(&fixed, x, &p_tgt).map(|p| p.argmax()))
                .collect::<Result<_>>()?;
            runs.push(method_record(
                seed,
                step,
                METHODS[4],
                None,
                &labels,
                &held_golds,
                &vocab,
            )?);
        }
        p_tgt_by_seed.push(p_tgt);
    }

    let mut aggregates = Vec::new();
    for method in METHODS {
        for step in 0..suite.train_sets.len() {
            let reports: Vec<EvalReport> = runs
                .iter()
                .filter(|r| r.method == method && r.step == step)
                .map(|r| r.report.clone())
                .collect();
            let agg = aggregate_seeds(&reports)?;
            aggregates.push(MethodStepAggregate {
                method: method.to_string(),
                step,
                mean_f1: agg.mean_f1,
                std_f1: agg.std_f1,
                n_runs: agg.n_runs,
            });
        }
    }

    Ok(ExperimentResult {
        config_hash: config_hash(cfg),
        config: cfg.clone(),
        vocab,
        methods: METHODS.iter().map(|m| m.to_string()).collect(),
        seeds: cfg.seeds.clone(),
        step_priors: suite
            .step_priors
            .iter()
            .map(|p| p.probs().to_vec())
            .collect(),
        test_prior: suite.test_prior.probs().to_vec(),
        p_src_by_step: p_src_by_step.iter().map(|p| p.probs().to_vec()).collect(),
        p_tgt_by_seed: p_tgt_by_seed.iter().map(|p| p.probs().to_vec()).collect(),
        shift_reports,
        runs,
        aggregates,
        train_logs,
    })
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    ))
}

/// Writes `results.json`, `table.csv`, `shift_bins.csv` and
/// `trainlogs/*.csv` into `out_dir`, overwriting idempotently. Every file
/// records the config hash. An empty result is rejected before anything is
/// written.
pub fn emit_reports(result: &ExperimentResult, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if result.runs.is_empty() {
        return Err(Error::EmptyInput("experiment result has no runs".into()));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut written = Vec::new();

    let results_path = dir.join("results.json");
    {
        let mut f = create_file(&results_path)?;
        let body = serde_json::to_string_pretty(result)?;
        writeln!(f, "{body}").map_err(|e| Error::io(results_path.display().to_string(), e))?;
        f.flush()
            .map_err(|e| Error::io(results_path.display().to_string(), e))?;
    }
    written.push(results_path);

    let table_path = dir.join("table.csv");
    {
        let mut f = create_file(&table_path)?;
        writeln!(f, "# config_hash={}", result.config_hash)
            .map_err(|e| Error::io(table_path.display().to_string(), e))?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["method", "dataset", "mean_f1", "std_f1"])?;
        for a in &result.aggregates {
            w.write_record([
                a.method.clone(),
                format!("S{}", a.step),
                a.mean_f1.to_string(),
                a.std_f1.to_string(),
            ])?;
        }
        w.flush()
            .map_err(|e| Error::io(table_path.display().to_string(), e))?;
    }
    written.push(table_path);

    let bins_path = dir.join("shift_bins.csv");
    {
        let mut f = create_file(&bins_path)?;
        writeln!(f, "# config_hash={}", result.config_hash)
            .map_err(|e| Error::io(bins_path.display().to_string(), e))?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["step", "bin_lo", "bin_hi", "proportion"])?;
        for (step, report) in result.shift_reports.iter().enumerate() {
            for (k, prop) in report.bin_proportions.iter().enumerate() {
                w.write_record([
                    format!("S{step}"),
                    report.bin_edges[k].to_string(),
                    report.bin_edges[k + 1].to_string(),
                    prop.to_string(),
                ])?;
            }
        }
        w.flush()
            .map_err(|e| Error::io(bins_path.display().to_string(), e))?;
    }
    written.push(bins_path);

    let logs_dir = dir.join("trainlogs");
    fs::create_dir_all(&logs_dir).map_err(|e| Error::io(logs_dir.display().to_string(), e))?;
    for record in &result.train_logs {
        let path = logs_dir.join(format!(
            "seed{}_S{}_{}.csv",
            record.seed, record.step, record.variant
        ));
        let mut f = create_file(&path)?;
        writeln!(f, "# config_hash={}", result.config_hash)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        record.log.write_csv(&mut f)?;
        f.flush()
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        written.push(path);
    }

    Ok(written)
}
