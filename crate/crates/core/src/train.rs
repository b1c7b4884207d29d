//! Cross-entropy training against the self-adapted supervision distribution.
//!
//! Each instance carries a noisy label set `Y`. The supervision target is the
//! model's own posterior restricted to `Y` and renormalized,
//!
//! ```text
//! q(r_i | Y, h) = exp(z_i) · 1(r_i ∈ Y) / Σ_{r_j ∈ Y} exp(z_j)
//! ```
//!
//! and the loss is the cross entropy `-Σ_i q_i ln p_i` with `q` held fixed
//! per step (no gradient flows through it). Optimization is plain SGD: the
//! learning rate starts at `lr0` and is multiplied by `decay_factor` whenever
//! the dev loss fails to improve for `patience` consecutive epochs.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::estimate_label_distribution;
use crate::error::{Error, Result};
use crate::eval::{evaluate, gold_indices};
use crate::model::{
    log_sum_exp, softmax, Instance, LabelDistribution, ModelKind, Representation, SoftmaxClassifier,
};

/// Training stops once the learning rate decays below this floor.
pub const MIN_LEARNING_RATE: f64 = 1e-6;

/// SGD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Multiplier applied to the learning rate on stagnation.
    pub decay_factor: f64,
    /// Consecutive epochs without dev-loss improvement before a decay.
    pub patience: usize,
    pub max_epochs: usize,
    /// Instances per SGD step; 1 is pure SGD.
    pub batch_size: usize,
    /// Probability of zeroing each input feature per step.
    pub input_dropout: f64,
    /// Probability of zeroing each pooled coordinate per step
    /// (embedding-average models only).
    pub pool_dropout: f64,
    /// L2 coefficient over weights and embeddings (biases excluded).
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1.0,
            decay_factor: 0.1,
            patience: 3,
            max_epochs: 30,
            batch_size: 1,
            input_dropout: 0.0,
            pool_dropout: 0.0,
            l2: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if !self.lr0.is_finite() || self.lr0 <= 0.0 {
            return fail(format!("lr0 {} must be positive", self.lr0));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail(format!("decay factor {} not in (0, 1]", self.decay_factor));
        }
        if self.patience < 1 {
            return fail("patience must be at least one epoch".into());
        }
        if self.max_epochs < 1 {
            return fail("max_epochs must be at least one".into());
        }
        if self.batch_size < 1 {
            return fail("batch size must be at least one".into());
        }
        for (name, p) in [
            ("input_dropout", self.input_dropout),
            ("pool_dropout", self.pool_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} {p} not in [0, 1)"));
            }
        }
        if !self.l2.is_finite() || self.l2 < 0.0 {
            return fail(format!("l2 {} must be nonnegative", self.l2));
        }
        Ok(())
    }
}

/// One epoch's dev metrics and the learning rate in effect during it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub dev_loss: f64,
    pub dev_f1: f64,
    pub lr: f64,
}

/// Per-epoch training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// Index of the last epoch that ran.
    pub final_epoch: usize,
}

impl TrainLog {
    /// Emits the log as CSV with columns `epoch,dev_loss,dev_f1,lr`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "dev_loss", "dev_f1", "lr"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.dev_loss.to_string(),
                e.dev_f1.to_string(),
                e.lr.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("train log", e))?;
        Ok(())
    }
}

/// Dense gradient of the training loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    /// `K x dim`, aligned to the label weight rows.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// `F x dim` feature-embedding rows (embedding-average models only).
    pub embeddings: Vec<Vec<f64>>,
    pub unk: Vec<f64>,
}

impl ParamGrad {
    fn zeros_like(model: &SoftmaxClassifier) -> Self {
        ParamGrad {
            weights: vec![vec![0.0; model.dim]; model.vocab.len()],
            bias: vec![0.0; model.vocab.len()],
            embeddings: vec![vec![0.0; model.dim]; model.embeddings.len()],
            unk: vec![0.0; model.unk.len()],
        }
    }
}

/// Maps a label set to sorted, deduplicated vocabulary indices.
fn label_indices(model: &SoftmaxClassifier, labels: &[String]) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("label set Y".into()));
    }
    let mut idx = labels
        .iter()
        .map(|name| model.vocab.require(name))
        .collect::<Result<Vec<usize>>>()?;
    idx.sort_unstable();
    idx.dedup();
    Ok(idx)
}

/// Softmax restricted to the indices in `y` (zero elsewhere).
fn restricted_softmax(z: &[f64], y: &[usize]) -> Vec<f64> {
    let max = y.iter().map(|&i| z[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut q = vec![0.0; z.len()];
    let mut sum = 0.0;
    for &i in y {
        let e = (z[i] - max).exp();
        q[i] = e;
        sum += e;
    }
    for &i in y {
        q[i] /= sum;
    }
    q
}

/// The self-adapted supervision distribution `q(·|Y, h)`: the model posterior
/// restricted to the noisy label set and renormalized. One-hot when `|Y| = 1`.
pub fn q_distribution(
    model: &SoftmaxClassifier,
    inst: &Instance,
    labels: &[String],
) -> Result<LabelDistribution> {
    let y = label_indices(model, labels)?;
    let z = model.logits(&model.represent(inst));
    LabelDistribution::new(restricted_softmax(&z, &y))
}

fn l2_penalty(model: &SoftmaxClassifier, l2: f64) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    let sq = |rows: &[Vec<f64>]| -> f64 {
        rows.iter()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>())
            .sum()
    };
    0.5 * l2
        * (sq(&model.weights)
            + sq(&model.embeddings)
            + model.unk.iter().map(|x| x * x).sum::<f64>())
}

/// Training loss of one instance: cross entropy of the model posterior
/// against its own restricted posterior `q` (treated as a constant), plus the
/// L2 penalty over weights and embeddings when `l2 > 0`.
pub fn loss(model: &SoftmaxClassifier, inst: &Instance, l2: f64) -> Result<f64> {
    let y = label_indices(model, &inst.labels)?;
    let z = model.logits(&model.represent(inst));
    let q = restricted_softmax(&z, &y);
    let lse = log_sum_exp(&z);
    let ce: f64 = y.iter().map(|&i| -q[i] * (z[i] - lse)).sum();
    Ok(ce + l2_penalty(model, l2))
}

/// Per-step dropout state. Masks are only drawn when the corresponding
/// probability is positive, so dropout-free configurations consume no
/// randomness and reproduce the plain forward pass exactly.
struct DropoutCfg<'a> {
    input_p: f64,
    pool_p: f64,
    rng: &'a mut ChaCha8Rng,
}

/// Accumulates `weight ·` the gradient of one instance's cross-entropy loss
/// into `g`. `q` is computed from the same (dropped-out) forward pass as `p`
/// and treated as a constant.
fn instance_grad(
    model: &SoftmaxClassifier,
    inst: &Instance,
    weight: f64,
    mut dropout: Option<DropoutCfg<'_>>,
    g: &mut ParamGrad,
) -> Result<()> {
    let y = label_indices(model, &inst.labels)?;

    // Inverted-dropout keep value for one Bernoulli draw.
    let keep_scale = |p: f64, rng: &mut ChaCha8Rng| -> f64 {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            1.0 / (1.0 - p)
        }
    };

    match model.kind {
        ModelKind::SparseLinear => {
            let mut cols: Vec<usize> = inst
                .features
                .iter()
                .filter_map(|f| model.feature_map.get(f).copied())
                .collect();
            cols.sort_unstable();
            cols.dedup();
            let mut pairs: Vec<(usize, f64)> = Vec::with_capacity(cols.len());
            for c in cols {
                let v = match &mut dropout {
                    Some(d) if d.input_p > 0.0 => keep_scale(d.input_p, d.rng),
                    _ => 1.0,
                };
                if v > 0.0 {
                    pairs.push((c, v));
                }
            }
            let h = Representation::Sparse {
                pairs,
                dim: model.dim,
            };
            let z = model.logits(&h);
            let p = softmax(&z);
            let q = restricted_softmax(&z, &y);
            let pairs = match &h {
                Representation::Sparse { pairs, .. } => pairs,
                _ => unreachable!(),
            };
            for i in 0..model.vocab.len() {
                let dz = weight * (p[i] - q[i]);
                g.bias[i] += dz;
                for (j, v) in pairs {
                    g.weights[i][*j] += dz * v;
                }
            }
        }
        ModelKind::EmbeddingAverage => {
            let m = inst.features.len();
            // Distinct rows (F = UNK) with bag counts, in sorted row order.
            let mut row_counts: BTreeMap<usize, usize> = BTreeMap::new();
            for f in &inst.features {
                let row = model
                    .feature_map
                    .get(f)
                    .copied()
                    .unwrap_or(model.embeddings.len());
                *row_counts.entry(row).or_insert(0) += 1;
            }
            // Effective per-row pooling coefficients c̃_r / m.
            let mut coeffs: Vec<(usize, f64)> = Vec::with_capacity(row_counts.len());
            for (row, count) in &row_counts {
                let keep = match &mut dropout {
                    Some(d) if d.input_p > 0.0 => keep_scale(d.input_p, d.rng),
                    _ => 1.0,
                };
                if keep > 0.0 {
                    coeffs.push((*row, keep * *count as f64 / m as f64));
                }
            }
            let mut h = vec![0.0; model.dim];
            for (row, c) in &coeffs {
                let e = if *row == model.embeddings.len() {
                    &model.unk
                } else {
                    &model.embeddings[*row]
                };
                for (hj, ej) in h.iter_mut().zip(e) {
                    *hj += c * ej;
                }
            }
            // Pool dropout acts on the averaged representation.
            let pool_mask: Option<Vec<f64>> = match &mut dropout {
                Some(d) if d.pool_p > 0.0 => Some(
                    (0..model.dim)
                        .map(|_| keep_scale(d.pool_p, d.rng))
                        .collect(),
                ),
                _ => None,
            };
            if let Some(mask) = &pool_mask {
                for (hj, mj) in h.iter_mut().zip(mask) {
                    *hj *= mj;
                }
            }
            let hr = Representation::Dense(h);
            let z = model.logits(&hr);
            let p = softmax(&z);
            let q = restricted_softmax(&z, &y);
            let h = match &hr {
                Representation::Dense(h) => h,
                _ => unreachable!(),
            };
            // dL/dh = Wᵀ(p - q), masked back through the pool dropout.
            let mut dh = vec![0.0; model.dim];
            for i in 0..model.vocab.len() {
                let dz = weight * (p[i] - q[i]);
                g.bias[i] += dz;
                for j in 0..model.dim {
                    g.weights[i][j] += dz * h[j];
                    dh[j] += dz * model.weights[i][j];
                }
            }
            if let Some(mask) = &pool_mask {
                for (dj, mj) in dh.iter_mut().zip(mask) {
                    *dj *= mj;
                }
            }
            for (row, c) in &coeffs {
                let target = if *row == model.embeddings.len() {
                    &mut g.unk
                } else {
                    &mut g.embeddings[*row]
                };
                for (gj, dj) in target.iter_mut().zip(&dh) {
                    *gj += c * dj;
                }
            }
        }
    }
    Ok(())
}

fn add_l2_grad(model: &SoftmaxClassifier, l2: f64, g: &mut ParamGrad) {
    if l2 == 0.0 {
        return;
    }
    for (grow, wrow) in g.weights.iter_mut().zip(&model.weights) {
        for (gj, wj) in grow.iter_mut().zip(wrow) {
            *gj += l2 * wj;
        }
    }
    for (grow, erow) in g.embeddings.iter_mut().zip(&model.embeddings) {
        for (gj, ej) in grow.iter_mut().zip(erow) {
            *gj += l2 * ej;
        }
    }
    for (gj, uj) in g.unk.iter_mut().zip(&model.unk) {
        *gj += l2 * uj;
    }
}

/// Exact analytic gradient of the batch loss (mean cross entropy over the
/// batch plus the L2 term), with each instance's `q` held fixed.
pub fn gradient(model: &SoftmaxClassifier, batch: &[Instance], l2: f64) -> Result<ParamGrad> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("gradient batch".into()));
    }
    let mut g = ParamGrad::zeros_like(model);
    let w = 1.0 / batch.len() as f64;
    for inst in batch {
        instance_grad(model, inst, w, None, &mut g)?;
    }
    add_l2_grad(model, l2, &mut g);
    Ok(g)
}

fn apply_step(model: &mut SoftmaxClassifier, g: &ParamGrad, lr: f64, freeze_bias: bool) {
    for (wrow, grow) in model.weights.iter_mut().zip(&g.weights) {
        for (wj, gj) in wrow.iter_mut().zip(grow) {
            *wj -= lr * gj;
        }
    }
    if !freeze_bias {
        for (b, gb) in model.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    for (erow, grow) in model.embeddings.iter_mut().zip(&g.embeddings) {
        for (ej, gj) in erow.iter_mut().zip(grow) {
            *ej -= lr * gj;
        }
    }
    for (u, gu) in model.unk.iter_mut().zip(&g.unk) {
        *u -= lr * gu;
    }
}

/// Mean dev cross entropy (no L2 term) and dev micro-F1.
fn dev_metrics(
    model: &SoftmaxClassifier,
    dev: &[Instance],
    dev_golds: &[usize],
) -> Result<(f64, f64)> {
    if dev.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut total = 0.0;
    for inst in dev {
        total += loss(model, inst, 0.0)?;
    }
    let preds: Vec<usize> = dev.iter().map(|i| model.argmax_predict(i)).collect();
    let f1 = evaluate(&preds, dev_golds, &model.vocab)?.micro_f1;
    Ok((total / dev.len() as f64, f1))
}

fn train_inner(
    mut model: SoftmaxClassifier,
    train_set: &[Instance],
    dev_set: &[Instance],
    cfg: &TrainConfig,
    freeze_bias: bool,
) -> Result<(SoftmaxClassifier, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set".into()));
    }
    model.train_prior = Some(estimate_label_distribution(train_set, &model.vocab, 1.0)?);
    let dev_golds = gold_indices(dev_set, &model.vocab)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let has_dropout = cfg.input_dropout > 0.0 || cfg.pool_dropout > 0.0;
    let mut lr = cfg.lr0;
    let mut stagnant = 0usize;
    // Baseline dev loss before any update, so the first epoch must actually
    // improve on the initial model to count as progress.
    let (mut best_loss, _) = dev_metrics(&model, dev_set, &dev_golds)?;
    let mut best_model = model.clone();
    let mut epochs = Vec::new();
    let mut final_epoch = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = ParamGrad::zeros_like(&model);
            let w = 1.0 / chunk.len() as f64;
            for &ix in chunk {
                let dropout = if has_dropout {
                    Some(DropoutCfg {
                        input_p: cfg.input_dropout,
                        pool_p: cfg.pool_dropout,
                        rng: &mut rng,
                    })
                } else {
                    None
                };
                instance_grad(&model, &train_set[ix], w, dropout, &mut g)?;
            }
            add_l2_grad(&model, cfg.l2, &mut g);
            apply_step(&mut model, &g, lr, freeze_bias);
        }

        let (dev_loss, dev_f1) = dev_metrics(&model, dev_set, &dev_golds)?;
        epochs.push(EpochStats {
            epoch,
            dev_loss,
            dev_f1,
            lr,
        });
        final_epoch = epoch;

        if dev_loss < best_loss {
            best_loss = dev_loss;
            best_model = model.clone();
            stagnant = 0;
        } else {
            stagnant += 1;
            if stagnant >= cfg.patience {
                lr *= cfg.decay_factor;
                stagnant = 0;
            }
        }
        if lr < MIN_LEARNING_RATE {
            break;
        }
    }

    Ok((
        best_model,
        TrainLog {
            epochs,
            final_epoch,
        },
    ))
}

/// SGD training. Returns the parameters achieving the best dev loss together
/// with the per-epoch log.
pub fn train(
    model: SoftmaxClassifier,
    train_set: &[Instance],
    dev_set: &[Instance],
    cfg: &TrainConfig,
) -> Result<(SoftmaxClassifier, TrainLog)> {
    train_inner(model, train_set, dev_set, cfg, false)
}

/// Training with the bias frozen at `ln p_src` for the whole run.
///
/// The bias receives no updates, so the returned model's bias equals
/// `ln p_src` exactly; the model records `p_src` so evaluation can swap the
/// bias to `ln p_tgt` ([`crate::adapt::ba_fix_predict`]).
pub fn train_ba_fix(
    mut model: SoftmaxClassifier,
    train_set: &[Instance],
    dev_set: &[Instance],
    cfg: &TrainConfig,
    p_src: &LabelDistribution,
) -> Result<(SoftmaxClassifier, TrainLog)> {
    if p_src.len() != model.num_labels() {
        return Err(Error::InvalidDistribution(format!(
            "source prior covers {} labels but the model has {}",
            p_src.len(),
            model.num_labels()
        )));
    }
    if !p_src.is_strictly_positive() {
        return Err(Error::InvalidDistribution(
            "source prior has a zero entry; ln p_src is undefined".into(),
        ));
    }
    model.bias = p_src.probs().iter().map(|p| p.ln()).collect();
    let (mut trained, log) = train_inner(model, train_set, dev_set, cfg, true)?;
    trained.ba_fix_src = Some(p_src.clone());
    Ok((trained, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LabelVocab;
    use approx::assert_abs_diff_eq;

    fn vocab(k: usize) -> LabelVocab {
        let labels = (0..k)
            .map(|i| {
                if i == 0 {
                    "NONE".into()
                } else {
                    format!("R{i}")
                }
            })
            .collect();
        LabelVocab::new(labels, 0).unwrap()
    }

    fn inst(id: &str, features: &[&str], labels: &[&str]) -> Instance {
        Instance::new(
            id,
            features.iter().map(|s| s.to_string()).collect(),
            labels.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    /// Sparse model with logits (1, 2, 3) for an instance carrying `f0`.
    fn model_123() -> (SoftmaxClassifier, Instance) {
        let mut m = SoftmaxClassifier::sparse_linear(vocab(3), vec!["f0".into()]);
        m.weights = vec![vec![1.0], vec![2.0], vec![3.0]];
        let x = inst("x", &["f0"], &["NONE", "R2"]);
        (m, x)
    }

    fn random_model(kind: ModelKind, k: usize, n_feats: usize, seed: u64) -> SoftmaxClassifier {
        let ids: Vec<String> = (0..n_feats).map(|i| format!("f{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = match kind {
            ModelKind::SparseLinear => SoftmaxClassifier::sparse_linear(vocab(k), ids),
            ModelKind::EmbeddingAverage => {
                SoftmaxClassifier::embedding_average(vocab(k), ids, 5, seed).unwrap()
            }
        };
        for row in &mut m.weights {
            for w in row.iter_mut() {
                *w = rng.gen_range(-1.0..1.0);
            }
        }
        for b in &mut m.bias {
            *b = rng.gen_range(-0.5..0.5);
        }
        m
    }

    fn random_instance(n_feats: usize, k: usize, rng: &mut ChaCha8Rng) -> Instance {
        let n = rng.gen_range(1..=5usize);
        let features = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < 0.1 {
                    "unseen-feature".to_string()
                } else {
                    format!("f{}", rng.gen_range(0..n_feats))
                }
            })
            .collect();
        let n_labels = rng.gen_range(1..=2usize.min(k));
        let mut labels: Vec<String> = (0..n_labels)
            .map(|_| {
                let i = rng.gen_range(0..k);
                if i == 0 {
                    "NONE".into()
                } else {
                    format!("R{i}")
                }
            })
            .collect();
        labels.dedup();
        Instance::new("r", features, labels).unwrap()
    }

    #[test]
    fn q_is_one_hot_for_single_labels() {
        let (m, _) = model_123();
        let x = inst("x", &["f0"], &["R2"]);
        let q = q_distribution(&m, &x, &x.labels).unwrap();
        assert_eq!(q.probs(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn q_over_full_vocab_equals_softmax() {
        let (m, _) = model_123();
        let x = inst("x", &["f0"], &["NONE", "R1", "R2"]);
        let q = q_distribution(&m, &x, &x.labels).unwrap();
        let p = m.predict(&x);
        for (qi, pi) in q.probs().iter().zip(p.probs()) {
            assert_abs_diff_eq!(*qi, *pi, epsilon = 1e-15);
        }
    }

    #[test]
    fn q_restricted_renormalization() {
        // z = (1, 2, 3), Y = {0, 2}: q = (e^1, 0, e^3) / (e^1 + e^3).
        let (m, x) = model_123();
        let q = q_distribution(&m, &x, &x.labels).unwrap();
        assert_abs_diff_eq!(q.get(0), 0.119_202_922_022_117_56, epsilon = 1e-15);
        assert_eq!(q.get(1), 0.0);
        assert_abs_diff_eq!(q.get(2), 0.880_797_077_977_882_4, epsilon = 1e-15);
    }

    #[test]
    fn q_rejects_bad_label_sets() {
        let (m, _) = model_123();
        let x = inst("x", &["f0"], &["R2"]);
        assert!(q_distribution(&m, &x, &[]).is_err());
        assert!(q_distribution(&m, &x, &["R99".into()]).is_err());
    }

    #[test]
    fn loss_single_label_is_negative_log_posterior() {
        let (m, _) = model_123();
        let x = inst("x", &["f0"], &["R2"]);
        let p = m.predict(&x).get(2);
        assert_abs_diff_eq!(loss(&m, &x, 0.0).unwrap(), -p.ln(), epsilon = 1e-12);
    }

    #[test]
    fn loss_equals_entropy_when_p_equals_q() {
        // Y = full vocab makes q coincide with p, so the cross entropy hits
        // its lower bound, the entropy of q.
        let (m, _) = model_123();
        let x = inst("x", &["f0"], &["NONE", "R1", "R2"]);
        let p = m.predict(&x);
        assert_abs_diff_eq!(loss(&m, &x, 0.0).unwrap(), p.entropy(), epsilon = 1e-12);
    }

    #[test]
    fn loss_restricted_label_set_frozen_value() {
        // Independent evaluation: L = -(q0 ln p0 + q2 ln p2) for z = (1,2,3),
        // Y = {0,2}; the decimal below is frozen from a 40-digit computation.
        let (m, x) = model_123();
        let l = loss(&m, &x, 0.0).unwrap();
        assert_abs_diff_eq!(l, 0.646_011_808_488_615_4, epsilon = 1e-14);

        // Direct re-derivation through an unrelated code path.
        let z: [f64; 3] = [1.0, 2.0, 3.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let p: Vec<f64> = z.iter().map(|v| v.exp() / denom).collect();
        let qden = z[0].exp() + z[2].exp();
        let oracle = -(z[0].exp() / qden) * p[0].ln() - (z[2].exp() / qden) * p[2].ln();
        assert_abs_diff_eq!(l, oracle, epsilon = 1e-14);
    }

    #[test]
    fn bias_gradient_is_p_minus_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [ModelKind::SparseLinear, ModelKind::EmbeddingAverage] {
            let m = random_model(kind, 4, 9, 77);
            let x = random_instance(9, 4, &mut rng);
            let g = gradient(&m, std::slice::from_ref(&x), 0.0).unwrap();
            let p = m.predict(&x);
            let q = q_distribution(&m, &x, &x.labels).unwrap();
            for i in 0..4 {
                assert_abs_diff_eq!(g.bias[i], p.get(i) - q.get(i), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_model_uniform_q_has_zero_bias_gradient() {
        let m = SoftmaxClassifier::sparse_linear(vocab(3), vec!["f0".into()]);
        let x = inst("x", &["f0"], &["NONE", "R1", "R2"]);
        let g = gradient(&m, &[x], 0.0).unwrap();
        for gb in &g.bias {
            assert_eq!(*gb, 0.0);
        }
    }

    /// Central finite differences of the cross entropy with `q` frozen at the
    /// unperturbed parameters, evaluated through the public prediction path.
    fn finite_difference_check(kind: ModelKind, seed: u64, l2: f64) {
        const EPS: f64 = 1e-5;
        let model = random_model(kind, 3, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let batch: Vec<Instance> = (0..3).map(|_| random_instance(6, 3, &mut rng)).collect();
        let analytic = gradient(&model, &batch, l2).unwrap();

        // Frozen q per instance.
        let qs: Vec<LabelDistribution> = batch
            .iter()
            .map(|x| q_distribution(&model, x, &x.labels).unwrap())
            .collect();
        let eval = |m: &SoftmaxClassifier| -> f64 {
            let mut total = 0.0;
            for (x, q) in batch.iter().zip(&qs) {
                let p = m.predict(x);
                total -= q
                    .probs()
                    .iter()
                    .zip(p.probs())
                    .filter(|(qi, _)| **qi > 0.0)
                    .map(|(qi, pi)| qi * pi.ln())
                    .sum::<f64>();
            }
            total / batch.len() as f64 + l2_penalty(m, l2)
        };

        let check = |set: &dyn Fn(&mut SoftmaxClassifier, f64), analytic: f64| {
            let mut plus = model.clone();
            set(&mut plus, EPS);
            let mut minus = model.clone();
            set(&mut minus, -EPS);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let scale = analytic.abs().max(numeric.abs()).max(1.0);
            assert!(
                (analytic - numeric).abs() <= 1e-6 * scale,
                "{kind} grad mismatch: analytic {analytic} vs numeric {numeric}"
            );
        };

        for i in 0..3 {
            let gi = analytic.bias[i];
            check(&move |m: &mut SoftmaxClassifier, d: f64| m.bias[i] += d, gi);
            for j in 0..model.dim() {
                let gw = analytic.weights[i][j];
                check(
                    &move |m: &mut SoftmaxClassifier, d: f64| m.weights[i][j] += d,
                    gw,
                );
            }
        }
        for r in 0..model.embeddings.len() {
            for j in 0..model.dim() {
                let ge = analytic.embeddings[r][j];
                check(
                    &move |m: &mut SoftmaxClassifier, d: f64| m.embeddings[r][j] += d,
                    ge,
                );
            }
        }
        for j in 0..model.unk.len() {
            let gu = analytic.unk[j];
            check(&move |m: &mut SoftmaxClassifier, d: f64| m.unk[j] += d, gu);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(ModelKind::SparseLinear, 1, 0.0);
        finite_difference_check(ModelKind::SparseLinear, 2, 0.01);
        finite_difference_check(ModelKind::EmbeddingAverage, 3, 0.0);
        finite_difference_check(ModelKind::EmbeddingAverage, 4, 0.01);
    }

    #[test]
    fn gradient_rejects_empty_batch() {
        let (m, _) = model_123();
        assert!(gradient(&m, &[], 0.0).is_err());
    }

    #[test]
    fn dropout_zero_matches_plain_gradient_path() {
        let m = random_model(ModelKind::EmbeddingAverage, 3, 6, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_instance(6, 3, &mut rng);
        let mut plain = ParamGrad::zeros_like(&m);
        instance_grad(&m, &x, 1.0, None, &mut plain).unwrap();
        let mut dropped = ParamGrad::zeros_like(&m);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(123);
        instance_grad(
            &m,
            &x,
            1.0,
            Some(DropoutCfg {
                input_p: 0.0,
                pool_p: 0.0,
                rng: &mut drop_rng,
            }),
            &mut dropped,
        )
        .unwrap();
        assert_eq!(plain, dropped);
    }

    /// Two-class data with disjoint feature support; linearly separable.
    fn separable_data(n_per_class: usize) -> (Vec<Instance>, Vec<Instance>) {
        let mut train = Vec::new();
        for i in 0..n_per_class {
            train.push(inst(&format!("n{i}"), &[&format!("a{}", i % 4)], &["NONE"]));
            train.push(inst(&format!("r{i}"), &[&format!("b{}", i % 4)], &["R1"]));
        }
        let dev = vec![inst("dn", &["a0"], &["NONE"]), inst("dr", &["b1"], &["R1"])];
        (train, dev)
    }

    #[test]
    fn training_fits_separable_data() {
        let (train_set, dev) = separable_data(40);
        let model = SoftmaxClassifier::sparse_linear(
            vocab(2),
            SoftmaxClassifier::feature_ids_from(&train_set),
        );
        let cfg = TrainConfig {
            max_epochs: 50,
            lr0: 0.5,
            seed: 3,
            ..TrainConfig::default()
        };
        let (trained, log) = train(model, &train_set, &dev, &cfg).unwrap();
        let correct = train_set
            .iter()
            .filter(|x| trained.vocab().label(trained.argmax_predict(x)) == x.first_label())
            .count();
        assert!(
            correct as f64 / train_set.len() as f64 >= 0.99,
            "training accuracy {correct}/{}",
            train_set.len()
        );
        assert!(log.final_epoch <= 50);
    }

    #[test]
    fn improving_dev_loss_keeps_lr_at_lr0() {
        // Full-batch descent on separable data improves steadily.
        let (train_set, dev) = separable_data(20);
        let model = SoftmaxClassifier::sparse_linear(
            vocab(2),
            SoftmaxClassifier::feature_ids_from(&train_set),
        );
        let cfg = TrainConfig {
            max_epochs: 10,
            lr0: 0.5,
            batch_size: train_set.len(),
            seed: 1,
            ..TrainConfig::default()
        };
        let (_, log) = train(model, &train_set, &dev, &cfg).unwrap();
        let losses: Vec<f64> = log.epochs.iter().map(|e| e.dev_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        assert!(log.epochs.iter().all(|e| e.lr == 0.5));
    }

    #[test]
    fn stagnant_dev_loss_decays_lr_after_exactly_patience_epochs() {
        // Instances labeled with the full vocabulary have q = p, a zero
        // gradient, and therefore a perfectly constant dev loss.
        let all = &["NONE", "R1", "R2"];
        let train_set: Vec<Instance> = (0..8)
            .map(|i| inst(&format!("t{i}"), &["f0"], all))
            .collect();
        let dev: Vec<Instance> = (0..4)
            .map(|i| inst(&format!("d{i}"), &["f0"], all))
            .collect();
        let model = SoftmaxClassifier::sparse_linear(vocab(3), vec!["f0".into()]);
        let cfg = TrainConfig {
            max_epochs: 8,
            ..TrainConfig::default()
        };
        let (_, log) = train(model, &train_set, &dev, &cfg).unwrap();
        let lrs: Vec<f64> = log.epochs.iter().map(|e| e.lr).collect();
        assert_eq!(lrs.len(), 8);
        // Decay fires after epochs 3 and 6; the new rate is in effect from
        // the following epoch.
        assert_eq!(&lrs[0..3], &[1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(lrs[3], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(lrs[5], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(lrs[6], 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(lrs[7], 0.01, epsilon = 1e-15);

        // Each decrease is exactly a factor of decay_factor.
        for w in lrs.windows(2) {
            assert!(w[1] <= w[0]);
            if w[1] < w[0] {
                assert_abs_diff_eq!(w[1], w[0] * 0.1, epsilon = 1e-18);
            }
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (train_set, dev) = separable_data(15);
        let make = || {
            SoftmaxClassifier::embedding_average(
                vocab(2),
                SoftmaxClassifier::feature_ids_from(&train_set),
                4,
                42,
            )
            .unwrap()
        };
        let cfg = TrainConfig {
            max_epochs: 6,
            input_dropout: 0.2,
            pool_dropout: 0.1,
            seed: 2024,
            ..TrainConfig::default()
        };
        let (m1, log1) = train(make(), &train_set, &dev, &cfg).unwrap();
        let (m2, log2) = train(make(), &train_set, &dev, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(log1, log2);
    }

    #[test]
    fn ba_fix_training_freezes_bias_at_ln_p_src() {
        let (train_set, dev) = separable_data(15);
        let model = SoftmaxClassifier::sparse_linear(
            vocab(2),
            SoftmaxClassifier::feature_ids_from(&train_set),
        );
        let p_src = LabelDistribution::new(vec![0.7, 0.3]).unwrap();
        let cfg = TrainConfig {
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let (trained, _) = train_ba_fix(model, &train_set, &dev, &cfg, &p_src).unwrap();
        assert_eq!(trained.bias()[0], 0.7f64.ln());
        assert_eq!(trained.bias()[1], 0.3f64.ln());
        assert_eq!(trained.ba_fix_src(), Some(&p_src));

        // Uniform source prior freezes every bias at -ln K.
        let model = SoftmaxClassifier::sparse_linear(
            vocab(2),
            SoftmaxClassifier::feature_ids_from(&train_set),
        );
        let (trained, _) = train_ba_fix(
            model,
            &train_set,
            &dev,
            &cfg,
            &LabelDistribution::uniform(2),
        )
        .unwrap();
        for b in trained.bias() {
            assert_eq!(*b, 0.5f64.ln());
        }
    }

    #[test]
    fn ba_fix_rejects_zero_source_prior() {
        let (train_set, dev) = separable_data(5);
        let model = SoftmaxClassifier::sparse_linear(vocab(2), vec!["a0".into()]);
        let zero = LabelDistribution::new(vec![0.0, 1.0]).unwrap();
        assert!(train_ba_fix(model, &train_set, &dev, &TrainConfig::default(), &zero).is_err());
    }

    #[test]
    fn empty_train_set_is_rejected() {
        let model = SoftmaxClassifier::sparse_linear(vocab(2), vec!["f".into()]);
        assert!(train(model, &[], &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn train_log_csv_shape() {
        let log = TrainLog {
            epochs: vec![
                EpochStats {
                    epoch: 1,
                    dev_loss: 0.5,
                    dev_f1: 0.25,
                    lr: 1.0,
                },
                EpochStats {
                    epoch: 2,
                    dev_loss: 0.375,
                    dev_f1: 0.5,
                    lr: 1.0,
                },
            ],
            final_epoch: 2,
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch,dev_loss,dev_f1,lr\n1,0.5,0.25,1\n2,0.375,0.5,1\n"
        );
    }
}
