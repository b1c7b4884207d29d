//! Adaptation to a shifted label distribution.
//!
//! The classifier trained on the source domain estimates
//! `p(y|h, src) = softmax(w_i·h + b_i)`. When only the label priors differ
//! between domains (class-conditional feature likelihoods shared), the
//! target-domain posterior follows by Bayes reweighting, and folds into the
//! bias alone:
//!
//! ```text
//! b'_i = b_i + ln p_tgt(r_i) - ln p_src(r_i)
//! ```
//!
//! `BA-Set` applies that correction transiently at evaluation; `BA-Fix`
//! (see [`crate::train::train_ba_fix`]) trains with the bias frozen at
//! `ln p_src` and evaluates with `ln p_tgt`. The module also hosts the two
//! rejection heuristics (max and entropy thresholds) and their clean-dev
//! grid search.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, gold_indices};
use crate::model::{softmax, Instance, LabelDistribution, LabelVocab, SoftmaxClassifier};

/// Paired source/target label priors driving bias adjustment.
///
/// Both distributions must be strictly positive (use additive smoothing when
/// estimating them) since the correction takes their logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct AdjustmentSpec {
    p_src: LabelDistribution,
    p_tgt: LabelDistribution,
}

#[derive(Clone, Serialize, Deserialize)]
struct SpecRepr {
    p_src: LabelDistribution,
    p_tgt: LabelDistribution,
}

impl TryFrom<SpecRepr> for AdjustmentSpec {
    type Error = Error;

    fn try_from(repr: SpecRepr) -> Result<Self> {
        AdjustmentSpec::new(repr.p_src, repr.p_tgt)
    }
}

impl From<AdjustmentSpec> for SpecRepr {
    fn from(spec: AdjustmentSpec) -> Self {
        SpecRepr {
            p_src: spec.p_src,
            p_tgt: spec.p_tgt,
        }
    }
}

impl AdjustmentSpec {
    pub fn new(p_src: LabelDistribution, p_tgt: LabelDistribution) -> Result<Self> {
        if p_src.len() != p_tgt.len() {
            return Err(Error::InvalidDistribution(format!(
                "source has {} labels, target has {}",
                p_src.len(),
                p_tgt.len()
            )));
        }
        if !p_src.is_strictly_positive() || !p_tgt.is_strictly_positive() {
            return Err(Error::InvalidDistribution(
                "bias adjustment needs strictly positive priors on every label".into(),
            ));
        }
        Ok(AdjustmentSpec { p_src, p_tgt })
    }

    pub fn p_src(&self) -> &LabelDistribution {
        &self.p_src
    }

    pub fn p_tgt(&self) -> &LabelDistribution {
        &self.p_tgt
    }

    pub fn len(&self) -> usize {
        self.p_src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_src.is_empty()
    }
}

/// Rejection heuristic family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdKind {
    /// Keep `r*` only when `p(r*|h) > T_m`.
    #[serde(rename = "max")]
    Max,
    /// Keep `r*` only when the prediction entropy is `< T_e`.
    #[serde(rename = "entropy")]
    Entropy,
}

impl std::fmt::Display for ThresholdKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdKind::Max => write!(f, "max"),
            ThresholdKind::Entropy => write!(f, "entropy"),
        }
    }
}

impl std::str::FromStr for ThresholdKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(ThresholdKind::Max),
            "entropy" => Ok(ThresholdKind::Entropy),
            other => Err(Error::InvalidConfig(format!(
                "unknown threshold kind `{other}`"
            ))),
        }
    }
}

/// A tuned rejection threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub kind: ThresholdKind,
    pub value: f64,
}

impl ThresholdSpec {
    /// Validates the value range for its kind: `T_m` in `[0, 1]`, `T_e` in
    /// `[0, ln K]` for a `num_labels`-way classifier.
    pub fn new(kind: ThresholdKind, value: f64, num_labels: usize) -> Result<Self> {
        let max = match kind {
            ThresholdKind::Max => 1.0,
            ThresholdKind::Entropy => (num_labels as f64).ln(),
        };
        if !value.is_finite() || value < 0.0 || value > max {
            return Err(Error::InvalidConfig(format!(
                "{kind} threshold {value} outside [0, {max}]"
            )));
        }
        Ok(ThresholdSpec { kind, value })
    }
}

/// Splits a test set into a clean dev sample and the held-out remainder.
///
/// The split is uniform without replacement, deterministic under `seed`, and
/// both sides preserve the input order. A fraction that would leave either
/// side empty is rejected.
pub fn clean_dev_split(
    test_set: &[Instance],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Instance>, Vec<Instance>)> {
    if test_set.is_empty() {
        return Err(Error::EmptyInput("test set".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "clean-dev fraction {fraction} not in (0, 1)"
        )));
    }
    let n = test_set.len();
    let n_clean = (fraction * n as f64).round() as usize;
    if n_clean == 0 || n_clean == n {
        return Err(Error::InvalidConfig(format!(
            "clean-dev fraction {fraction} leaves an empty side for {n} instances"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = vec![false; n];
    for &i in order.iter().take(n_clean) {
        chosen[i] = true;
    }
    let mut clean = Vec::with_capacity(n_clean);
    let mut held = Vec::with_capacity(n - n_clean);
    for (i, inst) in test_set.iter().enumerate() {
        if chosen[i] {
            clean.push(inst.clone());
        } else {
            held.push(inst.clone());
        }
    }
    Ok((clean, held))
}

/// Maximum-likelihood label prior with additive smoothing:
/// `p(r_i) = (count_i + alpha) / (N + alpha·K)`.
///
/// Multi-labeled instances contribute their first label. With `alpha = 0`
/// unseen labels get probability zero; such estimates are fine for reporting
/// but are rejected later at [`AdjustmentSpec`] construction.
pub fn estimate_label_distribution(
    instances: &[Instance],
    vocab: &LabelVocab,
    alpha: f64,
) -> Result<LabelDistribution> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "smoothing constant {alpha} must be a finite nonnegative number"
        )));
    }
    if instances.is_empty() && alpha == 0.0 {
        return Err(Error::EmptyInput(
            "cannot estimate a distribution from no instances without smoothing".into(),
        ));
    }
    let k = vocab.len();
    let mut counts = vec![0usize; k];
    for inst in instances {
        counts[vocab.require(inst.first_label())?] += 1;
    }
    let denom = instances.len() as f64 + alpha * k as f64;
    LabelDistribution::new(counts.iter().map(|c| (*c as f64 + alpha) / denom).collect())
}

/// The bias correction `b'_i = b_i + ln p_tgt(r_i) - ln p_src(r_i)`.
///
/// Pure: weights and the input bias are untouched.
pub fn adjust_bias(bias: &[f64], spec: &AdjustmentSpec) -> Vec<f64> {
    assert_eq!(
        bias.len(),
        spec.len(),
        "bias has {} entries but the adjustment spec covers {} labels",
        bias.len(),
        spec.len()
    );
    bias.iter()
        .zip(spec.p_tgt.probs())
        .zip(spec.p_src.probs())
        .map(|((b, t), s)| b + (t.ln() - s.ln()))
        .collect()
}

/// Prediction with the bias correction applied transiently at evaluation
/// time; the model itself is not modified.
pub fn ba_set_predict(
    model: &SoftmaxClassifier,
    inst: &Instance,
    spec: &AdjustmentSpec,
) -> Result<LabelDistribution> {
    if spec.len() != model.num_labels() {
        return Err(Error::InvalidDistribution(format!(
            "adjustment spec covers {} labels but the model has {}",
            spec.len(),
            model.num_labels()
        )));
    }
    let mut z = model.logits(&model.represent(inst));
    for ((zi, t), s) in z.iter_mut().zip(spec.p_tgt.probs()).zip(spec.p_src.probs()) {
        *zi += t.ln() - s.ln();
    }
    Ok(LabelDistribution::new(softmax(&z)).expect("softmax output is a distribution"))
}

/// Prediction of a fixed-bias model with the bias replaced by `ln p_tgt`.
///
/// The model must have been trained with the fixed-bias variant (it carries
/// its frozen source prior), and `p_tgt` must be strictly positive.
pub fn ba_fix_predict(
    model: &SoftmaxClassifier,
    inst: &Instance,
    p_tgt: &LabelDistribution,
) -> Result<LabelDistribution> {
    if model.ba_fix_src().is_none() {
        return Err(Error::InvalidConfig(
            "model was not trained with a fixed bias; train_ba_fix it first".into(),
        ));
    }
    if p_tgt.len() != model.num_labels() {
        return Err(Error::InvalidDistribution(format!(
            "target prior covers {} labels but the model has {}",
            p_tgt.len(),
            model.num_labels()
        )));
    }
    if !p_tgt.is_strictly_positive() {
        return Err(Error::InvalidDistribution(
            "target prior has a zero entry".into(),
        ));
    }
    // The trained bias (frozen at ln p_src) is replaced outright.
    let mut z = model.raw_scores(&model.represent(inst));
    for (zi, t) in z.iter_mut().zip(p_tgt.probs()) {
        *zi += t.ln();
    }
    Ok(LabelDistribution::new(softmax(&z)).expect("softmax output is a distribution"))
}

/// Thresholded prediction: the argmax label `r*`, demoted to NONE when the
/// confidence test fails (`p(r*) > T_m` for max, entropy `< T_e` for
/// entropy; both strict). An argmax that is already NONE stays NONE.
pub fn apply_threshold(p: &LabelDistribution, spec: &ThresholdSpec, vocab: &LabelVocab) -> usize {
    let star = p.argmax();
    let none = vocab.none_index();
    if star == none {
        return none;
    }
    let keep = match spec.kind {
        ThresholdKind::Max => p.get(star) > spec.value,
        ThresholdKind::Entropy => p.entropy() < spec.value,
    };
    if keep {
        star
    } else {
        none
    }
}

/// Evenly spaced default grid: 101 points over `[0, 1]` for max thresholds
/// and over `[0, ln K]` for entropy thresholds.
pub fn default_grid(kind: ThresholdKind, num_labels: usize) -> Vec<f64> {
    grid_with_steps(kind, num_labels, 101)
}

/// Evenly spaced grid with a custom point count (at least 2).
pub fn grid_with_steps(kind: ThresholdKind, num_labels: usize, steps: usize) -> Vec<f64> {
    assert!(steps >= 2, "a threshold grid needs at least two points");
    let hi = match kind {
        ThresholdKind::Max => 1.0,
        ThresholdKind::Entropy => (num_labels as f64).ln(),
    };
    (0..steps)
        .map(|i| hi * i as f64 / (steps - 1) as f64)
        .collect()
}

/// Grid-searches the threshold value maximizing micro-F1 on a clean dev set.
/// Ties break toward the smaller threshold.
pub fn tune_threshold(
    model: &SoftmaxClassifier,
    clean_dev: &[Instance],
    kind: ThresholdKind,
    grid: &[f64],
) -> Result<ThresholdSpec> {
    let preds: Vec<LabelDistribution> = clean_dev.iter().map(|i| model.predict(i)).collect();
    let golds = gold_indices(clean_dev, model.vocab())?;
    tune_threshold_on(&preds, &golds, kind, grid, model.vocab())
}

/// Grid search over precomputed prediction distributions.
pub fn tune_threshold_on(
    preds: &[LabelDistribution],
    golds: &[usize],
    kind: ThresholdKind,
    grid: &[f64],
    vocab: &LabelVocab,
) -> Result<ThresholdSpec> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("clean dev set".into()));
    }
    if grid.is_empty() {
        return Err(Error::EmptyInput("threshold grid".into()));
    }
    let mut best: Option<(f64, f64)> = None; // (f1, value)
    for &value in grid {
        let spec = ThresholdSpec::new(kind, value, vocab.len())?;
        let labels: Vec<usize> = preds
            .iter()
            .map(|p| apply_threshold(p, &spec, vocab))
            .collect();
        let f1 = evaluate(&labels, golds, vocab)?.micro_f1;
        best = match best {
            None => Some((f1, value)),
            Some((bf, bv)) if f1 > bf || (f1 == bf && value < bv) => Some((f1, value)),
            keep => keep,
        };
    }
    let (_, value) = best.expect("grid is nonempty");
    ThresholdSpec::new(kind, value, vocab.len())
}
