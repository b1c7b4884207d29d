//! Synthetic label-shift machinery.
//!
//! Train sets S0–S5 interpolate linearly between a base prior S0 and a
//! random prior S5, `Si = ((5-i)/5)·S0 + (i/5)·S5`, while the test set stays
//! fixed. Class-conditional feature distributions are part of the generator
//! spec and therefore identical across every domain generated from it; only
//! the label priors differ. Shift severity is summarized per label by
//! `δ_i = |p(r_i|train) - p(r_i|test)|` and binned by the share of test
//! instances falling at each severity.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::{Instance, LabelDistribution, LabelVocab, DEFAULT_NONE_NAME};

/// Number of interpolation steps; priors run S0..=S5.
pub const NUM_SHIFT_STEPS: usize = 6;

/// Default δ bin edges.
pub const DEFAULT_BIN_EDGES: [f64; 6] = [0.0, 0.01, 0.05, 0.1, 0.5, 1.0];

/// `Si = ((5-i)/5)·S0 + (i/5)·S5`, elementwise.
pub fn interpolate_distribution(
    s0: &LabelDistribution,
    s5: &LabelDistribution,
    i: usize,
) -> Result<LabelDistribution> {
    if s0.len() != s5.len() {
        return Err(Error::InvalidDistribution(format!(
            "endpoint distributions cover {} and {} labels",
            s0.len(),
            s5.len()
        )));
    }
    if i >= NUM_SHIFT_STEPS {
        return Err(Error::InvalidConfig(format!(
            "interpolation step {i} outside 0..=5"
        )));
    }
    let t = i as f64 / 5.0;
    LabelDistribution::new(
        s0.probs()
            .iter()
            .zip(s5.probs())
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect(),
    )
}

/// A draw from the flat (uniform) distribution over the probability simplex,
/// via normalized unit-exponential samples. Deterministic under `seed`.
pub fn random_distribution(num_labels: usize, seed: u64) -> Result<LabelDistribution> {
    if num_labels < 2 {
        return Err(Error::InvalidConfig(
            "a random label distribution needs at least two labels".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..num_labels)
        .map(|_| rng.sample::<f64, _>(Exp1))
        .collect();
    LabelDistribution::from_weights(&draws)
}

/// Largest-remainder apportionment of `n` into integer quotas proportional
/// to `probs`. Quotas sum to `n` exactly and each deviates from `n·p_i` by
/// less than one; remainder ties break toward the lower index.
pub fn largest_remainder_quotas(n: usize, probs: &[f64]) -> Vec<usize> {
    let mut quotas: Vec<usize> = Vec::with_capacity(probs.len());
    let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(probs.len());
    let mut assigned = 0usize;
    for (i, p) in probs.iter().enumerate() {
        let exact = n as f64 * p;
        let base = exact.floor() as usize;
        quotas.push(base);
        assigned += base;
        fracs.push((i, exact - base as f64));
    }
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut leftover = n as isize - assigned as isize;
    let mut it = fracs.iter();
    while leftover > 0 {
        let (i, _) = it.next().expect("remainders cover the leftover");
        quotas[*i] += 1;
        leftover -= 1;
    }
    // A sum of probabilities a hair above one can over-assign floors; shave
    // the smallest remainders back.
    let mut rit = fracs.iter().rev();
    while leftover < 0 {
        let (i, _) = rit.next().expect("quotas cover the excess");
        if quotas[*i] > 0 {
            quotas[*i] -= 1;
            leftover += 1;
        }
    }
    quotas
}

/// Disproportionate stratified sampling: draws a dataset of (exactly) `n`
/// instances whose empirical label distribution matches `target` up to the
/// integer apportionment residual. Instances are grouped by first label and
/// sampled uniformly without replacement within each stratum.
pub fn stratified_sample(
    data: &[Instance],
    vocab: &LabelVocab,
    target: &LabelDistribution,
    n: usize,
    seed: u64,
) -> Result<Vec<Instance>> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample size must be positive".into()));
    }
    if target.len() != vocab.len() {
        return Err(Error::InvalidDistribution(format!(
            "target covers {} labels but the vocabulary has {}",
            target.len(),
            vocab.len()
        )));
    }
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); vocab.len()];
    for (ix, inst) in data.iter().enumerate() {
        strata[vocab.require(inst.first_label())?].push(ix);
    }
    let quotas = largest_remainder_quotas(n, target.probs());
    for (label_ix, (quota, stratum)) in quotas.iter().zip(&strata).enumerate() {
        if stratum.len() < *quota {
            return Err(Error::InsufficientStratum {
                label: vocab.label(label_ix).to_string(),
                available: stratum.len(),
                requested: *quota,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = Vec::with_capacity(n);
    for (quota, stratum) in quotas.iter().zip(&strata) {
        let mut pool = stratum.clone();
        pool.shuffle(&mut rng);
        picked.extend(pool.into_iter().take(*quota));
    }
    picked.sort_unstable();
    Ok(picked.into_iter().map(|ix| data[ix].clone()).collect())
}

/// Per-label shift severities and their binned test-instance shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    /// `δ_i = |p(r_i|train) - p(r_i|test)|`, aligned to the vocabulary.
    pub deltas: Vec<f64>,
    /// Interval edges; bin `k` covers `(edges[k], edges[k+1]]`, with the
    /// lowest bin closed on the left.
    pub bin_edges: Vec<f64>,
    /// Share of test instances whose gold label falls in each bin.
    pub bin_proportions: Vec<f64>,
}

impl ShiftReport {
    /// Emits the bin table as CSV with columns `bin_lo,bin_hi,proportion`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin_lo", "bin_hi", "proportion"])?;
        for (k, prop) in self.bin_proportions.iter().enumerate() {
            w.write_record([
                self.bin_edges[k].to_string(),
                self.bin_edges[k + 1].to_string(),
                prop.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("shift report", e))?;
        Ok(())
    }
}

fn bin_of(delta: f64, edges: &[f64]) -> usize {
    for k in 0..edges.len() - 1 {
        if delta <= edges[k + 1] {
            return k;
        }
    }
    edges.len() - 2
}

/// Shift report between a train-domain label distribution and a test set,
/// with the default bin edges.
pub fn shift_report(
    train_dist: &LabelDistribution,
    test_set: &[Instance],
    vocab: &LabelVocab,
) -> Result<ShiftReport> {
    shift_report_with_edges(train_dist, test_set, vocab, &DEFAULT_BIN_EDGES)
}

/// Shift report with custom bin edges (strictly increasing, from 0 to 1).
pub fn shift_report_with_edges(
    train_dist: &LabelDistribution,
    test_set: &[Instance],
    vocab: &LabelVocab,
    edges: &[f64],
) -> Result<ShiftReport> {
    if train_dist.len() != vocab.len() {
        return Err(Error::InvalidDistribution(format!(
            "train distribution covers {} labels but the vocabulary has {}",
            train_dist.len(),
            vocab.len()
        )));
    }
    if edges.len() < 2
        || edges[0] != 0.0
        || *edges.last().unwrap() != 1.0
        || edges.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::InvalidConfig(
            "bin edges must increase strictly from 0 to 1".into(),
        ));
    }
    if test_set.is_empty() {
        return Err(Error::EmptyInput("test set".into()));
    }
    // Unsmoothed test-side estimate; δ is a descriptive statistic.
    let mut counts = vec![0usize; vocab.len()];
    for inst in test_set {
        counts[vocab.require(inst.first_label())?] += 1;
    }
    let n = test_set.len() as f64;
    let deltas: Vec<f64> = train_dist
        .probs()
        .iter()
        .zip(&counts)
        .map(|(p, c)| (p - *c as f64 / n).abs())
        .collect();
    let mut bins = vec![0usize; edges.len() - 1];
    for (label_ix, c) in counts.iter().enumerate() {
        bins[bin_of(deltas[label_ix], edges)] += c;
    }
    Ok(ShiftReport {
        deltas,
        bin_edges: edges.to_vec(),
        bin_proportions: bins.iter().map(|b| *b as f64 / n).collect(),
    })
}

/// Class-conditional generator spec.
///
/// The per-label feature distributions are part of the spec, so every domain
/// generated from one spec shares them exactly; domains differ only in their
/// label prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGenSpec {
    pub num_labels: usize,
    /// Prior mass of NONE in the canonical test prior.
    pub none_share: f64,
    pub vocab_size: usize,
    pub feats_per_instance: usize,
    /// `K x vocab_size` multinomials, one per label.
    pub class_feature_dists: Vec<Vec<f64>>,
    /// Base seed; suite construction derives stream seeds from it.
    pub seed: u64,
}

impl SynthGenSpec {
    pub fn new(
        num_labels: usize,
        none_share: f64,
        vocab_size: usize,
        feats_per_instance: usize,
        class_feature_dists: Vec<Vec<f64>>,
        seed: u64,
    ) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::InvalidConfig("need at least two labels".into()));
        }
        if !(none_share > 0.0 && none_share < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "NONE share {none_share} not in (0, 1)"
            )));
        }
        if vocab_size == 0 || feats_per_instance == 0 {
            return Err(Error::InvalidConfig(
                "feature vocabulary and bag size must be positive".into(),
            ));
        }
        if class_feature_dists.len() != num_labels {
            return Err(Error::InvalidConfig(format!(
                "{} class feature distributions for {num_labels} labels",
                class_feature_dists.len()
            )));
        }
        for (i, dist) in class_feature_dists.iter().enumerate() {
            if dist.len() != vocab_size {
                return Err(Error::InvalidConfig(format!(
                    "class {i} feature distribution has {} entries, expected {vocab_size}",
                    dist.len()
                )));
            }
            LabelDistribution::new(dist.clone()).map_err(|e| {
                Error::InvalidConfig(format!("class {i} feature distribution: {e}"))
            })?;
        }
        Ok(SynthGenSpec {
            num_labels,
            none_share,
            vocab_size,
            feats_per_instance,
            class_feature_dists,
            seed,
        })
    }

    /// Default generator: NONE draws features uniformly over the whole
    /// vocabulary; each relation concentrates `block_mass` on its own block
    /// of the vocabulary and spreads the rest uniformly. The overlap keeps
    /// classes ambiguous enough for the label prior to matter.
    pub fn with_block_classes(
        num_labels: usize,
        none_share: f64,
        vocab_size: usize,
        feats_per_instance: usize,
        block_mass: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&block_mass) {
            return Err(Error::InvalidConfig(format!(
                "block mass {block_mass} not in [0, 1]"
            )));
        }
        if num_labels < 2 || vocab_size < num_labels {
            return Err(Error::InvalidConfig(
                "need at least two labels and one vocabulary block per label".into(),
            ));
        }
        let block = vocab_size / num_labels;
        let uniform = 1.0 / vocab_size as f64;
        let mut dists = Vec::with_capacity(num_labels);
        // Label 0 is NONE: featureless background noise.
        dists.push(vec![uniform; vocab_size]);
        for label in 1..num_labels {
            let lo = label * block;
            let hi = if label == num_labels - 1 {
                vocab_size
            } else {
                lo + block
            };
            let mut dist = vec![(1.0 - block_mass) * uniform; vocab_size];
            for entry in dist.iter_mut().take(hi).skip(lo) {
                *entry += block_mass / (hi - lo) as f64;
            }
            dists.push(dist);
        }
        SynthGenSpec::new(
            num_labels,
            none_share,
            vocab_size,
            feats_per_instance,
            dists,
            seed,
        )
    }

    /// Label vocabulary: NONE first, then R1..R(K-1).
    pub fn vocab(&self) -> LabelVocab {
        let width = (self.num_labels - 1).to_string().len();
        let mut labels = vec![DEFAULT_NONE_NAME.to_string()];
        labels.extend((1..self.num_labels).map(|i| format!("R{i:0width$}")));
        LabelVocab::new(labels, 0).expect("generated labels are unique")
    }

    /// Canonical NONE-heavy test prior: `none_share` on NONE, the remainder
    /// split evenly over the relations.
    pub fn test_prior(&self) -> LabelDistribution {
        let rest = (1.0 - self.none_share) / (self.num_labels - 1) as f64;
        let mut probs = vec![rest; self.num_labels];
        probs[0] = self.none_share;
        LabelDistribution::new(probs).expect("valid by construction")
    }
}

fn cdf(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

fn sample_cdf(c: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let scaled = u * c.last().copied().unwrap_or(1.0);
    c.partition_point(|x| *x <= scaled).min(c.len() - 1)
}

/// Draws `n` instances: each takes a label from `prior` and then
/// `feats_per_instance` features i.i.d. from that label's class feature
/// distribution. Deterministic under `seed`.
pub fn synth_generate(
    spec: &SynthGenSpec,
    prior: &LabelDistribution,
    n: usize,
    seed: u64,
) -> Result<Vec<Instance>> {
    if prior.len() != spec.num_labels {
        return Err(Error::InvalidDistribution(format!(
            "prior covers {} labels but the generator has {}",
            prior.len(),
            spec.num_labels
        )));
    }
    let vocab = spec.vocab();
    let label_cdf = cdf(prior.probs());
    let class_cdfs: Vec<Vec<f64>> = spec.class_feature_dists.iter().map(|d| cdf(d)).collect();
    let width = (spec.vocab_size - 1).to_string().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = sample_cdf(&label_cdf, &mut rng);
        let features = (0..spec.feats_per_instance)
            .map(|_| format!("f{:0width$}", sample_cdf(&class_cdfs[label], &mut rng)))
            .collect();
        out.push(
            Instance::new(
                format!("g{seed}-{i}"),
                features,
                vec![vocab.label(label).to_string()],
            )
            .expect("generated labels are nonempty"),
        );
    }
    Ok(out)
}

/// Generates exactly `quota_i` instances per label (largest-remainder
/// apportionment of `n·prior`), so the empirical label distribution matches
/// the prior up to the integer residual and the total is exactly `n`.
pub fn synth_generate_stratified(
    spec: &SynthGenSpec,
    prior: &LabelDistribution,
    n: usize,
    seed: u64,
) -> Result<Vec<Instance>> {
    if prior.len() != spec.num_labels {
        return Err(Error::InvalidDistribution(format!(
            "prior covers {} labels but the generator has {}",
            prior.len(),
            spec.num_labels
        )));
    }
    let quotas = largest_remainder_quotas(n, prior.probs());
    let mut out = Vec::with_capacity(n);
    for (label_ix, quota) in quotas.iter().enumerate() {
        let mut probs = vec![0.0; spec.num_labels];
        probs[label_ix] = 1.0;
        let one_hot = LabelDistribution::new(probs).expect("one-hot is valid");
        out.extend(synth_generate(
            spec,
            &one_hot,
            *quota,
            derive_seed(seed, label_ix as u64),
        )?);
    }
    Ok(out)
}

/// A full shift suite: six train sets at interpolated priors plus one fixed
/// test set.
#[derive(Debug, Clone)]
pub struct ShiftSuite {
    pub vocab: LabelVocab,
    /// Train sets at steps S0..=S5.
    pub train_sets: Vec<Vec<Instance>>,
    /// The interpolated priors the train sets were built at.
    pub step_priors: Vec<LabelDistribution>,
    pub test_set: Vec<Instance>,
    pub test_prior: LabelDistribution,
}

/// Builds a synthetic suite from a generator spec: train sets are generated
/// per-label at exact quotas for each interpolated prior, and the shared
/// test set is drawn i.i.d. at the test prior.
pub fn build_shift_suite(
    spec: &SynthGenSpec,
    s0: &LabelDistribution,
    s5: &LabelDistribution,
    test_prior: &LabelDistribution,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<ShiftSuite> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidConfig("suite sizes must be positive".into()));
    }
    let mut train_sets = Vec::with_capacity(NUM_SHIFT_STEPS);
    let mut step_priors = Vec::with_capacity(NUM_SHIFT_STEPS);
    for i in 0..NUM_SHIFT_STEPS {
        let prior = interpolate_distribution(s0, s5, i)?;
        train_sets.push(synth_generate_stratified(
            spec,
            &prior,
            n_train,
            derive_seed(seed, 1000 + i as u64),
        )?);
        step_priors.push(prior);
    }
    let test_set = synth_generate(spec, test_prior, n_test, derive_seed(seed, 2000))?;
    Ok(ShiftSuite {
        vocab: spec.vocab(),
        train_sets,
        step_priors,
        test_set,
        test_prior: test_prior.clone(),
    })
}

/// Builds a suite by disproportionate stratification of an existing pool;
/// the test set passes through unchanged.
pub fn build_shift_suite_from_pool(
    pool: &[Instance],
    vocab: &LabelVocab,
    s0: &LabelDistribution,
    s5: &LabelDistribution,
    test_set: Vec<Instance>,
    n_train: usize,
    seed: u64,
) -> Result<ShiftSuite> {
    if test_set.is_empty() {
        return Err(Error::EmptyInput("test set".into()));
    }
    let mut train_sets = Vec::with_capacity(NUM_SHIFT_STEPS);
    let mut step_priors = Vec::with_capacity(NUM_SHIFT_STEPS);
    for i in 0..NUM_SHIFT_STEPS {
        let prior = interpolate_distribution(s0, s5, i)?;
        train_sets.push(stratified_sample(
            pool,
            vocab,
            &prior,
            n_train,
            derive_seed(seed, 1000 + i as u64),
        )?);
        step_priors.push(prior);
    }
    let test_prior = crate::adapt::estimate_label_distribution(&test_set, vocab, 0.0)?;
    Ok(ShiftSuite {
        vocab: vocab.clone(),
        train_sets,
        step_priors,
        test_set,
        test_prior,
    })
}
