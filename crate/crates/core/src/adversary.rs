//! Probes and attacks against a (possibly erased) model, plus the exact
//! Bayes-optimal reference available for a known mixture.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Flags, MixtureSpec, PreparedMixture};
use crate::diffusion::DiffusionModel;
use crate::erasure::{classifier_loss, Discriminator, DiscriminatorSpec};
use crate::error::{ensure, LabError, Result};
use crate::infotheory::{conditional_mi, plugin_mi, GridSpec, JointHistogram};
use crate::nn::{adamw_step, AdamWConfig, AdamWState, Matrix};

/// Exact `P(C = 1 | x)` under the mixture.
pub fn bayes_posterior(x: &[f64], mixture: &PreparedMixture, concept: usize) -> Result<f64> {
    ensure(x.len() == mixture.dim(), || LabError::Shape("point and mixture differ in dimension".into()))?;
    ensure(concept < mixture.n_concepts(), || LabError::InvalidArgument(format!("no concept {concept}")))?;
    Ok(mixture.posterior(x, concept))
}

/// Grid resolution schedule per dimension count: starting cells per axis and refinement levels.
fn grid_plan(d: usize) -> (usize, usize) {
    match d {
        1 => (4000, 4),
        2 => (200, 4),
        _ => (40, 3),
    }
}

fn midpoint_error_sum(mixture: &PreparedMixture, concept: usize, lo: &[f64], hi: &[f64], m: usize) -> (f64, f64) {
    let d = lo.len();
    let h: Vec<f64> = (0..d).map(|i| (hi[i] - lo[i]) / m as f64).collect();
    let vol: f64 = h.iter().product();
    let total = m.pow(d as u32);
    let mut x = vec![0.0; d];
    let (mut err, mut mass) = (0.0, 0.0);
    for cell in 0..total {
        let mut rest = cell;
        for i in (0..d).rev() {
            x[i] = lo[i] + (rest % m) as f64 * h[i] + 0.5 * h[i];
            rest /= m;
        }
        let (p1, p0) = mixture.concept_joint_density(&x, concept);
        err += p1.min(p0);
        mass += p1 + p0;
    }
    (err * vol, mass * vol)
}

/// Bayes error `E[min(P(C=1|x), P(C=0|x))]` by midpoint integration on a
/// refined grid (d <= 3). Fails if successive refinements disagree by more
/// than `1e-6` or the grid misses probability mass.
pub fn bayes_error(mixture: &PreparedMixture, concept: usize) -> Result<f64> {
    let d = mixture.dim();
    ensure(d <= 3, || LabError::InvalidArgument(format!("grid integration supports d <= 3, got {d}")))?;
    ensure(concept < mixture.n_concepts(), || LabError::InvalidArgument(format!("no concept {concept}")))?;
    let (lo, hi) = mixture.bounding_box(10.0);
    let (mut m, levels) = grid_plan(d);
    let (mut prev, mass) = midpoint_error_sum(mixture, concept, &lo, &hi, m);
    ensure((mass - 1.0).abs() < 1e-4, || LabError::Integration(format!("grid captured mass {mass}")))?;
    for _ in 0..levels {
        m *= 2;
        let (next, _) = midpoint_error_sum(mixture, concept, &lo, &hi, m);
        if (next - prev).abs() < 1e-6 {
            return Ok(next.clamp(0.0, 0.5));
        }
        prev = next;
    }
    Err(LabError::Integration(format!("bayes error did not settle within {levels} refinements")))
}

/// Monte-Carlo Bayes error with a 95% normal-approximation half-width, for any dimension.
pub fn bayes_error_monte_carlo(mixture: &PreparedMixture, concept: usize, n: usize, seed: u64) -> Result<(f64, f64)> {
    ensure(n >= 2, || LabError::InsufficientSamples("Monte-Carlo bayes error needs n >= 2".into()))?;
    let data = mixture.sample_labelled(n, &mut ChaCha8Rng::seed_from_u64(seed));
    let v: Vec<f64> = data.points.iter_rows().map(|x| {
        let p = mixture.posterior(x, concept);
        p.min(1.0 - p)
    }).collect();
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * (var / n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub spec: DiscriminatorSpec,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            spec: DiscriminatorSpec::default(),
            steps: 1500,
            batch_size: 256,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            holdout_fraction: 0.3,
            seed: 0,
        }
    }
}

/// A trained binary classifier over raw points.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub disc: Discriminator,
}

impl Probe {
    pub fn probabilities(&self, x: &Matrix) -> Result<Vec<f64>> {
        let input = self.disc.input(x, &vec![Vec::new(); x.rows()], None)?;
        Ok(self.disc.probabilities(&input)?.into_data())
    }

    pub fn accuracy(&self, pos: &Matrix, neg: &Matrix) -> Result<f64> {
        ensure(pos.rows() + neg.rows() > 0, || LabError::Empty("accuracy on no points".into()))?;
        let hits = self.probabilities(pos)?.iter().filter(|&&p| p > 0.5).count()
            + self.probabilities(neg)?.iter().filter(|&&p| p <= 0.5).count();
        Ok(hits as f64 / (pos.rows() + neg.rows()) as f64)
    }
}

fn check_balance(n_pos: usize, n_neg: usize) -> Result<()> {
    ensure(n_pos >= 1 && n_neg >= 1, || LabError::InsufficientSamples("probe needs both classes".into()))?;
    let frac = n_pos as f64 / (n_pos + n_neg) as f64;
    ensure((0.2..=0.8).contains(&frac), || {
        LabError::InvalidArgument(format!("class balance {frac:.3} beyond 80/20"))
    })
}

/// Trains a fresh probe on all given points with class-balanced minibatches.
pub fn fit_probe(pos: &Matrix, neg: &Matrix, cfg: &ProbeConfig) -> Result<Probe> {
    check_balance(pos.rows(), neg.rows())?;
    ensure(pos.cols() == neg.cols(), || LabError::Shape("classes differ in dimension".into()))?;
    ensure(cfg.batch_size >= 2, || LabError::InvalidArgument("probe batch_size must be >= 2".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut disc = Discriminator::new(&cfg.spec, pos.cols(), 0, 1, rng.random())?;
    ensure(!cfg.spec.time_input, || LabError::InvalidArgument("probes take no time input".into()))?;
    let mut opt = AdamWState::new(cfg.optimizer, disc.net.parameter_count());
    let half = cfg.batch_size / 2;
    let mut labels: Vec<Flags> = vec![vec![1]; half];
    labels.extend(vec![vec![0]; half]);
    let mut x = Matrix::zeros(2 * half, pos.cols());
    for _ in 0..cfg.steps {
        for r in 0..half {
            x.row_mut(r).copy_from_slice(pos.row(rng.random_range(0..pos.rows())));
            x.row_mut(half + r).copy_from_slice(neg.row(rng.random_range(0..neg.rows())));
        }
        let (_, g) = classifier_loss(&disc, &x, &labels)?;
        adamw_step(&mut disc.net, &g, &mut opt, None)?;
    }
    Ok(Probe { disc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub probe: Probe,
    pub heldout_accuracy: f64,
    pub train_size: usize,
    pub heldout_size: usize,
}

impl ProbeFit {
    /// Held-out error `1 - accuracy`.
    pub fn error(&self) -> f64 {
        1.0 - self.heldout_accuracy
    }
}

fn split(n: usize, frac: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let held = ((frac * n as f64).round() as usize).clamp(1, n - 1);
    let train = idx.split_off(held);
    (train, idx)
}

fn disjoint(a: &[usize], b: &[usize]) -> bool {
    let mut a = a.to_vec();
    a.sort_unstable();
    b.iter().all(|x| a.binary_search(x).is_err())
}

/// Splits each class into disjoint train and held-out parts, trains a fresh
/// probe and reports accuracy on the held-out part only.
pub fn train_probe(pos: &Matrix, neg: &Matrix, cfg: &ProbeConfig) -> Result<ProbeFit> {
    check_balance(pos.rows(), neg.rows())?;
    ensure(pos.rows() >= 2 && neg.rows() >= 2, || LabError::InsufficientSamples("each class needs >= 2 points".into()))?;
    ensure(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0, || {
        LabError::InvalidArgument("holdout_fraction must lie in (0, 1)".into())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5151);
    let (pt, ph) = split(pos.rows(), cfg.holdout_fraction, &mut rng);
    let (nt, nh) = split(neg.rows(), cfg.holdout_fraction, &mut rng);
    ensure(disjoint(&pt, &ph) && disjoint(&nt, &nh), || LabError::Invariant("probe split overlaps".into()))?;
    let probe = fit_probe(&pos.select_rows(&pt), &neg.select_rows(&nt), cfg)?;
    let acc = probe.accuracy(&pos.select_rows(&ph), &neg.select_rows(&nh))?;
    Ok(ProbeFit {
        probe,
        heldout_accuracy: acc,
        train_size: pt.len() + nt.len(),
        heldout_size: ph.len() + nh.len(),
    })
}

/// Flags with only `concept` possibly set.
pub fn single_flag(n_concepts: usize, concept: usize, value: u8) -> Flags {
    let mut f = vec![0; n_concepts];
    f[concept] = value;
    f
}

/// Held-out accuracy of a fresh probe separating model samples generated with
/// `concept` on versus off (all other flags off), `n` per side.
pub fn flag_probe_accuracy(model: &DiffusionModel, concept: usize, n: usize, cfg: &ProbeConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa5a5);
    let pos = model.sample(&single_flag(model.n_concepts, concept, 1), &mut rng, n)?;
    let neg = model.sample(&single_flag(model.n_concepts, concept, 0), &mut rng, n)?;
    Ok(train_probe(&pos, &neg, cfg)?.heldout_accuracy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub n: usize,
    pub probe_error: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSweep {
    pub bayes_error: f64,
    pub points: Vec<GapPoint>,
    /// Least-squares `c` in `gap ~ c / sqrt(n)`.
    pub fit_coefficient: f64,
    /// Root-mean-square residual of that fit.
    pub fit_residual: f64,
    pub test_size: usize,
}

impl GapSweep {
    /// Centered moving average of width 3 (shrinking at the ends).
    pub fn smoothed(&self) -> Vec<f64> {
        let g: Vec<f64> = self.points.iter().map(|p| p.gap).collect();
        (0..g.len())
            .map(|i| {
                let lo = i.saturating_sub(1);
                let hi = (i + 2).min(g.len());
                g[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect()
    }

    /// Whether the smoothed gap never rises by more than `margin`.
    pub fn non_increasing(&self, margin: f64) -> bool {
        self.smoothed().windows(2).all(|w| w[1] <= w[0] + margin)
    }
}

/// For each `n`, trains a probe on `n` labelled mixture draws and measures
/// `|e* - e_hat|` on an independent test set of `test_size` draws.
pub fn generalization_gap_sweep(
    mixture: &MixtureSpec,
    concept: usize,
    cfg: &ProbeConfig,
    n_list: &[usize],
    test_size: usize,
) -> Result<GapSweep> {
    ensure(!n_list.is_empty(), || LabError::Empty("sample-size list".into()))?;
    let prepared = mixture.prepare()?;
    let e_star = bayes_error(&prepared, concept)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a09);
    let split_by_flag = |n: usize, rng: &mut ChaCha8Rng| {
        let d = prepared.sample_labelled(n, rng);
        (d.points_with_flag(concept, 1), d.points_with_flag(concept, 0))
    };
    let (tp, tn) = split_by_flag(test_size, &mut rng);
    let mut points = Vec::with_capacity(n_list.len());
    for (i, &n) in n_list.iter().enumerate() {
        let (p, q) = split_by_flag(n, &mut rng);
        let probe = fit_probe(&p, &q, &ProbeConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() })?;
        let err = 1.0 - probe.accuracy(&tp, &tn)?;
        points.push(GapPoint {
            n,
            probe_error: err,
            gap: (e_star - err).abs(),
        });
    }
    let inv: f64 = points.iter().map(|p| 1.0 / p.n as f64).sum();
    let c = points.iter().map(|p| p.gap / (p.n as f64).sqrt()).sum::<f64>() / inv;
    let resid = (points.iter().map(|p| (p.gap - c / (p.n as f64).sqrt()).powi(2)).sum::<f64>() / points.len() as f64).sqrt();
    Ok(GapSweep {
        bayes_error: e_star,
        points,
        fit_coefficient: c,
        fit_residual: resid,
        test_size,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackStrategy {
    /// Alternate the concept prompt and its neutral twin, other flags off.
    RepeatQuery,
    /// Cycle through every flag combination.
    ConditionSweep,
    /// Alternate the target flag with every other flag switched on.
    CompositeFlags,
}

impl AttackStrategy {
    pub const ALL: [AttackStrategy; 3] = [Self::RepeatQuery, Self::ConditionSweep, Self::CompositeFlags];

    pub fn name(self) -> &'static str {
        match self {
            Self::RepeatQuery => "repeat-query",
            Self::ConditionSweep => "condition-sweep",
            Self::CompositeFlags => "composite-flags",
        }
    }

    /// The `i`-th condition this strategy issues.
    pub fn condition(self, i: usize, n_concepts: usize, concept: usize) -> Flags {
        match self {
            Self::RepeatQuery => single_flag(n_concepts, concept, (i % 2) as u8),
            Self::CompositeFlags => {
                let mut f = vec![1; n_concepts];
                f[concept] = (i % 2) as u8;
                f
            }
            Self::ConditionSweep => {
                // Target bit varies fastest so consecutive queries pair up.
                let others: Vec<usize> = (0..n_concepts).filter(|&c| c != concept).collect();
                let code = i / 2;
                let mut f = vec![0; n_concepts];
                f[concept] = (i % 2) as u8;
                for (b, &c) in others.iter().enumerate() {
                    f[c] = ((code >> b) & 1) as u8;
                }
                f
            }
        }
    }

    /// Whether the strategy collapses to repeat-query for this mixture.
    pub fn degenerate(self, n_concepts: usize) -> bool {
        self != Self::RepeatQuery && n_concepts == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub samples_per_query: usize,
    pub challenge_trials: usize,
    pub challenge_batch: usize,
    pub confidence: f64,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            samples_per_query: 32,
            challenge_trials: 200,
            challenge_batch: 1,
            confidence: 0.95,
            probe: ProbeConfig {
                steps: 600,
                ..ProbeConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub condition: Flags,
    pub samples: Matrix,
    /// Guess of the target flag for this batch from the queries before it
    /// (nearest class mean); `1` before both classes have been seen.
    pub guess: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTranscript {
    pub strategy: AttackStrategy,
    pub q: usize,
    pub queries: Vec<QueryRecord>,
    pub trials: usize,
    pub correct: usize,
    pub success: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub confidence: f64,
    /// Accuracy ceiling `1 - e*` of the true mixture, for reference.
    pub truth_ceiling: f64,
    pub degenerate: bool,
}

impl AttackTranscript {
    pub fn ci_contains(&self, v: f64) -> bool {
        self.ci_low <= v && v <= self.ci_high
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize, confidence: f64) -> Result<(f64, f64)> {
    ensure(n > 0, || LabError::Empty("interval over zero trials".into()))?;
    ensure(confidence > 0.0 && confidence < 1.0, || LabError::InvalidArgument("confidence outside (0, 1)".into()))?;
    let z = Normal::standard().inverse_cdf(0.5 + confidence / 2.0);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let center = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

/// Draws `per` samples under each `conds[i]`, one sampler call per distinct condition.
fn sample_grouped(model: &DiffusionModel, conds: &[Flags], per: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Matrix>> {
    let mut distinct: Vec<Flags> = conds.to_vec();
    distinct.sort();
    distinct.dedup();
    let mut out = vec![Matrix::zeros(0, model.dim); conds.len()];
    for f in distinct {
        let who: Vec<usize> = (0..conds.len()).filter(|&i| conds[i] == f).collect();
        let all = model.sample(&f, rng, who.len() * per)?;
        for (k, &i) in who.iter().enumerate() {
            out[i] = all.select_rows(&(k * per..(k + 1) * per).collect::<Vec<_>>());
        }
    }
    Ok(out)
}

fn mean_row(m: &Matrix) -> Vec<f64> {
    let mut v = vec![0.0; m.cols()];
    for r in m.iter_rows() {
        v.iter_mut().zip(r).for_each(|(a, b)| *a += b / m.rows() as f64);
    }
    v
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Squared distance from `x` to the nearest row of `m`, optionally skipping one row.
fn nearest_sq(m: &Matrix, x: &[f64], skip: Option<usize>) -> f64 {
    m.iter_rows()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(_, r)| sq_dist(r, x))
        .fold(f64::INFINITY, f64::min)
}

/// Decision rule the adversary forms from its transcript.
enum Rule {
    Prior,
    /// Only one class observed: a point counts as that class when it lies
    /// within `radius2` (squared) of some observed sample.
    OneClass { label: u8, seen: Matrix, radius2: f64 },
    Probe(Probe),
}

impl Rule {
    fn guess(&self, batch: &Matrix) -> Result<u8> {
        Ok(match self {
            Rule::Prior => 1,
            Rule::OneClass { label, seen, radius2 } => {
                let inside = batch.iter_rows().filter(|r| nearest_sq(seen, r, None) <= *radius2).count();
                if 2 * inside >= batch.rows() {
                    *label
                } else {
                    1 - label
                }
            }
            Rule::Probe(p) => {
                let logit: f64 = p.probabilities(batch)?.iter().map(|&q| (q / (1.0 - q)).ln()).sum();
                u8::from(logit > 0.0)
            }
        })
    }
}

fn build_rule(queries: &[QueryRecord], concept: usize, cfg: &ProbeConfig) -> Result<Rule> {
    if queries.is_empty() {
        return Ok(Rule::Prior);
    }
    let pick = |v: u8| -> Result<Matrix> {
        let parts: Vec<&Matrix> = queries.iter().filter(|q| q.condition[concept] == v).map(|q| &q.samples).collect();
        if parts.is_empty() {
            Ok(Matrix::zeros(0, queries[0].samples.cols()))
        } else {
            Matrix::vstack(&parts)
        }
    };
    let (pos, neg) = (pick(1)?, pick(0)?);
    if pos.rows() == 0 || neg.rows() == 0 {
        let (label, seen) = if pos.rows() > 0 { (1, pos) } else { (0, neg) };
        // Three times the typical leave-one-out neighbour distance.
        let radius2 = if seen.rows() < 2 {
            f64::INFINITY
        } else {
            let mut d: Vec<f64> = (0..seen.rows()).map(|i| nearest_sq(&seen, seen.row(i), Some(i))).collect();
            d.sort_by(f64::total_cmp);
            9.0 * d[((0.9 * (d.len() - 1) as f64).round() as usize).min(d.len() - 1)]
        };
        return Ok(Rule::OneClass { label, seen, radius2 });
    }
    Ok(Rule::Probe(fit_probe(&pos, &neg, cfg)?))
}

/// Adaptive attack: `q` observed query batches, then balanced challenge trials
/// in which the adversary guesses the hidden target flag of a fresh batch.
pub fn adaptive_attack(
    model: &DiffusionModel,
    mixture_truth: &PreparedMixture,
    concept: usize,
    q: usize,
    strategy: AttackStrategy,
    cfg: &AttackConfig,
) -> Result<AttackTranscript> {
    ensure(concept < model.n_concepts, || LabError::InvalidArgument(format!("no concept {concept}")))?;
    ensure(cfg.challenge_trials >= 2 && cfg.challenge_trials % 2 == 0, || {
        LabError::InvalidArgument("challenge_trials must be even and >= 2".into())
    })?;
    ensure(cfg.samples_per_query >= 1 && cfg.challenge_batch >= 1, || {
        LabError::InvalidArgument("batch sizes must be >= 1".into())
    })?;
    let k = model.n_concepts;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (q as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let conds: Vec<Flags> = (0..q).map(|i| strategy.condition(i, k, concept)).collect();
    let batches = sample_grouped(model, &conds, cfg.samples_per_query, &mut rng)?;

    let mut queries = Vec::with_capacity(q);
    let (mut sum1, mut n1, mut sum0, mut n0) = (vec![0.0; model.dim], 0usize, vec![0.0; model.dim], 0usize);
    for (cond, samples) in conds.into_iter().zip(batches) {
        let m = mean_row(&samples);
        let guess = if n1 > 0 && n0 > 0 {
            let c1: Vec<f64> = sum1.iter().map(|v| v / n1 as f64).collect();
            let c0: Vec<f64> = sum0.iter().map(|v| v / n0 as f64).collect();
            u8::from(sq_dist(&m, &c1) < sq_dist(&m, &c0))
        } else {
            1
        };
        let (s, n) = if cond[concept] == 1 { (&mut sum1, &mut n1) } else { (&mut sum0, &mut n0) };
        s.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
        *n += 1;
        queries.push(QueryRecord { condition: cond, samples, guess });
    }

    let rule = build_rule(&queries, concept, &ProbeConfig { seed: cfg.probe.seed ^ cfg.seed, ..cfg.probe.clone() })?;
    let challenge_conds: Vec<Flags> = (0..cfg.challenge_trials).map(|i| strategy.condition(i, k, concept)).collect();
    let challenge = sample_grouped(model, &challenge_conds, cfg.challenge_batch, &mut rng)?;
    let mut correct = 0;
    for (cond, batch) in challenge_conds.iter().zip(&challenge) {
        correct += usize::from(rule.guess(batch)? == cond[concept]);
    }
    let trials = cfg.challenge_trials;
    let (lo, hi) = wilson_interval(correct, trials, cfg.confidence)?;
    let truth = if mixture_truth.dim() <= 3 { 1.0 - bayes_error(mixture_truth, concept)? } else { f64::NAN };
    Ok(AttackTranscript {
        strategy,
        q,
        queries,
        trials,
        correct,
        success: correct as f64 / trials as f64,
        ci_low: lo,
        ci_high: hi,
        confidence: cfg.confidence,
        truth_ceiling: truth,
        degenerate: strategy.degenerate(k),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeTest {
    pub conditional_mi: f64,
    /// `I(C; X | C' = v)` for `v = 0, 1`.
    pub slice_mi: [f64; 2],
    pub samples_per_cell: usize,
    pub bins: usize,
}

/// Minimum samples per flag combination for the compositional test.
pub const MIN_CELL_SAMPLES: usize = 500;

/// Estimates `I(C; X | C')` from model samples under all four combinations of
/// the two flags (other flags off).
pub fn composite_condition_test(
    model: &DiffusionModel,
    concept: usize,
    other: usize,
    samples: usize,
    bins: usize,
    seed: u64,
) -> Result<CompositeTest> {
    ensure(concept != other && concept < model.n_concepts && other < model.n_concepts, || {
        LabError::InvalidArgument("need two distinct registered concepts".into())
    })?;
    ensure(samples >= MIN_CELL_SAMPLES, || {
        LabError::InsufficientSamples(format!("{samples} samples per cell, need {MIN_CELL_SAMPLES}"))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::with_capacity(4);
    for v in 0..2u8 {
        for c in 0..2u8 {
            let mut f = vec![0; model.n_concepts];
            f[concept] = c;
            f[other] = v;
            cells.push(model.sample(&f, &mut rng, samples)?);
        }
    }
    let refs: Vec<&Matrix> = cells.iter().collect();
    let grid = GridSpec::percentile_box(&refs, bins, 0.005)?;
    let slices = [
        JointHistogram::from_samples(&grid, &[&cells[1], &cells[0]])?,
        JointHistogram::from_samples(&grid, &[&cells[3], &cells[2]])?,
    ];
    Ok(CompositeTest {
        conditional_mi: conditional_mi(&slices)?,
        slice_mi: [plugin_mi(&slices[0])?, plugin_mi(&slices[1])?],
        samples_per_cell: samples,
        bins,
    })
}
