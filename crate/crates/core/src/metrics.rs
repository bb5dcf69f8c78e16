//! Evaluation metrics on raw coordinates: Fréchet distance between Gaussian
//! fits, detector accuracy, a likelihood-based alignment score, the harmonic
//! summary `H`, entanglement, divergence shift and the lambda trade-off sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{single_flag, train_probe, Probe, ProbeConfig, ProbeFit};
use crate::data::{DatasetBundle, Flags, LabeledDataset, MixtureSpec, PreparedMixture};
use crate::diffusion::DiffusionModel;
use crate::erasure::{score_train, ErasureConfig, ErasureReport};
use crate::error::{ensure, LabError, Result};
use crate::infotheory::{adaptive_grid, plugin_mi, JointHistogram};
use crate::nn::Matrix;

/// Ridge added to every fitted covariance.
pub const COV_RIDGE: f64 = 1e-6;

/// Default histogram resolution for leakage estimates.
pub const DEFAULT_BINS: usize = 40;

/// Percentile clipped from each side of the histogram box.
pub const BOX_PERCENTILE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
}

impl GaussianFit {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_gaussian(points: &Matrix) -> Result<GaussianFit> {
    let (n, d) = (points.rows(), points.cols());
    ensure(d >= 1 && n > d, || {
        LabError::InsufficientSamples(format!("gaussian fit in {d} dimensions needs more than {d} points, got {n}"))
    })?;
    let mut mean = vec![0.0; d];
    for r in points.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for r in points.iter_rows() {
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / (n - 1) as f64 + if a == b { COV_RIDGE } else { 0.0 };
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok(GaussianFit { mean, cov })
}

/// Cyclic Jacobi eigendecomposition of a symmetric row-major matrix.
/// Returns eigenvalues and the eigenvectors as columns of a row-major matrix.
pub fn symmetric_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure(a.len() == d * d, || LabError::Shape(format!("expected {d}x{d} matrix")))?;
    ensure(a.iter().all(|v| v.is_finite()), || LabError::NonFinite("eigendecomposition input".into()))?;
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j].powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..d).map(|i| m[i * d + i]).collect(), v))
}

/// `f(A)` for symmetric `A` via its eigendecomposition.
fn spectral_map(a: &[f64], d: usize, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let (vals, vecs) = symmetric_eigen(a, d)?;
    let mut out = vec![0.0; d * d];
    for (k, &l) in vals.iter().enumerate() {
        let fl = f(l);
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] += vecs[i * d + k] * fl * vecs[j * d + k];
            }
        }
    }
    Ok(out)
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

fn symmetrize(a: &mut [f64], d: usize) {
    for i in 0..d {
        for j in i + 1..d {
            let m = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = m;
            a[j * d + i] = m;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetDistance {
    /// Squared distance, never negative.
    pub value: f64,
    /// Set when rounding pushed the raw value below zero.
    pub clipped: bool,
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`, with the trace of the root
/// taken from the symmetric product `S1^{1/2} S2 S1^{1/2}`.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<FrechetDistance> {
    let d = a.dim();
    ensure(b.dim() == d && a.cov.len() == d * d && b.cov.len() == d * d, || {
        LabError::Shape("gaussian fits differ in dimension".into())
    })?;
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let r = spectral_map(&a.cov, d, |l| l.max(0.0).sqrt())?;
    let mut inner = matmul(&matmul(&r, &b.cov, d), &r, d);
    symmetrize(&mut inner, d);
    let (vals, _) = symmetric_eigen(&inner, d)?;
    let cross: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    let trace: f64 = (0..d).map(|i| a.cov[i * d + i] + b.cov[i * d + i]).sum();
    let raw = mean_term + trace - 2.0 * cross;
    Ok(FrechetDistance {
        value: raw.max(0.0),
        clipped: raw < 0.0,
    })
}

/// `KL(N(a) || N(b))` in nats.
pub fn gaussian_kl(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    let d = a.dim();
    ensure(b.dim() == d, || LabError::Shape("gaussian fits differ in dimension".into()))?;
    let (va, _) = symmetric_eigen(&a.cov, d)?;
    let (vb, _) = symmetric_eigen(&b.cov, d)?;
    ensure(va.iter().chain(&vb).all(|&l| l > 0.0), || {
        LabError::InvalidArgument("singular gaussian fit".into())
    })?;
    let inv_b = spectral_map(&b.cov, d, |l| 1.0 / l)?;
    let tr: f64 = (0..d).map(|i| (0..d).map(|k| inv_b[i * d + k] * a.cov[k * d + i]).sum::<f64>()).sum();
    let diff: Vec<f64> = b.mean.iter().zip(&a.mean).map(|(x, y)| x - y).collect();
    let quad: f64 = (0..d).map(|i| (0..d).map(|j| diff[i] * inv_b[i * d + j] * diff[j]).sum::<f64>()).sum();
    let logdet = |v: &[f64]| v.iter().map(|l| l.ln()).sum::<f64>();
    Ok(0.5 * (tr + quad - d as f64 + logdet(&vb) - logdet(&va)))
}

/// Draws `n` samples per distinct flag vector in `reference`, in proportion
/// to how often each appears there.
pub fn matched_samples(model: &DiffusionModel, reference: &[Flags], n: usize, seed: u64) -> Result<Matrix> {
    ensure(!reference.is_empty() && n > 0, || LabError::Empty("matched sampling needs flags and n > 0".into()))?;
    let mut kinds: Vec<(Flags, usize)> = Vec::new();
    for f in reference {
        match kinds.iter_mut().find(|(k, _)| k == f) {
            Some((_, c)) => *c += 1,
            None => kinds.push((f.clone(), 1)),
        }
    }
    kinds.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::with_capacity(kinds.len());
    let mut left = n;
    for (i, (f, c)) in kinds.iter().enumerate() {
        let m = if i + 1 == kinds.len() {
            left
        } else {
            ((*c as f64 / reference.len() as f64) * n as f64).round() as usize
        }
        .min(left);
        left -= m;
        if m > 0 {
            parts.push(model.sample(f, &mut rng, m)?);
        }
    }
    Matrix::vstack(&parts.iter().collect::<Vec<_>>())
}

/// Fréchet distance between `n` flag-matched generations and the reference points.
pub fn model_fidelity(model: &DiffusionModel, reference: &LabeledDataset, n: usize, seed: u64) -> Result<FrechetDistance> {
    let gen = matched_samples(model, &reference.flags, n, seed)?;
    frechet_distance(&fit_gaussian(&gen)?, &fit_gaussian(&reference.points)?)
}

/// Rows of `data` whose flags for `targets` are all off.
pub fn neutral_subset(data: &LabeledDataset, targets: &[usize]) -> LabeledDataset {
    let idx = data.neutral_indices(targets);
    LabeledDataset {
        points: data.points.select_rows(&idx),
        flags: idx.iter().map(|&i| data.flags[i].clone()).collect(),
        components: idx.iter().map(|&i| data.components[i]).collect(),
    }
}

/// A detector for one concept, trained on real points only.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub concept: usize,
    pub fit: ProbeFit,
}

impl Detector {
    pub fn train(data: &LabeledDataset, concept: usize, cfg: &ProbeConfig) -> Result<Self> {
        ensure(data.flags.first().is_some_and(|f| concept < f.len()), || {
            LabError::InvalidArgument(format!("no concept {concept} in data"))
        })?;
        let fit = train_probe(&data.points_with_flag(concept, 1), &data.points_with_flag(concept, 0), cfg)?;
        Ok(Self { concept, fit })
    }

    pub fn probe(&self) -> &Probe {
        &self.fit.probe
    }

    /// Fraction of `points` labelled concept-present.
    pub fn positive_rate(&self, points: &Matrix) -> Result<f64> {
        ensure(points.rows() > 0, || LabError::Empty("detector on no points".into()))?;
        let p = self.fit.probe.probabilities(points)?;
        Ok(p.iter().filter(|&&v| v > 0.5).count() as f64 / p.len() as f64)
    }
}

/// Fraction of `n` generations with only the detector's concept flag on that
/// the detector labels concept-present.
pub fn concept_accuracy(model: &DiffusionModel, detector: &Detector, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = model.sample(&single_flag(model.n_concepts, detector.concept, 1), &mut rng, n)?;
    detector.positive_rate(&x)
}

/// Affine rescaling of mean conditional log-likelihood: `floor` maps to 0 and
/// the base model maps to 100. The floor is the mean log-likelihood of points
/// spread uniformly over the mixture's 4-sigma box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScale {
    pub base_loglik: f64,
    pub floor_loglik: f64,
}

fn mean_loglik(mixture: &PreparedMixture, x: &Matrix, flags: &[u8]) -> Result<f64> {
    let mut s = 0.0;
    for r in x.iter_rows() {
        s += mixture.conditional_log_density(r, flags)?;
    }
    Ok(s / x.rows() as f64)
}

fn neutral_loglik(model: &DiffusionModel, mixture: &PreparedMixture, flags: &[Flags], n: usize, seed: u64) -> Result<f64> {
    ensure(!flags.is_empty() && n > 0, || LabError::Empty("alignment needs flags and samples".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for f in flags {
        let x = model.sample(f, &mut rng, n)?;
        total += mean_loglik(mixture, &x, f)?;
    }
    Ok(total / flags.len() as f64)
}

impl AlignmentScale {
    pub fn calibrate(base: &DiffusionModel, mixture: &MixtureSpec, flags: &[Flags], n: usize, seed: u64) -> Result<Self> {
        let prepared = mixture.prepare()?;
        let base_loglik = neutral_loglik(base, &prepared, flags, n, seed)?;
        let (lo, hi) = prepared.bounding_box(4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf100);
        let d = prepared.dim();
        let mut floor = 0.0;
        for f in flags {
            let mut u = Matrix::zeros(n, d);
            for r in 0..n {
                for i in 0..d {
                    u.set(r, i, rand::Rng::random_range(&mut rng, lo[i]..hi[i]));
                }
            }
            floor += mean_loglik(&prepared, &u, f)?;
        }
        let floor_loglik = floor / flags.len() as f64;
        ensure(base_loglik > floor_loglik, || {
            LabError::Invariant(format!("base log-likelihood {base_loglik} not above floor {floor_loglik}"))
        })?;
        Ok(Self {
            base_loglik,
            floor_loglik,
        })
    }

    pub fn rescale(&self, loglik: f64) -> f64 {
        100.0 * (loglik - self.floor_loglik) / (self.base_loglik - self.floor_loglik)
    }
}

/// Rescaled mean log-likelihood of neutral-conditioned generations under the
/// matching ground-truth conditionals.
pub fn alignment_score(
    model: &DiffusionModel,
    flags: &[Flags],
    mixture: &MixtureSpec,
    scale: Option<&AlignmentScale>,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let scale = scale.ok_or_else(|| LabError::InvalidArgument("alignment rescaling constants missing".into()))?;
    Ok(scale.rescale(neutral_loglik(model, &mixture.prepare()?, flags, n, seed)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicScore {
    pub h: f64,
    pub e: f64,
    pub f: f64,
    pub clamped: bool,
}

/// `H = 2EF / (E + F)` with `E = 1 - acc` and
/// `F = (align / align_orig + max(fd_orig - (fd - fd_orig), 0) / fd_orig) / 2`.
pub fn harmonic_h(acc: f64, fd: f64, align: f64, fd_orig: f64, align_orig: f64) -> Result<HarmonicScore> {
    ensure(fd_orig > 0.0 && align_orig > 0.0, || {
        LabError::InvalidArgument("reference fidelity and alignment must be positive".into())
    })?;
    ensure([acc, fd, align].iter().all(|v| v.is_finite()), || LabError::NonFinite("harmonic inputs".into()))?;
    let e_raw = 1.0 - acc;
    let f_raw = 0.5 * (align / align_orig + (fd_orig - (fd - fd_orig)).max(0.0) / fd_orig);
    let e = e_raw.clamp(0.0, 1.0);
    let f = f_raw.clamp(0.0, 1.0);
    let h = if e + f > 0.0 { 2.0 * e * f / (e + f) } else { 0.0 };
    Ok(HarmonicScore {
        h,
        e,
        f,
        clamped: e != e_raw || f != f_raw,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEval {
    pub concept: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean concept accuracy over the targets.
    pub accuracy: f64,
    /// Fréchet distance of neutral generations to held-out neutral data.
    pub fidelity: f64,
    pub alignment: f64,
    pub fidelity_reference: f64,
    pub alignment_reference: f64,
    pub harmonic: HarmonicScore,
    pub per_concept: Vec<ConceptEval>,
}

impl EvalReport {
    pub fn new(
        per_concept: Vec<ConceptEval>,
        fidelity: f64,
        alignment: f64,
        fidelity_reference: f64,
        alignment_reference: f64,
    ) -> Result<Self> {
        ensure(!per_concept.is_empty(), || LabError::Empty("no concepts evaluated".into()))?;
        let accuracy = per_concept.iter().map(|c| c.accuracy).sum::<f64>() / per_concept.len() as f64;
        let harmonic = harmonic_h(accuracy, fidelity, alignment, fidelity_reference, alignment_reference)?;
        Ok(Self {
            accuracy,
            fidelity,
            alignment,
            fidelity_reference,
            alignment_reference,
            harmonic,
            per_concept,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generations per concept detector and per neutral flag vector.
    pub samples: usize,
    /// Samples per flag for leakage estimates.
    pub leakage_samples: usize,
    pub bins: usize,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 4000,
            leakage_samples: 50_000,
            bins: DEFAULT_BINS,
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config { path: format!("evaluation.{m}"), message: "must be positive".into() });
        if self.samples == 0 {
            return bad("samples");
        }
        if self.leakage_samples == 0 {
            return bad("leakage_samples");
        }
        if self.bins < 2 {
            return Err(LabError::Config { path: "evaluation.bins".into(), message: "must be at least 2".into() });
        }
        Ok(())
    }
}

/// Everything fixed at base-model time that later evaluations compare against.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluator {
    pub mixture: MixtureSpec,
    pub targets: Vec<usize>,
    pub neutral_flags: Vec<Flags>,
    pub detectors: Vec<Detector>,
    pub heldout_neutral: LabeledDataset,
    pub alignment: AlignmentScale,
    pub fidelity_reference: f64,
    pub config: EvalConfig,
}

/// Distinct neutral flag vectors seen in `data`, sorted.
pub fn neutral_flag_set(data: &LabeledDataset, targets: &[usize]) -> Vec<Flags> {
    let mut v: Vec<Flags> = data.neutral_indices(targets).iter().map(|&i| data.flags[i].clone()).collect();
    v.sort();
    v.dedup();
    v
}

impl Evaluator {
    pub fn calibrate(base: &DiffusionModel, data: &DatasetBundle, targets: &[usize], config: &EvalConfig) -> Result<Self> {
        config.validate()?;
        let heldout_neutral = neutral_subset(&data.heldout, targets);
        let neutral_flags = neutral_flag_set(&data.heldout, targets);
        let alignment = AlignmentScale::calibrate(base, &data.mixture, &neutral_flags, config.samples, config.seed ^ 0xa11)?;
        let fidelity_reference = model_fidelity(base, &heldout_neutral, config.samples, config.seed ^ 0xfd)?.value;
        Self::with_calibration(data, targets, config, alignment, fidelity_reference)
    }

    /// Rebuilds an evaluator from stored base-model constants; only the
    /// real-data detectors are retrained.
    pub fn with_calibration(
        data: &DatasetBundle,
        targets: &[usize],
        config: &EvalConfig,
        alignment: AlignmentScale,
        fidelity_reference: f64,
    ) -> Result<Self> {
        config.validate()?;
        ensure(!targets.is_empty(), || LabError::Empty("no target concepts".into()))?;
        let detectors = targets
            .iter()
            .map(|&c| Detector::train(&data.train, c, &ProbeConfig { seed: config.seed ^ (c as u64 + 1), ..config.probe.clone() }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mixture: data.mixture.clone(),
            targets: targets.to_vec(),
            neutral_flags: neutral_flag_set(&data.heldout, targets),
            detectors,
            heldout_neutral: neutral_subset(&data.heldout, targets),
            alignment,
            fidelity_reference,
            config: config.clone(),
        })
    }

    pub fn neutral_fidelity(&self, model: &DiffusionModel) -> Result<f64> {
        Ok(model_fidelity(model, &self.heldout_neutral, self.config.samples, self.config.seed ^ 0xfd)?.value)
    }

    pub fn evaluate(&self, model: &DiffusionModel) -> Result<EvalReport> {
        let per_concept = self
            .detectors
            .iter()
            .map(|d| {
                Ok(ConceptEval {
                    concept: self.mixture.concepts[d.concept].clone(),
                    accuracy: concept_accuracy(model, d, self.config.samples, self.config.seed ^ 0xacc)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fidelity = self.neutral_fidelity(model)?;
        let alignment = alignment_score(
            model,
            &self.neutral_flags,
            &self.mixture,
            Some(&self.alignment),
            self.config.samples,
            self.config.seed ^ 0xa11,
        )?;
        EvalReport::new(per_concept, fidelity, alignment, self.fidelity_reference.max(f64::MIN_POSITIVE), 100.0)
    }
}

/// Samples for every on/off pattern of `targets`, other flags off. Pattern
/// `p` sets target `i` when bit `i` of `p` is one.
pub fn pattern_samples(model: &DiffusionModel, targets: &[usize], n: usize, seed: u64) -> Result<Vec<Matrix>> {
    ensure(!targets.is_empty() && targets.len() <= 8, || LabError::InvalidArgument("need 1 to 8 targets".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..1usize << targets.len())
        .map(|p| {
            let mut f = vec![0u8; model.n_concepts];
            for (i, &c) in targets.iter().enumerate() {
                f[c] = ((p >> i) & 1) as u8;
            }
            model.sample(&f, &mut rng, n)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageSummary {
    /// `I(C_i; X)` for each target, other targets marginalized uniformly.
    pub per_concept: Vec<f64>,
    /// `I(C_1..C_k; X)` over the full pattern.
    pub joint: f64,
    pub bins: usize,
    pub coarsened: bool,
}

/// Per-target and joint plug-in MI from pattern samples on one shared grid.
pub fn leakage_from_patterns(patterns: &[Matrix], bins: usize) -> Result<LeakageSummary> {
    let k = patterns.len().trailing_zeros() as usize;
    ensure(patterns.len() == 1 << k && k >= 1, || LabError::Shape("pattern count must be a power of two".into()))?;
    let refs: Vec<&Matrix> = patterns.iter().collect();
    let (grid, coarsened) = adaptive_grid(&refs, bins, BOX_PERCENTILE)?;
    let full = JointHistogram::from_samples(&grid, &refs)?;
    let mut per_concept = Vec::with_capacity(k);
    for i in 0..k {
        let on: Vec<&Matrix> = (0..patterns.len()).filter(|p| (p >> i) & 1 == 1).map(|p| &patterns[p]).collect();
        let off: Vec<&Matrix> = (0..patterns.len()).filter(|p| (p >> i) & 1 == 0).map(|p| &patterns[p]).collect();
        let on = Matrix::vstack(&on)?;
        let off = Matrix::vstack(&off)?;
        per_concept.push(plugin_mi(&JointHistogram::from_samples(&grid, &[&on, &off])?)?);
    }
    Ok(LeakageSummary {
        per_concept,
        joint: plugin_mi(&full)?,
        bins: grid.bins[0],
        coarsened,
    })
}

pub fn concept_leakage(model: &DiffusionModel, targets: &[usize], n: usize, bins: usize, seed: u64) -> Result<LeakageSummary> {
    leakage_from_patterns(&pattern_samples(model, targets, n, seed)?, bins)
}

/// Minimum concept-absent samples for an entanglement estimate.
pub const MIN_ENTANGLEMENT_SAMPLES: usize = 200;

/// `I(R; X)` between concept-absent points and their relevance labels `R`.
pub fn relevance_mi(points: &Matrix, relevant: &[bool], bins: usize) -> Result<f64> {
    ensure(points.rows() >= MIN_ENTANGLEMENT_SAMPLES, || {
        LabError::InsufficientSamples(format!("entanglement needs at least {MIN_ENTANGLEMENT_SAMPLES} points"))
    })?;
    ensure(points.rows() == relevant.len(), || LabError::Shape("one label per point".into()))?;
    let on: Vec<usize> = (0..relevant.len()).filter(|&i| relevant[i]).collect();
    let off: Vec<usize> = (0..relevant.len()).filter(|&i| !relevant[i]).collect();
    if on.is_empty() || off.is_empty() {
        return Ok(0.0);
    }
    let (a, b) = (points.select_rows(&on), points.select_rows(&off));
    let (grid, _) = adaptive_grid(&[&a, &b], bins, BOX_PERCENTILE)?;
    plugin_mi(&JointHistogram::from_samples(&grid, &[&a, &b])?)
}

/// Entanglement of the data itself: concept-absent draws labelled by whether
/// their source component is relevant to the concept.
pub fn data_entanglement(mixture: &MixtureSpec, concept: usize, n: usize, bins: usize, seed: u64) -> Result<f64> {
    let p = mixture.prepare()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, comps) = p.sample_conditional(&single_flag(p.n_concepts(), concept, 0), n, &mut rng)?;
    let rel: Vec<bool> = comps.iter().map(|&j| p.component_relevant(j, concept)).collect();
    relevance_mi(&x, &rel, bins)
}

/// Entanglement of a model: concept-absent generations labelled by the
/// ground-truth relevance posterior (oracle labelling).
pub fn model_entanglement(model: &DiffusionModel, mixture: &MixtureSpec, concept: usize, n: usize, bins: usize, seed: u64) -> Result<f64> {
    let p = mixture.prepare()?;
    let flags = single_flag(p.n_concepts(), concept, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = model.sample(&flags, &mut rng, n)?;
    let rel = x
        .iter_rows()
        .map(|r| Ok(p.relevance_posterior(r, concept, &flags)? >= 0.5))
        .collect::<Result<Vec<_>>>()?;
    relevance_mi(&x, &rel, bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceShift {
    pub pre_kl: f64,
    pub post_kl: f64,
    pub delta: f64,
}

/// Change in `KL(fit of concept-conditioned generations || true concept
/// conditional)` from `pre` to `post`, on Gaussian fits.
pub fn divergence_shift(
    pre: &DiffusionModel,
    post: &DiffusionModel,
    mixture: &MixtureSpec,
    concept: usize,
    n: usize,
    seed: u64,
) -> Result<DivergenceShift> {
    let p = mixture.prepare()?;
    let flags = single_flag(p.n_concepts(), concept, 1);
    let (mean, cov) = p.conditional_moments(&flags)?;
    let reference = GaussianFit { mean, cov };
    let kl = |m: &DiffusionModel| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gaussian_kl(&fit_gaussian(&m.sample(&flags, &mut rng, n)?)?, &reference)
    };
    let pre_kl = kl(pre)?;
    let post_kl = kl(post)?;
    Ok(DivergenceShift {
        pre_kl,
        post_kl,
        delta: post_kl - pre_kl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub lambda: f64,
    pub mi: f64,
    pub fidelity: f64,
    /// Set when the run failed; such points stay in the raw output only.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffSweep {
    /// Every run, sorted by lambda.
    pub points: Vec<TradeoffPoint>,
}

impl TradeoffSweep {
    /// Completed runs, sorted by lambda, unsmoothed.
    pub fn frontier(&self) -> Vec<&TradeoffPoint> {
        self.points.iter().filter(|p| p.error.is_none()).collect()
    }
}

/// Runs erasure once per lambda with shared seeds and records residual MI of
/// the first target and neutral-prompt fidelity.
pub fn tradeoff_sweep(
    base: &DiffusionModel,
    data: &DatasetBundle,
    config: &ErasureConfig,
    evaluator: &Evaluator,
    lambdas: &[f64],
    mi_samples: usize,
) -> Result<TradeoffSweep> {
    tradeoff_sweep_with(base, data, config, evaluator, lambdas, mi_samples, |_, _, _| Ok(()))
}

/// [`tradeoff_sweep`] with a hook called on every finished run.
pub fn tradeoff_sweep_with<F>(
    base: &DiffusionModel,
    data: &DatasetBundle,
    config: &ErasureConfig,
    evaluator: &Evaluator,
    lambdas: &[f64],
    mi_samples: usize,
    on_run: F,
) -> Result<TradeoffSweep>
where
    F: Fn(f64, &DiffusionModel, &ErasureReport) -> Result<()> + Sync,
{
    ensure(!lambdas.is_empty(), || LabError::Empty("no lambda values".into()))?;
    let targets = config.target_indices(&data.mixture)?;
    let mut points: Vec<TradeoffPoint> = lambdas
        .par_iter()
        .map(|&lambda| {
            let run = || -> Result<(f64, f64)> {
                let cfg = ErasureConfig { lambda, ..config.clone() };
                let (model, report) = score_train(base, &data.mixture, &data.train, &cfg)?;
                on_run(lambda, &model, &report)?;
                let leak = concept_leakage(&model, &targets[..1], mi_samples, evaluator.config.bins, config.seed ^ 0x77)?;
                Ok((leak.per_concept[0], evaluator.neutral_fidelity(&model)?))
            };
            match run() {
                Ok((mi, fidelity)) => TradeoffPoint { lambda, mi, fidelity, error: None },
                Err(e) => TradeoffPoint {
                    lambda,
                    mi: f64::NAN,
                    fidelity: f64::NAN,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    points.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    Ok(TradeoffSweep { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn fit(mean: &[f64], cov: &[f64]) -> GaussianFit {
        GaussianFit {
            mean: mean.to_vec(),
            cov: cov.to_vec(),
        }
    }

    #[test]
    fn constant_points_fit_to_ridge() {
        let x = Matrix::from_rows(&vec![vec![1.5, -2.0]; 10]).unwrap();
        let g = fit_gaussian(&x).unwrap();
        assert_eq!(g.mean, vec![1.5, -2.0]);
        assert_eq!(g.cov, vec![COV_RIDGE, 0.0, 0.0, COV_RIDGE]);
        assert!(fit_gaussian(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn axis_aligned_variance_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Normal::new(0.0, 2.0).unwrap();
        let b = Normal::new(1.0, 0.5).unwrap();
        let rows: Vec<Vec<f64>> = (0..10_000).map(|_| vec![a.sample(&mut rng), b.sample(&mut rng)]).collect();
        let g = fit_gaussian(&Matrix::from_rows(&rows).unwrap()).unwrap();
        assert!((g.cov[0] / 4.0 - 1.0).abs() < 0.1);
        assert!((g.cov[3] / 0.25 - 1.0).abs() < 0.1);
        let mut rev = rows.clone();
        rev.reverse();
        let h = fit_gaussian(&Matrix::from_rows(&rev).unwrap()).unwrap();
        for (x, y) in g.cov.iter().zip(&h.cov) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn frechet_closed_forms() {
        let a = fit(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(frechet_distance(&a, &a).unwrap().value, 0.0, epsilon = 1e-12);
        let shifted = fit(&[3.0, -4.0], &[1.0, 0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(frechet_distance(&a, &shifted).unwrap().value, 25.0, epsilon = 1e-12);
        let b = fit(&[0.0, 0.0], &[4.0, 0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(frechet_distance(&a, &b).unwrap().value, 1.0, epsilon = 1e-12);
        assert!(frechet_distance(&a, &fit(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn frechet_matches_commuting_oracle() {
        // Rotated diagonal covariances sharing eigenvectors: root of the product is diagonal in that basis.
        let (c, s) = (0.6f64, 0.8f64);
        let rot = |l1: f64, l2: f64| vec![c * c * l1 + s * s * l2, c * s * (l1 - l2), c * s * (l1 - l2), s * s * l1 + c * c * l2];
        let a = fit(&[1.0, 0.0], &rot(2.0, 0.5));
        let b = fit(&[0.0, 1.0], &rot(3.0, 1.5));
        let expect = 2.0 + (2.0 + 0.5 + 3.0 + 1.5) - 2.0 * ((6.0f64).sqrt() + 0.75f64.sqrt());
        assert_abs_diff_eq!(frechet_distance(&a, &b).unwrap().value, expect, epsilon = 1e-10);
    }

    #[test]
    fn kl_closed_form() {
        let a = fit(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let b = fit(&[1.0, 0.0], &[2.0, 0.0, 0.0, 1.0]);
        // 0.5 * (1/2 + 1 + 1/2 - 2 + ln 2)
        assert_abs_diff_eq!(gaussian_kl(&a, &b).unwrap(), 0.5 * (0.5 + 0.5 + 1.0 - 2.0 + 2f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(gaussian_kl(&a, &a).unwrap(), 0.0, epsilon = 1e-12);
        assert!(gaussian_kl(&a, &fit(&[0.0, 0.0], &[1.0, 1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn harmonic_examples() {
        let p = harmonic_h(0.0, 2.0, 100.0, 2.0, 100.0).unwrap();
        assert_eq!((p.e, p.f, p.h), (1.0, 1.0, 1.0));
        assert_eq!(harmonic_h(1.0, 2.0, 100.0, 2.0, 100.0).unwrap().h, 0.0);
        let x = harmonic_h(0.1, 1.2, 0.95, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(x.e, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(x.f, 0.875, epsilon = 1e-12);
        assert_abs_diff_eq!(x.h, 2.0 * 0.9 * 0.875 / 1.775, epsilon = 1e-12);
        assert!((x.h - 0.8873).abs() < 1e-4);
        assert!(harmonic_h(0.1, 1.0, 1.0, 0.0, 1.0).is_err());
        assert!(harmonic_h(0.0, 0.5, 120.0, 1.0, 100.0).unwrap().clamped);
    }

    proptest! {
        #[test]
        fn harmonic_bounds(acc in 0.0f64..1.0, fd in 0.0f64..5.0, al in 0.0f64..150.0, fo in 0.01f64..3.0) {
            let s = harmonic_h(acc, fd, al, fo, 100.0).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.h));
            prop_assert!(s.h <= 2.0 * s.e.min(s.f) + 1e-12);
            if s.e == 0.0 || s.f == 0.0 {
                prop_assert_eq!(s.h, 0.0);
            }
        }

        #[test]
        fn frechet_symmetric(m in prop::collection::vec(-3.0f64..3.0, 4), l in prop::collection::vec(0.1f64..4.0, 4), r in 0.0f64..3.14) {
            let (c, s) = (r.cos(), r.sin());
            let a = fit(&m[..2], &[l[0], 0.0, 0.0, l[1]]);
            let b = fit(&m[2..], &[c * c * l[2] + s * s * l[3], c * s * (l[2] - l[3]), c * s * (l[2] - l[3]), s * s * l[2] + c * c * l[3]]);
            let ab = frechet_distance(&a, &b).unwrap().value;
            let ba = frechet_distance(&b, &a).unwrap().value;
            prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
            prop_assert!(frechet_distance(&b, &b).unwrap().value < 1e-9);
        }

        #[test]
        fn eigen_reconstructs(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0) {
            let m = [a, b, b, c];
            let (vals, vecs) = symmetric_eigen(&m, 2).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let r: f64 = (0..2).map(|k| vecs[i * 2 + k] * vals[k] * vecs[j * 2 + k]).sum();
                    prop_assert!((r - m[i * 2 + j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn conditional_moments_of_default_benchmark() {
        let p = MixtureSpec::default_benchmark().prepare().unwrap();
        let (m, c) = p.conditional_moments(&[1]).unwrap();
        assert_abs_diff_eq!(m[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[3], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn data_entanglement_fixtures() {
        let disjoint = data_entanglement(&MixtureSpec::default_benchmark(), 0, 20_000, DEFAULT_BINS, 1).unwrap();
        assert!(disjoint < 0.02, "{disjoint}");
        let overlap = data_entanglement(&MixtureSpec::entangled_overlap(), 0, 20_000, DEFAULT_BINS, 1).unwrap();
        assert!(overlap > 0.1, "{overlap}");
        let single = MixtureSpec {
            concepts: vec!["c".into()],
            components: vec![MixtureSpec::default_benchmark().components[2].clone()],
        };
        let single = MixtureSpec {
            components: vec![crate::data::MixtureComponent { weight: 1.0, ..single.components[0].clone() }],
            ..single
        };
        assert_eq!(data_entanglement(&single, 0, 1000, DEFAULT_BINS, 1).unwrap(), 0.0);
        assert!(data_entanglement(&MixtureSpec::default_benchmark(), 0, 10, DEFAULT_BINS, 1).is_err());
    }

    #[test]
    fn leakage_patterns_from_mixture_draws() {
        // Exact samplers stand in for a model: independent flags give ~0, a separated concept gives ~ln 2.
        let p = MixtureSpec::default_benchmark().prepare().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = p.sample_conditional(&[0], 20_000, &mut rng).unwrap().0;
        let b = p.sample_conditional(&[0], 20_000, &mut rng).unwrap().0;
        let c = p.sample_conditional(&[1], 20_000, &mut rng).unwrap().0;
        let same = leakage_from_patterns(&[a.clone(), b], DEFAULT_BINS).unwrap();
        assert!(same.per_concept[0] < 0.03);
        assert_abs_diff_eq!(same.joint, same.per_concept[0], epsilon = 1e-12);
        let sep = leakage_from_patterns(&[a, c], DEFAULT_BINS).unwrap();
        assert!((sep.per_concept[0] - std::f64::consts::LN_2).abs() < 0.03);
        assert!(leakage_from_patterns(&vec![Matrix::zeros(3, 2); 3], DEFAULT_BINS).is_err());
    }
}
