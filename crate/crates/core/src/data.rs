//! Ground-truth Gaussian mixtures with concept labels, and datasets drawn from them.
//!
//! Every component carries a flag pattern with one character per registered
//! concept: `1` (the component only appears when the concept is requested),
//! `0` (only when it is not) or `*` (shared by both conditions). Conditioning on
//! a flag vector selects the compatible components and renormalizes their
//! weights. A data point drawn from a `*` component gets that concept flag by
//! a fair coin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, LabError, Result};
use crate::nn::Matrix;

/// Concept flags of one sample; one entry (0 or 1) per registered concept.
pub type Flags = Vec<u8>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub weight: f64,
    /// One of `0`, `1`, `*` per concept.
    pub flags: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub concepts: Vec<String>,
    pub components: Vec<MixtureComponent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Membership {
    Absent,
    Present,
    Shared,
}

impl Membership {
    fn parse(c: char) -> Option<Self> {
        match c {
            '0' => Some(Membership::Absent),
            '1' => Some(Membership::Present),
            '*' => Some(Membership::Shared),
            _ => None,
        }
    }

    fn accepts(self, flag: u8) -> bool {
        match self {
            Membership::Absent => flag == 0,
            Membership::Present => flag == 1,
            Membership::Shared => true,
        }
    }

    fn prob_present(self) -> f64 {
        match self {
            Membership::Absent => 0.0,
            Membership::Present => 1.0,
            Membership::Shared => 0.5,
        }
    }
}

fn unit_cov(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn component(mean: [f64; 2], weight: f64, flags: &str) -> MixtureComponent {
    MixtureComponent {
        mean: mean.to_vec(),
        cov: unit_cov(2),
        weight,
        flags: flags.into(),
    }
}

impl MixtureSpec {
    /// `default-2concept`: unit Gaussians at (±3, ±3); the concept is the right half-plane.
    pub fn default_benchmark() -> Self {
        Self {
            concepts: vec!["right".into()],
            components: vec![
                component([3.0, 3.0], 0.25, "1"),
                component([3.0, -3.0], 0.25, "1"),
                component([-3.0, 3.0], 0.25, "0"),
                component([-3.0, -3.0], 0.25, "0"),
            ],
        }
    }

    /// Same geometry with two independent concepts: right half and top half.
    pub fn two_concept_quadrants() -> Self {
        Self {
            concepts: vec!["right".into(), "top".into()],
            components: vec![
                component([3.0, 3.0], 0.25, "11"),
                component([3.0, -3.0], 0.25, "10"),
                component([-3.0, 3.0], 0.25, "01"),
                component([-3.0, -3.0], 0.25, "00"),
            ],
        }
    }

    /// Entangled fixture: the concept shares its upper-left component with the neutral set.
    pub fn entangled_overlap() -> Self {
        Self {
            concepts: vec!["right".into()],
            components: vec![
                component([3.0, 3.0], 0.25, "1"),
                component([-3.0, 3.0], 0.5, "*"),
                component([-3.0, -3.0], 0.25, "0"),
            ],
        }
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn concept_index(&self, name: &str) -> Result<usize> {
        self.concepts
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| LabError::InvalidArgument(format!("unknown concept `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        self.prepare().map(|_| ())
    }

    /// Validates the spec and precomputes Cholesky factors for density evaluation.
    pub fn prepare(&self) -> Result<PreparedMixture> {
        ensure(!self.components.is_empty(), || LabError::InvalidArgument("mixture has no components".into()))?;
        ensure(!self.concepts.is_empty(), || LabError::InvalidArgument("mixture registers no concepts".into()))?;
        let d = self.dim();
        ensure(d >= 1, || LabError::InvalidArgument("zero-dimensional mixture".into()))?;
        let wsum: f64 = self.components.iter().map(|c| c.weight).sum();
        ensure((wsum - 1.0).abs() < 1e-9, || {
            LabError::InvalidArgument(format!("component weights sum to {wsum}, expected 1"))
        })?;
        let mut comps = Vec::with_capacity(self.components.len());
        for (j, c) in self.components.iter().enumerate() {
            ensure(c.weight > 0.0 && c.weight.is_finite(), || {
                LabError::InvalidArgument(format!("component {j}: weight must be positive"))
            })?;
            ensure(c.mean.len() == d && c.mean.iter().all(|m| m.is_finite()), || {
                LabError::InvalidArgument(format!("component {j}: mean must have {d} finite entries"))
            })?;
            ensure(c.cov.len() == d && c.cov.iter().all(|r| r.len() == d), || {
                LabError::InvalidArgument(format!("component {j}: covariance must be {d}x{d}"))
            })?;
            let membership: Option<Vec<Membership>> = c.flags.chars().map(Membership::parse).collect();
            let membership = membership.filter(|m| m.len() == self.concepts.len()).ok_or_else(|| {
                LabError::InvalidArgument(format!(
                    "component {j}: flags `{}` must be {} characters from {{0,1,*}}",
                    c.flags,
                    self.concepts.len()
                ))
            })?;
            let chol = cholesky(&c.cov)
                .map_err(|e| LabError::InvalidArgument(format!("component {j}: {e}")))?;
            let log_det: f64 = 2.0 * (0..d).map(|i| chol[i * d + i].ln()).sum::<f64>();
            let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
            comps.push(PreparedComponent {
                mean: c.mean.clone(),
                chol,
                log_norm,
                log_weight: c.weight.ln(),
                weight: c.weight,
                membership,
            });
        }
        Ok(PreparedMixture {
            dim: d,
            n_concepts: self.concepts.len(),
            comps,
        })
    }
}

/// Lower-triangular Cholesky factor, row-major; fails unless symmetric positive-definite.
pub(crate) fn cholesky(a: &[Vec<f64>]) -> std::result::Result<Vec<f64>, String> {
    let d = a.len();
    for i in 0..d {
        for j in 0..i {
            if (a[i][j] - a[j][i]).abs() > 1e-12 * (1.0 + a[i][j].abs()) {
                return Err("covariance is not symmetric".into());
            }
        }
    }
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err("covariance is not positive-definite".into());
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

#[derive(Debug, Clone)]
struct PreparedComponent {
    mean: Vec<f64>,
    chol: Vec<f64>,
    log_norm: f64,
    log_weight: f64,
    weight: f64,
    membership: Vec<Membership>,
}

impl PreparedComponent {
    fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        // Solve L y = x - mu by forward substitution.
        let mut y = [0.0f64; 8];
        let mut heap;
        let y: &mut [f64] = if d <= 8 {
            &mut y[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut q = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= self.chol[i * d + k] * y[k];
            }
            y[i] = s / self.chol[i * d + i];
            q += y[i] * y[i];
        }
        self.log_norm - 0.5 * q
    }

    fn accepts(&self, flags: &[u8]) -> bool {
        self.membership.iter().zip(flags).all(|(m, &f)| m.accepts(f))
    }
}

/// A validated mixture ready for density, posterior and sampling queries.
#[derive(Debug, Clone)]
pub struct PreparedMixture {
    dim: usize,
    n_concepts: usize,
    comps: Vec<PreparedComponent>,
}

fn log_sum_exp(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl PreparedMixture {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    fn check_flags(&self, flags: &[u8]) -> Result<()> {
        ensure(flags.len() == self.n_concepts && flags.iter().all(|&f| f <= 1), || {
            LabError::InvalidArgument(format!(
                "flags {flags:?} must be {} bits for this mixture",
                self.n_concepts
            ))
        })
    }

    fn compatible(&self, flags: &[u8]) -> Result<Vec<usize>> {
        self.check_flags(flags)?;
        let idx: Vec<usize> = (0..self.comps.len()).filter(|&j| self.comps[j].accepts(flags)).collect();
        ensure(!idx.is_empty(), || {
            LabError::InvalidArgument(format!("no mixture component is compatible with flags {flags:?}"))
        })?;
        Ok(idx)
    }

    /// Marginal log density of the full mixture.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(self.comps.iter().map(|c| c.log_weight + c.log_density(x)))
    }

    /// Log density of `X | flags`.
    pub fn conditional_log_density(&self, x: &[f64], flags: &[u8]) -> Result<f64> {
        let idx = self.compatible(flags)?;
        let total: f64 = idx.iter().map(|&j| self.comps[j].weight).sum();
        Ok(log_sum_exp(idx.iter().map(|&j| self.comps[j].log_weight + self.comps[j].log_density(x))) - total.ln())
    }

    /// Prior probability that concept `concept` is flagged in the data.
    pub fn concept_prior(&self, concept: usize) -> f64 {
        self.comps.iter().map(|c| c.weight * c.membership[concept].prob_present()).sum()
    }

    /// Exact `P(C = 1 | x)` for one concept under the data distribution.
    pub fn posterior(&self, x: &[f64], concept: usize) -> f64 {
        let logs: Vec<f64> = self.comps.iter().map(|c| c.log_weight + c.log_density(x)).collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut num = 0.0;
        let mut den = 0.0;
        for (c, l) in self.comps.iter().zip(&logs) {
            let p = (l - m).exp();
            num += p * c.membership[concept].prob_present();
            den += p;
        }
        if den > 0.0 {
            (num / den).clamp(0.0, 1.0)
        } else {
            self.concept_prior(concept)
        }
    }

    /// Posterior that `x` came from a component relevant to `concept` (flag `1` or `*`),
    /// given that it was drawn under `flags`.
    pub fn relevance_posterior(&self, x: &[f64], concept: usize, flags: &[u8]) -> Result<f64> {
        let idx = self.compatible(flags)?;
        let logs: Vec<f64> = idx.iter().map(|&j| self.comps[j].log_weight + self.comps[j].log_density(x)).collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut num = 0.0;
        let mut den = 0.0;
        for (&j, l) in idx.iter().zip(&logs) {
            let p = (l - m).exp();
            if self.comps[j].membership[concept] != Membership::Absent {
                num += p;
            }
            den += p;
        }
        Ok(if den > 0.0 { num / den } else { 0.0 })
    }

    /// Joint densities `(p(x, C = 1), p(x, C = 0))` for one concept.
    pub fn concept_joint_density(&self, x: &[f64], concept: usize) -> (f64, f64) {
        let mut p1 = 0.0;
        let mut p0 = 0.0;
        for c in &self.comps {
            let p = c.weight * c.log_density(x).exp();
            let pi = c.membership[concept].prob_present();
            p1 += p * pi;
            p0 += p * (1.0 - pi);
        }
        (p1, p0)
    }

    /// Box covering every component mean plus `sigmas` marginal standard deviations.
    pub fn bounding_box(&self, sigmas: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for c in &self.comps {
            for i in 0..d {
                let var: f64 = (0..=i).map(|k| c.chol[i * d + k].powi(2)).sum();
                lo[i] = lo[i].min(c.mean[i] - sigmas * var.sqrt());
                hi[i] = hi[i].max(c.mean[i] + sigmas * var.sqrt());
            }
        }
        (lo, hi)
    }

    pub fn n_components(&self) -> usize {
        self.comps.len()
    }

    /// Exact mean and row-major covariance of `X | flags`.
    pub fn conditional_moments(&self, flags: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
        let idx = self.compatible(flags)?;
        let d = self.dim;
        let total: f64 = idx.iter().map(|&j| self.comps[j].weight).sum();
        let mut mean = vec![0.0; d];
        let mut second = vec![0.0; d * d];
        for &j in &idx {
            let c = &self.comps[j];
            let w = c.weight / total;
            for a in 0..d {
                mean[a] += w * c.mean[a];
                for b in 0..d {
                    let s: f64 = (0..d).map(|k| c.chol[a * d + k] * c.chol[b * d + k]).sum();
                    second[a * d + b] += w * (s + c.mean[a] * c.mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                second[a * d + b] -= mean[a] * mean[b];
            }
        }
        Ok((mean, second))
    }

    /// Whether component `j` is relevant to `concept`.
    pub fn component_relevant(&self, j: usize, concept: usize) -> bool {
        self.comps[j].membership[concept] != Membership::Absent
    }

    fn draw_from(&self, j: usize, rng: &mut impl Rng, out: &mut [f64]) {
        let c = &self.comps[j];
        let d = self.dim;
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            let mut s = c.mean[i];
            for k in 0..=i {
                s += c.chol[i * d + k] * z[k];
            }
            out[i] = s;
        }
    }

    fn pick(&self, candidates: &[usize], rng: &mut impl Rng) -> usize {
        let total: f64 = candidates.iter().map(|&j| self.comps[j].weight).sum();
        let mut u = rng.random::<f64>() * total;
        for &j in candidates {
            u -= self.comps[j].weight;
            if u < 0.0 {
                return j;
            }
        }
        *candidates.last().expect("non-empty candidate list")
    }

    /// `n` draws from `X | flags`, with the component each came from.
    pub fn sample_conditional(&self, flags: &[u8], n: usize, rng: &mut impl Rng) -> Result<(Matrix, Vec<usize>)> {
        let idx = self.compatible(flags)?;
        let mut m = Matrix::zeros(n, self.dim);
        let mut comps = Vec::with_capacity(n);
        for r in 0..n {
            let j = self.pick(&idx, rng);
            self.draw_from(j, rng, m.row_mut(r));
            comps.push(j);
        }
        Ok((m, comps))
    }

    /// `n` labelled draws from the full mixture.
    pub fn sample_labelled(&self, n: usize, rng: &mut impl Rng) -> LabeledDataset {
        let all: Vec<usize> = (0..self.comps.len()).collect();
        let mut points = Matrix::zeros(n, self.dim);
        let mut flags = Vec::with_capacity(n);
        let mut components = Vec::with_capacity(n);
        for r in 0..n {
            let j = self.pick(&all, rng);
            self.draw_from(j, rng, points.row_mut(r));
            let f: Flags = self.comps[j]
                .membership
                .iter()
                .map(|m| match m {
                    Membership::Absent => 0,
                    Membership::Present => 1,
                    Membership::Shared => u8::from(rng.random::<bool>()),
                })
                .collect();
            flags.push(f);
            components.push(j);
        }
        LabeledDataset {
            points,
            flags,
            components,
        }
    }
}

/// Points with their concept flags and (oracle-only) source component.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub points: Matrix,
    pub flags: Vec<Flags>,
    pub components: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Indices of points whose flags for `concepts` are all zero.
    pub fn neutral_indices(&self, concepts: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| concepts.iter().all(|&c| self.flags[i][c] == 0))
            .collect()
    }

    /// Rows whose flag for `concept` equals `value`.
    pub fn points_with_flag(&self, concept: usize, value: u8) -> Matrix {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.flags[i][concept] == value).collect();
        self.points.select_rows(&idx)
    }
}

/// Train and held-out splits drawn from one mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub mixture: MixtureSpec,
    pub train: LabeledDataset,
    pub heldout: LabeledDataset,
}

impl DatasetBundle {
    pub fn generate(mixture: &MixtureSpec, n_train: usize, n_heldout: usize, seed: u64) -> Result<Self> {
        let prepared = mixture.prepare()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = prepared.sample_labelled(n_train, &mut rng);
        let heldout = prepared.sample_labelled(n_heldout, &mut rng);
        Ok(Self {
            mixture: mixture.clone(),
            train,
            heldout,
        })
    }
}
