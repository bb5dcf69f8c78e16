//! Histogram estimators and closed-form information bounds.
//!
//! All quantities are in nats. Continuous samples are discretized on a
//! rectangular grid; samples outside the grid land in a single overflow cell
//! that takes part in every estimate like any other cell.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, LabError, Result};
use crate::nn::Matrix;

/// Rectangular binning of `R^d`, plus one overflow cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: Vec<usize>,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, bins: Vec<usize>) -> Result<Self> {
        ensure(lo.len() == hi.len() && lo.len() == bins.len() && !lo.is_empty(), || {
            LabError::Shape("grid bounds and bin counts must share one dimension".into())
        })?;
        ensure(lo.iter().zip(&hi).all(|(a, b)| a < b && a.is_finite() && b.is_finite()), || {
            LabError::InvalidArgument("grid needs finite lo < hi per dimension".into())
        })?;
        ensure(bins.iter().all(|&b| b >= 1), || LabError::InvalidArgument("grid needs >= 1 bin per dimension".into()))?;
        Ok(Self { lo, hi, bins })
    }

    /// Box spanning the `[q, 1 - q]` quantiles of the pooled samples in each dimension.
    pub fn percentile_box(samples: &[&Matrix], bins: usize, q: f64) -> Result<Self> {
        let d = samples.first().map_or(0, |m| m.cols());
        let total: usize = samples.iter().map(|m| m.rows()).sum();
        ensure(total > 0 && d > 0, || LabError::Empty("no samples to place a grid on".into()))?;
        let mut lo = Vec::with_capacity(d);
        let mut hi = Vec::with_capacity(d);
        for j in 0..d {
            let mut col: Vec<f64> = samples.iter().flat_map(|m| m.iter_rows().map(move |r| r[j])).collect();
            col.sort_by(f64::total_cmp);
            let at = |p: f64| col[((p * (col.len() - 1) as f64).round() as usize).min(col.len() - 1)];
            let (mut a, mut b) = (at(q), at(1.0 - q));
            if b - a < 1e-9 {
                a -= 0.5;
                b += 0.5;
            }
            lo.push(a);
            hi.push(b);
        }
        Self::new(lo, hi, vec![bins; d])
    }

    pub fn dim(&self) -> usize {
        self.bins.len()
    }

    /// Regular cells, excluding overflow.
    pub fn cells(&self) -> usize {
        self.bins.iter().product()
    }

    /// Index of the overflow cell.
    pub fn overflow(&self) -> usize {
        self.cells()
    }

    /// Flat cell index of `x`, or the overflow index when it falls outside the box.
    pub fn locate(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for j in 0..self.dim() {
            let v = x[j];
            if !(v >= self.lo[j] && v <= self.hi[j]) {
                return self.overflow();
            }
            let w = (self.hi[j] - self.lo[j]) / self.bins[j] as f64;
            let b = (((v - self.lo[j]) / w) as usize).min(self.bins[j] - 1);
            idx = idx * self.bins[j] + b;
        }
        idx
    }
}

/// Counts over `labels x (cells + overflow)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointHistogram {
    pub labels: usize,
    pub width: usize,
    pub counts: Vec<f64>,
    pub grid: Option<GridSpec>,
}

impl JointHistogram {
    /// Builds a joint from continuous samples, one matrix per label.
    pub fn from_samples(grid: &GridSpec, per_label: &[&Matrix]) -> Result<Self> {
        ensure(!per_label.is_empty(), || LabError::Empty("joint histogram needs at least one label".into()))?;
        let width = grid.cells() + 1;
        let mut counts = vec![0.0; per_label.len() * width];
        for (c, m) in per_label.iter().enumerate() {
            ensure(m.cols() == grid.dim(), || LabError::Shape("samples and grid differ in dimension".into()))?;
            for r in m.iter_rows() {
                counts[c * width + grid.locate(r)] += 1.0;
            }
        }
        Ok(Self {
            labels: per_label.len(),
            width,
            counts,
            grid: Some(grid.clone()),
        })
    }

    /// Builds a joint from a table of non-negative weights, `table[label][cell]`.
    pub fn from_table(table: &[Vec<f64>]) -> Result<Self> {
        let width = table.first().map_or(0, Vec::len);
        ensure(!table.is_empty() && width > 0, || LabError::Empty("empty table".into()))?;
        ensure(table.iter().all(|r| r.len() == width), || LabError::Shape("ragged table".into()))?;
        ensure(table.iter().flatten().all(|&v| v >= 0.0 && v.is_finite()), || {
            LabError::InvalidArgument("table entries must be finite and non-negative".into())
        })?;
        Ok(Self {
            labels: table.len(),
            width,
            counts: table.iter().flatten().copied().collect(),
            grid: None,
        })
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn row(&self, label: usize) -> &[f64] {
        &self.counts[label * self.width..(label + 1) * self.width]
    }

    pub fn label_totals(&self) -> Vec<f64> {
        (0..self.labels).map(|c| self.row(c).iter().sum()).collect()
    }

    /// Pooled counts over all labels.
    pub fn marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.width];
        for c in 0..self.labels {
            for (a, b) in m.iter_mut().zip(self.row(c)) {
                *a += b;
            }
        }
        m
    }

    /// Mass in the overflow cell; only meaningful for sample-built joints.
    pub fn overflow_fraction(&self) -> f64 {
        if self.grid.is_none() {
            return 0.0;
        }
        let o = self.width - 1;
        (0..self.labels).map(|c| self.row(c)[o]).sum::<f64>() / self.total().max(1.0)
    }

    fn same_layout(&self, other: &JointHistogram) -> bool {
        self.width == other.width && self.grid == other.grid
    }
}

/// Converts an information quantity from nats to bits.
pub fn nats_to_bits(nats: f64) -> f64 {
    nats / LN_2
}

/// Binary entropy in nats, with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

fn plugin_mi_raw(joint: &JointHistogram) -> Result<f64> {
    let total = joint.total();
    ensure(total > 0.0, || LabError::Empty("mutual information of an empty histogram".into()))?;
    let pc = joint.label_totals();
    let px = joint.marginal();
    let mut mi = 0.0;
    for c in 0..joint.labels {
        for (x, &n) in joint.row(c).iter().enumerate() {
            if n > 0.0 {
                mi += n / total * (n * total / (pc[c] * px[x])).ln();
            }
        }
    }
    Ok(mi)
}

/// Plug-in `I(C; X)` from joint counts: `sum p(c,x) ln[p(c,x) / (p(c) p(x))]`.
/// Rounding dust below zero is clipped to zero.
pub fn plugin_mi(joint: &JointHistogram) -> Result<f64> {
    Ok(plugin_mi_raw(joint)?.max(0.0))
}

/// `I(C; X | C') = sum_c' p(c') I(C; X | C' = c')`, one joint per value of `C'`.
pub fn conditional_mi(slices: &[JointHistogram]) -> Result<f64> {
    ensure(!slices.is_empty(), || LabError::Empty("conditional MI needs at least one slice".into()))?;
    let grand: f64 = slices.iter().map(JointHistogram::total).sum();
    let mut acc = 0.0;
    for (i, s) in slices.iter().enumerate() {
        ensure(s.total() > 0.0, || LabError::Empty(format!("conditioning slice {i} is empty")))?;
        acc += s.total() / grand * plugin_mi(s)?;
    }
    Ok(acc)
}

/// `1/2 sum |p_a - p_b|` between two normalized count vectors on the same cells.
pub fn tv_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure(a.len() == b.len(), || LabError::Shape(format!("histograms with {} and {} cells", a.len(), b.len())))?;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    ensure(sa > 0.0 && sb > 0.0, || LabError::Empty("total variation of an empty histogram".into()))?;
    let tv = 0.5 * a.iter().zip(b).map(|(x, y)| (x / sa - y / sb).abs()).sum::<f64>();
    Ok(tv.clamp(0.0, 1.0))
}

/// Total variation between the rows of a two-label joint.
pub fn tv_between_labels(joint: &JointHistogram) -> Result<f64> {
    ensure(joint.labels == 2, || LabError::Shape("total variation needs exactly two labels".into()))?;
    tv_distance(joint.row(0), joint.row(1))
}

/// `ln 2 - mean H_b(D*(x))` over posterior samples.
pub fn entropy_bound(posteriors: &[f64]) -> Result<f64> {
    ensure(!posteriors.is_empty(), || LabError::Empty("entropy bound needs posteriors".into()))?;
    ensure(posteriors.iter().all(|p| (0.0..=1.0).contains(p)), || {
        LabError::InvalidArgument("posteriors must lie in [0, 1]".into())
    })?;
    let mean_h = posteriors.iter().map(|&p| binary_entropy(p)).sum::<f64>() / posteriors.len() as f64;
    Ok((LN_2 - mean_h).max(0.0))
}

/// `ln 2 - H_b(e)` for a classifier error `e` in `[0, 0.5]`.
pub fn fano_bound(e: f64) -> Result<f64> {
    ensure((0.0..=0.5).contains(&e), || {
        LabError::InvalidArgument(format!("classifier error {e} outside [0, 0.5]; flip the classifier"))
    })?;
    Ok(LN_2 - binary_entropy(e))
}

/// `ln(1 / (1 - 2e))`, the leakage bound in its printed form. Kept only as a
/// diagnostic: it diverges as `e -> 0.5` and vanishes as `e -> 0`.
pub fn literal_leakage_bound(e: f64) -> Result<f64> {
    ensure((0.0..0.5).contains(&e), || LabError::InvalidArgument(format!("error {e} outside [0, 0.5)")))?;
    Ok(-(1.0 - 2.0 * e).ln())
}

/// `eps ln(2 / eps)` for total variation `eps` in `[0, 1]`; zero at `eps = 0`.
pub fn pinsker_eps_bound(eps: f64) -> Result<f64> {
    ensure((0.0..=1.0).contains(&eps), || LabError::InvalidArgument(format!("epsilon {eps} outside [0, 1]")))?;
    if eps == 0.0 {
        return Ok(0.0);
    }
    Ok(eps * (2.0 / eps).ln())
}

/// `c (d_cap + ln(1/delta)) / eps^2`, before rounding up.
pub fn sample_complexity_raw(d_cap: f64, eps: f64, delta: f64, c: f64) -> Result<f64> {
    ensure(eps > 0.0 && eps < 1.0, || LabError::InvalidArgument(format!("epsilon {eps} outside (0, 1)")))?;
    ensure(delta > 0.0 && delta < 1.0, || LabError::InvalidArgument(format!("delta {delta} outside (0, 1)")))?;
    ensure(d_cap >= 1.0, || LabError::InvalidArgument("capacity must be >= 1".into()))?;
    ensure(c > 0.0 && c.is_finite(), || LabError::InvalidArgument("constant must be positive".into()))?;
    Ok(c * (d_cap + (1.0 / delta).ln()) / (eps * eps))
}

pub fn sample_complexity(d_cap: f64, eps: f64, delta: f64, c: f64) -> Result<u64> {
    Ok(sample_complexity_raw(d_cap, eps, delta, c)?.ceil() as u64)
}

/// Constant `c` that makes the sample-complexity formula reproduce a fitted
/// `gap(n) = a / sqrt(n)` curve at `gap = eps`: `n = a^2 / eps^2`.
pub fn calibrate_sample_constant(gap_coefficient: f64, d_cap: f64, delta: f64) -> Result<f64> {
    ensure(gap_coefficient > 0.0, || LabError::InvalidArgument("gap coefficient must be positive".into()))?;
    ensure(d_cap >= 1.0 && delta > 0.0 && delta < 1.0, || LabError::InvalidArgument("bad capacity or delta".into()))?;
    Ok(gap_coefficient * gap_coefficient / (d_cap + (1.0 / delta).ln()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubadditivityReport {
    pub per_concept: Vec<f64>,
    pub sum: f64,
    pub joint: f64,
    pub slack: f64,
    pub holds: bool,
}

/// Compares `I(C_1..C_k; X)` (from `full`, one label per flag tuple) against
/// `sum_i I(C_i; X)`.
pub fn subadditivity_check(per_concept: &[JointHistogram], full: &JointHistogram, slack: f64) -> Result<SubadditivityReport> {
    ensure(!per_concept.is_empty(), || LabError::Empty("no per-concept joints".into()))?;
    ensure(per_concept.iter().all(|j| j.same_layout(full)), || {
        LabError::Shape("per-concept and full joints use different grids".into())
    })?;
    let per: Vec<f64> = per_concept.iter().map(plugin_mi).collect::<Result<_>>()?;
    let sum = per.iter().sum();
    let joint = plugin_mi(full)?;
    Ok(SubadditivityReport {
        per_concept: per,
        sum,
        joint,
        slack,
        holds: joint <= sum + slack,
    })
}

/// One named estimate with the inputs that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub value: f64,
    pub slack: f64,
    pub inputs: String,
    pub flags: Vec<String>,
}

impl BoundReport {
    pub fn new(name: &str, value: f64, slack: f64, inputs: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            slack,
            inputs: inputs.into(),
            flags: Vec::new(),
        }
    }

    pub fn flag(mut self, f: impl Into<String>) -> Self {
        self.flags.push(f.into());
        self
    }
}

/// Slack the bound chain allows at the reference budget of 1e5 samples.
pub const DEFAULT_SLACK: f64 = 0.02;

/// Minimum mean samples per regular cell before the grid is coarsened.
pub const MIN_MEAN_OCCUPANCY: f64 = 10.0;

/// Places a percentile box with `bins` per dimension, coarsening when the
/// mean occupancy would fall below [`MIN_MEAN_OCCUPANCY`]. Returns the grid and
/// whether it was coarsened.
pub fn adaptive_grid(samples: &[&Matrix], bins: usize, q: f64) -> Result<(GridSpec, bool)> {
    let total: usize = samples.iter().map(|m| m.rows()).sum();
    let d = samples.first().map_or(1, |m| m.cols()).max(1);
    let max_cells = (total as f64 / MIN_MEAN_OCCUPANCY).max(1.0);
    let affordable = max_cells.powf(1.0 / d as f64).floor() as usize;
    let b = bins.min(affordable.max(2));
    Ok((GridSpec::percentile_box(samples, b, q)?, b < bins))
}

/// Upper 95% deviation of the plug-in MI under bootstrap resampling of each label's samples.
pub fn bootstrap_mi_slack(grid: &GridSpec, per_label: &[&Matrix], resamples: usize, seed: u64) -> Result<f64> {
    let point = plugin_mi(&JointHistogram::from_samples(grid, per_label)?)?;
    let cells: Vec<Vec<usize>> = per_label.iter().map(|m| m.iter_rows().map(|r| grid.locate(r)).collect()).collect();
    let width = grid.cells() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut devs = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut counts = vec![0.0; per_label.len() * width];
        for (c, idx) in cells.iter().enumerate() {
            for _ in 0..idx.len() {
                counts[c * width + idx[rng.random_range(0..idx.len())]] += 1.0;
            }
        }
        let j = JointHistogram {
            labels: per_label.len(),
            width,
            counts,
            grid: Some(grid.clone()),
        };
        devs.push((plugin_mi(&j)? - point).abs());
    }
    devs.sort_by(f64::total_cmp);
    Ok(devs.get(((0.95 * resamples as f64) as usize).min(resamples.saturating_sub(1))).copied().unwrap_or(0.0))
}

/// Sample budget at which [`DEFAULT_SLACK`] applies.
pub const REFERENCE_BUDGET: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakageAudit {
    /// Exactly `plugin_mi, entropy_bound, fano_bound, tv, pinsker, l_adv_final`.
    pub reports: Vec<BoundReport>,
    /// The printed leakage bound, kept apart from the operative chain.
    pub diagnostics: Vec<BoundReport>,
    pub slack: f64,
    pub probe_error: f64,
    /// Every claimed upper bound is at least `plugin_mi - slack`.
    pub ordering_holds: bool,
    /// Same, over entropy and Pinsker only. Fano is a floor under I, so it
    /// can sit below a leaky model's plug-in MI without anything being wrong.
    pub upper_bounds_hold: bool,
}

impl LeakageAudit {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.reports.iter().find(|r| r.name == name).map(|r| r.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    /// Total generations, split evenly between concept on and off.
    pub sample_budget: usize,
    pub bins: usize,
    pub bootstrap_resamples: usize,
    pub probe: crate::adversary::ProbeConfig,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            sample_budget: REFERENCE_BUDGET,
            bins: 40,
            bootstrap_resamples: 200,
            probe: crate::adversary::ProbeConfig::default(),
            seed: 0,
        }
    }
}

/// Runs the whole bound chain for one concept on a single sample set drawn
/// from `model`. `l_adv_final` is the last recorded adversarial loss, if any.
pub fn leakage_audit(
    model: &crate::diffusion::DiffusionModel,
    concept: usize,
    l_adv_final: Option<f64>,
    cfg: &AuditConfig,
) -> Result<LeakageAudit> {
    use crate::adversary::{single_flag, train_probe};
    ensure(concept < model.n_concepts, || LabError::InvalidArgument(format!("no concept {concept}")))?;
    let n = cfg.sample_budget / 2;
    ensure(n >= 100, || LabError::InsufficientSamples(format!("audit budget {} too small", cfg.sample_budget)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pos = model.sample(&single_flag(model.n_concepts, concept, 1), &mut rng, n)?;
    let neg = model.sample(&single_flag(model.n_concepts, concept, 0), &mut rng, n)?;
    let (grid, coarsened) = adaptive_grid(&[&pos, &neg], cfg.bins, 0.005)?;
    let joint = JointHistogram::from_samples(&grid, &[&pos, &neg])?;
    let mi = plugin_mi(&joint)?;
    let slack = if cfg.sample_budget == REFERENCE_BUDGET {
        DEFAULT_SLACK
    } else {
        DEFAULT_SLACK.max(bootstrap_mi_slack(&grid, &[&pos, &neg], cfg.bootstrap_resamples, cfg.seed ^ 0xb007)?)
    };
    let inputs = format!(
        "n_per_flag={n};bins={};overflow={:.4};seed={}",
        grid.bins[0],
        joint.overflow_fraction(),
        cfg.seed
    );
    let fit = train_probe(&pos, &neg, &crate::adversary::ProbeConfig { seed: cfg.seed ^ 0x9b, ..cfg.probe.clone() })?;
    let mut e = fit.error();
    let flipped = e > 0.5;
    if flipped {
        e = 1.0 - e;
    }
    let mut post = fit.probe.probabilities(&pos)?;
    post.extend(fit.probe.probabilities(&neg)?);
    let ent = entropy_bound(&post)?;
    let fano = fano_bound(e)?;
    let tv = tv_between_labels(&joint)?;
    let pinsker = pinsker_eps_bound(tv)?;

    let mut mi_report = BoundReport::new("plugin_mi", mi, slack, inputs.clone());
    if coarsened {
        mi_report = mi_report.flag("coarsened_grid");
    }
    let check = |r: BoundReport| {
        if r.value < mi - slack {
            r.flag("below_plugin_mi")
        } else {
            r
        }
    };
    let mut fano_report = check(BoundReport::new("fano_bound", fano, slack, format!("{inputs};probe_error={e:.6}")));
    if flipped {
        fano_report = fano_report.flag("probe_flipped");
    }
    let ent_report = check(BoundReport::new("entropy_bound", ent, slack, format!("{inputs};probe_posteriors")));
    let pinsker_report = check(BoundReport::new("pinsker", pinsker, slack, format!("{inputs};tv={tv:.6}")));
    let clean = |r: &BoundReport| !r.flags.iter().any(|f| f == "below_plugin_mi");
    let upper_bounds_hold = clean(&ent_report) && clean(&pinsker_report);
    let ordering_holds = upper_bounds_hold && clean(&fano_report);
    let l_adv = match l_adv_final {
        Some(v) => BoundReport::new("l_adv_final", v, 0.0, "recorded"),
        None => BoundReport::new("l_adv_final", f64::NAN, 0.0, "none").flag("not_recorded"),
    };
    let literal = match literal_leakage_bound(e) {
        Ok(v) => BoundReport::new("literal_leakage", v, 0.0, format!("probe_error={e:.6}")),
        Err(_) => BoundReport::new("literal_leakage", f64::INFINITY, 0.0, format!("probe_error={e:.6}")).flag("diverges"),
    }
    .flag("diagnostic");
    Ok(LeakageAudit {
        reports: vec![
            mi_report,
            ent_report,
            fano_report,
            BoundReport::new("tv", tv, 0.0, inputs),
            pinsker_report,
            l_adv,
        ],
        diagnostics: vec![literal],
        slack,
        probe_error: e,
        ordering_holds,
        upper_bounds_hold,
    })
}
