//! Adversarial concept erasure: discriminator, losses, saliency masking and
//! the alternating training loop.
//!
//! The generator side is a one-step surrogate of the sampler. A clean point
//! `x0` is drawn from the pooled training set, noised to `z_t`, and the edited
//! noise predictor turns it back into `x0_hat` under a prompt whose target
//! flags are assigned in a balanced pattern. The discriminator sees `x0_hat`
//! (plus the retained, non-target flags) and guesses each target flag.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Flags, LabeledDataset, MixtureSpec};
use crate::diffusion::{noise_with_alpha_bar, AnchorWindow, Batch, DiffusionModel, NoiseDraw};
use crate::error::{ensure, LabError, Result};
use crate::nn::{adamw_step, sigmoid, Activation, AdamWConfig, AdamWState, DenseNet, ForwardCache, GradBuffer, Matrix};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside every log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvForm {
    /// `-E_c[log(1 - D)] - E_neutral[log D]`.
    Literal,
    /// `E_c[log D] + E_neutral[log(1 - D)]`, the negated discriminator cross-entropy.
    Symmetric,
}

/// Where the neutral-prompt generations shown to the discriminator come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeutralReference {
    /// The edited model, with adversarial gradient flowing through its neutral term.
    Edited,
    /// The edited model, but its neutral term passes no gradient to the generator.
    Detached,
    /// The frozen base model `theta_0`; the neutral term is then constant in `theta`.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    Global,
    PerLayer,
}

/// Architecture of the discriminator, shared by every probe that attacks it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Feed `t / T` of the surrogate step as an extra input.
    pub time_input: bool,
    /// Feed the noisy point `z_t` the generation started from as extra inputs.
    pub noisy_input: bool,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            time_input: false,
            noisy_input: false,
        }
    }
}

/// Binary classifier with one logit per head over points plus side features.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub dim: usize,
    pub side_features: usize,
    pub heads: usize,
    pub net: DenseNet,
}

impl Discriminator {
    pub fn new(spec: &DiscriminatorSpec, dim: usize, side_features: usize, heads: usize, seed: u64) -> Result<Self> {
        ensure(heads >= 1 && dim >= 1, || LabError::InvalidArgument("discriminator needs a head and an input".into()))?;
        let inputs = dim + side_features + usize::from(spec.time_input);
        let mut sizes = vec![inputs];
        sizes.extend(&spec.hidden);
        sizes.push(heads);
        let mut acts = vec![spec.activation; spec.hidden.len()];
        acts.push(Activation::Identity);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            spec: spec.clone(),
            dim,
            side_features,
            heads,
            net: DenseNet::init_with_rng(&sizes, &acts, &mut rng)?,
        })
    }

    pub fn input_width(&self) -> usize {
        self.net.input_size()
    }

    /// Assembles input rows: points, side features, then `t / T` when enabled.
    pub fn input(&self, x: &Matrix, side: &[Vec<f64>], time: Option<&[f64]>) -> Result<Matrix> {
        ensure(x.cols() == self.dim, || LabError::Shape(format!("discriminator expects {}-d points", self.dim)))?;
        ensure(side.len() == x.rows() && side.iter().all(|s| s.len() == self.side_features), || {
            LabError::Shape("side features do not match the batch".into())
        })?;
        let mut m = Matrix::zeros(x.rows(), self.input_width());
        for r in 0..x.rows() {
            let row = m.row_mut(r);
            row[..self.dim].copy_from_slice(x.row(r));
            row[self.dim..self.dim + self.side_features].copy_from_slice(&side[r]);
            if self.spec.time_input {
                let t = time.ok_or_else(|| LabError::InvalidArgument("discriminator needs timesteps".into()))?;
                row[self.dim + self.side_features] = t[r];
            }
        }
        Ok(m)
    }

    /// Clamped head probabilities, one column per head.
    pub fn probabilities(&self, input: &Matrix) -> Result<Matrix> {
        let mut out = self.net.predict(input)?;
        out.data_mut().iter_mut().for_each(|v| *v = clamp_prob(sigmoid(*v)));
        Ok(out)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Generator(AdvForm),
    Discriminator,
}

struct HeadTerms {
    loss: f64,
    /// d loss / d logit, rows x heads.
    upstream: Matrix,
    cache: ForwardCache,
    correct: usize,
}

/// Loss over all heads for rows labelled per head, with its logit gradient.
fn head_terms(disc: &Discriminator, input: &Matrix, labels: &[Flags], objective: Objective) -> Result<HeadTerms> {
    ensure(labels.len() == input.rows(), || LabError::Shape("one label row per input row".into()))?;
    ensure(labels.iter().all(|l| l.len() == disc.heads), || LabError::Shape("one label per head".into()))?;
    let (logits, cache) = disc.net.forward(input)?;
    let mut upstream = Matrix::zeros(input.rows(), disc.heads);
    let mut loss = 0.0;
    let mut correct = 0;
    for h in 0..disc.heads {
        let n1 = labels.iter().filter(|l| l[h] == 1).count();
        let n0 = labels.len() - n1;
        ensure(n1 > 0 && n0 > 0, || LabError::Empty(format!("head {h} needs both concept and neutral rows")))?;
        for (r, l) in labels.iter().enumerate() {
            let raw = sigmoid(logits.get(r, h));
            let p = clamp_prob(raw);
            let live = if raw == p { 1.0 } else { 0.0 };
            let positive = l[h] == 1;
            correct += usize::from((p > 0.5) == positive);
            let (term, dlogit) = match (objective, positive) {
                (Objective::Generator(AdvForm::Literal), true) => (-(1.0 - p).ln() / n1 as f64, p / n1 as f64),
                (Objective::Generator(AdvForm::Literal), false) => (-p.ln() / n0 as f64, -(1.0 - p) / n0 as f64),
                (Objective::Generator(AdvForm::Symmetric), true) => (p.ln() / n1 as f64, (1.0 - p) / n1 as f64),
                (Objective::Generator(AdvForm::Symmetric), false) => ((1.0 - p).ln() / n0 as f64, -p / n0 as f64),
                (Objective::Discriminator, true) => (-p.ln() / n1 as f64, -(1.0 - p) / n1 as f64),
                (Objective::Discriminator, false) => (-(1.0 - p).ln() / n0 as f64, p / n0 as f64),
            };
            loss += term;
            upstream.set(r, h, dlogit * live);
        }
    }
    Ok(HeadTerms {
        loss,
        upstream,
        cache,
        correct,
    })
}

fn stack_two(disc: &Discriminator, concept: &Matrix, neutral: &Matrix) -> Result<(Matrix, Vec<Flags>)> {
    ensure(concept.rows() > 0 && neutral.rows() > 0, || LabError::Empty("adversarial batches must be nonempty".into()))?;
    ensure(disc.heads == 1, || LabError::Shape("two-batch losses use a single-head discriminator".into()))?;
    let input = Matrix::vstack(&[concept, neutral])?;
    let labels = (0..input.rows()).map(|r| vec![u8::from(r < concept.rows())]).collect();
    Ok((input, labels))
}

/// Generator-side adversarial loss and its gradient with respect to each
/// discriminator input row (concept rows first, then neutral rows).
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialLoss {
    pub value: f64,
    pub grad_concept: Matrix,
    pub grad_neutral: Matrix,
}

/// `L_adv` for discriminator input rows produced under the concept and the
/// neutral prompt. The discriminator is read, never updated.
pub fn adversarial_loss(disc: &Discriminator, concept: &Matrix, neutral: &Matrix, form: AdvForm) -> Result<AdversarialLoss> {
    let (input, labels) = stack_two(disc, concept, neutral)?;
    let terms = head_terms(disc, &input, &labels, Objective::Generator(form))?;
    let (_, dx) = disc.net.backward(&terms.cache, &terms.upstream)?;
    let rows: Vec<usize> = (0..concept.rows()).collect();
    let rest: Vec<usize> = (concept.rows()..input.rows()).collect();
    Ok(AdversarialLoss {
        value: terms.loss,
        grad_concept: dx.select_rows(&rows),
        grad_neutral: dx.select_rows(&rest),
    })
}

/// Binary cross-entropy of the discriminator (concept = 1, neutral = 0) and its parameter gradient.
pub fn discriminator_loss(disc: &Discriminator, concept: &Matrix, neutral: &Matrix) -> Result<(f64, GradBuffer)> {
    let (input, labels) = stack_two(disc, concept, neutral)?;
    let terms = head_terms(disc, &input, &labels, Objective::Discriminator)?;
    let (g, _) = disc.net.backward(&terms.cache, &terms.upstream)?;
    Ok((terms.loss, g))
}

/// Cross-entropy over arbitrary labelled input rows, summed over heads.
pub(crate) fn classifier_loss(disc: &Discriminator, input: &Matrix, labels: &[Flags]) -> Result<(f64, GradBuffer)> {
    let terms = head_terms(disc, input, labels, Objective::Discriminator)?;
    let (g, _) = disc.net.backward(&terms.cache, &terms.upstream)?;
    Ok((terms.loss, g))
}

/// `L_adv + lambda L_traj`, with gradients combined by the same weights.
pub fn total_loss(
    l_adv: f64,
    g_adv: &GradBuffer,
    l_traj: f64,
    g_traj: &GradBuffer,
    lambda: f64,
) -> Result<(f64, GradBuffer)> {
    ensure(l_adv.is_finite() && l_traj.is_finite(), || LabError::NonFinite("loss component".into()))?;
    let mut g = g_adv.clone();
    g.add_scaled(g_traj, lambda)?;
    Ok((l_adv + lambda * l_traj, g))
}

/// Boolean selector over the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "MaskRepr", try_from = "MaskRepr")]
pub struct SaliencyMask {
    selected: Vec<bool>,
    selected_count: usize,
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    parameter_count: usize,
    indices: Vec<usize>,
}

impl From<SaliencyMask> for MaskRepr {
    fn from(m: SaliencyMask) -> Self {
        MaskRepr {
            parameter_count: m.selected.len(),
            indices: m.indices(),
        }
    }
}

impl TryFrom<MaskRepr> for SaliencyMask {
    type Error = LabError;

    fn try_from(r: MaskRepr) -> Result<Self> {
        SaliencyMask::from_indices(r.parameter_count, &r.indices)
    }
}

impl SaliencyMask {
    pub fn from_indices(parameter_count: usize, indices: &[usize]) -> Result<Self> {
        let mut selected = vec![false; parameter_count];
        for &i in indices {
            ensure(i < parameter_count, || LabError::Shape(format!("mask index {i} out of range")))?;
            selected[i] = true;
        }
        let selected_count = selected.iter().filter(|&&b| b).count();
        Ok(Self { selected, selected_count })
    }

    pub fn all(parameter_count: usize) -> Self {
        Self {
            selected: vec![true; parameter_count],
            selected_count: parameter_count,
        }
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.selected
    }

    pub fn selected_count(&self) -> usize {
        self.selected_count
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.selected.len()).filter(|&i| self.selected[i]).collect()
    }
}

/// Number of entries selected by a fraction `k` of `n`: `ceil(k n)`, guarded
/// against representation error in `k`.
pub fn topk_count(n: usize, k: f64) -> usize {
    ((k * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn topk_indices(scores: &[f64], k: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(topk_count(scores.len(), k));
    order
}

/// The `ceil(k N)` highest scores; ties go to the lower index.
pub fn topk_mask(scores: &[f64], k: f64) -> Result<SaliencyMask> {
    ensure((0.0..=1.0).contains(&k), || LabError::InvalidArgument(format!("k = {k} outside [0, 1]")))?;
    ensure(scores.iter().all(|s| s.is_finite()), || LabError::NonFinite("saliency scores".into()))?;
    SaliencyMask::from_indices(scores.len(), &topk_indices(scores, k))
}

/// Top-`k` within each layer's block of weights and biases.
pub fn topk_mask_per_layer(scores: &[f64], k: f64, net: &DenseNet) -> Result<SaliencyMask> {
    ensure(scores.len() == net.parameter_count(), || LabError::Shape("one score per parameter".into()))?;
    topk_mask(scores, k)?;
    let mut chosen = Vec::new();
    for range in net.layer_ranges() {
        chosen.extend(topk_indices(&scores[range.clone()], k).into_iter().map(|i| i + range.start));
    }
    SaliencyMask::from_indices(scores.len(), &chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErasureConfig {
    /// Concepts to erase; empty means the first concept of the mixture.
    pub targets: Vec<String>,
    pub lambda: f64,
    pub k: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub t0_fraction: f64,
    pub anchor_window: AnchorWindow,
    pub seed: u64,
    pub saliency_warmup_steps: usize,
    pub saliency_batches: usize,
    pub disc_steps_per_gen: usize,
    pub mask_scope: MaskScope,
    pub adv_form: AdvForm,
    /// Multiplier on `L_adv`; zero trains on the trajectory term alone.
    pub adversarial_weight: f64,
    pub neutral_reference: NeutralReference,
    pub discriminator: DiscriminatorSpec,
    /// Samples per flag value for the held-out probe run after training; zero skips it.
    pub final_probe_samples: usize,
}

impl Default for ErasureConfig {
    fn default() -> Self {
        Self {
            targets: Vec::new(),
            lambda: 0.1,
            k: 0.05,
            iterations: 4000,
            batch_size: 256,
            generator_lr: 1e-3,
            discriminator_lr: 1e-3,
            t0_fraction: 0.3,
            anchor_window: AnchorWindow::Low,
            seed: 0,
            saliency_warmup_steps: 200,
            saliency_batches: 4,
            disc_steps_per_gen: 1,
            mask_scope: MaskScope::Global,
            adv_form: AdvForm::Literal,
            adversarial_weight: 1.0,
            neutral_reference: NeutralReference::Frozen,
            discriminator: DiscriminatorSpec {
                time_input: true,
                noisy_input: true,
                ..Default::default()
            },
            final_probe_samples: 2000,
        }
    }
}

impl ErasureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::InvalidArgument(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.k) {
            return bad("k must lie in [0, 1]");
        }
        if self.iterations < 1 {
            return bad("iterations must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if !(self.t0_fraction > 0.0 && self.t0_fraction <= 1.0) {
            return bad("t0_fraction must lie in (0, 1]");
        }
        if !(self.generator_lr > 0.0 && self.discriminator_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.disc_steps_per_gen < 1 || self.saliency_batches < 1 {
            return bad("disc_steps_per_gen and saliency_batches must be >= 1");
        }
        if !(self.adversarial_weight >= 0.0 && self.adversarial_weight.is_finite()) {
            return bad("adversarial_weight must be >= 0");
        }
        Ok(())
    }

    /// Indices of the target concepts in `mixture`.
    pub fn target_indices(&self, mixture: &MixtureSpec) -> Result<Vec<usize>> {
        if self.targets.is_empty() {
            ensure(mixture.n_concepts() >= 1, || LabError::InvalidArgument("mixture has no concepts".into()))?;
            return Ok(vec![0]);
        }
        let mut idx: Vec<usize> = self.targets.iter().map(|t| mixture.concept_index(t)).collect::<Result<_>>()?;
        idx.sort_unstable();
        idx.dedup();
        ensure(idx.len() <= 8, || LabError::InvalidArgument("at most 8 target concepts".into()))?;
        Ok(idx)
    }
}

/// The four configurations of the component ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSet {
    pub full: ErasureConfig,
    pub no_adv: ErasureConfig,
    pub no_traj: ErasureConfig,
    pub no_saliency: ErasureConfig,
}

impl AblationSet {
    pub fn named(&self) -> [(&'static str, &ErasureConfig); 4] {
        [
            ("full", &self.full),
            ("no_adv", &self.no_adv),
            ("no_traj", &self.no_traj),
            ("no_saliency", &self.no_saliency),
        ]
    }
}

pub fn ablation_variants(config: &ErasureConfig) -> Result<AblationSet> {
    config.validate()?;
    Ok(AblationSet {
        full: config.clone(),
        no_adv: ErasureConfig {
            adversarial_weight: 0.0,
            ..config.clone()
        },
        no_traj: ErasureConfig {
            lambda: 0.0,
            ..config.clone()
        },
        no_saliency: ErasureConfig {
            k: 1.0,
            ..config.clone()
        },
    })
}

/// Per-iteration training record.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ErasureReport {
    pub l_adv: Vec<f64>,
    pub l_traj: Vec<f64>,
    pub l_total: Vec<f64>,
    pub disc_loss: Vec<f64>,
    /// Discriminator accuracy on the generator batch, drawn after the discriminator step.
    pub disc_accuracy: Vec<f64>,
    pub final_probe_accuracy: Option<f64>,
    pub mask_size: usize,
    pub wall_time_secs: f64,
}

/// Equality ignores wall time.
impl PartialEq for ErasureReport {
    fn eq(&self, o: &Self) -> bool {
        self.l_adv == o.l_adv
            && self.l_traj == o.l_traj
            && self.l_total == o.l_total
            && self.disc_loss == o.disc_loss
            && self.disc_accuracy == o.disc_accuracy
            && self.final_probe_accuracy == o.final_probe_accuracy
            && self.mask_size == o.mask_size
    }
}

impl ErasureReport {
    pub fn iterations(&self) -> usize {
        self.l_total.len()
    }
}

/// Clean points, prompt flags and noise draws for one surrogate generation.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateBatch {
    pub x0: Matrix,
    pub flags: Vec<Flags>,
    pub draw: NoiseDraw,
}

/// Balanced target-flag pattern: row `j` gets the bits of `j mod 2^K`.
pub fn balanced_target_flags(row: usize, targets: &[usize], base: &[u8]) -> Flags {
    let mut f = base.to_vec();
    let code = row % (1usize << targets.len());
    for (b, &c) in targets.iter().enumerate() {
        f[c] = ((code >> b) & 1) as u8;
    }
    f
}

impl SurrogateBatch {
    pub fn draw(model: &DiffusionModel, data: &LabeledDataset, targets: &[usize], n: usize, rng: &mut impl Rng) -> Result<Self> {
        ensure(!data.is_empty(), || LabError::Empty("training set".into()))?;
        let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.len())).collect();
        let flags = picks
            .iter()
            .enumerate()
            .map(|(j, &i)| balanced_target_flags(j, targets, &data.flags[i]))
            .collect();
        let draw = NoiseDraw::sample(n, model.dim, 1..=model.schedule.steps(), rng);
        Ok(Self {
            x0: data.points.select_rows(&picks),
            flags,
            draw,
        })
    }

    fn noisy(&self, model: &DiffusionModel) -> Matrix {
        let mut z = Matrix::zeros(self.x0.rows(), model.dim);
        for r in 0..z.rows() {
            let ab = model.schedule.alpha_bar(self.draw.timesteps[r]);
            z.row_mut(r).copy_from_slice(&noise_with_alpha_bar(self.x0.row(r), self.draw.eps.row(r), ab));
        }
        z
    }
}

/// Everything the discriminator needs to know about which flags are targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roles {
    pub targets: Vec<usize>,
    pub retained: Vec<usize>,
}

impl Roles {
    pub fn new(n_concepts: usize, targets: Vec<usize>) -> Self {
        let retained = (0..n_concepts).filter(|c| !targets.contains(c)).collect();
        Self { targets, retained }
    }

    fn labels(&self, flags: &[Flags]) -> Vec<Flags> {
        flags.iter().map(|f| self.targets.iter().map(|&c| f[c]).collect()).collect()
    }

    fn side(&self, flags: &[Flags]) -> Vec<Vec<f64>> {
        flags.iter().map(|f| self.retained.iter().map(|&c| f64::from(f[c])).collect()).collect()
    }
}

struct Generated {
    z: Matrix,
    input: Matrix,
    cache: ForwardCache,
    x0_hat: Matrix,
    /// `d x0_hat / d eps_hat` per row.
    jacobian: Vec<f64>,
}

fn generate(model: &DiffusionModel, net: &DenseNet, batch: &SurrogateBatch) -> Result<Generated> {
    let z = batch.noisy(model);
    let ts = &batch.draw.timesteps;
    let input = model.net_input(&z, |r| ts[r], |r| &batch.flags[r]);
    let (eps_hat, cache) = net.forward(&input)?;
    let x0_hat = model.predict_x0_batch(&z, ts, &eps_hat)?;
    let jacobian = ts
        .iter()
        .map(|&t| {
            let ab = model.schedule.alpha_bar(t);
            -((1.0 - ab) / ab).sqrt()
        })
        .collect();
    Ok(Generated {
        z,
        input,
        cache,
        x0_hat,
        jacobian,
    })
}

/// Rows whose target flags are all off.
fn neutral_rows(roles: &Roles, batch: &SurrogateBatch) -> Vec<bool> {
    batch.flags.iter().map(|f| roles.targets.iter().all(|&c| f[c] == 0)).collect()
}

/// Surrogate generations with neutral rows taken from the configured reference.
/// Returns the rows that must not pass gradient to the generator.
fn surrogate(
    model: &DiffusionModel,
    net: &DenseNet,
    roles: &Roles,
    batch: &SurrogateBatch,
    reference: NeutralReference,
) -> Result<(Generated, Vec<bool>)> {
    let mut g = generate(model, net, batch)?;
    let neutral = neutral_rows(roles, batch);
    match reference {
        NeutralReference::Edited => Ok((g, vec![false; neutral.len()])),
        NeutralReference::Detached => Ok((g, neutral)),
        NeutralReference::Frozen => {
            let idx: Vec<usize> = (0..neutral.len()).filter(|&r| neutral[r]).collect();
            if !idx.is_empty() {
                let sub = SurrogateBatch {
                    x0: batch.x0.select_rows(&idx),
                    flags: idx.iter().map(|&r| batch.flags[r].clone()).collect(),
                    draw: NoiseDraw {
                        timesteps: idx.iter().map(|&r| batch.draw.timesteps[r]).collect(),
                        eps: batch.draw.eps.select_rows(&idx),
                    },
                };
                let fz = generate(model, model.frozen()?, &sub)?;
                for (k, &r) in idx.iter().enumerate() {
                    g.x0_hat.row_mut(r).copy_from_slice(fz.x0_hat.row(k));
                }
            }
            Ok((g, neutral))
        }
    }
}

fn disc_input(disc: &Discriminator, model: &DiffusionModel, roles: &Roles, batch: &SurrogateBatch, g: &Generated) -> Result<Matrix> {
    let steps = model.schedule.steps() as f64;
    let time: Vec<f64> = batch.draw.timesteps.iter().map(|&t| t as f64 / steps).collect();
    let mut side = roles.side(&batch.flags);
    if disc.spec.noisy_input {
        side.iter_mut().enumerate().for_each(|(r, s)| s.extend_from_slice(g.z.row(r)));
    }
    disc.input(&g.x0_hat, &side, Some(&time))
}

/// Generator-side `L_adv` on a surrogate batch with its gradient in the noise predictor's parameters.
/// Also returns the discriminator's accuracy on the batch.
pub fn generator_adversarial_loss(
    model: &DiffusionModel,
    net: &DenseNet,
    disc: &Discriminator,
    roles: &Roles,
    batch: &SurrogateBatch,
    form: AdvForm,
    reference: NeutralReference,
) -> Result<(f64, GradBuffer, f64)> {
    let (g, detached) = surrogate(model, net, roles, batch, reference)?;
    let dinput = disc_input(disc, model, roles, batch, &g)?;
    let labels = roles.labels(&batch.flags);
    let mut terms = head_terms(disc, &dinput, &labels, Objective::Generator(form))?;
    for (r, &off) in detached.iter().enumerate() {
        if off {
            (0..disc.heads).for_each(|h| terms.upstream.set(r, h, 0.0));
        }
    }
    let (_, dx) = disc.net.backward(&terms.cache, &terms.upstream)?;
    let mut upstream = Matrix::zeros(g.input.rows(), model.dim);
    for r in 0..upstream.rows() {
        for j in 0..model.dim {
            upstream.set(r, j, dx.get(r, j) * g.jacobian[r]);
        }
    }
    let (grads, _) = net.backward(&g.cache, &upstream)?;
    let acc = terms.correct as f64 / (labels.len() * disc.heads) as f64;
    Ok((terms.loss, grads, acc))
}

/// Discriminator cross-entropy on generated points of a surrogate batch (generator held fixed).
pub fn discriminator_batch_loss(
    model: &DiffusionModel,
    net: &DenseNet,
    disc: &Discriminator,
    roles: &Roles,
    batch: &SurrogateBatch,
    reference: NeutralReference,
) -> Result<(f64, GradBuffer)> {
    let (g, _) = surrogate(model, net, roles, batch, reference)?;
    let dinput = disc_input(disc, model, roles, batch, &g)?;
    let terms = head_terms(disc, &dinput, &roles.labels(&batch.flags), Objective::Discriminator)?;
    let (grads, _) = disc.net.backward(&terms.cache, &terms.upstream)?;
    Ok((terms.loss, grads))
}

/// `S(w) = |dL_adv/dw * w|` with the gradient averaged over `batches`.
pub fn compute_saliency(
    model: &DiffusionModel,
    disc: &Discriminator,
    roles: &Roles,
    batches: &[SurrogateBatch],
    form: AdvForm,
    reference: NeutralReference,
) -> Result<Vec<f64>> {
    ensure(!batches.is_empty(), || LabError::Empty("saliency needs probe batches".into()))?;
    let mut acc = GradBuffer::zeros(model.eps_net.parameter_count());
    for b in batches {
        let (_, g, _) = generator_adversarial_loss(model, &model.eps_net, disc, roles, b, form, reference)?;
        acc.add_scaled(&g, 1.0 / batches.len() as f64)?;
    }
    ensure(acc.is_finite(), || LabError::NonFinite("saliency gradient".into()))?;
    Ok(acc.0.iter().zip(model.eps_net.params()).map(|(g, w)| (g * w).abs()).collect())
}

/// Resumable state of one erasure run.
#[derive(Debug, Clone, PartialEq)]
pub struct ErasureSession {
    pub config: ErasureConfig,
    pub roles: Roles,
    pub model: DiffusionModel,
    pub disc: Discriminator,
    pub mask: SaliencyMask,
    pub gen_opt: AdamWState,
    pub disc_opt: AdamWState,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    pub report: ErasureReport,
}

fn optimizer(lr: f64) -> AdamWConfig {
    AdamWConfig {
        lr,
        ..AdamWConfig::default()
    }
}

impl ErasureSession {
    /// Copies the base model, warm-starts the discriminator on base generations and builds the mask.
    pub fn start(base: &DiffusionModel, mixture: &MixtureSpec, data: &LabeledDataset, config: &ErasureConfig) -> Result<Self> {
        config.validate()?;
        ensure(mixture.n_concepts() == base.n_concepts, || {
            LabError::Shape("mixture and model disagree on the number of concepts".into())
        })?;
        let mut model = base.clone();
        if model.frozen_net.is_none() {
            model.freeze();
        }
        let roles = Roles::new(base.n_concepts, config.target_indices(mixture)?);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let noisy = if config.discriminator.noisy_input { base.dim } else { 0 };
        let mut disc = Discriminator::new(
            &config.discriminator,
            base.dim,
            roles.retained.len() + noisy,
            roles.targets.len(),
            rng.random(),
        )?;
        let mut disc_opt = AdamWState::new(optimizer(config.discriminator_lr), disc.net.parameter_count());
        for _ in 0..config.saliency_warmup_steps {
            let b = SurrogateBatch::draw(&model, data, &roles.targets, config.batch_size, &mut rng)?;
            let (_, g) = discriminator_batch_loss(&model, &model.eps_net, &disc, &roles, &b, config.neutral_reference)?;
            adamw_step(&mut disc.net, &g, &mut disc_opt, None)?;
        }
        let probes: Vec<SurrogateBatch> = (0..config.saliency_batches)
            .map(|_| SurrogateBatch::draw(&model, data, &roles.targets, config.batch_size, &mut rng))
            .collect::<Result<_>>()?;
        let scores = compute_saliency(&model, &disc, &roles, &probes, config.adv_form, config.neutral_reference)?;
        let mask = match config.mask_scope {
            MaskScope::Global => topk_mask(&scores, config.k)?,
            MaskScope::PerLayer => topk_mask_per_layer(&scores, config.k, &model.eps_net)?,
        };
        let gen_opt = AdamWState::new(optimizer(config.generator_lr), model.eps_net.parameter_count());
        let report = ErasureReport {
            mask_size: mask.selected_count(),
            ..ErasureReport::default()
        };
        Ok(Self {
            config: config.clone(),
            roles,
            model,
            disc,
            mask,
            gen_opt,
            disc_opt,
            rng,
            iteration: 0,
            report,
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// One alternation: discriminator step(s), then a masked generator step.
    pub fn step(&mut self, data: &LabeledDataset) -> Result<()> {
        let cfg = &self.config;
        let mut d_loss = 0.0;
        for _ in 0..cfg.disc_steps_per_gen {
            let b = SurrogateBatch::draw(&self.model, data, &self.roles.targets, cfg.batch_size, &mut self.rng)?;
            let (l, g) = discriminator_batch_loss(&self.model, &self.model.eps_net, &self.disc, &self.roles, &b, cfg.neutral_reference)?;
            self.diverged_if(!l.is_finite() || !g.is_finite(), "discriminator loss")?;
            adamw_step(&mut self.disc.net, &g, &mut self.disc_opt, None)?;
            d_loss += l / cfg.disc_steps_per_gen as f64;
        }

        let b = SurrogateBatch::draw(&self.model, data, &self.roles.targets, cfg.batch_size, &mut self.rng)?;
        let (l_adv, g_adv, acc) =
            generator_adversarial_loss(&self.model, &self.model.eps_net, &self.disc, &self.roles, &b, cfg.adv_form, cfg.neutral_reference)?;
        let neutral = Batch {
            x0: b.x0.clone(),
            flags: b
                .flags
                .iter()
                .map(|f| {
                    let mut f = f.clone();
                    self.roles.targets.iter().for_each(|&c| f[c] = 0);
                    f
                })
                .collect(),
        };
        let range = self.model.anchor_range(cfg.t0_fraction, cfg.anchor_window);
        let tdraw = NoiseDraw::sample(neutral.len(), self.model.dim, range, &mut self.rng);
        let (l_traj, g_traj) = self.model.trajectory_loss_with(&self.model.eps_net, &neutral, &tdraw)?;

        let mut g_adv = g_adv;
        g_adv.scale(cfg.adversarial_weight);
        let weighted_adv = cfg.adversarial_weight * l_adv;
        let finite = weighted_adv.is_finite() && l_traj.is_finite() && g_adv.is_finite() && g_traj.is_finite();
        self.diverged_if(!finite, "generator loss")?;
        let (l_total, g) = total_loss(weighted_adv, &g_adv, l_traj, &g_traj, cfg.lambda)?;
        adamw_step(&mut self.model.eps_net, &g, &mut self.gen_opt, Some(self.mask.as_slice()))?;

        self.report.l_adv.push(l_adv);
        self.report.l_traj.push(l_traj);
        self.report.l_total.push(l_total);
        self.report.disc_loss.push(d_loss);
        self.report.disc_accuracy.push(acc);
        self.iteration += 1;
        Ok(())
    }

    fn diverged_if(&self, bad: bool, what: &str) -> Result<()> {
        if bad {
            return Err(LabError::Diverged {
                step: self.iteration,
                reason: format!("non-finite {what}"),
            });
        }
        Ok(())
    }

    /// Runs up to `n` more iterations (bounded by the configured total). On
    /// error the session keeps the partial report.
    pub fn run(&mut self, data: &LabeledDataset, n: usize) -> Result<()> {
        let start = Instant::now();
        let stop = (self.iteration + n).min(self.config.iterations);
        let out = (|| {
            while self.iteration < stop {
                self.step(data)?;
            }
            Ok(())
        })();
        self.report.wall_time_secs += start.elapsed().as_secs_f64();
        out
    }
}

impl ErasureSession {
    /// Held-out probe accuracy on fresh generations, stored in the report.
    pub fn final_probe(&mut self) -> Result<()> {
        if self.config.final_probe_samples == 0 {
            return Ok(());
        }
        let probe = crate::adversary::ProbeConfig {
            spec: DiscriminatorSpec {
                time_input: false,
                noisy_input: false,
                ..self.config.discriminator.clone()
            },
            seed: self.config.seed ^ 0x9e37_79b9,
            ..crate::adversary::ProbeConfig::default()
        };
        let target = self.roles.targets[0];
        let acc = crate::adversary::flag_probe_accuracy(&self.model, target, self.config.final_probe_samples, &probe)?;
        self.report.final_probe_accuracy = Some(acc);
        Ok(())
    }

    /// Whether every parameter outside the mask still equals `theta_0` bitwise.
    pub fn mask_respected(&self) -> Result<bool> {
        let frozen = self.model.frozen()?;
        Ok(self
            .model
            .eps_net
            .params()
            .iter()
            .zip(frozen.params())
            .zip(self.mask.as_slice())
            .all(|((a, b), &m)| m || a.to_bits() == b.to_bits()))
    }
}

/// Full erasure run: warm start, mask, all iterations, then an optional held-out probe.
pub fn score_train(
    base: &DiffusionModel,
    mixture: &MixtureSpec,
    data: &LabeledDataset,
    config: &ErasureConfig,
) -> Result<(DiffusionModel, ErasureReport)> {
    let start = Instant::now();
    let mut session = ErasureSession::start(base, mixture, data, config)?;
    session.run(data, config.iterations)?;
    session.final_probe()?;
    let mut report = session.report;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((session.model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetBundle;
    use crate::diffusion::ModelSpec;
    use crate::nn::finite_diff_check;
    use approx::assert_relative_eq;
    use std::f64::consts::LN_2;

    fn constant_disc(p: f64) -> Discriminator {
        let mut d = Discriminator::new(&DiscriminatorSpec::default(), 2, 0, 1, 1).unwrap();
        let n = d.net.parameter_count();
        let logit = (p / (1.0 - p)).ln();
        let params = d.net.params_mut();
        params.iter_mut().for_each(|v| *v = 0.0);
        params[n - 1] = logit;
        d
    }

    fn points(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(n, 2);
        m.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        m
    }

    #[test]
    fn losses_at_half_are_two_ln_two() {
        let d = constant_disc(0.5);
        let (a, b) = (points(5, 1), points(7, 2));
        for form in [AdvForm::Literal] {
            assert_relative_eq!(adversarial_loss(&d, &a, &b, form).unwrap().value, 2.0 * LN_2, epsilon = 1e-12);
        }
        assert_relative_eq!(adversarial_loss(&d, &a, &b, AdvForm::Symmetric).unwrap().value, -2.0 * LN_2, epsilon = 1e-12);
        assert_relative_eq!(discriminator_loss(&d, &a, &b).unwrap().0, 2.0 * LN_2, epsilon = 1e-12);
    }

    #[test]
    fn losses_reach_zero_at_the_clamp() {
        // A discriminator that outputs ~0 on one half-plane and ~1 on the other.
        let mut d = Discriminator::new(&DiscriminatorSpec { hidden: vec![], ..Default::default() }, 2, 0, 1, 1).unwrap();
        d.net.params_mut().copy_from_slice(&[100.0, 0.0, 0.0]);
        let left = Matrix::from_rows(&[vec![-1.0, 0.0], vec![-2.0, 1.0]]).unwrap();
        let right = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, -1.0]]).unwrap();
        // Generator optimum: concept outputs where D = 0, neutral outputs where D = 1.
        let adv = adversarial_loss(&d, &left, &right, AdvForm::Literal).unwrap();
        assert!(adv.value.abs() < 1e-6);
        // Perfect discriminator: concept where D = 1.
        let (l, _) = discriminator_loss(&d, &right, &left).unwrap();
        assert!(l < 1e-6);
        assert!(adversarial_loss(&d, &Matrix::zeros(0, 2), &right, AdvForm::Literal).is_err());
        assert!(discriminator_loss(&d, &left, &Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn adversarial_loss_matches_recomputation_and_input_gradient() {
        let d = Discriminator::new(&DiscriminatorSpec::default(), 2, 0, 1, 7).unwrap();
        let (a, b) = (points(6, 3), points(4, 4));
        let p = |m: &Matrix| d.probabilities(m).unwrap().into_data();
        for form in [AdvForm::Literal, AdvForm::Symmetric] {
            let got = adversarial_loss(&d, &a, &b, form).unwrap();
            let (pa, pb) = (p(&a), p(&b));
            let expect = match form {
                AdvForm::Literal => {
                    -pa.iter().map(|v| (1.0 - v).ln()).sum::<f64>() / 6.0 - pb.iter().map(|v| v.ln()).sum::<f64>() / 4.0
                }
                AdvForm::Symmetric => {
                    pa.iter().map(|v| v.ln()).sum::<f64>() / 6.0 + pb.iter().map(|v| (1.0 - v).ln()).sum::<f64>() / 4.0
                }
            };
            assert_relative_eq!(got.value, expect, epsilon = 1e-12);
            // Central differences on one generated coordinate.
            let h = 1e-6;
            for (r, c) in [(0, 0), (3, 1)] {
                let mut ap = a.clone();
                ap.set(r, c, a.get(r, c) + h);
                let mut am = a.clone();
                am.set(r, c, a.get(r, c) - h);
                let fd = (adversarial_loss(&d, &ap, &b, form).unwrap().value - adversarial_loss(&d, &am, &b, form).unwrap().value) / (2.0 * h);
                assert_relative_eq!(got.grad_concept.get(r, c), fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let d = Discriminator::new(&DiscriminatorSpec::default(), 2, 0, 1, 11).unwrap();
        let (a, b) = (points(9, 5), points(8, 6));
        let err = finite_diff_check(&d.net, 1e-5, |net| {
            let mut dd = d.clone();
            dd.net = net.clone();
            discriminator_loss(&dd, &a, &b)
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn total_loss_combines_affinely() {
        let g1 = GradBuffer(vec![1.0, 2.0]);
        let g2 = GradBuffer(vec![10.0, -10.0]);
        let (l, g) = total_loss(1.0, &g1, 2.0, &g2, 0.1).unwrap();
        assert_relative_eq!(l, 1.2, epsilon = 1e-15);
        assert_eq!(g.0, vec![2.0, 1.0]);
        assert_eq!(total_loss(1.5, &g1, 9.0, &g2, 0.0).unwrap().0, 1.5);
        assert_eq!(total_loss(0.0, &g1, 0.0, &g2, 0.3).unwrap().0, 0.0);
        assert!(total_loss(f64::NAN, &g1, 0.0, &g2, 0.1).is_err());
    }

    #[test]
    fn topk_selects_ceil_and_breaks_ties_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let m = topk_mask(&scores, 0.05).unwrap();
        let mut order: Vec<usize> = (0..100).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let mut expect = order[..5].to_vec();
        expect.sort_unstable();
        assert_eq!(m.indices(), expect);
        assert_eq!(m.selected_count(), 5);

        assert_eq!(topk_mask(&scores, 1.0).unwrap().selected_count(), 100);
        assert_eq!(topk_mask(&scores, 0.0).unwrap().selected_count(), 0);
        assert_eq!(topk_mask(&[1.0; 7], 0.3).unwrap().indices(), vec![0, 1, 2]);
        assert!(topk_mask(&[1.0, f64::NAN], 0.5).is_err());
        assert!(topk_mask(&[1.0], 1.5).is_err());
    }

    #[test]
    fn mask_round_trips_through_json() {
        let m = SaliencyMask::from_indices(10, &[1, 4, 9]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<SaliencyMask>(&s).unwrap(), m);
        assert!(serde_json::from_str::<SaliencyMask>(r#"{"parameter_count":2,"indices":[5]}"#).is_err());
    }

    #[test]
    fn saliency_is_gradient_times_weight() {
        let data = DatasetBundle::generate(&MixtureSpec::default_benchmark(), 400, 10, 2).unwrap();
        let spec = ModelSpec { hidden: vec![8], steps: 20, ..ModelSpec::default() };
        let mut model = DiffusionModel::new(&spec, 2, 1, 3).unwrap();
        // A zero weight must score zero whatever its gradient.
        model.eps_net.params_mut()[5] = 0.0;
        let roles = Roles::new(1, vec![0]);
        let disc = Discriminator::new(&DiscriminatorSpec::default(), 2, 0, 1, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batches: Vec<_> = (0..2).map(|_| SurrogateBatch::draw(&model, &data.train, &[0], 32, &mut rng).unwrap()).collect();
        let s = compute_saliency(&model, &disc, &roles, &batches, AdvForm::Literal, NeutralReference::Edited).unwrap();
        let loss = |net: &DenseNet| -> Result<(f64, GradBuffer)> {
            let mut tot = 0.0;
            let mut acc = GradBuffer::zeros(net.parameter_count());
            for b in &batches {
                let (l, gg, _) = generator_adversarial_loss(&model, net, &disc, &roles, b, AdvForm::Literal, NeutralReference::Edited)?;
                tot += l / 2.0;
                acc.add_scaled(&gg, 0.5)?;
            }
            Ok((tot, acc))
        };
        // Independent recomputation of the averaged gradient, itself checked by finite differences.
        let (_, g) = loss(&model.eps_net).unwrap();
        assert_eq!(s[5], 0.0);
        for (i, si) in s.iter().enumerate() {
            assert_eq!(*si, (g.0[i] * model.eps_net.params()[i]).abs());
        }
        let err = finite_diff_check(&model.eps_net, 1e-5, loss).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    fn tiny_session(iterations: usize, seed: u64) -> (ErasureSession, LabeledDataset) {
        let data = DatasetBundle::generate(&MixtureSpec::default_benchmark(), 500, 10, 2).unwrap();
        let spec = ModelSpec { hidden: vec![16, 16], steps: 20, ..ModelSpec::default() };
        let mut model = DiffusionModel::new(&spec, 2, 1, 3).unwrap();
        model.freeze();
        let cfg = ErasureConfig {
            iterations,
            batch_size: 32,
            saliency_warmup_steps: 5,
            final_probe_samples: 0,
            seed,
            ..ErasureConfig::default()
        };
        let s = ErasureSession::start(&model, &data.mixture, &data.train, &cfg).unwrap();
        (s, data.train)
    }

    #[test]
    fn parameters_outside_the_mask_never_move() {
        let (mut s, data) = tiny_session(30, 1);
        let before = s.model.eps_net.params().to_vec();
        s.run(&data, 30).unwrap();
        let after = s.model.eps_net.params();
        let mut moved = 0;
        for (i, sel) in s.mask.as_slice().iter().enumerate() {
            if *sel {
                moved += usize::from(after[i] != before[i]);
            } else {
                assert_eq!(after[i].to_bits(), before[i].to_bits());
            }
        }
        assert!(moved > 0);
        assert_eq!(s.mask.selected_count(), topk_count(before.len(), 0.05));
        assert_eq!(s.report.iterations(), 30);
        assert_eq!(s.report.l_adv.len(), s.report.disc_loss.len());
    }

    #[test]
    fn same_seed_same_report_and_split_runs_agree() {
        let (mut a, data) = tiny_session(12, 4);
        let (mut b, _) = tiny_session(12, 4);
        a.run(&data, 12).unwrap();
        b.run(&data, 5).unwrap();
        b.run(&data, 7).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.model.eps_net, b.model.eps_net);
        assert!(a.is_done());
    }

    #[test]
    fn ablation_variants_switch_one_component_each() {
        let base = ErasureConfig::default();
        let set = ablation_variants(&base).unwrap();
        assert_eq!(set.full, base);
        assert_eq!(set.no_adv.adversarial_weight, 0.0);
        assert_eq!(set.no_traj.lambda, 0.0);
        assert_eq!(set.no_saliency.k, 1.0);
        assert_eq!(set.no_saliency.lambda, base.lambda);
        assert!(ablation_variants(&ErasureConfig { k: 2.0, ..base }).is_err());
    }

    #[test]
    fn config_rejects_invalid_values() {
        let ok = ErasureConfig::default();
        assert!(ok.validate().is_ok());
        assert!(ErasureConfig { lambda: -1.0, ..ok.clone() }.validate().is_err());
        assert!(ErasureConfig { iterations: 0, ..ok.clone() }.validate().is_err());
        assert!(ErasureConfig { k: -0.1, ..ok }.validate().is_err());
    }

    #[test]
    fn balanced_flags_cycle_over_targets() {
        let base = [1u8, 1, 0];
        let rows: Vec<Flags> = (0..4).map(|j| balanced_target_flags(j, &[0, 2], &base)).collect();
        assert_eq!(rows, vec![vec![0, 1, 0], vec![1, 1, 0], vec![0, 1, 1], vec![1, 1, 1]]);
    }
}
