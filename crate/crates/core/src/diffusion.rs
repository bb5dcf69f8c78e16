//! Conditional DDPM on low-dimensional data.
//!
//! Timesteps run `1..=T`; `alpha_bar[0] = 1` by convention. The noise
//! predictor sees `[z_t, t/T, sin/cos features of t/T, concept flags]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Flags, LabeledDataset};
use crate::error::{ensure, LabError, Result};
use crate::nn::{adamw_step, Activation, AdamWConfig, AdamWState, DenseNet, ForwardCache, GradBuffer, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear beta ramp from `beta_min` (t = 1) to `beta_max` (t = T).
pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    ensure(steps >= 1, || LabError::InvalidArgument("schedule needs T >= 1".into()))?;
    ensure(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0, || {
        LabError::InvalidArgument(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        ))
    })?;
    let mut betas = vec![0.0; steps + 1];
    let mut alphas = vec![1.0; steps + 1];
    let mut alpha_bars = vec![1.0; steps + 1];
    for t in 1..=steps {
        let frac = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
        betas[t] = beta_min + (beta_max - beta_min) * frac;
        alphas[t] = 1.0 - betas[t];
        alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
    }
    Ok(NoiseSchedule {
        steps,
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        ensure((1..=self.steps).contains(&t), || {
            LabError::InvalidArgument(format!("timestep {t} outside [1, {}]", self.steps))
        })
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]) * self.betas[t]
    }
}

/// `z_t = sqrt(abar) x0 + sqrt(1 - abar) eps`, with `abar` given directly.
pub fn noise_with_alpha_bar(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

/// `x0_hat = (z_t - sqrt(1 - abar) eps_hat) / sqrt(abar)`, with `abar` given directly.
pub fn denoise_with_alpha_bar(z: &[f64], eps_hat: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    ensure(alpha_bar > 0.0, || LabError::InvalidArgument("x0 prediction needs alpha_bar > 0".into()))?;
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z.iter().zip(eps_hat).map(|(z, e)| (z - s * e) / a).collect())
}

pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    ensure(x0.len() == eps.len(), || LabError::Shape("x0 and eps differ in dimension".into()))?;
    Ok(noise_with_alpha_bar(x0, eps, schedule.alpha_bar(t)))
}

pub fn predict_x0(z: &[f64], t: usize, eps_hat: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    ensure(z.len() == eps_hat.len(), || LabError::Shape("z and eps_hat differ in dimension".into()))?;
    denoise_with_alpha_bar(z, eps_hat, schedule.alpha_bar(t))
}

/// Which end of the chain the trajectory anchor covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorWindow {
    /// `t` in `[1, T0]`: the last denoising steps, nearest the data.
    Low,
    /// `t` in `[T - T0 + 1, T]`: the first denoising steps, nearest pure noise.
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub time_frequencies: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::Tanh,
            steps: 200,
            beta_min: 1e-4,
            beta_max: 0.05,
            time_frequencies: 3,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(!self.hidden.is_empty() && self.hidden.iter().all(|&h| h > 0), || {
            LabError::InvalidArgument("model.hidden must list positive widths".into())
        })?;
        build_schedule(self.steps, self.beta_min, self.beta_max).map(|_| ())
    }

    fn time_features(&self) -> usize {
        1 + 2 * self.time_frequencies
    }
}

/// Noise predictor, its frozen reference copy and the schedule they share.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub spec: ModelSpec,
    pub dim: usize,
    pub n_concepts: usize,
    pub schedule: NoiseSchedule,
    pub eps_net: DenseNet,
    pub frozen_net: Option<DenseNet>,
}

impl DiffusionModel {
    pub fn new(spec: &ModelSpec, dim: usize, n_concepts: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let schedule = build_schedule(spec.steps, spec.beta_min, spec.beta_max)?;
        let mut sizes = vec![dim + spec.time_features() + n_concepts];
        sizes.extend(&spec.hidden);
        sizes.push(dim);
        let mut acts = vec![spec.activation; spec.hidden.len()];
        acts.push(Activation::Identity);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps_net = DenseNet::init_with_rng(&sizes, &acts, &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            dim,
            n_concepts,
            schedule,
            eps_net,
            frozen_net: None,
        })
    }

    /// Captures the current noise predictor as the reference `theta_0`.
    pub fn freeze(&mut self) {
        self.frozen_net = Some(self.eps_net.clone());
    }

    pub fn frozen(&self) -> Result<&DenseNet> {
        self.frozen_net
            .as_ref()
            .ok_or_else(|| LabError::InvalidArgument("model has no frozen reference copy".into()))
    }

    fn check_flags(&self, flags: &[u8]) -> Result<()> {
        ensure(flags.len() == self.n_concepts && flags.iter().all(|&f| f <= 1), || {
            LabError::InvalidArgument(format!("flags {flags:?} must be {} bits", self.n_concepts))
        })
    }

    /// Network input rows for noisy points `z`, per-row timesteps and per-row flags.
    pub fn net_input<'a>(
        &self,
        z: &Matrix,
        t_of: impl Fn(usize) -> usize,
        flags_of: impl Fn(usize) -> &'a [u8],
    ) -> Matrix {
        let k = self.spec.time_frequencies;
        let width = self.dim + 1 + 2 * k + self.n_concepts;
        let steps = self.schedule.steps as f64;
        let mut m = Matrix::zeros(z.rows(), width);
        for r in 0..z.rows() {
            let row = m.row_mut(r);
            row[..self.dim].copy_from_slice(z.row(r));
            let tau = t_of(r) as f64 / steps;
            row[self.dim] = tau;
            for f in 0..k {
                let w = std::f64::consts::PI * (1u64 << f) as f64 * tau;
                row[self.dim + 1 + 2 * f] = w.sin();
                row[self.dim + 2 + 2 * f] = w.cos();
            }
            for (c, &bit) in flags_of(r).iter().enumerate() {
                row[self.dim + 1 + 2 * k + c] = f64::from(bit);
            }
        }
        m
    }

    /// One-step denoised estimates `x0_hat` for rows of `z` at timesteps `ts`.
    pub fn predict_x0_batch(&self, z: &Matrix, ts: &[usize], eps_hat: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(z.rows(), self.dim);
        for r in 0..z.rows() {
            let x = denoise_with_alpha_bar(z.row(r), eps_hat.row(r), self.schedule.alpha_bar(ts[r]))?;
            out.row_mut(r).copy_from_slice(&x);
        }
        Ok(out)
    }

    /// Ancestral sampling of `n` points conditioned on `flags`.
    ///
    /// Each step applies the posterior-mean update
    /// `x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t)` and adds
    /// noise with the posterior variance, except at `t = 1`.
    pub fn sample(&self, flags: &[u8], rng: &mut impl Rng, n: usize) -> Result<Matrix> {
        self.check_flags(flags)?;
        const CHUNK: usize = 8192;
        let mut out = Matrix::zeros(n, self.dim);
        let mut start = 0;
        while start < n {
            let m = CHUNK.min(n - start);
            let chunk = self.sample_chunk(&self.eps_net, flags, rng, m)?;
            out.data_mut()[start * self.dim..(start + m) * self.dim].copy_from_slice(chunk.data());
            start += m;
        }
        Ok(out)
    }

    fn sample_chunk(&self, net: &DenseNet, flags: &[u8], rng: &mut impl Rng, n: usize) -> Result<Matrix> {
        let d = self.dim;
        let mut x = Matrix::zeros(n, d);
        x.data_mut().iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        for t in (1..=self.schedule.steps).rev() {
            let input = self.net_input(&x, |_| t, |_| flags);
            let eps = net.predict(&input)?;
            let beta = self.schedule.beta(t);
            let coef = beta / (1.0 - self.schedule.alpha_bar(t)).sqrt();
            let inv_sqrt_alpha = 1.0 / self.schedule.alpha(t).sqrt();
            let sigma = if t > 1 { self.schedule.posterior_variance(t).sqrt() } else { 0.0 };
            for (xv, ev) in x.data_mut().iter_mut().zip(eps.data()) {
                *xv = inv_sqrt_alpha * (*xv - coef * ev);
            }
            if sigma > 0.0 {
                for xv in x.data_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *xv += sigma * z;
                }
            }
        }
        ensure(x.is_finite(), || LabError::NonFinite("sampler produced non-finite points".into()))?;
        Ok(x)
    }

    /// Timestep range covered by the trajectory anchor for a cutoff fraction.
    pub fn anchor_range(&self, fraction: f64, window: AnchorWindow) -> std::ops::RangeInclusive<usize> {
        let steps = self.schedule.steps;
        let t0 = ((fraction * steps as f64).round() as usize).clamp(1, steps);
        match window {
            AnchorWindow::Low => 1..=t0,
            AnchorWindow::High => steps - t0 + 1..=steps,
        }
    }
}

/// Clean points with flags, the unit every training loss consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x0: Matrix,
    pub flags: Vec<Flags>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uniform draw with replacement of `n` rows from `indices` of `data`.
    pub fn draw(data: &LabeledDataset, indices: &[usize], n: usize, rng: &mut impl Rng) -> Result<Self> {
        ensure(!indices.is_empty(), || LabError::Empty("no rows to draw a batch from".into()))?;
        let picks: Vec<usize> = (0..n).map(|_| indices[rng.random_range(0..indices.len())]).collect();
        Ok(Self {
            x0: data.points.select_rows(&picks),
            flags: picks.iter().map(|&i| data.flags[i].clone()).collect(),
        })
    }
}

/// The random draws of one noise-prediction loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub timesteps: Vec<usize>,
    pub eps: Matrix,
}

impl NoiseDraw {
    pub fn sample(n: usize, dim: usize, range: std::ops::RangeInclusive<usize>, rng: &mut impl Rng) -> Self {
        let timesteps = (0..n).map(|_| rng.random_range(range.clone())).collect();
        let mut eps = Matrix::zeros(n, dim);
        eps.data_mut().iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        Self { timesteps, eps }
    }
}

impl DiffusionModel {
    fn noisy_batch(&self, batch: &Batch, draw: &NoiseDraw) -> Matrix {
        let mut z = Matrix::zeros(batch.len(), self.dim);
        for r in 0..batch.len() {
            let v = noise_with_alpha_bar(batch.x0.row(r), draw.eps.row(r), self.schedule.alpha_bar(draw.timesteps[r]));
            z.row_mut(r).copy_from_slice(&v);
        }
        z
    }

    /// `mean_i ||eps_theta(z_t, flags, t) - eps||^2` for fixed draws, with its gradient.
    pub fn ddpm_loss(&self, net: &DenseNet, batch: &Batch, draw: &NoiseDraw) -> Result<(f64, GradBuffer)> {
        ensure(!batch.is_empty(), || LabError::Empty("ddpm batch".into()))?;
        let z = self.noisy_batch(batch, draw);
        let input = self.net_input(&z, |r| draw.timesteps[r], |r| &batch.flags[r]);
        let (pred, cache) = net.forward(&input)?;
        let n = batch.len() as f64;
        let mut upstream = Matrix::zeros(pred.rows(), pred.cols());
        let mut loss = 0.0;
        for ((u, p), e) in upstream.data_mut().iter_mut().zip(pred.data()).zip(draw.eps.data()) {
            let diff = p - e;
            loss += diff * diff;
            *u = 2.0 * diff / n;
        }
        let (grads, _) = net.backward(&cache, &upstream)?;
        Ok((loss / n, grads))
    }

    /// Draws `t ~ U[1, T]` and `eps ~ N(0, I)` per item and evaluates [`Self::ddpm_loss`].
    pub fn ddpm_train_step(&self, batch: &Batch, rng: &mut impl Rng) -> Result<(f64, GradBuffer)> {
        ensure(!batch.is_empty(), || LabError::Empty("ddpm batch".into()))?;
        let draw = NoiseDraw::sample(batch.len(), self.dim, 1..=self.schedule.steps, rng);
        self.ddpm_loss(&self.eps_net, batch, &draw)
    }

    /// Trajectory-consistency loss on concept-absent items for fixed draws.
    ///
    /// `mean_i ||eps_theta(z_t, flags, t) - eps_theta0(z_t, flags, t)||^2`; the
    /// gradient is taken with respect to `net` only.
    pub fn trajectory_loss_with(
        &self,
        net: &DenseNet,
        neutral: &Batch,
        draw: &NoiseDraw,
    ) -> Result<(f64, GradBuffer)> {
        ensure(!neutral.is_empty(), || LabError::Empty("trajectory batch".into()))?;
        let frozen = self.frozen()?;
        let z = self.noisy_batch(neutral, draw);
        let input = self.net_input(&z, |r| draw.timesteps[r], |r| &neutral.flags[r]);
        let (pred, cache) = net.forward(&input)?;
        let reference = frozen.predict(&input)?;
        let n = neutral.len() as f64;
        let mut upstream = Matrix::zeros(pred.rows(), pred.cols());
        let mut loss = 0.0;
        for ((u, p), q) in upstream.data_mut().iter_mut().zip(pred.data()).zip(reference.data()) {
            let diff = p - q;
            loss += diff * diff;
            *u = 2.0 * diff / n;
        }
        let (grads, _) = net.backward(&cache, &upstream)?;
        Ok((loss / n, grads))
    }

    /// Samples timesteps inside the anchor window and evaluates the trajectory loss.
    pub fn trajectory_loss(
        &self,
        neutral: &Batch,
        fraction: f64,
        window: AnchorWindow,
        rng: &mut impl Rng,
    ) -> Result<(f64, GradBuffer)> {
        ensure(!neutral.is_empty(), || LabError::Empty("trajectory batch".into()))?;
        let draw = NoiseDraw::sample(neutral.len(), self.dim, self.anchor_range(fraction, window), rng);
        self.trajectory_loss_with(&self.eps_net, neutral, &draw)
    }

    /// Forward pass of the noise predictor on given inputs, kept for backprop.
    pub fn eps_forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.eps_net.forward(input)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 256,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Trains the noise predictor on all of `data.train`, then freezes `theta_0`.
/// Returns the per-step loss history.
pub fn train_base(model: &mut DiffusionModel, data: &DatasetBundle, cfg: &TrainConfig, seed: u64) -> Result<Vec<f64>> {
    ensure(!data.train.is_empty(), || LabError::Empty("training set".into()))?;
    ensure(cfg.steps >= 1 && cfg.batch_size >= 1, || {
        LabError::InvalidArgument("training needs steps >= 1 and batch_size >= 1".into())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamWState::new(cfg.optimizer, model.eps_net.parameter_count());
    let all: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = Batch::draw(&data.train, &all, cfg.batch_size, &mut rng)?;
        let (loss, grads) = model.ddpm_train_step(&batch, &mut rng)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(LabError::Diverged {
                step,
                reason: format!("loss {loss}"),
            });
        }
        adamw_step(&mut model.eps_net, &grads, &mut opt, None)?;
        history.push(loss);
    }
    model.freeze();
    Ok(history)
}
