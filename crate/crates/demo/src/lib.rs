//! Browser demo over a four-component 2D mixture. The concept components sit
//! at `(+s, ±3)` and the neutral ones at `(-s, ±3)`; an erasure level `a`
//! replaces that fraction of concept-conditioned draws with neutral ones,
//! which is what a perfectly erased generator would do at `a = 1`.

use erasure_lab::data::{MixtureComponent, MixtureSpec, PreparedMixture};
use erasure_lab::error::{LabError, Result};
use erasure_lab::infotheory::{
    adaptive_grid, entropy_bound, fano_bound, pinsker_eps_bound, plugin_mi, tv_between_labels, JointHistogram,
};
use erasure_lab::metrics::{fit_gaussian, frechet_distance, gaussian_kl, BOX_PERCENTILE};
use erasure_lab::nn::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const MAX_SAMPLES: usize = 200_000;

fn unit(mean: [f64; 2], flags: &str) -> MixtureComponent {
    MixtureComponent {
        mean: mean.to_vec(),
        cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        weight: 0.25,
        flags: flags.into(),
    }
}

/// Ground truth for one slider setting.
#[derive(Debug, Clone)]
pub struct Scene {
    pub separation: f64,
    pub erase: f64,
    truth: PreparedMixture,
}

/// Concept-conditioned and neutral-conditioned draws.
#[derive(Debug, Clone)]
pub struct Draws {
    pub concept: Matrix,
    pub neutral: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leakage {
    pub plugin_mi: f64,
    pub entropy_bound: f64,
    pub bayes_error: f64,
    pub fano_bound: f64,
    pub tv: f64,
    pub pinsker: f64,
    pub bins: usize,
}

impl Scene {
    pub fn new(separation: f64, erase: f64) -> Result<Self> {
        if !(0.0..=10.0).contains(&separation) {
            return Err(LabError::InvalidArgument(format!("separation {separation} outside [0, 10]")));
        }
        if !(0.0..=1.0).contains(&erase) {
            return Err(LabError::InvalidArgument(format!("erasure level {erase} outside [0, 1]")));
        }
        let spec = MixtureSpec {
            concepts: vec!["right".into()],
            components: vec![
                unit([separation, 3.0], "1"),
                unit([separation, -3.0], "1"),
                unit([-separation, 3.0], "0"),
                unit([-separation, -3.0], "0"),
            ],
        };
        Ok(Self {
            separation,
            erase,
            truth: spec.prepare()?,
        })
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Draws> {
        if n < 10 || n > MAX_SAMPLES {
            return Err(LabError::InvalidArgument(format!("samples per class must lie in [10, {MAX_SAMPLES}]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let swapped = (0..n).filter(|_| rng.random::<f64>() < self.erase).count();
        let (kept, _) = self.truth.sample_conditional(&[1], n - swapped, &mut rng)?;
        let (moved, _) = self.truth.sample_conditional(&[0], swapped, &mut rng)?;
        let (neutral, _) = self.truth.sample_conditional(&[0], n, &mut rng)?;
        Ok(Draws {
            concept: Matrix::vstack(&[&kept, &moved])?,
            neutral,
        })
    }

    /// `P(concept flag | x)` under equal priors.
    pub fn posterior(&self, x: &[f64]) -> Result<f64> {
        let c = self.truth.conditional_log_density(x, &[1])?.exp();
        let n = self.truth.conditional_log_density(x, &[0])?.exp();
        let p1 = (1.0 - self.erase) * c + self.erase * n;
        Ok(if p1 + n > 0.0 { p1 / (p1 + n) } else { 0.5 })
    }

    /// Plug-in MI next to the bounds that should sandwich it.
    pub fn leakage(&self, d: &Draws, bins: usize) -> Result<Leakage> {
        let (grid, _) = adaptive_grid(&[&d.concept, &d.neutral], bins, BOX_PERCENTILE)?;
        let joint = JointHistogram::from_samples(&grid, &[&d.neutral, &d.concept])?;
        let mut posts = Vec::with_capacity(d.concept.rows() + d.neutral.rows());
        let mut wrong = 0usize;
        for (m, label) in [(&d.concept, true), (&d.neutral, false)] {
            for r in m.iter_rows() {
                let p = self.posterior(r)?;
                wrong += usize::from((p >= 0.5) != label);
                posts.push(p);
            }
        }
        let e = (wrong as f64 / posts.len() as f64).min(0.5);
        let tv = tv_between_labels(&joint)?;
        Ok(Leakage {
            plugin_mi: plugin_mi(&joint)?,
            entropy_bound: entropy_bound(&posts)?,
            bayes_error: e,
            fano_bound: fano_bound(e)?,
            tv,
            pinsker: pinsker_eps_bound(tv)?,
            bins: grid.bins[0],
        })
    }
}

/// Fréchet distance and Gaussian KL between the two classes' moment fits.
pub fn class_distance(d: &Draws) -> Result<(f64, f64)> {
    let a = fit_gaussian(&d.concept)?;
    let b = fit_gaussian(&d.neutral)?;
    Ok((frechet_distance(&a, &b)?.value, gaussian_kl(&a, &b)?))
}

fn js(e: LabError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
#[derive(Clone, Copy)]
pub struct LeakageView {
    pub plugin_mi: f64,
    pub entropy_bound: f64,
    pub bayes_error: f64,
    pub fano_bound: f64,
    pub tv: f64,
    pub pinsker: f64,
    pub bins: usize,
}

#[wasm_bindgen]
#[derive(Clone, Copy)]
pub struct DistanceView {
    pub frechet: f64,
    pub kl: f64,
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
    draws: Draws,
}

#[wasm_bindgen]
impl Demo {
    /// Samples `n` points per class for the given sliders.
    #[wasm_bindgen(constructor)]
    pub fn new(separation: f64, erase: f64, n: usize, seed: u32) -> std::result::Result<Demo, JsError> {
        let scene = Scene::new(separation, erase).map_err(js)?;
        let draws = scene.sample(n, u64::from(seed)).map_err(js)?;
        Ok(Demo { scene, draws })
    }

    /// Flat `[x, y, label, ...]` with label 1 for concept-conditioned draws.
    pub fn points(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * (self.draws.concept.rows() + self.draws.neutral.rows()));
        for (m, l) in [(&self.draws.neutral, 0.0), (&self.draws.concept, 1.0)] {
            for r in m.iter_rows() {
                out.extend_from_slice(&[r[0], r[1], l]);
            }
        }
        out
    }

    pub fn leakage(&self, bins: usize) -> std::result::Result<LeakageView, JsError> {
        let l = self.scene.leakage(&self.draws, bins).map_err(js)?;
        Ok(LeakageView {
            plugin_mi: l.plugin_mi,
            entropy_bound: l.entropy_bound,
            bayes_error: l.bayes_error,
            fano_bound: l.fano_bound,
            tv: l.tv,
            pinsker: l.pinsker,
            bins: l.bins,
        })
    }

    pub fn distance(&self) -> std::result::Result<DistanceView, JsError> {
        let (frechet, kl) = class_distance(&self.draws).map_err(js)?;
        Ok(DistanceView { frechet, kl })
    }
}
