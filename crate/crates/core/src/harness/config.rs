use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{AttackConfig, AttackStrategy};
use crate::data::MixtureSpec;
use crate::diffusion::{ModelSpec, TrainConfig};
use crate::erasure::ErasureConfig;
use crate::error::{LabError, Result};
use crate::infotheory::AuditConfig;
use crate::metrics::EvalConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_heldout: usize,
    pub mixture: MixtureSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 20_000,
            n_heldout: 5_000,
            mixture: MixtureSpec::default_benchmark(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSuite {
    pub queries: Vec<usize>,
    pub strategies: Vec<AttackStrategy>,
    pub settings: AttackConfig,
}

impl Default for AttackSuite {
    fn default() -> Self {
        Self {
            queries: vec![1, 4, 16, 64],
            strategies: AttackStrategy::ALL.to_vec(),
            settings: AttackConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    /// Repetitions of the four-way ablation; 0 skips it.
    pub ablation_repetitions: usize,
    /// Samples per flag for the residual MI of each sweep run.
    pub mi_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.1, 1.0, 10.0],
            ablation_repetitions: 3,
            mi_samples: 5_000,
        }
    }
}

/// Base-model quality gate: Fréchet distance (FD²) to held-out data, frozen
/// from a pilot run of the default benchmark.
pub const PILOT_FD2_THRESHOLD: f64 = 0.15;
/// Base-model quality gate: minimum per-concept accuracy.
pub const BASE_ACCURACY_GATE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    /// Fail `train-base` when the gate is missed.
    pub enforce: bool,
    pub base_accuracy: f64,
    pub base_fidelity: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            enforce: true,
            base_accuracy: BASE_ACCURACY_GATE,
            base_fidelity: PILOT_FD2_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every phase seed is derived from it.
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub training: TrainConfig,
    pub erasure: ErasureConfig,
    pub evaluation: EvalConfig,
    pub audit: AuditConfig,
    pub attack: AttackSuite,
    pub sweep: SweepConfig,
    pub gates: GateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelSpec::default(),
            training: TrainConfig::default(),
            erasure: ErasureConfig::default(),
            evaluation: EvalConfig::default(),
            audit: AuditConfig::default(),
            attack: AttackSuite::default(),
            sweep: SweepConfig::default(),
            gates: GateConfig::default(),
        }
    }
}

fn at(path: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        LabError::Config { .. } => e,
        other => LabError::Config {
            path: path.into(),
            message: other.to_string(),
        },
    })
}

fn require(path: &str, ok: bool, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(LabError::Config {
            path: path.into(),
            message: message.into(),
        })
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        require("dataset.n_train", self.dataset.n_train >= 2, "must be at least 2")?;
        require("dataset.n_heldout", self.dataset.n_heldout >= 2, "must be at least 2")?;
        at("dataset.mixture", self.dataset.mixture.validate())?;
        at("model", self.model.validate())?;
        require("training.steps", self.training.steps >= 1, "must be at least 1")?;
        require("training.batch_size", self.training.batch_size >= 1, "must be at least 1")?;
        at("erasure", self.erasure.validate())?;
        at("erasure.targets", self.erasure.target_indices(&self.dataset.mixture).map(|_| ()))?;
        at("evaluation", self.evaluation.validate())?;
        require("audit.sample_budget", self.audit.sample_budget >= 200, "must be at least 200")?;
        require("audit.bins", self.audit.bins >= 2, "must be at least 2")?;
        require("attack.queries", !self.attack.queries.is_empty(), "must not be empty")?;
        require("attack.strategies", !self.attack.strategies.is_empty(), "must not be empty")?;
        require(
            "attack.settings.confidence",
            self.attack.settings.confidence > 0.0 && self.attack.settings.confidence < 1.0,
            "must lie in (0, 1)",
        )?;
        require("sweep.lambdas", self.sweep.lambdas.iter().all(|l| l.is_finite() && *l >= 0.0), "must be finite and >= 0")?;
        require("sweep.mi_samples", self.sweep.mi_samples >= 100, "must be at least 100")
    }

    /// Canonical TOML with every default written out.
    pub fn normalized(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LabError::Serde(e.to_string()))
    }

    /// Hex sha256 of the normalized dump, leaving out `out` so that where a
    /// run is written does not change what it is.
    pub fn digest(&self) -> Result<String> {
        let placeless = Self {
            out: Default::default(),
            ..self.clone()
        };
        Ok(hex(&Sha256::digest(placeless.normalized()?.as_bytes())))
    }

    /// `<first 12 hex of the digest>-s<seed>`.
    pub fn run_id(&self) -> Result<String> {
        Ok(format!("{}-s{}", &self.digest()?[..12], self.seed))
    }

    /// Phase seed derived from the master seed and the phase's own salt.
    pub fn phase_seed(&self, phase: &str, salt: u64) -> u64 {
        let h = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(phase.as_bytes())
            .chain_update(salt.to_le_bytes())
            .finalize();
        u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
    }

    pub fn erasure_effective(&self) -> ErasureConfig {
        ErasureConfig {
            seed: self.phase_seed("erase", self.erasure.seed),
            ..self.erasure.clone()
        }
    }

    pub fn evaluation_effective(&self) -> EvalConfig {
        EvalConfig {
            seed: self.phase_seed("evaluate", self.evaluation.seed),
            ..self.evaluation.clone()
        }
    }

    pub fn audit_effective(&self) -> AuditConfig {
        AuditConfig {
            seed: self.phase_seed("audit", self.audit.seed),
            ..self.audit.clone()
        }
    }

    pub fn attack_effective(&self) -> AttackConfig {
        AttackConfig {
            seed: self.phase_seed("attack", self.attack.settings.seed),
            ..self.attack.settings.clone()
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses TOML text into a validated config. Unknown keys, type errors and
/// constraint violations all report the dotted path to the offending key.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let mut message = inner.message().to_string();
        if let Some(span) = inner.span() {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            message = format!("{message} (line {line})");
        }
        LabError::Config { path, message }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_erasure_section_gets_defaults() {
        let cfg = parse_config_str("[erasure]\n").unwrap();
        let dump = cfg.normalized().unwrap();
        let v: toml::Value = toml::from_str(&dump).unwrap();
        assert_eq!(v["erasure"]["lambda"].as_float(), Some(0.1));
        assert_eq!(v["erasure"]["k"].as_float(), Some(0.05));
        assert_eq!(v["erasure"]["t0_fraction"].as_float(), Some(0.3));
    }

    #[test]
    fn unknown_key_is_named_with_location() {
        let err = parse_config_str("[erasure]\nlamda = 0.2\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("lamda"), "{text}");
        assert!(text.contains("erasure"), "{text}");
        assert!(text.contains("line 2"), "{text}");
        assert_eq!(err.class(), "config");
    }

    #[test]
    fn type_and_constraint_errors_carry_paths() {
        let e = parse_config_str("[erasure]\nk = \"five\"\n").unwrap_err();
        assert!(e.to_string().contains("erasure.k"), "{e}");
        let e = parse_config_str("[erasure]\nk = 1.5\n").unwrap_err();
        assert!(e.to_string().contains("erasure"), "{e}");
        let e = parse_config_str("[sweep]\nlambdas = [-1.0]\n").unwrap_err();
        assert!(e.to_string().contains("sweep.lambdas"), "{e}");
    }

    #[test]
    fn normalized_dump_is_a_fixed_point() {
        let cfg = parse_config_str("seed = 7\n[erasure]\nlambda = 0.5\n[dataset]\nn_train = 100\n").unwrap();
        let again = parse_config_str(&cfg.normalized().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.normalized().unwrap(), again.normalized().unwrap());
    }

    #[test]
    fn digest_ignores_output_directory() {
        let a = RunConfig::default();
        let b = RunConfig { out: "elsewhere".into(), ..RunConfig::default() };
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let c = RunConfig { seed: 3, ..RunConfig::default() };
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn phase_seeds_depend_on_master_and_salt() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.phase_seed("erase", 0), b.phase_seed("erase", 0));
        assert_ne!(a.phase_seed("erase", 0), a.phase_seed("erase", 1));
        assert_ne!(a.phase_seed("erase", 0), a.phase_seed("audit", 0));
        assert_eq!(a.phase_seed("erase", 0), RunConfig::default().phase_seed("erase", 0));
    }
}
