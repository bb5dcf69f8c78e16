//! Dataset and checkpoint files.
//!
//! Checkpoints are JSON envelopes. Every parameter, moment and history array
//! is stored as base64 of little-endian `f64` bytes, so numbers survive a
//! save/load cycle bit for bit; the body carries a sha256 over its own
//! serialization.

use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, RunConfig};
use crate::data::{DatasetBundle, Flags, LabeledDataset, MixtureSpec};
use crate::diffusion::{DiffusionModel, ModelSpec};
use crate::erasure::{Discriminator, DiscriminatorSpec, ErasureConfig, ErasureReport, ErasureSession, Roles, SaliencyMask};
use crate::error::{ensure, LabError, Result};
use crate::metrics::AlignmentScale;
use crate::nn::{AdamWConfig, AdamWState, Matrix};

pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

fn serde_err(e: impl std::fmt::Display) -> LabError {
    LabError::Serde(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointRecord {
    pub x: Vec<f64>,
    pub flags: Flags,
    /// Source component; read only by oracle paths.
    pub component: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub format_version: u32,
    pub seed: u64,
    pub mixture: MixtureSpec,
    pub train: Vec<PointRecord>,
    pub heldout: Vec<PointRecord>,
}

fn records(d: &LabeledDataset) -> Vec<PointRecord> {
    (0..d.len())
        .map(|i| PointRecord {
            x: d.points.row(i).to_vec(),
            flags: d.flags[i].clone(),
            component: d.components[i],
        })
        .collect()
}

fn labeled(r: &[PointRecord], dim: usize) -> Result<LabeledDataset> {
    let rows: Vec<Vec<f64>> = r.iter().map(|p| p.x.clone()).collect();
    ensure(rows.iter().all(|x| x.len() == dim), || LabError::Shape(format!("dataset points must be {dim}-d")))?;
    Ok(LabeledDataset {
        points: if rows.is_empty() { Matrix::zeros(0, dim) } else { Matrix::from_rows(&rows)? },
        flags: r.iter().map(|p| p.flags.clone()).collect(),
        components: r.iter().map(|p| p.component).collect(),
    })
}

impl DatasetFile {
    pub fn from_bundle(bundle: &DatasetBundle, seed: u64) -> Self {
        Self {
            format_version: DATASET_VERSION,
            seed,
            mixture: bundle.mixture.clone(),
            train: records(&bundle.train),
            heldout: records(&bundle.heldout),
        }
    }

    pub fn into_bundle(self) -> Result<DatasetBundle> {
        self.mixture.validate()?;
        let dim = self.mixture.dim();
        Ok(DatasetBundle {
            train: labeled(&self.train, dim)?,
            heldout: labeled(&self.heldout, dim)?,
            mixture: self.mixture,
        })
    }

    /// JSON with one point record per line.
    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        s.push_str(&format!(
            "{{\"format_version\":{},\"seed\":{},\n\"mixture\":{},\n",
            self.format_version,
            self.seed,
            serde_json::to_string(&self.mixture).map_err(serde_err)?
        ));
        for (name, rows) in [("train", &self.train), ("heldout", &self.heldout)] {
            s.push_str(&format!("\"{name}\":[\n"));
            for (i, r) in rows.iter().enumerate() {
                s.push_str(&serde_json::to_string(r).map_err(serde_err)?);
                s.push_str(if i + 1 < rows.len() { ",\n" } else { "\n" });
            }
            s.push_str(if name == "train" { "],\n" } else { "]}\n" });
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        let f: Self = serde_json::from_str(&text).map_err(serde_err)?;
        ensure(f.format_version <= DATASET_VERSION, || {
            LabError::Checkpoint(format!("dataset format {} is newer than supported {DATASET_VERSION}", f.format_version))
        })?;
        Ok(f)
    }
}

/// `f64` array stored as base64 of its little-endian bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodedArray {
    pub len: usize,
    pub data: String,
}

impl EncodedArray {
    pub fn encode(v: &[f64]) -> Self {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        Self {
            len: v.len(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        let bytes = STANDARD.decode(&self.data).map_err(|e| LabError::Checkpoint(format!("bad base64 payload: {e}")))?;
        ensure(bytes.len() == 8 * self.len, || {
            LabError::Checkpoint(format!("payload holds {} bytes, expected {}", bytes.len(), 8 * self.len))
        })?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Hex sha256 over the raw little-endian bytes of a parameter vector.
pub fn params_digest(v: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub command: String,
    pub timestamp: String,
    pub code_revision: String,
}

impl Provenance {
    pub fn now(command: &str) -> Self {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            command: command.into(),
            timestamp: format!("unix:{secs}"),
            code_revision: format!("erasure-lab {}", env!("CARGO_PKG_VERSION")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub spec: ModelSpec,
    pub dim: usize,
    pub n_concepts: usize,
    pub theta: EncodedArray,
    pub theta0: Option<EncodedArray>,
}

impl ModelRecord {
    pub fn from_model(m: &DiffusionModel) -> Self {
        Self {
            spec: m.spec.clone(),
            dim: m.dim,
            n_concepts: m.n_concepts,
            theta: EncodedArray::encode(m.eps_net.params()),
            theta0: m.frozen_net.as_ref().map(|n| EncodedArray::encode(n.params())),
        }
    }

    pub fn to_model(&self) -> Result<DiffusionModel> {
        let mut m = DiffusionModel::new(&self.spec, self.dim, self.n_concepts, 0)?;
        copy_params(m.eps_net.params_mut(), &self.theta.decode()?, "theta")?;
        if let Some(t0) = &self.theta0 {
            m.freeze();
            let frozen = m.frozen_net.as_mut().expect("frozen after freeze");
            copy_params(frozen.params_mut(), &t0.decode()?, "theta0")?;
        }
        Ok(m)
    }
}

fn copy_params(dst: &mut [f64], src: &[f64], what: &str) -> Result<()> {
    ensure(dst.len() == src.len(), || {
        LabError::Checkpoint(format!("{what} holds {} values, architecture needs {}", src.len(), dst.len()))
    })?;
    dst.copy_from_slice(src);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerRecord {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: EncodedArray,
    pub v: EncodedArray,
}

impl OptimizerRecord {
    fn from_state(s: &AdamWState) -> Self {
        Self {
            config: s.config,
            step: s.step,
            m: EncodedArray::encode(&s.m),
            v: EncodedArray::encode(&s.v),
        }
    }

    fn to_state(&self) -> Result<AdamWState> {
        Ok(AdamWState {
            config: self.config,
            step: self.step,
            m: self.m.decode()?,
            v: self.v.decode()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngRecord {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngRecord {
    pub fn from_rng(r: &ChaCha8Rng) -> Self {
        Self {
            seed: hex(&r.get_seed()),
            stream: r.get_stream(),
            word_pos: format!("{:032x}", r.get_word_pos()),
        }
    }

    pub fn to_rng(&self) -> Result<ChaCha8Rng> {
        let bad = || LabError::Checkpoint("malformed rng state".into());
        ensure(self.seed.len() == 64, bad)?;
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let pos = u128::from_str_radix(&self.word_pos, 16).map_err(|_| bad())?;
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(self.stream);
        r.set_word_pos(pos);
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryRecord {
    pub l_adv: EncodedArray,
    pub l_traj: EncodedArray,
    pub l_total: EncodedArray,
    pub disc_loss: EncodedArray,
    pub disc_accuracy: EncodedArray,
    pub final_probe_accuracy: Option<f64>,
    pub mask_size: usize,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErasureRecord {
    pub config: ErasureConfig,
    pub targets: Vec<usize>,
    pub disc_spec: DiscriminatorSpec,
    pub disc_side_features: usize,
    pub disc_heads: usize,
    pub phi: EncodedArray,
    pub mask: SaliencyMask,
    pub gen_opt: OptimizerRecord,
    pub disc_opt: OptimizerRecord,
    pub rng: RngRecord,
    pub iteration: usize,
    pub history: HistoryRecord,
}

impl ErasureRecord {
    pub fn from_session(s: &ErasureSession) -> Self {
        let r = &s.report;
        Self {
            config: s.config.clone(),
            targets: s.roles.targets.clone(),
            disc_spec: s.disc.spec.clone(),
            disc_side_features: s.disc.side_features,
            disc_heads: s.disc.heads,
            phi: EncodedArray::encode(s.disc.net.params()),
            mask: s.mask.clone(),
            gen_opt: OptimizerRecord::from_state(&s.gen_opt),
            disc_opt: OptimizerRecord::from_state(&s.disc_opt),
            rng: RngRecord::from_rng(&s.rng),
            iteration: s.iteration,
            history: HistoryRecord {
                l_adv: EncodedArray::encode(&r.l_adv),
                l_traj: EncodedArray::encode(&r.l_traj),
                l_total: EncodedArray::encode(&r.l_total),
                disc_loss: EncodedArray::encode(&r.disc_loss),
                disc_accuracy: EncodedArray::encode(&r.disc_accuracy),
                final_probe_accuracy: r.final_probe_accuracy,
                mask_size: r.mask_size,
                wall_time_secs: r.wall_time_secs,
            },
        }
    }

    pub fn report(&self) -> Result<ErasureReport> {
        let h = &self.history;
        Ok(ErasureReport {
            l_adv: h.l_adv.decode()?,
            l_traj: h.l_traj.decode()?,
            l_total: h.l_total.decode()?,
            disc_loss: h.disc_loss.decode()?,
            disc_accuracy: h.disc_accuracy.decode()?,
            final_probe_accuracy: h.final_probe_accuracy,
            mask_size: h.mask_size,
            wall_time_secs: h.wall_time_secs,
        })
    }

    pub fn to_session(&self, model: DiffusionModel) -> Result<ErasureSession> {
        let mut disc = Discriminator::new(&self.disc_spec, model.dim, self.disc_side_features, self.disc_heads, 0)?;
        copy_params(disc.net.params_mut(), &self.phi.decode()?, "phi")?;
        ensure(self.mask.as_slice().len() == model.eps_net.parameter_count(), || {
            LabError::Checkpoint("mask does not match the model".into())
        })?;
        Ok(ErasureSession {
            config: self.config.clone(),
            roles: Roles::new(model.n_concepts, self.targets.clone()),
            model,
            disc,
            mask: self.mask.clone(),
            gen_opt: self.gen_opt.to_state()?,
            disc_opt: self.disc_opt.to_state()?,
            rng: self.rng.to_rng()?,
            iteration: self.iteration,
            report: self.report()?,
        })
    }
}

/// Base-model constants every later evaluation compares against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub alignment: AlignmentScale,
    pub fidelity_reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointBody {
    pub kind: String,
    pub config: RunConfig,
    pub provenance: Provenance,
    pub model: ModelRecord,
    pub calibration: Option<Calibration>,
    pub erasure: Option<ErasureRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub sha256: String,
    pub body: CheckpointBody,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn body_digest(body: &CheckpointBody) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(body).map_err(serde_err)?)))
}

impl Checkpoint {
    pub fn new(body: CheckpointBody) -> Result<Self> {
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            sha256: body_digest(&body)?,
            body,
        })
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(serde_err)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| LabError::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        ensure(probe.format_version <= CHECKPOINT_VERSION, || {
            LabError::Checkpoint(format!(
                "checkpoint format {} is newer than supported {CHECKPOINT_VERSION}",
                probe.format_version
            ))
        })?;
        let c: Self = serde_json::from_str(text).map_err(|e| LabError::Checkpoint(format!("malformed checkpoint: {e}")))?;
        let actual = body_digest(&c.body)?;
        ensure(actual == c.sha256, || {
            LabError::Checkpoint(format!("digest mismatch: recorded {}, computed {actual}", c.sha256))
        })?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_file(path)?)
    }

    pub fn model(&self) -> Result<DiffusionModel> {
        self.body.model.to_model()
    }
}

/// Appends text to a file, creating it when missing.
pub(crate) fn append_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| LabError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| LabError::io(path, e))
}

pub const FIXTURE_VERSION: u32 = 1;

/// A frozen benchmark mixture stored as a versioned TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkFixture {
    pub format_version: u32,
    pub name: String,
    pub mixture: MixtureSpec,
}

impl BenchmarkFixture {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: BenchmarkFixture = toml::from_str(text).map_err(|e| LabError::Serde(format!("fixture: {e}")))?;
        ensure(f.format_version <= FIXTURE_VERSION, || {
            LabError::Checkpoint(format!("fixture format {} is newer than supported {FIXTURE_VERSION}", f.format_version))
        })?;
        f.mixture.validate()?;
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_fixture_matches_builtin_benchmark() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/default-2concept.toml");
        let f = BenchmarkFixture::load(&path).unwrap();
        assert_eq!(f.name, "default-2concept");
        assert_eq!(f.format_version, FIXTURE_VERSION);
        assert_eq!(f.mixture, MixtureSpec::default_benchmark());
    }

    fn small_model() -> DiffusionModel {
        let spec = ModelSpec {
            hidden: vec![8],
            steps: 10,
            ..ModelSpec::default()
        };
        let mut m = DiffusionModel::new(&spec, 2, 1, 3).unwrap();
        m.freeze();
        m.eps_net.params_mut()[0] = std::f64::consts::PI / 7.0;
        m
    }

    fn body() -> CheckpointBody {
        CheckpointBody {
            kind: "base".into(),
            config: RunConfig::default(),
            provenance: Provenance {
                command: "test".into(),
                timestamp: "unix:0".into(),
                code_revision: "r".into(),
            },
            model: ModelRecord::from_model(&small_model()),
            calibration: Some(Calibration {
                alignment: AlignmentScale {
                    base_loglik: -3.5 + 1e-17,
                    floor_loglik: -11.123456789012345,
                },
                fidelity_reference: 0.1 + 0.2,
            }),
            erasure: None,
        }
    }

    #[test]
    fn encoded_arrays_are_exact() {
        let v = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e308, std::f64::consts::E, f64::NAN];
        let back = EncodedArray::encode(&v).decode().unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let bad = EncodedArray { len: 3, ..EncodedArray::encode(&v) };
        assert!(bad.decode().is_err());
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = Checkpoint::new(body()).unwrap();
        let text = c.to_text().unwrap();
        let back = Checkpoint::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text().unwrap(), text);
        assert_eq!(back.model().unwrap(), small_model());
    }

    #[test]
    fn tampering_and_newer_versions_fail() {
        let c = Checkpoint::new(body()).unwrap();
        let text = c.to_text().unwrap();
        let theta = &c.body.model.theta.data;
        let flipped = if theta.starts_with('A') { theta.replacen('A', "B", 1) } else { format!("A{}", &theta[1..]) };
        let tampered = text.replacen(theta.as_str(), &flipped, 1);
        let e = Checkpoint::from_text(&tampered).unwrap_err();
        assert!(e.to_string().contains("digest"), "{e}");
        let newer = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        let e = Checkpoint::from_text(&newer).unwrap_err();
        assert!(e.to_string().contains("newer"), "{e}");
    }

    #[test]
    fn rng_state_round_trips() {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(11);
        r.set_stream(5);
        for _ in 0..37 {
            let _: u32 = r.random();
        }
        let mut back = RngRecord::from_rng(&r).to_rng().unwrap();
        let a: Vec<u64> = (0..10).map(|_| r.random()).collect();
        let b: Vec<u64> = (0..10).map(|_| back.random()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_text_round_trips() {
        let bundle = DatasetBundle::generate(&MixtureSpec::default_benchmark(), 50, 20, 4).unwrap();
        let f = DatasetFile::from_bundle(&bundle, 4);
        let text = f.to_text().unwrap();
        let back: DatasetFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_text().unwrap(), text);
        assert_eq!(back.into_bundle().unwrap(), bundle);
    }
}
