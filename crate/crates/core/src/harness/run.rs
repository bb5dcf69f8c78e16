//! The CLI phases. Each reads its inputs from the output directory, writes
//! artifacts there, appends rows to `results.csv` and updates the manifest.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::files::{params_digest, write_file, Calibration, Checkpoint, CheckpointBody, DatasetFile, ErasureRecord, ModelRecord, Provenance};
use super::plot::{Plot, Series};
use super::results::{append_rows, inputs_digest, read_rows, Manifest, RowSink, RESULTS_FILE};
use crate::adversary::{adaptive_attack, flag_probe_accuracy, AttackTranscript, ProbeConfig};
use crate::data::DatasetBundle;
use crate::diffusion::{train_base, DiffusionModel};
use crate::erasure::{ablation_variants, ErasureConfig, ErasureReport, ErasureSession};
use crate::error::{ensure, LabError, Result};
use crate::infotheory::{leakage_audit, nats_to_bits};
use crate::metrics::{
    concept_accuracy, concept_leakage, divergence_shift, model_entanglement, model_fidelity, tradeoff_sweep_with, EvalReport,
    Evaluator,
};

pub const DATASET_FILE: &str = "dataset.json";
pub const BASE_CHECKPOINT: &str = "base.ckpt.json";
pub const PARTIAL_CHECKPOINT: &str = "erase.partial.ckpt.json";
pub const ERASED_CHECKPOINT: &str = "erased.ckpt.json";
pub const CONFIG_DUMP: &str = "config.toml";

/// Smoothed DDPM loss window used for reporting.
const LOSS_WINDOW: usize = 100;

/// Shared state of one CLI invocation.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub run_id: String,
    pub digest: String,
    pub command: String,
    pub quiet: bool,
}

/// Which checkpoint a phase operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Base,
    Erased,
    /// The erased model when present, else the base model.
    Latest,
}

/// Erase-phase controls that are not part of the experiment definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraseOptions {
    pub resume: bool,
    /// Pause after this many iterations in this invocation.
    pub stop_after: Option<usize>,
    pub checkpoint_every: usize,
}

impl Default for EraseOptions {
    fn default() -> Self {
        Self {
            resume: false,
            stop_after: None,
            checkpoint_every: 500,
        }
    }
}

impl Context {
    pub fn new(config: RunConfig, command: &str, quiet: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            out: config.out.clone(),
            run_id: config.run_id()?,
            digest: config.digest()?,
            command: command.into(),
            quiet,
            config,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Writes rows and the config dump, and records artifacts in the manifest.
    fn finish(&self, phase: &str, sink: Option<&RowSink>, files: &[PathBuf]) -> Result<()> {
        let dump = self.path(CONFIG_DUMP);
        write_file(&dump, self.config.normalized()?.as_bytes())?;
        let results = self.path(RESULTS_FILE);
        if let Some(s) = sink {
            append_rows(&results, &s.rows)?;
        }
        let mut m = Manifest::load_or_new(&self.out, &self.run_id, &self.digest)?;
        let mut all = files.to_vec();
        all.push(dump);
        if results.exists() {
            all.push(results);
        }
        m.record(&self.out, phase, &all)?;
        m.save(&self.out)
    }

    fn dataset(&self) -> Result<DatasetBundle> {
        let p = self.path(DATASET_FILE);
        ensure(p.exists(), || LabError::InvalidArgument(format!("{} missing; run gen-data first", p.display())))?;
        DatasetFile::load(&p)?.into_bundle()
    }

    fn checkpoint(&self, name: &str, hint: &str) -> Result<Checkpoint> {
        let p = self.path(name);
        ensure(p.exists(), || LabError::InvalidArgument(format!("{} missing; run {hint} first", p.display())))?;
        Checkpoint::load(&p)
    }

    fn model(&self, which: ModelChoice) -> Result<(String, Checkpoint)> {
        match which {
            ModelChoice::Base => Ok(("base".into(), self.checkpoint(BASE_CHECKPOINT, "train-base")?)),
            ModelChoice::Erased => Ok(("erased".into(), self.checkpoint(ERASED_CHECKPOINT, "erase")?)),
            ModelChoice::Latest if self.path(ERASED_CHECKPOINT).exists() => self.model(ModelChoice::Erased),
            ModelChoice::Latest => self.model(ModelChoice::Base),
        }
    }

    fn body(&self, kind: &str, model: &DiffusionModel, calibration: Option<Calibration>, erasure: Option<ErasureRecord>) -> CheckpointBody {
        CheckpointBody {
            kind: kind.into(),
            config: self.config.clone(),
            provenance: Provenance::now(&self.command),
            model: ModelRecord::from_model(model),
            calibration,
            erasure,
        }
    }

    fn targets(&self) -> Result<Vec<usize>> {
        self.config.erasure.target_indices(&self.config.dataset.mixture)
    }
}

pub fn gen_data(ctx: &Context) -> Result<()> {
    let c = &ctx.config;
    let seed = c.phase_seed("gen-data", 0);
    let bundle = DatasetBundle::generate(&c.dataset.mixture, c.dataset.n_train, c.dataset.n_heldout, seed)?;
    let path = ctx.path(DATASET_FILE);
    DatasetFile::from_bundle(&bundle, seed).save(&path)?;
    let mut sink = RowSink::new(&ctx.run_id, "gen-data", &inputs_digest(&[&ctx.digest, "gen-data"]));
    sink.push("n_train", bundle.train.len() as f64, None);
    sink.push("n_heldout", bundle.heldout.len() as f64, None);
    for (i, name) in c.dataset.mixture.concepts.iter().enumerate() {
        let on = bundle.train.flags.iter().filter(|f| f[i] == 1).count();
        sink.push(format!("prevalence:{name}"), on as f64 / bundle.train.len().max(1) as f64, None);
    }
    ctx.say(format!("wrote {}", path.display()));
    ctx.finish("gen-data", Some(&sink), &[path])
}

fn smoothed_tail(v: &[f64]) -> f64 {
    let w = v.len().min(LOSS_WINDOW).max(1);
    v[v.len().saturating_sub(w)..].iter().sum::<f64>() / w as f64
}

pub fn train_base_phase(ctx: &Context) -> Result<()> {
    let c = &ctx.config;
    let gates = &c.gates;
    let data = ctx.dataset()?;
    let mut model = DiffusionModel::new(&c.model, data.mixture.dim(), data.mixture.n_concepts(), c.phase_seed("model", 0))?;
    ctx.say(format!("training base model for {} steps", c.training.steps));
    let history = train_base(&mut model, &data, &c.training, c.phase_seed("train-base", 0))?;

    let eval_cfg = c.evaluation_effective();
    let targets = ctx.targets()?;
    let evaluator = Evaluator::calibrate(&model, &data, &targets, &eval_cfg)?;
    let fidelity = model_fidelity(&model, &data.heldout, eval_cfg.samples, eval_cfg.seed ^ 0xba5e)?;
    let accuracies = evaluator
        .detectors
        .iter()
        .map(|d| concept_accuracy(&model, d, eval_cfg.samples, eval_cfg.seed ^ 0xacc))
        .collect::<Result<Vec<_>>>()?;

    let calibration = Calibration {
        alignment: evaluator.alignment,
        fidelity_reference: evaluator.fidelity_reference,
    };
    let ckpt = Checkpoint::new(ctx.body("base", &model, Some(calibration), None))?;
    let ckpt_path = ctx.path(BASE_CHECKPOINT);
    ckpt.save(&ckpt_path)?;
    let loss_path = ctx.path("base_loss.csv");
    let mut loss_csv = String::from("step,ddpm_loss\n");
    for (i, l) in history.iter().enumerate() {
        loss_csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_file(&loss_path, loss_csv.as_bytes())?;

    let digest = inputs_digest(&[&ctx.digest, &params_digest(model.eps_net.params())]);
    let mut sink = RowSink::new(&ctx.run_id, "train-base", &digest);
    sink.push("ddpm_loss_start", smoothed_tail(&history[..history.len().min(LOSS_WINDOW)]), None);
    sink.push("ddpm_loss_end", smoothed_tail(&history), None);
    sink.push("fd2_heldout", fidelity.value, None);
    sink.push("fd2_neutral_reference", evaluator.fidelity_reference, None);
    sink.push("alignment_base_loglik", evaluator.alignment.base_loglik, None);
    sink.push("alignment_floor_loglik", evaluator.alignment.floor_loglik, None);
    for (d, a) in evaluator.detectors.iter().zip(&accuracies) {
        let name = &data.mixture.concepts[d.concept];
        sink.push(format!("concept_accuracy:{name}"), *a, None);
        sink.push(format!("detector_heldout_accuracy:{name}"), d.fit.heldout_accuracy, None);
    }
    ctx.finish("train-base", Some(&sink), &[ckpt_path, loss_path])?;
    ctx.say(format!("base model: FD² {:.4}, concept accuracy {:?}", fidelity.value, accuracies));
    if gates.enforce {
        ensure(fidelity.value <= gates.base_fidelity, || {
            LabError::Invariant(format!("base FD² {:.4} above gate {}", fidelity.value, gates.base_fidelity))
        })?;
        ensure(accuracies.iter().all(|&a| a >= gates.base_accuracy), || {
            LabError::Invariant(format!("base concept accuracy {accuracies:?} below gate {}", gates.base_accuracy))
        })?;
    }
    Ok(())
}

fn history_csv(r: &ErasureReport) -> String {
    let mut s = String::from("iteration,l_adv,l_traj,l_total,disc_loss,disc_accuracy\n");
    for i in 0..r.l_adv.len() {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            r.l_adv[i],
            r.l_traj[i],
            r.l_total[i],
            r.disc_loss[i],
            r.disc_accuracy[i]
        ));
    }
    s
}

/// Plug-in MI of the first target at one point of an erasure run.
fn trace_mi(ctx: &Context, model: &DiffusionModel, targets: &[usize], iteration: usize) -> Result<f64> {
    let e = &ctx.config.evaluation;
    let n = (e.samples / 2).max(100);
    Ok(concept_leakage(model, &targets[..1], n, e.bins, ctx.config.phase_seed("mi-trace", iteration as u64))?.per_concept[0])
}

pub fn erase(ctx: &Context, opts: EraseOptions) -> Result<()> {
    ensure(opts.checkpoint_every >= 1, || LabError::InvalidArgument("--checkpoint-every must be >= 1".into()))?;
    let data = ctx.dataset()?;
    let base_ckpt = ctx.checkpoint(BASE_CHECKPOINT, "train-base")?;
    let calibration = base_ckpt.body.calibration.clone();
    let base = base_ckpt.model()?;
    let cfg: ErasureConfig = ctx.config.erasure_effective();
    let partial = ctx.path(PARTIAL_CHECKPOINT);
    let trace_path = ctx.path("mi_trace.csv");
    let targets = ctx.targets()?;

    let mut session = if opts.resume && partial.exists() {
        let ck = Checkpoint::load(&partial)?;
        let rec = ck.body.erasure.as_ref().ok_or_else(|| LabError::Checkpoint("partial checkpoint has no erasure state".into()))?;
        ensure(rec.config == cfg, || LabError::Checkpoint("partial checkpoint was made with a different erasure config".into()))?;
        ctx.say(format!("resuming erasure at iteration {}", rec.iteration));
        rec.to_session(ck.model()?)?
    } else {
        ctx.say("starting erasure");
        let s = ErasureSession::start(&base, &data.mixture, &data.train, &cfg)?;
        write_file(&trace_path, format!("iteration,plugin_mi\n0,{}\n", trace_mi(ctx, &base, &targets, 0)?).as_bytes())?;
        s
    };

    let budget = opts.stop_after.unwrap_or(usize::MAX);
    let mut done_here = 0;
    while !session.is_done() && done_here < budget {
        let n = opts.checkpoint_every.min(budget - done_here);
        session.run(&data.train, n)?;
        done_here += n;
        let mi = trace_mi(ctx, &session.model, &targets, session.iteration)?;
        super::files::append_file(&trace_path, &format!("{},{mi}\n", session.iteration))?;
        let ck = Checkpoint::new(ctx.body("erasure-partial", &session.model, calibration.clone(), Some(ErasureRecord::from_session(&session))))?;
        ck.save(&partial)?;
        ctx.say(format!("iteration {}/{}: plug-in MI {mi:.4}", session.iteration, cfg.iterations));
    }
    if !session.is_done() {
        ctx.say(format!("paused at iteration {}; continue with --resume", session.iteration));
        return ctx.finish("erase", None, &[partial, trace_path]);
    }

    session.final_probe()?;
    let respected = session.mask_respected()?;
    let ck = Checkpoint::new(ctx.body("erasure", &session.model, calibration, Some(ErasureRecord::from_session(&session))))?;
    let erased_path = ctx.path(ERASED_CHECKPOINT);
    ck.save(&erased_path)?;
    let hist_path = ctx.path("erase_history.csv");
    write_file(&hist_path, history_csv(&session.report).as_bytes())?;

    let r = &session.report;
    let digest = inputs_digest(&[&ctx.digest, &params_digest(session.model.eps_net.params())]);
    let mut sink = RowSink::new(&ctx.run_id, "erase", &digest);
    sink.push("l_adv_final", *r.l_adv.last().unwrap_or(&f64::NAN), None);
    sink.push("l_traj_final", *r.l_traj.last().unwrap_or(&f64::NAN), None);
    sink.push("l_total_final", *r.l_total.last().unwrap_or(&f64::NAN), None);
    sink.push("disc_accuracy_final", smoothed_tail(&r.disc_accuracy), None);
    sink.push("mask_size", r.mask_size as f64, None);
    sink.push("parameter_count", session.model.eps_net.parameter_count() as f64, None);
    if let Some(p) = r.final_probe_accuracy {
        sink.push("probe_accuracy", p, None);
    }
    sink.push("mask_respected", f64::from(u8::from(respected)), None);
    ctx.finish("erase", Some(&sink), &[erased_path, hist_path, trace_path, partial])?;
    ensure(respected, || LabError::Invariant("parameters outside the saliency mask changed".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct EvalFile {
    base: EvalReport,
    erased: Option<EvalReport>,
    divergence_shift: Option<f64>,
    entanglement_base: f64,
    entanglement_erased: Option<f64>,
}

fn evaluator_for(ctx: &Context, data: &DatasetBundle, base: &Checkpoint) -> Result<Evaluator> {
    let cal = base
        .body
        .calibration
        .as_ref()
        .ok_or_else(|| LabError::Checkpoint("base checkpoint lacks alignment constants".into()))?;
    Evaluator::with_calibration(data, &ctx.targets()?, &ctx.config.evaluation_effective(), cal.alignment, cal.fidelity_reference)
}

fn push_eval(sink: &mut RowSink, prefix: &str, r: &EvalReport) {
    sink.push(format!("{prefix}:acc"), r.accuracy, None);
    sink.push(format!("{prefix}:fd2"), r.fidelity, None);
    sink.push(format!("{prefix}:alignment"), r.alignment, None);
    sink.push(format!("{prefix}:h"), r.harmonic.h, None);
    for c in &r.per_concept {
        sink.push(format!("{prefix}:acc:{}", c.concept), c.accuracy, None);
    }
}

pub fn evaluate(ctx: &Context) -> Result<()> {
    let data = ctx.dataset()?;
    let base_ckpt = ctx.checkpoint(BASE_CHECKPOINT, "train-base")?;
    let base = base_ckpt.model()?;
    let ev = evaluator_for(ctx, &data, &base_ckpt)?;
    let erased = if ctx.path(ERASED_CHECKPOINT).exists() {
        Some(Checkpoint::load(&ctx.path(ERASED_CHECKPOINT))?.model()?)
    } else {
        None
    };
    let seed = ev.config.seed;
    let n = ev.config.samples;
    let concept = ev.targets[0];
    let base_report = ev.evaluate(&base)?;
    let ent_base = model_entanglement(&base, &data.mixture, concept, n, ev.config.bins, seed ^ 0xe7)?;
    let (erased_report, shift, ent_erased) = match &erased {
        Some(m) => (
            Some(ev.evaluate(m)?),
            Some(divergence_shift(&base, m, &data.mixture, concept, n, seed ^ 0xd5)?.delta),
            Some(model_entanglement(m, &data.mixture, concept, n, ev.config.bins, seed ^ 0xe7)?),
        ),
        None => (None, None, None),
    };
    let mut parts = vec![ctx.digest.clone(), params_digest(base.eps_net.params())];
    if let Some(m) = &erased {
        parts.push(params_digest(m.eps_net.params()));
    }
    let parts: Vec<&str> = parts.iter().map(String::as_str).collect();
    let mut sink = RowSink::new(&ctx.run_id, "evaluate", &inputs_digest(&parts));
    push_eval(&mut sink, "base", &base_report);
    sink.push("base:entanglement", ent_base, None);
    if let (Some(r), Some(s), Some(e)) = (&erased_report, shift, ent_erased) {
        push_eval(&mut sink, "erased", r);
        sink.push("erased:divergence_shift", s, None);
        sink.push("erased:entanglement", e, None);
        ctx.say(format!("accuracy {:.3} -> {:.3}; alignment {:.1}; H {:.3}", base_report.accuracy, r.accuracy, r.alignment, r.harmonic.h));
    }
    let file = EvalFile {
        base: base_report,
        erased: erased_report,
        divergence_shift: shift,
        entanglement_base: ent_base,
        entanglement_erased: ent_erased,
    };
    let path = ctx.path("eval.json");
    write_file(&path, serde_json::to_string_pretty(&file).map_err(|e| LabError::Serde(e.to_string()))?.as_bytes())?;
    ctx.finish("evaluate", Some(&sink), &[path])
}

pub fn audit(ctx: &Context, which: ModelChoice) -> Result<()> {
    let (label, ck) = ctx.model(which)?;
    let model = ck.model()?;
    let l_adv = match &ck.body.erasure {
        Some(rec) => rec.report()?.l_adv.last().copied(),
        None => None,
    };
    let targets = ctx.targets()?;
    let cfg = ctx.config.audit_effective();
    let digest = inputs_digest(&[&ctx.digest, &params_digest(model.eps_net.params()), &label]);
    let mut sink_rows = Vec::new();
    let mut audits = Vec::new();
    let mut ok = true;
    for &c in &targets {
        let a = leakage_audit(&model, c, l_adv, &cfg)?;
        let phase = if targets.len() == 1 {
            "audit".to_string()
        } else {
            format!("audit:{}", ctx.config.dataset.mixture.concepts[c])
        };
        let mut sink = RowSink::new(&ctx.run_id, &phase, &digest);
        for r in &a.reports {
            sink.push(r.name.clone(), r.value, Some(r.slack));
        }
        let show = |name: &str| {
            let v = a.value(name).unwrap_or(f64::NAN);
            format!("{name} {v:.4} nats ({:.4} bits)", nats_to_bits(v))
        };
        ctx.say(format!(
            "{label} audit ({}): {}; {}; {}; {}",
            ctx.config.dataset.mixture.concepts[c],
            show("plugin_mi"),
            show("entropy_bound"),
            show("fano_bound"),
            show("pinsker")
        ));
        if a.upper_bounds_hold && !a.ordering_holds {
            eprintln!(
                "warning: fano_bound sits more than {:.4} nats under plugin_mi for {}; expected while leakage is far from zero",
                a.slack, ctx.config.dataset.mixture.concepts[c]
            );
        }
        ok &= a.upper_bounds_hold;
        sink_rows.extend(sink.rows);
        audits.push(a);
    }
    let path = ctx.path(&format!("audit_{label}.json"));
    write_file(&path, serde_json::to_string_pretty(&audits).map_err(|e| LabError::Serde(e.to_string()))?.as_bytes())?;
    let mut sink = RowSink::new(&ctx.run_id, "audit", &digest);
    sink.rows = sink_rows;
    ctx.finish("audit", Some(&sink), &[path])?;
    ensure(ok, || LabError::Invariant(format!("an upper bound fell below plugin_mi on the {label} model")))
}

/// Per-cell confidence so the whole attack grid holds the configured level.
pub fn cell_confidence(family: f64, cells: usize) -> f64 {
    1.0 - (1.0 - family) / cells.max(1) as f64
}

pub fn attack(ctx: &Context, which: ModelChoice) -> Result<()> {
    let (label, ck) = ctx.model(which)?;
    let model = ck.model()?;
    let suite = &ctx.config.attack;
    let base_cfg = ctx.config.attack_effective();
    let cells = suite.queries.len() * suite.strategies.len();
    let cfg = crate::adversary::AttackConfig {
        confidence: cell_confidence(base_cfg.confidence, cells),
        ..base_cfg
    };
    let truth = ctx.config.dataset.mixture.prepare()?;
    let concept = ctx.targets()?[0];
    let digest = inputs_digest(&[&ctx.digest, &params_digest(model.eps_net.params()), &label]);
    let mut sink = RowSink::new(&ctx.run_id, &format!("attack:{label}"), &digest);
    let mut transcripts: Vec<AttackTranscript> = Vec::new();
    for &s in &suite.strategies {
        for &q in &suite.queries {
            let t = adaptive_attack(&model, &truth, concept, q, s, &cfg)?;
            sink.push(format!("success:{}:q{q}", s.name()), t.success, Some(0.5 * (t.ci_high - t.ci_low)));
            ctx.say(format!("{label} {} q={q}: success {:.3} [{:.3}, {:.3}]", s.name(), t.success, t.ci_low, t.ci_high));
            transcripts.push(t);
        }
    }
    let path = ctx.path(&format!("attack_{label}.json"));
    write_file(&path, serde_json::to_string(&transcripts).map_err(|e| LabError::Serde(e.to_string()))?.as_bytes())?;
    ctx.finish("attack", Some(&sink), &[path])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct RunSummary {
    name: String,
    lambda: f64,
    mask_size: usize,
    l_adv_final: f64,
    l_traj_final: f64,
    probe_accuracy: Option<f64>,
}

fn summary(name: &str, lambda: f64, r: &ErasureReport) -> RunSummary {
    RunSummary {
        name: name.into(),
        lambda,
        mask_size: r.mask_size,
        l_adv_final: r.l_adv.last().copied().unwrap_or(f64::NAN),
        l_traj_final: r.l_traj.last().copied().unwrap_or(f64::NAN),
        probe_accuracy: r.final_probe_accuracy,
    }
}

/// Thread pool capped by `ERASURE_LAB_THREADS` when set.
pub fn sweep_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("ERASURE_LAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| LabError::InvalidArgument(format!("ERASURE_LAB_THREADS must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| LabError::InvalidArgument(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct AblationRun {
    variant: String,
    repetition: usize,
    probe_accuracy: f64,
    fd2: f64,
    plugin_mi: f64,
}

pub fn sweep(ctx: &Context) -> Result<()> {
    use rayon::prelude::*;
    let c = &ctx.config;
    let data = ctx.dataset()?;
    let base_ckpt = ctx.checkpoint(BASE_CHECKPOINT, "train-base")?;
    let base = base_ckpt.model()?;
    let ev = evaluator_for(ctx, &data, &base_ckpt)?;
    let erase_cfg = ErasureConfig {
        final_probe_samples: 0,
        ..c.erasure_effective()
    };
    let targets = ctx.targets()?;
    let pool = sweep_pool()?;
    let sweep_dir = ctx.path("sweep");
    let digest = inputs_digest(&[&ctx.digest, &params_digest(base.eps_net.params())]);
    let mut sink = RowSink::new(&ctx.run_id, "sweep", &digest);
    let mut files = Vec::new();

    if !c.sweep.lambdas.is_empty() {
        let dir = sweep_dir.clone();
        let sw = pool.install(|| {
            tradeoff_sweep_with(&base, &data, &erase_cfg, &ev, &c.sweep.lambdas, c.sweep.mi_samples, |l, _, r| {
                ctx.say(format!("trade-off run lambda={l} finished"));
                let p = dir.join(format!("lambda-{l}")).join("summary.json");
                write_file(&p, serde_json::to_string_pretty(&summary("tradeoff", l, r)).map_err(|e| LabError::Serde(e.to_string()))?.as_bytes())
            })
        })?;
        let mut csv = String::from("lambda,plugin_mi_nats,fd2_neutral,error\n");
        for p in &sw.points {
            csv.push_str(&format!("{},{},{},{}\n", p.lambda, p.mi, p.fidelity, p.error.clone().unwrap_or_default().replace(',', ";")));
            if p.error.is_none() {
                sink.push(format!("tradeoff:lambda={}:plugin_mi", p.lambda), p.mi, None);
                sink.push(format!("tradeoff:lambda={}:fd2", p.lambda), p.fidelity, None);
            } else {
                ctx.say(format!("lambda {} diverged: {}", p.lambda, p.error.as_deref().unwrap_or("")));
            }
            let s = sweep_dir.join(format!("lambda-{}", p.lambda)).join("summary.json");
            if s.exists() {
                files.push(s);
            }
        }
        let path = ctx.path("tradeoff.csv");
        write_file(&path, csv.as_bytes())?;
        files.push(path);
    }

    if c.sweep.ablation_repetitions > 0 {
        let mut jobs = Vec::new();
        for rep in 0..c.sweep.ablation_repetitions {
            let rep_cfg = ErasureConfig {
                seed: c.phase_seed("ablation", rep as u64),
                ..erase_cfg.clone()
            };
            let set = ablation_variants(&rep_cfg)?;
            for (name, v) in set.named() {
                jobs.push((name.to_string(), rep, v.clone()));
            }
        }
        let runs: Vec<AblationRun> = pool.install(|| {
            jobs.par_iter()
                .map(|(name, rep, v)| {
                    let (m, r) = crate::erasure::score_train(&base, &data.mixture, &data.train, v)?;
                    let n = c.sweep.mi_samples;
                    let probe_cfg = ProbeConfig {
                        seed: c.phase_seed("ablation-probe", *rep as u64),
                        ..ProbeConfig::default()
                    };
                    let run = AblationRun {
                        variant: name.clone(),
                        repetition: *rep,
                        probe_accuracy: flag_probe_accuracy(&m, targets[0], n, &probe_cfg)?,
                        fd2: ev.neutral_fidelity(&m)?,
                        plugin_mi: concept_leakage(&m, &targets[..1], n, ev.config.bins, v.seed ^ 0x77)?.per_concept[0],
                    };
                    ctx.say(format!("ablation {name} r{rep}: probe {:.3}, FD² {:.3}", run.probe_accuracy, run.fd2));
                    let p = sweep_dir.join(format!("ablation-{name}-r{rep}")).join("summary.json");
                    write_file(&p, serde_json::to_string_pretty(&summary(name, v.lambda, &r)).map_err(|e| LabError::Serde(e.to_string()))?.as_bytes())?;
                    Ok(run)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut csv = String::from("variant,repetition,probe_accuracy,fd2_neutral,plugin_mi_nats\n");
        for r in &runs {
            csv.push_str(&format!("{},{},{},{},{}\n", r.variant, r.repetition, r.probe_accuracy, r.fd2, r.plugin_mi));
            sink.push(format!("ablation:{}:r{}:probe_accuracy", r.variant, r.repetition), r.probe_accuracy, None);
            sink.push(format!("ablation:{}:r{}:fd2", r.variant, r.repetition), r.fd2, None);
            sink.push(format!("ablation:{}:r{}:plugin_mi", r.variant, r.repetition), r.plugin_mi, None);
            files.push(sweep_dir.join(format!("ablation-{}-r{}", r.variant, r.repetition)).join("summary.json"));
        }
        let path = ctx.path("ablation.csv");
        write_file(&path, csv.as_bytes())?;
        files.push(path);
    }
    ctx.finish("sweep", Some(&sink), &files)
}

fn read_csv_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = super::files::read_file(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| LabError::Serde(e.to_string()))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()).map_err(|e| LabError::Serde(e.to_string())))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, rows))
}

fn num(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

/// Names of the plots `report` can draw.
pub const PLOTS: [&str; 4] = ["loss_curves", "mi_vs_iteration", "tradeoff_frontier", "attack_success"];

fn build_plot(ctx: &Context, name: &str) -> Result<Option<Plot>> {
    match name {
        "loss_curves" => {
            let p = ctx.path("erase_history.csv");
            if !p.exists() {
                return Ok(None);
            }
            let (_, rows) = read_csv_columns(&p)?;
            let col = |i: usize| rows.iter().map(|r| (num(&r[0]), num(&r[i]))).collect::<Vec<_>>();
            Ok(Some(Plot {
                title: "Erasure losses".into(),
                x_label: "iteration".into(),
                y_label: "loss (nats)".into(),
                log_x: false,
                series: vec![Series::line("L_adv", col(1)), Series::line("L_traj", col(2)), Series::line("L_total", col(3))],
            }))
        }
        "mi_vs_iteration" => {
            let p = ctx.path("mi_trace.csv");
            if !p.exists() {
                return Ok(None);
            }
            let (_, rows) = read_csv_columns(&p)?;
            Ok(Some(Plot {
                title: "Residual leakage during erasure".into(),
                x_label: "iteration".into(),
                y_label: "plug-in MI (nats)".into(),
                log_x: false,
                series: vec![Series::line("I(C;X)", rows.iter().map(|r| (num(&r[0]), num(&r[1]))).collect())],
            }))
        }
        "tradeoff_frontier" => {
            let p = ctx.path("tradeoff.csv");
            if !p.exists() {
                return Ok(None);
            }
            let (_, rows) = read_csv_columns(&p)?;
            let series = rows
                .iter()
                .filter(|r| r[3].is_empty())
                .map(|r| Series::scatter(&format!("lambda={}", r[0]), vec![(num(&r[1]), num(&r[2]))]))
                .collect();
            Ok(Some(Plot {
                title: "Erasure/fidelity trade-off".into(),
                x_label: "plug-in MI (nats)".into(),
                y_label: "neutral FD² (coordinate units²)".into(),
                log_x: false,
                series,
            }))
        }
        "attack_success" => {
            let rows = read_rows(&ctx.path(RESULTS_FILE))?;
            let mut series: Vec<Series> = Vec::new();
            for r in rows.iter().filter(|r| r.phase.starts_with("attack:")) {
                let mut parts = r.metric.split(':');
                let (Some("success"), Some(strategy), Some(q)) = (parts.next(), parts.next(), parts.next()) else {
                    continue;
                };
                let q: f64 = num(q.trim_start_matches('q'));
                let name = format!("{} {strategy}", r.phase.trim_start_matches("attack:"));
                match series.iter_mut().find(|s| s.name == name) {
                    Some(s) => s.points.push((q, r.value)),
                    None => series.push(Series::line(&name, vec![(q, r.value)])),
                }
            }
            if series.is_empty() {
                return Ok(None);
            }
            Ok(Some(Plot {
                title: "Adaptive attack success".into(),
                x_label: "queries q".into(),
                y_label: "success rate (accuracy)".into(),
                log_x: true,
                series,
            }))
        }
        other => Err(LabError::InvalidArgument(format!("unknown plot `{other}`"))),
    }
}

pub fn report(ctx: &Context) -> Result<()> {
    let results = ctx.path(RESULTS_FILE);
    ensure(results.exists(), || LabError::Empty(format!("{} missing; run a phase first", results.display())))?;
    ensure(!read_rows(&results)?.is_empty(), || LabError::Empty("results file has no rows".into()))?;
    let dir = ctx.path("report");
    let mut files = Vec::new();
    for name in PLOTS {
        match build_plot(ctx, name)? {
            Some(p) => {
                let csv = dir.join(format!("{name}.csv"));
                let svg = dir.join(format!("{name}.svg"));
                write_file(&csv, p.to_csv()?.as_bytes())?;
                write_file(&svg, p.to_svg()?.as_bytes())?;
                files.push(csv);
                files.push(svg);
            }
            None => ctx.say(format!("skipping {name}: its source has not been produced yet")),
        }
    }
    ctx.finish("report", None, &files)
}
