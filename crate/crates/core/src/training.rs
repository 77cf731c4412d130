//! Training loop: Adam with global-norm gradient clipping over fresh
//! isotropic prompt batches, periodic fixed-bank evaluation, best-model
//! selection, JSONL run logs and resumable checkpoints.
//!
//! Determinism contract: a run is a pure function of `(RunConfig, seed)`.
//! Initialization draws from the `(seed, "init")` stream; the batch for
//! step `t` draws from `fork_index(t)` of the `(seed, "train")` stream, so
//! resuming from a checkpoint replays the identical remaining trajectory.
//! Evaluation banks derive from `bank_seed` under dedicated labels and are
//! disjoint from every training stream.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::datagen::{sample_batch, CovarianceKind, PromptBatch};
use crate::error::{Error, Result};
use crate::eval::{anisotropic_bank, standard_bank, test_loss};
use crate::float::Float;
use crate::model::{
    embed_prompt, forward, targets_tensor, AttentionKind, ModelConfig, Params,
};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Scalar type used for a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Optimization and evaluation schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub grad_clip_max_norm: f64,
    /// Evaluate (and checkpoint) every this many steps; the final step is
    /// always evaluated.
    pub eval_every: u64,
    /// Seeds a harness should run this config under; manifests may omit it
    /// and supply a top-level seed list instead.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Size of each fixed evaluation bank.
    pub bank_size: usize,
    /// Seed for the evaluation banks (decoupled from model seeds).
    pub bank_seed: u64,
    pub precision: Precision,
}

impl TrainConfig {
    /// Tuned defaults per attention kind at desk scale: the softmax variant
    /// trains with lr 1e-4 and batch 32, the kernelized variant with lr
    /// 3e-4 and batch 64 over a shorter schedule.
    pub fn defaults_for(kind: AttentionKind) -> TrainConfig {
        let (learning_rate, batch_size, steps) = match kind {
            AttentionKind::Quadratic => (1e-4, 32, 2000),
            AttentionKind::Linear(_) => (3e-4, 64, 1500),
        };
        TrainConfig {
            learning_rate,
            batch_size,
            steps,
            grad_clip_max_norm: 1.0,
            eval_every: 100,
            seeds: vec![42, 100, 7, 10, 2025],
            bank_size: 2000,
            bank_seed: 1000,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.steps == 0 || self.eval_every == 0 {
            return bad("batch_size, steps and eval_every must be positive");
        }
        if !(self.grad_clip_max_norm.is_finite() && self.grad_clip_max_norm > 0.0) {
            return bad("grad_clip_max_norm must be positive");
        }
        if self.bank_size == 0 {
            return bad("bank_size must be positive");
        }
        Ok(())
    }
}

/// Everything one run depends on; serialized as the run directory's
/// `config.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Hash of the experiment manifest this run came from, when a harness
    /// launched it; standalone runs leave it unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
}

/// Hex SHA-256 of the canonical serialized config.
pub fn config_hash(run: &RunConfig) -> Result<String> {
    let text = toml::to_string(run)?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// First log line: identifies the run and everything needed to regenerate
/// its banks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLine {
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
    pub seed: u64,
    pub attention: String,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_x: usize,
    pub k: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub bank_size: usize,
    pub bank_seed: u64,
    pub precision: String,
}

/// One evaluation point. `train_loss` is the mean training loss over the
/// window since the previous record (absent at step 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub samples_seen: u64,
    pub train_loss: Option<f64>,
    pub test_loss: f64,
    pub aniso_test_loss: f64,
}

/// Final line; carries timing, which is exempt from determinism
/// comparisons between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoneLine {
    pub wall_clock_s: f64,
    pub seconds_per_step: f64,
    pub best_step: u64,
    pub best_test_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogLine {
    Meta(MetaLine),
    Eval(EvalRecord),
    Done(DoneLine),
}

/// Parsed `log.jsonl`.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub meta: MetaLine,
    pub records: Vec<EvalRecord>,
    pub done: Option<DoneLine>,
}

/// Reads and validates a run log: meta first, records strictly increasing
/// in step with consistent sample counts.
pub fn read_log(path: &Path) -> Result<RunLog> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |reason: String| Error::Format {
        kind: "log",
        reason,
    };
    let mut meta = None;
    let mut records: Vec<EvalRecord> = Vec::new();
    let mut done = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<LogLine>(line)? {
            LogLine::Meta(m) => {
                if meta.is_some() {
                    return Err(fail("duplicate meta line".into()));
                }
                meta = Some(m);
            }
            LogLine::Eval(r) => {
                if let Some(prev) = records.last() {
                    if r.step <= prev.step {
                        return Err(fail(format!(
                            "record steps not increasing: {} after {}",
                            r.step, prev.step
                        )));
                    }
                }
                records.push(r);
            }
            LogLine::Done(d) => done = Some(d),
        }
    }
    let meta = meta.ok_or_else(|| fail("missing meta line".into()))?;
    for r in &records {
        if r.samples_seen != r.step * meta.batch_size as u64 {
            return Err(fail(format!("inconsistent samples_seen at step {}", r.step)));
        }
    }
    Ok(RunLog {
        meta,
        records,
        done,
    })
}

/// Mean over batch and all `k + 1` positions of `(y_hat - y)^2 / d_x`.
/// Stays on the tape, so it is the trainable objective.
pub fn training_loss<T: Float>(
    preds: &Tensor<T>,
    targets: &Tensor<T>,
    d_x: usize,
) -> Result<Tensor<T>> {
    preds
        .sub(targets)?
        .square()?
        .mean_all()?
        .mul_scalar(T::cast(1.0 / d_x as f64))
}

/// Scales all gradients by `max_norm / N` when their global L2 norm `N`
/// exceeds `max_norm`; returns the pre-clip norm. Norm accumulation runs
/// in `f64` regardless of `T`.
pub fn clip_gradients<T: Float>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for v in g.data() {
            let x = v.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = T::cast(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut().iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One Adam update with bias correction; `step` is the 1-based global step
/// count. Moment updates run through `f64` and narrow back to `T`.
pub fn adam_step<T: Float>(
    params: &mut Params<T>,
    m: &mut Params<T>,
    v: &mut Params<T>,
    grads: &[Tensor<T>],
    step: u64,
    lr: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    let mut pf = params.flatten_mut();
    let mut mf = m.flatten_mut();
    let mut vf = v.flatten_mut();
    assert_eq!(pf.len(), grads.len());
    for i in 0..pf.len() {
        let p = pf[i].1.data_mut();
        let mi = mf[i].1.data_mut();
        let vi = vf[i].1.data_mut();
        let g = grads[i].data();
        for j in 0..p.len() {
            let gj = g[j].as_f64();
            let mj = ADAM_BETA1 * mi[j].as_f64() + (1.0 - ADAM_BETA1) * gj;
            let vj = ADAM_BETA2 * vi[j].as_f64() + (1.0 - ADAM_BETA2) * gj * gj;
            mi[j] = T::cast(mj);
            vi[j] = T::cast(vj);
            let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
            p[j] = T::cast(p[j].as_f64() - update);
        }
    }
}

/// Flags a run as diverged when the windowed training loss is NaN, or
/// stays above 10x its first recorded value for 100 consecutive records.
pub struct DivergenceMonitor {
    initial: Option<f64>,
    consecutive_high: u32,
}

impl DivergenceMonitor {
    const FACTOR: f64 = 10.0;
    const PATIENCE: u32 = 100;

    pub fn new() -> Self {
        DivergenceMonitor {
            initial: None,
            consecutive_high: 0,
        }
    }

    pub fn observe(&mut self, step: u64, train_loss: f64) -> Result<()> {
        if !train_loss.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: "training loss is not finite".into(),
            });
        }
        let initial = *self.initial.get_or_insert(train_loss);
        if train_loss > Self::FACTOR * initial {
            self.consecutive_high += 1;
            if self.consecutive_high >= Self::PATIENCE {
                return Err(Error::Divergence {
                    step,
                    reason: format!(
                        "training loss above {}x initial for {} consecutive evaluations",
                        Self::FACTOR,
                        Self::PATIENCE
                    ),
                });
            }
        } else {
            self.consecutive_high = 0;
        }
        Ok(())
    }
}

impl Default for DivergenceMonitor {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`train_run`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<EvalRecord>,
    pub best_step: u64,
    pub best_test_loss: f64,
    pub final_test_loss: f64,
    /// False when a session step limit stopped the run before `steps`.
    pub completed: bool,
    pub run_dir: PathBuf,
}

/// Trains one `(config, seed)` run into `out_dir`, writing `config.toml`,
/// `log.jsonl`, `ckpt_last.bin` and `ckpt_best.bin`.
///
/// With `resume`, an interrupted run continues from `ckpt_last.bin` and
/// reproduces exactly the log a straight-through run would have written
/// (timing line aside); a completed run returns its outcome without
/// retraining. Without `resume`, an existing run directory is an error.
pub fn train_run<T: Float>(run: &RunConfig, out_dir: &Path, resume: bool) -> Result<RunOutcome> {
    train_run_with_limit::<T>(run, out_dir, resume, None)
}

/// [`train_run`] stopping after at most `session_limit` optimization steps
/// this call, leaving a resumable directory (no completion line). Progress
/// since the last evaluation checkpoint is discarded on resume.
pub fn train_run_with_limit<T: Float>(
    run: &RunConfig,
    out_dir: &Path,
    resume: bool,
    session_limit: Option<u64>,
) -> Result<RunOutcome> {
    run.model.validate()?;
    run.train.validate()?;
    let started = Instant::now();
    let hash = config_hash(run)?;
    let config_path = out_dir.join("config.toml");
    let log_path = out_dir.join("log.jsonl");
    let last_path = out_dir.join("ckpt_last.bin");
    let best_path = out_dir.join("ckpt_best.bin");

    let mut prior_records: Vec<EvalRecord> = Vec::new();
    let mut resumed_from: Option<u64> = None;
    if config_path.exists() {
        let text = fs::read_to_string(&config_path)
            .map_err(|e| Error::io(config_path.display().to_string(), e))?;
        let on_disk: RunConfig = toml::from_str(&text)?;
        if on_disk != *run {
            return Err(Error::Config(format!(
                "run directory {} holds a different config",
                out_dir.display()
            )));
        }
        if !resume {
            return Err(Error::Config(format!(
                "run directory {} already exists; resume it or pick a fresh directory",
                out_dir.display()
            )));
        }
        if log_path.exists() {
            let log = read_log(&log_path)?;
            if log.done.is_some() {
                return Ok(outcome_from_records(log.records, true, out_dir));
            }
            prior_records = log.records;
        }
        if last_path.exists() {
            let ckpt: Checkpoint<T> = load_checkpoint(&last_path, &run.model)?;
            resumed_from = Some(ckpt.step);
        }
    } else {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
        fs::write(&config_path, toml::to_string_pretty(run)?)
            .map_err(|e| Error::io(config_path.display().to_string(), e))?;
    }

    let meta = MetaLine {
        config_hash: hash,
        manifest_hash: run.manifest_hash.clone(),
        seed: run.seed,
        attention: run.model.attention.slug(),
        layers: run.model.layers,
        d_model: run.model.d_model,
        heads: run.model.heads,
        d_x: run.model.d_x,
        k: run.model.k,
        learning_rate: run.train.learning_rate,
        batch_size: run.train.batch_size,
        steps: run.train.steps,
        eval_every: run.train.eval_every,
        bank_size: run.train.bank_size,
        bank_seed: run.train.bank_seed,
        precision: run.train.precision.to_string(),
    };

    let iso_bank: PromptBatch<T> = standard_bank(
        run.train.bank_seed,
        run.train.bank_size,
        run.model.k,
        run.model.d_x,
    )?;
    let aniso_bank: PromptBatch<T> = anisotropic_bank(
        run.train.bank_seed,
        run.train.bank_size,
        run.model.k,
        run.model.d_x,
    )?;

    // Restore or initialize the optimizer state and the log.
    let (mut ckpt, mut records) = match resumed_from {
        Some(start) => {
            let ckpt: Checkpoint<T> = load_checkpoint(&last_path, &run.model)?;
            // Records past the checkpoint belong to work the interruption
            // lost; drop them and regenerate deterministically.
            prior_records.retain(|r| r.step <= start);
            (ckpt, prior_records)
        }
        None => {
            let params = Params::init(
                &run.model,
                &mut RngStream::new(run.seed, "init"),
            );
            (Checkpoint::new(&run.model, params), Vec::new())
        }
    };

    // Rewrite the log so it holds exactly meta + surviving records.
    let mut log_file = fs::File::create(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    let append = |file: &mut fs::File, line: &LogLine| -> Result<()> {
        let mut text = serde_json::to_string(line)?;
        text.push('\n');
        file.write_all(text.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| Error::io(log_path.display().to_string(), e))
    };
    append(&mut log_file, &LogLine::Meta(meta))?;
    for r in &records {
        append(&mut log_file, &LogLine::Eval(r.clone()))?;
    }

    let mut monitor = DivergenceMonitor::new();
    for r in &records {
        if let Some(tl) = r.train_loss {
            monitor.observe(r.step, tl)?;
        }
    }
    let mut best: Option<(u64, f64)> = records
        .iter()
        .min_by(|a, b| a.test_loss.total_cmp(&b.test_loss))
        .map(|r| (r.step, r.test_loss));

    let evaluate = |ckpt: &Checkpoint<T>,
                        step: u64,
                        train_loss: Option<f64>,
                        records: &mut Vec<EvalRecord>,
                        best: &mut Option<(u64, f64)>,
                        log_file: &mut fs::File|
     -> Result<()> {
        let iso = test_loss(&run.model, &ckpt.params, &iso_bank)?;
        let aniso = test_loss(&run.model, &ckpt.params, &aniso_bank)?;
        let record = EvalRecord {
            step,
            samples_seen: step * run.train.batch_size as u64,
            train_loss,
            test_loss: iso,
            aniso_test_loss: aniso,
        };
        append(log_file, &LogLine::Eval(record.clone()))?;
        records.push(record);
        save_checkpoint(&out_dir.join("ckpt_last.bin"), ckpt)?;
        if best.map_or(true, |(_, loss)| iso < loss) {
            *best = Some((step, iso));
            save_checkpoint(&best_path, ckpt)?;
        }
        Ok(())
    };

    let start_step = resumed_from.unwrap_or(0);
    if start_step == 0 && records.is_empty() {
        evaluate(&ckpt, 0, None, &mut records, &mut best, &mut log_file)?;
    }

    let train_base = RngStream::new(run.seed, "train");
    let mut window_sum = 0.0f64;
    let mut window_n = 0u64;
    let mut session_steps = 0u64;
    let mut interrupted = false;
    for t in start_step + 1..=run.train.steps {
        if session_limit.is_some_and(|limit| session_steps >= limit) {
            interrupted = true;
            break;
        }
        let loss_val = match train_step(run, &train_base, &mut ckpt, t) {
            Ok(v) => v,
            // The engine raises on any NaN/Inf mid-graph; surface that as
            // divergence with the step attached.
            Err(Error::NonFinite { op }) => {
                return Err(Error::Divergence {
                    step: t,
                    reason: format!("non-finite value in {op}"),
                })
            }
            Err(e) => return Err(e),
        };
        session_steps += 1;
        window_sum += loss_val;
        window_n += 1;
        if t % run.train.eval_every == 0 || t == run.train.steps {
            let train_mean = window_sum / window_n as f64;
            window_sum = 0.0;
            window_n = 0;
            evaluate(
                &ckpt,
                t,
                Some(train_mean),
                &mut records,
                &mut best,
                &mut log_file,
            )?;
            monitor.observe(t, train_mean)?;
        }
    }

    if !interrupted {
        let wall = started.elapsed().as_secs_f64();
        let (best_step, best_test_loss) = best.expect("at least the initial evaluation ran");
        append(
            &mut log_file,
            &LogLine::Done(DoneLine {
                wall_clock_s: wall,
                seconds_per_step: if session_steps > 0 {
                    wall / session_steps as f64
                } else {
                    0.0
                },
                best_step,
                best_test_loss,
            }),
        )?;
    }
    Ok(outcome_from_records(records, !interrupted, out_dir))
}

fn outcome_from_records(
    records: Vec<EvalRecord>,
    completed: bool,
    out_dir: &Path,
) -> RunOutcome {
    let (best_step, best_test_loss) = records
        .iter()
        .min_by(|a, b| a.test_loss.total_cmp(&b.test_loss))
        .map(|r| (r.step, r.test_loss))
        .unwrap_or((0, f64::NAN));
    let final_test_loss = records.last().map_or(f64::NAN, |r| r.test_loss);
    RunOutcome {
        records,
        best_step,
        best_test_loss,
        final_test_loss,
        completed,
        run_dir: out_dir.to_path_buf(),
    }
}

/// One optimization step: fresh batch, forward, backward, clip, Adam.
/// Returns the batch training loss.
fn train_step<T: Float>(
    run: &RunConfig,
    train_base: &RngStream,
    ckpt: &mut Checkpoint<T>,
    t: u64,
) -> Result<f64> {
    let mut stream = train_base.fork_index(t);
    let batch: PromptBatch<T> = sample_batch(
        &mut stream,
        run.train.batch_size,
        run.model.k,
        run.model.d_x,
        &CovarianceKind::Isotropic,
    )?;
    let tape = crate::autodiff::Tape::new();
    let attached = ckpt.params.attach(&tape);
    let tokens = embed_prompt(&batch, &attached)?;
    let preds = forward(&run.model, &attached, &tokens)?;
    let targets = targets_tensor(&batch)?;
    let loss = training_loss(&preds, &targets, run.model.d_x)?;
    let loss_val = loss.item()?.as_f64();
    let grad_set = loss.backward()?;
    let mut grads: Vec<Tensor<T>> = attached
        .flatten()
        .iter()
        .map(|(_, p)| match grad_set.get(p) {
            Some(g) => g.clone(),
            None => Tensor::zeros(p.shape().to_vec()),
        })
        .collect();
    drop(grad_set);
    drop(attached);
    drop(tape);

    clip_gradients(&mut grads, run.train.grad_clip_max_norm);
    #[cfg(debug_assertions)]
    {
        let post: f64 = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        debug_assert!(post <= run.train.grad_clip_max_norm + 1e-6);
    }
    let Checkpoint { params, m, v, step } = ckpt;
    adam_step(params, m, v, &grads, t, run.train.learning_rate);
    *step = t;
    Ok(loss_val)
}
