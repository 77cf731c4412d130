//! Headline metrics: normalized query losses on fixed banks, convergence
//! points, confidence intervals, covariance-shift degradation, and report
//! aggregation across run directories.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{ols_predict, sample_batch, CovarianceKind, PromptBatch};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::model::{predict, ModelConfig, Params};
use crate::training::{read_log, RunLog};

/// Covariance pattern for the shifted evaluation distribution, cycled when
/// `d_x != 5`.
pub const ANISO_PATTERN: [f64; 5] = [0.5, 1.0, 1.5, 1.0, 1.75];

/// Diagonal of the shifted input covariance for dimension `d_x`.
pub fn anisotropic_diagonal(d_x: usize) -> Vec<f64> {
    (0..d_x).map(|j| ANISO_PATTERN[j % 5]).collect()
}

/// Fixed isotropic evaluation bank. Banks are keyed by `bank_seed` with a
/// dedicated stream label, so no training batch (drawn from per-model seed
/// streams) can collide with them.
pub fn standard_bank<T: Float>(
    bank_seed: u64,
    size: usize,
    k: usize,
    d_x: usize,
) -> Result<PromptBatch<T>> {
    let mut rng = crate::rng::RngStream::new(bank_seed, "test-bank");
    sample_batch(&mut rng, size, k, d_x, &CovarianceKind::Isotropic)
}

/// Fixed anisotropic evaluation bank (never used for training).
pub fn anisotropic_bank<T: Float>(
    bank_seed: u64,
    size: usize,
    k: usize,
    d_x: usize,
) -> Result<PromptBatch<T>> {
    let mut rng = crate::rng::RngStream::new(bank_seed, "aniso-bank");
    let cov = CovarianceKind::Diagonal(anisotropic_diagonal(d_x));
    sample_batch(&mut rng, size, k, d_x, &cov)
}

const EVAL_CHUNK: usize = 512;

/// Per-prompt normalized squared error at the query position:
/// `(y_hat - y)^2 / d_x`, accumulated in `f64`.
pub fn per_prompt_query_errors<T: Float>(
    config: &ModelConfig,
    params: &Params<T>,
    bank: &PromptBatch<T>,
) -> Result<Vec<f64>> {
    let mut errors = Vec::with_capacity(bank.len());
    let prompts = bank.prompts();
    let mut start = 0;
    while start < prompts.len() {
        let end = (start + EVAL_CHUNK).min(prompts.len());
        let chunk = PromptBatch::new(prompts[start..end].to_vec())?;
        let preds = predict(config, params, &chunk)?;
        for (i, p) in chunk.iter().enumerate() {
            let diff = preds.at(&[i, bank.k]).as_f64() - p.query_y().as_f64();
            errors.push(diff * diff / bank.d_x as f64);
        }
        start = end;
    }
    Ok(errors)
}

/// Mean normalized query loss over a fixed bank.
pub fn test_loss<T: Float>(
    config: &ModelConfig,
    params: &Params<T>,
    bank: &PromptBatch<T>,
) -> Result<f64> {
    let errors = per_prompt_query_errors(config, params, bank)?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Mean normalized query loss of the closed-form least-squares predictor.
pub fn ols_query_loss<T: Float>(bank: &PromptBatch<T>) -> f64 {
    let mut acc = 0.0f64;
    for p in bank.iter() {
        let diff = ols_predict(p).as_f64() - p.query_y().as_f64();
        acc += diff * diff / bank.d_x as f64;
    }
    acc / bank.len() as f64
}

/// One seed's test-loss trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub samples: u64,
    pub loss: f64,
}

impl LossCurve {
    pub fn from_log(log: &RunLog) -> LossCurve {
        LossCurve {
            points: log
                .records
                .iter()
                .map(|r| CurvePoint {
                    step: r.step,
                    samples: r.samples_seen,
                    loss: r.test_loss,
                })
                .collect(),
        }
    }
}

/// First recorded point that closes `fraction` of the gap between the
/// initial and final losses; no interpolation between eval points. Returns
/// `(step, samples_seen)`.
pub fn convergence_point(curve: &LossCurve, fraction: f64) -> Result<(u64, u64)> {
    if curve.points.len() < 2 {
        return Err(Error::EmptyCurve);
    }
    let init = curve.points.first().unwrap().loss;
    let last = curve.points.last().unwrap().loss;
    let threshold = init - fraction * (init - last);
    // A loss sitting exactly on the analytic threshold must count as a
    // crossing even when the threshold itself rounded down in binary
    // (1 - 0.9 * 0.9 evaluates just below 0.19), hence the relative slack.
    let slack = 1e-12 * threshold.abs().max(1.0);
    for p in &curve.points {
        if p.loss <= threshold + slack {
            return Ok((p.step, p.samples));
        }
    }
    // The final point always satisfies loss <= threshold when the curve
    // descends; reaching here means it rose, where the first point applies.
    let p = curve.points.first().unwrap();
    Ok((p.step, p.samples))
}

/// How the confidence half-width aggregates per-seed evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiMode {
    /// 1.96 x sample std of the per-seed mean losses (default).
    PerSeedMean,
    /// 1.96 x sample std of all per-prompt errors concatenated across
    /// seeds; a spread of individual errors rather than a CI of the mean.
    AppendixLiteral,
}

impl std::fmt::Display for CiMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CiMode::PerSeedMean => "per-seed-mean",
            CiMode::AppendixLiteral => "appendix-literal",
        })
    }
}

impl std::str::FromStr for CiMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-seed-mean" => Ok(CiMode::PerSeedMean),
            "appendix-literal" => Ok(CiMode::AppendixLiteral),
            other => Err(Error::Config(format!("unknown ci mode `{other}`"))),
        }
    }
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}

/// Confidence half-width (1.96 x std) over per-seed error collections.
/// `per_seed[s]` holds seed `s`'s per-prompt errors; [`CiMode::PerSeedMean`]
/// reduces each seed to its mean first.
pub fn confidence_interval(per_seed: &[Vec<f64>], mode: CiMode) -> Result<f64> {
    if per_seed.len() < 2 {
        return Err(Error::InsufficientSeeds {
            got: per_seed.len(),
        });
    }
    if per_seed.iter().any(|e| e.is_empty()) {
        return Err(Error::Config("empty error collection for a seed".into()));
    }
    let values: Vec<f64> = match mode {
        CiMode::PerSeedMean => per_seed
            .iter()
            .map(|e| e.iter().sum::<f64>() / e.len() as f64)
            .collect(),
        CiMode::AppendixLiteral => per_seed.iter().flatten().copied().collect(),
    };
    Ok(1.96 * sample_std(&values))
}

/// Relative degradation percentage `100 (aniso - iso) / iso`, or `None`
/// when the isotropic loss is too small for the ratio to be meaningful.
pub fn robustness_delta(iso_loss: f64, aniso_loss: f64) -> Option<f64> {
    if iso_loss < 1e-12 {
        return None;
    }
    Some(100.0 * (aniso_loss - iso_loss) / iso_loss)
}

/// One seed's contribution to a config row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Step whose recorded validation loss was lowest.
    pub best_step: u64,
    /// Validation (isotropic bank) loss at the best step.
    pub best_test_loss: f64,
    /// Anisotropic bank loss recorded at the same best step.
    pub best_aniso_loss: f64,
    /// Losses at the last recorded step.
    pub final_test_loss: f64,
    pub final_aniso_loss: f64,
    pub convergence_step: u64,
    pub convergence_samples: u64,
}

/// Aggregated row for one (attention, depth) configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigReport {
    pub attention: String,
    pub layers: usize,
    pub d_model: usize,
    /// Mean over seeds of the best-step losses.
    pub mean_test_loss: f64,
    pub mean_aniso_loss: f64,
    /// Half-widths; absent with a single seed.
    pub ci_test: Option<f64>,
    pub ci_aniso: Option<f64>,
    pub degradation_pct: Option<f64>,
    pub median_convergence_step: u64,
    pub median_convergence_samples: u64,
    pub per_seed: Vec<SeedSummary>,
}

/// Full report: one row per configuration plus the closed-form baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ci_mode: String,
    pub convergence_fraction: f64,
    /// Least-squares baseline on the standard bank of the first run found.
    pub ols_baseline_loss: f64,
    pub configs: Vec<ConfigReport>,
}

fn median_u64(mut values: Vec<u64>) -> u64 {
    values.sort_unstable();
    values[values.len() / 2]
}

/// Builds the aggregate report from completed run directories (any
/// directory under `run_root` containing `log.jsonl`).
///
/// [`CiMode::PerSeedMean`] works from logs alone. [`CiMode::AppendixLiteral`]
/// additionally reloads each best checkpoint and re-evaluates it on the
/// regenerated banks to recover per-prompt errors.
pub fn build_report(run_root: &Path, mode: CiMode, fraction: f64) -> Result<EvalReport> {
    let mut run_dirs: Vec<std::path::PathBuf> = std::fs::read_dir(run_root)
        .map_err(|e| Error::io(run_root.display().to_string(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.join("log.jsonl").is_file())
        .collect();
    run_dirs.sort();
    if run_dirs.is_empty() {
        return Err(Error::MissingRun {
            path: run_root.display().to_string(),
        });
    }

    // Group runs by (attention, layers, d_model).
    let mut groups: Vec<((String, usize, usize), Vec<(std::path::PathBuf, RunLog)>)> = Vec::new();
    for dir in run_dirs {
        let log = read_log(&dir.join("log.jsonl"))?;
        if log.done.is_none() {
            // Unfinished run: skip rather than report a partial trajectory.
            continue;
        }
        let key = (
            log.meta.attention.clone(),
            log.meta.layers,
            log.meta.d_model,
        );
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, list)) => list.push((dir, log)),
            None => groups.push((key, vec![(dir, log)])),
        }
    }
    if groups.is_empty() {
        return Err(Error::MissingRun {
            path: format!("{} (no completed runs)", run_root.display()),
        });
    }

    let first_meta = &groups[0].1[0].1.meta;
    let baseline_bank: PromptBatch<f32> = standard_bank(
        first_meta.bank_seed,
        first_meta.bank_size,
        first_meta.k,
        first_meta.d_x,
    )?;
    let ols_baseline_loss = ols_query_loss(&baseline_bank);

    let mut configs = Vec::new();
    for ((attention, layers, d_model), runs) in groups {
        let mut per_seed = Vec::new();
        let mut test_errors_per_seed: Vec<Vec<f64>> = Vec::new();
        let mut aniso_errors_per_seed: Vec<Vec<f64>> = Vec::new();
        for (dir, log) in &runs {
            let records = &log.records;
            if records.is_empty() {
                continue;
            }
            let best = records
                .iter()
                .min_by(|a, b| a.test_loss.total_cmp(&b.test_loss))
                .unwrap();
            let last = records.last().unwrap();
            let curve = LossCurve::from_log(log);
            let (c_step, c_samples) = convergence_point(&curve, fraction)?;
            per_seed.push(SeedSummary {
                seed: log.meta.seed,
                best_step: best.step,
                best_test_loss: best.test_loss,
                best_aniso_loss: best.aniso_test_loss,
                final_test_loss: last.test_loss,
                final_aniso_loss: last.aniso_test_loss,
                convergence_step: c_step,
                convergence_samples: c_samples,
            });
            match mode {
                CiMode::PerSeedMean => {
                    test_errors_per_seed.push(vec![best.test_loss]);
                    aniso_errors_per_seed.push(vec![best.aniso_test_loss]);
                }
                CiMode::AppendixLiteral => {
                    let (test_e, aniso_e) = checkpoint_errors(dir, log)?;
                    test_errors_per_seed.push(test_e);
                    aniso_errors_per_seed.push(aniso_e);
                }
            }
        }
        if per_seed.is_empty() {
            continue;
        }
        let n = per_seed.len() as f64;
        let mean_test_loss = per_seed.iter().map(|s| s.best_test_loss).sum::<f64>() / n;
        let mean_aniso_loss = per_seed.iter().map(|s| s.best_aniso_loss).sum::<f64>() / n;
        let (ci_test, ci_aniso) = if per_seed.len() >= 2 {
            (
                Some(confidence_interval(&test_errors_per_seed, mode)?),
                Some(confidence_interval(&aniso_errors_per_seed, mode)?),
            )
        } else {
            (None, None)
        };
        configs.push(ConfigReport {
            attention,
            layers,
            d_model,
            mean_test_loss,
            mean_aniso_loss,
            ci_test,
            ci_aniso,
            degradation_pct: robustness_delta(mean_test_loss, mean_aniso_loss),
            median_convergence_step: median_u64(
                per_seed.iter().map(|s| s.convergence_step).collect(),
            ),
            median_convergence_samples: median_u64(
                per_seed.iter().map(|s| s.convergence_samples).collect(),
            ),
            per_seed,
        });
    }
    configs.sort_by(|a, b| (&a.attention, a.layers).cmp(&(&b.attention, b.layers)));
    Ok(EvalReport {
        ci_mode: mode.to_string(),
        convergence_fraction: fraction,
        ols_baseline_loss,
        configs,
    })
}

/// Re-evaluates a run's best checkpoint on regenerated banks, returning
/// per-prompt errors (isotropic, anisotropic).
fn checkpoint_errors(dir: &Path, log: &RunLog) -> Result<(Vec<f64>, Vec<f64>)> {
    use crate::checkpoint::load_checkpoint;
    let config_text = std::fs::read_to_string(dir.join("config.toml"))
        .map_err(|e| Error::io(dir.join("config.toml").display().to_string(), e))?;
    let run: crate::training::RunConfig = toml::from_str(&config_text)?;
    let ckpt = load_checkpoint::<f32>(&dir.join("ckpt_best.bin"), &run.model)?;
    let meta = &log.meta;
    let iso: PromptBatch<f32> =
        standard_bank(meta.bank_seed, meta.bank_size, meta.k, meta.d_x)?;
    let aniso: PromptBatch<f32> =
        anisotropic_bank(meta.bank_seed, meta.bank_size, meta.k, meta.d_x)?;
    Ok((
        per_prompt_query_errors(&run.model, &ckpt.params, &iso)?,
        per_prompt_query_errors(&run.model, &ckpt.params, &aniso)?,
    ))
}

/// Renders the report as an aligned text table (one line per config row).
pub fn render_report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "ci mode: {}   convergence fraction: {}   ols baseline loss: {:.3e}\n",
        report.ci_mode, report.convergence_fraction, report.ols_baseline_loss
    ));
    out.push_str(&format!(
        "{:<22} {:>6} {:>8} {:>18} {:>18} {:>8} {:>12} {:>14}\n",
        "attention", "layers", "d_model", "test loss", "shifted loss", "delta%", "conv step", "conv samples"
    ));
    for c in &report.configs {
        let fmt_ci = |mean: f64, ci: Option<f64>| match ci {
            Some(hw) => format!("{mean:.4} ± {hw:.4}"),
            None => format!("{mean:.4}"),
        };
        let delta = c
            .degradation_pct
            .map_or("n/a".to_string(), |d| format!("{d:+.1}"));
        out.push_str(&format!(
            "{:<22} {:>6} {:>8} {:>18} {:>18} {:>8} {:>12} {:>14}\n",
            c.attention,
            c.layers,
            c.d_model,
            fmt_ci(c.mean_test_loss, c.ci_test),
            fmt_ci(c.mean_aniso_loss, c.ci_aniso),
            delta,
            c.median_convergence_step,
            c.median_convergence_samples,
        ));
    }
    out
}
