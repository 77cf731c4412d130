//! `iclbench`: generate prompt banks, train attention-variant transformers
//! on in-context regression, sweep hyperparameters, aggregate reports, and
//! benchmark kernel scaling.
//!
//! Exit codes: 0 success, 2 configuration error, 3 IO error, 4 divergence.

mod manifest;
mod plots;
mod report;
mod runner;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use iclbench::attention::FeatureMapKind;
use iclbench::bench::{bench_attention, render_bench_table};
use iclbench::datagen::{write_bank, write_bank_csv, PromptBatch};
use iclbench::eval::{anisotropic_bank, standard_bank, CiMode};
use iclbench::{Error, Result};

use manifest::{expand_jobs, load_manifest, manifest_hash};
use runner::{run_jobs, worker_count};
use sweep::{apply_axis, render_ranking, SweepAxis};

#[derive(Parser)]
#[command(name = "iclbench", version, about = "In-context regression benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Write a prompt bank to disk and print its per-coordinate variances.
    Generate {
        /// Bank seed (decoupled from model seeds).
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        /// Number of prompts.
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        /// Context pairs per prompt.
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Input dimension.
        #[arg(long = "d-x", default_value_t = 5)]
        d_x: usize,
        /// Use the shifted diagonal covariance instead of identity.
        #[arg(long)]
        anisotropic: bool,
        /// Output file (binary bank format).
        #[arg(long)]
        out: PathBuf,
        /// Also write a flat CSV copy here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train every (configuration, seed) pair in a manifest.
    Train {
        /// Experiment manifest (TOML).
        #[arg(long)]
        manifest: PathBuf,
        /// Override the manifest's output root.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Single seed override.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma-separated seed list override.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Continue interrupted runs from their last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Print the job plan without training.
        #[arg(long)]
        dry_run: bool,
        /// Worker threads (ICLBENCH_THREADS overrides; default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Vary one knob of a single-run manifest at reduced budget and rank.
    Sweep {
        /// Manifest holding exactly one base run.
        #[arg(long)]
        manifest: PathBuf,
        /// Which knob the sweep varies.
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Output root for the sweep's run directories.
        #[arg(long)]
        out: PathBuf,
        /// Steps per variant (default: base steps / 4; ignored for --axis steps).
        #[arg(long)]
        budget_steps: Option<u64>,
        /// Seeds per variant (default: first available seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker threads (ICLBENCH_THREADS overrides; default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Aggregate completed runs into tables, CSVs, and SVG plots.
    Report {
        /// Directory containing run subdirectories.
        #[arg(long)]
        run_root: PathBuf,
        /// Artifact directory (default: RUN_ROOT/report).
        #[arg(long)]
        out: Option<PathBuf>,
        /// per-seed-mean or appendix-literal.
        #[arg(long, default_value = "per-seed-mean")]
        ci_mode: String,
        /// Gap fraction for the convergence point.
        #[arg(long, default_value_t = 0.9)]
        convergence_fraction: f64,
    },
    /// Time both attention kernels over a sequence-length grid.
    Bench {
        /// Comma-separated sequence lengths to time.
        #[arg(long, value_delimiter = ',', default_values_t = vec![64usize, 128, 256, 512, 1024])]
        seq_lens: Vec<usize>,
        /// Per-head feature dimension.
        #[arg(long, default_value_t = 64)]
        d_head: usize,
        /// Feature map for the kernelized side.
        #[arg(long, default_value = "squared-relu")]
        feature_map: String,
        /// Timed repetitions per point (median reported).
        #[arg(long, default_value_t = 7)]
        reps: usize,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Format { .. }
        | Error::TomlDe(_)
        | Error::TomlSer(_)
        | Error::Json(_) => 2,
        Error::Io { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn cmd_generate(
    seed: u64,
    count: usize,
    k: usize,
    d_x: usize,
    anisotropic: bool,
    out: &std::path::Path,
    csv: Option<&std::path::Path>,
) -> Result<u8> {
    let bank: PromptBatch<f32> = if anisotropic {
        anisotropic_bank(seed, count, k, d_x)?
    } else {
        standard_bank(seed, count, k, d_x)?
    };
    write_bank(out, &bank)?;
    if let Some(csv_path) = csv {
        write_bank_csv(csv_path, &bank)?;
    }

    let mut sums = vec![0.0f64; d_x];
    let mut n = 0u64;
    for p in bank.iter() {
        for row in 0..=k {
            for (j, sum) in sums.iter_mut().enumerate() {
                let v = p.x_row(row)[j] as f64;
                *sum += v * v;
            }
            n += 1;
        }
    }
    println!(
        "bank: {} prompts, k = {k}, d_x = {d_x}, covariance {}",
        bank.len(),
        if anisotropic { "anisotropic" } else { "isotropic" }
    );
    let variances: Vec<String> = sums
        .iter()
        .map(|s| format!("{:.4}", s / n as f64))
        .collect();
    println!("per-coordinate x variance: [{}]", variances.join(", "));
    println!("written: {}", out.display());
    Ok(0)
}

fn cmd_train(
    manifest_path: &std::path::Path,
    out: Option<&std::path::Path>,
    seeds: Option<Vec<u64>>,
    resume: bool,
    dry_run: bool,
    jobs_flag: Option<usize>,
) -> Result<u8> {
    let manifest = load_manifest(manifest_path)?;
    let hash = manifest_hash(manifest_path)?;
    let jobs = expand_jobs(&manifest, out, seeds.as_deref(), &hash)?;

    if dry_run {
        println!("manifest {} ({} jobs)", hash, jobs.len());
        for job in &jobs {
            println!(
                "  {} -> {} [{} L{} d{}] lr {} batch {} steps {} seed {}",
                job.name,
                job.dir.display(),
                job.config.model.attention.slug(),
                job.config.model.layers,
                job.config.model.d_model,
                job.config.train.learning_rate,
                job.config.train.batch_size,
                job.config.train.steps,
                job.config.seed,
            );
        }
        return Ok(0);
    }

    let workers = worker_count(jobs_flag, jobs.len());
    println!("running {} jobs on {} workers", jobs.len(), workers);
    let reports = run_jobs(jobs, workers, resume);

    let mut diverged = false;
    let mut other_code: Option<u8> = None;
    let mut failures = 0usize;
    for r in &reports {
        if let Err(e) = &r.outcome {
            failures += 1;
            println!("failed: {} ({}): {e}", r.name, r.dir.display());
            if matches!(e, Error::Divergence { .. }) {
                diverged = true;
            } else {
                other_code.get_or_insert(exit_code_for(e));
            }
        }
    }
    println!("{}/{} jobs succeeded", reports.len() - failures, reports.len());
    if diverged {
        return Ok(4);
    }
    Ok(other_code.unwrap_or(0))
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    manifest_path: &std::path::Path,
    axis: SweepAxis,
    values: &[String],
    out: &std::path::Path,
    budget_steps: Option<u64>,
    seeds: Option<Vec<u64>>,
    jobs_flag: Option<usize>,
) -> Result<u8> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let manifest = load_manifest(manifest_path)?;
    if manifest.runs.len() != 1 {
        return Err(Error::Config(format!(
            "sweep manifests hold exactly one base run, found {}",
            manifest.runs.len()
        )));
    }
    let hash = manifest_hash(manifest_path)?;
    let base = &manifest.runs[0];
    let budget = budget_steps.unwrap_or_else(|| (base.train.steps / 4).max(1));

    let sweep_seeds: Vec<u64> = match seeds {
        Some(s) => s,
        None => {
            let first = manifest
                .seeds
                .first()
                .or_else(|| base.train.seeds.first())
                .copied()
                .ok_or_else(|| {
                    Error::Config("sweep needs a seed (manifest seeds or --seeds)".into())
                })?;
            vec![first]
        }
    };

    let variant_manifest = manifest::ExperimentManifest {
        out_root: out.to_path_buf(),
        seeds: sweep_seeds,
        runs: values
            .iter()
            .map(|v| apply_axis(base, axis, v, budget))
            .collect::<Result<Vec<_>>>()?,
    };
    let jobs = expand_jobs(&variant_manifest, None, None, &hash)?;
    let per_variant = jobs.len() / values.len();

    let workers = worker_count(jobs_flag, jobs.len());
    println!("sweep: {} variants x {} seeds on {} workers", values.len(), per_variant, workers);
    let reports = run_jobs(jobs, workers, false);

    let mut rows = Vec::new();
    for (value, chunk) in values.iter().zip(reports.chunks(per_variant)) {
        let mut losses = Vec::new();
        for r in chunk {
            match &r.outcome {
                Ok(out) => losses.push(out.best_test_loss),
                Err(e) => return Err(Error::Config(format!("variant '{value}' failed: {e}"))),
            }
        }
        rows.push((value.clone(), losses.iter().sum::<f64>() / losses.len() as f64));
    }
    let (table, winner) = render_ranking(rows);
    print!("{table}");
    println!("winner: {winner}");
    Ok(0)
}

fn cmd_report(
    run_root: &std::path::Path,
    out: Option<&std::path::Path>,
    ci_mode: &str,
    fraction: f64,
) -> Result<u8> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(
            "convergence fraction must lie strictly between 0 and 1".into(),
        ));
    }
    let mode = CiMode::from_str(ci_mode)?;
    let out_dir = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| run_root.join("report"));
    let (_, table) = report::emit_report(run_root, &out_dir, mode, fraction)?;
    print!("{table}");
    println!("artifacts: {}", out_dir.display());
    Ok(0)
}

fn cmd_bench(
    seq_lens: &[usize],
    d_head: usize,
    feature_map: &str,
    reps: usize,
    out: Option<&std::path::Path>,
) -> Result<u8> {
    let kind = FeatureMapKind::from_str(feature_map)?;
    let report = bench_attention(seq_lens, d_head, kind, reps)?;
    let table = render_bench_table(&report);
    print!("{table}");
    if let Some(path) = out {
        std::fs::write(path, &table).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Commands::Generate {
            seed,
            count,
            k,
            d_x,
            anisotropic,
            out,
            csv,
        } => cmd_generate(seed, count, k, d_x, anisotropic, &out, csv.as_deref()),
        Commands::Train {
            manifest,
            out,
            seed,
            seeds,
            resume,
            dry_run,
            jobs,
        } => {
            let seeds = seeds.or_else(|| seed.map(|s| vec![s]));
            cmd_train(&manifest, out.as_deref(), seeds, resume, dry_run, jobs)
        }
        Commands::Sweep {
            manifest,
            axis,
            values,
            out,
            budget_steps,
            seeds,
            jobs,
        } => cmd_sweep(&manifest, axis, &values, &out, budget_steps, seeds, jobs),
        Commands::Report {
            run_root,
            out,
            ci_mode,
            convergence_fraction,
        } => cmd_report(&run_root, out.as_deref(), &ci_mode, convergence_fraction),
        Commands::Bench {
            seq_lens,
            d_head,
            feature_map,
            reps,
            out,
        } => cmd_bench(&seq_lens, d_head, &feature_map, reps, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
