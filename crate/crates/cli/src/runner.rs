//! Parallel execution of training jobs across worker threads. Jobs write to
//! disjoint directories and share nothing, so a failure (divergence
//! included) is reported per job without stopping its siblings.

use std::collections::VecDeque;
use std::sync::Mutex;

use iclbench::training::{train_run, Precision, RunOutcome};
use iclbench::Result;

use crate::manifest::Job;

pub struct JobReport {
    pub name: String,
    pub dir: std::path::PathBuf,
    pub outcome: Result<RunOutcome>,
}

fn execute(job: &Job, resume: bool) -> Result<RunOutcome> {
    match job.config.train.precision {
        Precision::F32 => train_run::<f32>(&job.config, &job.dir, resume),
        Precision::F64 => train_run::<f64>(&job.config, &job.dir, resume),
    }
}

/// Resolved worker count: `ICLBENCH_THREADS` beats the `--jobs` flag, which
/// beats the machine's parallelism; always within `[1, job_count]`.
pub fn worker_count(flag: Option<usize>, job_count: usize) -> usize {
    let machine = std::thread::available_parallelism().map_or(1, |n| n.get());
    let requested = std::env::var("ICLBENCH_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .or(flag)
        .unwrap_or(machine);
    requested.clamp(1, job_count.max(1))
}

/// Runs all jobs over `workers` threads, returning reports in job order.
pub fn run_jobs(jobs: Vec<Job>, workers: usize, resume: bool) -> Vec<JobReport> {
    let queue: Mutex<VecDeque<(usize, Job)>> =
        Mutex::new(jobs.into_iter().enumerate().collect());
    let results: Mutex<Vec<(usize, JobReport)>> = Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().expect("queue lock").pop_front();
                let Some((index, job)) = next else { break };
                let outcome = execute(&job, resume);
                match &outcome {
                    Ok(out) => println!(
                        "[done] {} seed {}: best test loss {:.4} at step {}",
                        job.name, job.config.seed, out.best_test_loss, out.best_step
                    ),
                    Err(e) => println!("[fail] {} seed {}: {e}", job.name, job.config.seed),
                }
                results.lock().expect("results lock").push((
                    index,
                    JobReport {
                        name: job.name,
                        dir: job.dir,
                        outcome,
                    },
                ));
            });
        }
    });

    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(index, _)| *index);
    results.into_iter().map(|(_, report)| report).collect()
}
