//! Wall-clock scaling measurement for the two attention kernels.
//!
//! Times detached forward passes over a grid of sequence lengths and fits
//! log-log scaling exponents, so the quadratic/linear complexity claim can
//! be checked empirically rather than by reading the code.

use std::hint::black_box;
use std::time::Instant;

use crate::attention::{
    linear_causal_attention_recurrent, quadratic_causal_attention, FeatureMapKind, StatePolicy,
    ATTENTION_EPS,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Median forward seconds for both kernels at one sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchPoint {
    pub seq_len: usize,
    pub quadratic_s: f64,
    pub linear_s: f64,
}

/// Timing grid plus fitted log-log scaling exponents.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub d_head: usize,
    pub feature_map: FeatureMapKind,
    pub repetitions: usize,
    pub points: Vec<BenchPoint>,
    pub quadratic_exponent: f64,
    pub linear_exponent: f64,
}

impl BenchReport {
    /// Ratio of kernel time at the largest grid point to the second
    /// largest; near 4 for a quadratic kernel when the grid doubles, near 2
    /// for a linear one.
    pub fn top_ratio(&self, quadratic: bool) -> Option<f64> {
        let n = self.points.len();
        if n < 2 {
            return None;
        }
        let pick = |p: &BenchPoint| if quadratic { p.quadratic_s } else { p.linear_s };
        let prev = pick(&self.points[n - 2]);
        if prev <= 0.0 {
            return None;
        }
        Some(pick(&self.points[n - 1]) / prev)
    }
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Least-squares slope of `ln(time)` against `ln(seq_len)`.
fn log_log_slope(points: &[(usize, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(t, _)| (t as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, s)| s.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

fn time_forward<F: FnMut() -> Result<Tensor<f32>>>(
    mut run: F,
    repetitions: usize,
) -> Result<f64> {
    // Two warmup passes populate caches and the allocator before timing.
    for _ in 0..2 {
        black_box(run()?);
    }
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let out = run()?;
        let elapsed = start.elapsed().as_secs_f64();
        black_box(out);
        samples.push(elapsed);
    }
    Ok(median(&mut samples))
}

/// Times detached single-batch, single-head forward passes of both kernels
/// over `seq_lens` and fits scaling exponents.
pub fn bench_attention(
    seq_lens: &[usize],
    d_head: usize,
    feature_map: FeatureMapKind,
    repetitions: usize,
) -> Result<BenchReport> {
    if seq_lens.len() < 2 || seq_lens.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "bench needs at least two strictly ascending sequence lengths".into(),
        ));
    }
    if d_head == 0 || repetitions == 0 {
        return Err(Error::Config(
            "bench d_head and repetitions must be positive".into(),
        ));
    }

    let mut rng = RngStream::new(7, "bench");
    let mut points = Vec::with_capacity(seq_lens.len());
    for &t in seq_lens {
        let shape = vec![1, 1, t, d_head];
        let n = t * d_head;
        let draw = |rng: &mut RngStream| -> Tensor<f32> {
            let data: Vec<f32> = (0..n).map(|_| rng.normal_f64() as f32).collect();
            Tensor::from_vec(shape.clone(), data).expect("shape matches data")
        };
        let q = draw(&mut rng);
        let k = draw(&mut rng);
        let v = draw(&mut rng);

        let quadratic_s =
            time_forward(|| quadratic_causal_attention(&q, &k, &v), repetitions)?;
        let linear_s = time_forward(
            || {
                linear_causal_attention_recurrent(
                    &q,
                    &k,
                    &v,
                    feature_map,
                    ATTENTION_EPS,
                    StatePolicy::Recompute,
                )
            },
            repetitions,
        )?;
        points.push(BenchPoint {
            seq_len: t,
            quadratic_s,
            linear_s,
        });
    }

    let quad: Vec<(usize, f64)> = points.iter().map(|p| (p.seq_len, p.quadratic_s)).collect();
    let lin: Vec<(usize, f64)> = points.iter().map(|p| (p.seq_len, p.linear_s)).collect();
    Ok(BenchReport {
        d_head,
        feature_map,
        repetitions,
        points,
        quadratic_exponent: log_log_slope(&quad),
        linear_exponent: log_log_slope(&lin),
    })
}

/// Plain-text timing table with the fitted exponents appended.
pub fn render_bench_table(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "attention forward scaling (d_head = {}, feature map {}, median of {} reps)\n",
        report.d_head, report.feature_map, report.repetitions
    ));
    out.push_str("    T     quadratic_s        linear_s\n");
    for p in &report.points {
        out.push_str(&format!(
            "{:>5}  {:>14.6e}  {:>14.6e}\n",
            p.seq_len, p.quadratic_s, p.linear_s
        ));
    }
    out.push_str(&format!(
        "log-log exponents: quadratic {:.3}, linear {:.3}\n",
        report.quadratic_exponent, report.linear_exponent
    ));
    out
}
