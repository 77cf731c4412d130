//! Synthetic in-context regression tasks and their least-squares oracle.
//!
//! A prompt is one task instance: a weight vector `w ~ N(0, I)`, `k` context
//! pairs `(x_i, y_i)` with `x_i ~ N(0, Sigma)` and `y_i = w . x_i` exactly
//! (no observation noise), plus one query row whose target the model must
//! predict. Draw order is fixed: the weight vector first, then rows in
//! order with the query last, so banks are a pure function of their RNG
//! stream.
//!
//! [`ols_predict`] is the reference predictor: minimum-norm ordinary least
//! squares on the context rows, solved in `f64` through the eigendecomposition
//! pseudo-inverse of the `k x k` Gram matrix.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::rng::RngStream;

/// Input covariance of the regression inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    /// `Sigma = I`.
    Isotropic,
    /// `Sigma = diag(v)`; the vector length must equal `d_x`.
    Diagonal(Vec<f64>),
}

impl CovarianceKind {
    /// Variance of coordinate `j`.
    pub fn variance(&self, j: usize) -> f64 {
        match self {
            CovarianceKind::Isotropic => 1.0,
            CovarianceKind::Diagonal(v) => v[j],
        }
    }

    /// Full diagonal as a vector of length `d_x`.
    pub fn diagonal(&self, d_x: usize) -> Vec<f64> {
        match self {
            CovarianceKind::Isotropic => vec![1.0; d_x],
            CovarianceKind::Diagonal(v) => v.clone(),
        }
    }

    pub fn validate(&self, d_x: usize) -> Result<()> {
        if let CovarianceKind::Diagonal(v) = self {
            if v.len() != d_x {
                return Err(Error::Config(format!(
                    "covariance diagonal has {} entries, expected {}",
                    v.len(),
                    d_x
                )));
            }
            if v.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
                return Err(Error::Config(
                    "covariance diagonal entries must be positive and finite".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One in-context regression task instance.
///
/// `xs` holds `k + 1` rows of length `d_x` (row-major); row `k` is the
/// query. `ys[i] = w . x_i` for every row including the query.
#[derive(Debug, Clone)]
pub struct Prompt<T> {
    pub xs: Vec<T>,
    pub ys: Vec<T>,
    pub w: Vec<T>,
    pub d_x: usize,
    pub k: usize,
    pub covariance: CovarianceKind,
}

impl<T: Float> Prompt<T> {
    pub fn x_row(&self, i: usize) -> &[T] {
        &self.xs[i * self.d_x..(i + 1) * self.d_x]
    }

    pub fn y(&self, i: usize) -> T {
        self.ys[i]
    }

    pub fn query_x(&self) -> &[T] {
        self.x_row(self.k)
    }

    pub fn query_y(&self) -> T {
        self.ys[self.k]
    }
}

/// A homogeneous collection of prompts (same `k`, `d_x`, covariance).
#[derive(Debug, Clone)]
pub struct PromptBatch<T> {
    prompts: Vec<Prompt<T>>,
    pub d_x: usize,
    pub k: usize,
    pub covariance: CovarianceKind,
}

impl<T: Float> PromptBatch<T> {
    pub fn new(prompts: Vec<Prompt<T>>) -> Result<Self> {
        let first = prompts.first().ok_or_else(|| {
            Error::Config("a prompt batch must contain at least one prompt".into())
        })?;
        let (d_x, k, covariance) = (first.d_x, first.k, first.covariance.clone());
        for p in &prompts {
            if p.d_x != d_x || p.k != k || p.covariance != covariance {
                return Err(Error::Config(
                    "all prompts in a batch must share k, d_x and covariance".into(),
                ));
            }
        }
        Ok(PromptBatch {
            prompts,
            d_x,
            k,
            covariance,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompts(&self) -> &[Prompt<T>] {
        &self.prompts
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Prompt<T>> {
        self.prompts.iter()
    }
}

/// Draws a task weight vector `w ~ N(0, I_{d_x})`.
pub fn sample_weights<T: Float>(rng: &mut RngStream, d_x: usize) -> Vec<T> {
    rng.normal_vec(d_x)
}

/// Draws one prompt for task weights `w`: `k` context rows plus the query,
/// each `x ~ N(0, Sigma)`, targets `y = w . x` with the dot product taken in
/// `f64` and narrowed.
pub fn sample_prompt<T: Float>(
    rng: &mut RngStream,
    w: &[T],
    k: usize,
    covariance: &CovarianceKind,
) -> Prompt<T> {
    let d_x = w.len();
    let rows = k + 1;
    let mut xs = Vec::with_capacity(rows * d_x);
    let mut ys = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut y = 0.0f64;
        for j in 0..d_x {
            let x = rng.normal_f64() * covariance.variance(j).sqrt();
            xs.push(T::cast(x));
            y += w[j].as_f64() * T::cast(x).as_f64();
        }
        ys.push(T::cast(y));
    }
    Prompt {
        xs,
        ys,
        w: w.to_vec(),
        d_x,
        k,
        covariance: covariance.clone(),
    }
}

/// Samples `count` independent prompts (fresh task weights per prompt).
pub fn sample_batch<T: Float>(
    rng: &mut RngStream,
    count: usize,
    k: usize,
    d_x: usize,
    covariance: &CovarianceKind,
) -> Result<PromptBatch<T>> {
    covariance.validate(d_x)?;
    if count == 0 {
        return Err(Error::Config("prompt count must be positive".into()));
    }
    let prompts = (0..count)
        .map(|_| {
            let w = sample_weights::<T>(rng, d_x);
            sample_prompt(rng, &w, k, covariance)
        })
        .collect();
    PromptBatch::new(prompts)
}

/// Minimum-norm least-squares prediction for the query row.
///
/// Solves `w_hat = X^T (X X^T)^+ y` over the `k` context rows in `f64`
/// (`X: k x d_x`), then returns `w_hat . x_query`. The Gram pseudo-inverse
/// route gives the minimum-norm solution whether the system is over- or
/// under-determined.
pub fn ols_predict<T: Float>(prompt: &Prompt<T>) -> T {
    let k = prompt.k;
    let d = prompt.d_x;
    let x: Vec<f64> = prompt.xs[..k * d].iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = prompt.ys[..k].iter().map(|v| v.as_f64()).collect();

    // Gram matrix G = X X^T (k x k).
    let mut gram = vec![0.0f64; k * k];
    for i in 0..k {
        for j in i..k {
            let mut dot = 0.0;
            for c in 0..d {
                dot += x[i * d + c] * x[j * d + c];
            }
            gram[i * k + j] = dot;
            gram[j * k + i] = dot;
        }
    }
    let ginv = pinv_symmetric(&gram, k);

    // alpha = G^+ y; w_hat = X^T alpha.
    let mut alpha = vec![0.0f64; k];
    for i in 0..k {
        let mut acc = 0.0;
        for j in 0..k {
            acc += ginv[i * k + j] * y[j];
        }
        alpha[i] = acc;
    }
    let mut w_hat = vec![0.0f64; d];
    for i in 0..k {
        let a = alpha[i];
        for c in 0..d {
            w_hat[c] += a * x[i * d + c];
        }
    }

    let q = prompt.query_x();
    let mut pred = 0.0;
    for c in 0..d {
        pred += w_hat[c] * q[c].as_f64();
    }
    T::cast(pred)
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix via cyclic Jacobi
/// eigendecomposition. Eigenvalues below `1e-12 * lambda_max` are treated
/// as zero.
pub(crate) fn pinv_symmetric(a: &[f64], n: usize) -> Vec<f64> {
    let (eigvals, eigvecs) = jacobi_eigen(a, n);
    let lambda_max = eigvals.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = 1e-12 * lambda_max.max(f64::MIN_POSITIVE);
    // A^+ = V diag(1/lambda) V^T over the retained spectrum.
    let mut pinv = vec![0.0f64; n * n];
    for (e, lambda) in eigvals.iter().enumerate() {
        if *lambda <= cutoff {
            continue;
        }
        let inv = 1.0 / lambda;
        for i in 0..n {
            let vi = eigvecs[i * n + e] * inv;
            for j in 0..n {
                pinv[i * n + j] += vi * eigvecs[j * n + e];
            }
        }
    }
    pinv
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// `(eigenvalues, V)` with eigenvectors in the columns of `V` (row-major),
/// such that `A = V diag(vals) V^T`.
pub(crate) fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * norm.max(f64::MIN_POSITIVE);

    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of M, and columns of V.
                for i in 0..n {
                    let mip = m[i * n + p];
                    let miq = m[i * n + q];
                    m[i * n + p] = c * mip - s * miq;
                    m[i * n + q] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[p * n + j];
                    let mqj = m[q * n + j];
                    m[p * n + j] = c * mpj - s * mqj;
                    m[q * n + j] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| m[i * n + i]).collect();
    (vals, v)
}

const BANK_MAGIC: &[u8; 8] = b"ICLBANK1";

/// Writes a prompt bank: a magic header, dims (`d_x`, `k`, `count`), the
/// covariance diagonal as `f64`, then per prompt the weight vector, the
/// `k + 1` input rows (row-major) and the `k + 1` targets, all `f32`
/// little-endian.
pub fn write_bank<T: Float>(path: &Path, batch: &PromptBatch<T>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(
        8 + 16 + batch.d_x * 8 + batch.len() * (batch.d_x + (batch.k + 1) * (batch.d_x + 1)) * 4,
    );
    buf.extend_from_slice(BANK_MAGIC);
    buf.extend_from_slice(&(batch.d_x as u32).to_le_bytes());
    buf.extend_from_slice(&(batch.k as u32).to_le_bytes());
    buf.extend_from_slice(&(batch.len() as u64).to_le_bytes());
    for v in batch.covariance.diagonal(batch.d_x) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for p in batch.iter() {
        for v in &p.w {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        for v in &p.xs {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        for v in &p.ys {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a bank written by [`write_bank`].
pub fn read_bank(path: &Path) -> Result<PromptBatch<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |reason: &str| Error::Format {
        kind: "bank",
        reason: reason.to_string(),
    };
    if bytes.len() < 8 + 16 || &bytes[..8] != BANK_MAGIC {
        return Err(fail("missing or wrong magic header"));
    }
    let d_x = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if d_x == 0 || d_x > 4096 || k > 1 << 20 || count == 0 {
        return Err(fail("implausible dimensions in header"));
    }
    let mut pos = 24;
    if bytes.len() < pos + d_x * 8 {
        return Err(fail("truncated covariance diagonal"));
    }
    let diag: Vec<f64> = (0..d_x)
        .map(|j| f64::from_le_bytes(bytes[pos + j * 8..pos + (j + 1) * 8].try_into().unwrap()))
        .collect();
    pos += d_x * 8;
    let covariance = if diag.iter().all(|&v| v == 1.0) {
        CovarianceKind::Isotropic
    } else {
        CovarianceKind::Diagonal(diag)
    };
    covariance.validate(d_x)?;

    let floats_per_prompt = d_x + (k + 1) * (d_x + 1);
    if bytes.len() != pos + count * floats_per_prompt * 4 {
        return Err(fail("body length does not match header dimensions"));
    }
    let read_f32 = |p: &mut usize| {
        let v = f32::from_le_bytes(bytes[*p..*p + 4].try_into().unwrap());
        *p += 4;
        v
    };
    let mut prompts = Vec::with_capacity(count);
    for _ in 0..count {
        let w: Vec<f32> = (0..d_x).map(|_| read_f32(&mut pos)).collect();
        let xs: Vec<f32> = (0..(k + 1) * d_x).map(|_| read_f32(&mut pos)).collect();
        let ys: Vec<f32> = (0..k + 1).map(|_| read_f32(&mut pos)).collect();
        if w.iter().chain(&xs).chain(&ys).any(|v| !v.is_finite()) {
            return Err(fail("non-finite value in prompt body"));
        }
        prompts.push(Prompt {
            xs,
            ys,
            w,
            d_x,
            k,
            covariance: covariance.clone(),
        });
    }
    PromptBatch::new(prompts)
}

/// CSV export: one line per prompt row with the task weights repeated, for
/// offline analysis. Columns: `prompt,row,is_query,x_0..,y,w_0..`.
pub fn write_bank_csv<T: Float>(path: &Path, batch: &PromptBatch<T>) -> Result<()> {
    let mut out = String::new();
    out.push_str("prompt,row,is_query");
    for j in 0..batch.d_x {
        out.push_str(&format!(",x_{j}"));
    }
    out.push_str(",y");
    for j in 0..batch.d_x {
        out.push_str(&format!(",w_{j}"));
    }
    out.push('\n');
    for (pi, p) in batch.iter().enumerate() {
        for row in 0..=batch.k {
            out.push_str(&format!("{pi},{row},{}", u8::from(row == batch.k)));
            for &x in p.x_row(row) {
                out.push_str(&format!(",{}", x.as_f64()));
            }
            out.push_str(&format!(",{}", p.y(row).as_f64()));
            for &w in &p.w {
                out.push_str(&format!(",{}", w.as_f64()));
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
