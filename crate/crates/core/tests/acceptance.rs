//! Acceptance gate: one test per release criterion, each printing a single
//! PASS/FAIL line with its measured evidence.
//!
//! Canonical invocation (sequential, lines visible):
//!
//! ```text
//! cargo test --test acceptance -- --test-threads=1 --nocapture
//! ```
//!
//! Criteria 6-9 share a desk-scale matrix of trained runs (two attention
//! kinds x depths 1/3/6 plus a feature-map ablation, 3 seeds each). The
//! matrix trains on first use — tens of minutes on one CPU core — and is
//! cached under the system temp directory keyed by config hash, so
//! subsequent invocations reuse it instantly. Delete that directory to
//! force retraining.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::LazyLock;
use std::time::Instant;

use common::gradsuite;
use iclbench::attention::{
    linear_causal_attention_materialized, linear_causal_attention_recurrent, FeatureMapKind,
    StatePolicy, ATTENTION_EPS,
};
use iclbench::bench::bench_attention;
use iclbench::eval::{
    confidence_interval, convergence_point, ols_query_loss, standard_bank, test_loss, CiMode,
    CurvePoint, LossCurve,
};
use iclbench::model::{embed_prompt, forward, AttentionKind, ModelConfig, Params, TokenSequence};
use iclbench::training::{train_run, config_hash, EvalRecord, Precision, RunConfig, TrainConfig};
use iclbench::{Float, RngStream, Tensor};

/// Prints the one-line verdict for a criterion, then enforces it.
fn criterion(number: u32, what: &str, pass: bool, evidence: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("[{number:>2}] {verdict} {what}: {evidence}");
    assert!(pass, "[{number}] {what}: {evidence}");
}

// ---------------------------------------------------------------------------
// Criterion 1: the recurrent linear-attention kernel agrees with the
// quadratic-cost materialized formulation.

#[test]
fn c01_linear_attention_oracle_equivalence() {
    let started = Instant::now();
    let mut cases = 0usize;
    let mut worst32 = 0.0f64;
    let mut worst64 = 0.0f64;

    fn max_abs_diff<T: Float>(
        kind: FeatureMapKind,
        policy: StatePolicy,
        dims: [usize; 4],
        rng: &mut RngStream,
    ) -> f64 {
        // The identity map keeps the sign of q and k, so its normalizer can
        // cancel to ~0 on centered inputs; the output is then mathematically
        // huge and any two summation orders diverge in absolute terms.
        // Positive-shifted queries/keys keep that map's cases
        // well-conditioned (same convention as the gradient suite); the
        // nonnegative maps get raw normals.
        let draw = |rng: &mut RngStream| -> Tensor<T> {
            let raw = Tensor::<T>::randn(dims.to_vec(), T::one(), rng);
            if kind != FeatureMapKind::Identity {
                return raw;
            }
            let data = raw
                .data()
                .iter()
                .map(|&x| x * T::cast(0.4) + T::cast(1.2))
                .collect();
            Tensor::from_vec(dims.to_vec(), data).unwrap()
        };
        let q = draw(rng);
        let k = draw(rng);
        let v = Tensor::<T>::randn(dims.to_vec(), T::one(), rng);
        let rec =
            linear_causal_attention_recurrent(&q, &k, &v, kind, ATTENTION_EPS, policy).unwrap();
        let mat = linear_causal_attention_materialized(&q, &k, &v, kind, ATTENTION_EPS).unwrap();
        rec.data()
            .iter()
            .zip(mat.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    let mut rng = RngStream::new(20, "acceptance-oracle");
    for kind in FeatureMapKind::ALL {
        for t in [1usize, 2, 21, 64] {
            for rep in 0..13 {
                let b = 1 + (rng.next_u64() % 2) as usize;
                let h = 1 + (rng.next_u64() % 2) as usize;
                let dh = 2 + (rng.next_u64() % 5) as usize;
                let policy = if rep % 2 == 0 {
                    StatePolicy::Store
                } else {
                    StatePolicy::Recompute
                };
                worst32 = worst32.max(max_abs_diff::<f32>(
                    kind,
                    policy,
                    [b, h, t, dh],
                    &mut rng.fork("f32").fork_index(cases as u64),
                ));
                worst64 = worst64.max(max_abs_diff::<f64>(
                    kind,
                    policy,
                    [b, h, t, dh],
                    &mut rng.fork("f64").fork_index(cases as u64),
                ));
                cases += 1;
            }
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    criterion(
        1,
        "recurrent kernel matches materialized linear attention",
        cases >= 200 && worst32 < 1e-5 && worst64 < 1e-10 && elapsed < 10.0,
        format!(
            "{cases} cases (T in {{1,2,21,64}}, 4 maps, both state policies): \
             max |f32 diff| {worst32:.2e} < 1e-5, max |f64 diff| {worst64:.2e} < 1e-10; {elapsed:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: every autodiff primitive, both attention kernels, and the
// end-to-end 1-layer model pass central finite-difference checks at 64-bit.

#[test]
fn c02_gradient_correctness() {
    let started = Instant::now();

    let mut worst_op = 0.0f64;
    let mut ops = 0usize;
    for case in gradsuite::all_cases() {
        let err = gradsuite::case_max_err(&case);
        assert!(err < 1e-4, "{}: relative error {err:.3e}", case.name);
        worst_op = worst_op.max(err);
        ops += 1;
    }

    let quad = gradsuite::model_spot_check_max_err(AttentionKind::Quadratic, "quadratic");
    let lin = gradsuite::model_spot_check_max_err(
        AttentionKind::Linear(FeatureMapKind::SquaredRelu),
        "linear",
    );
    let worst_model = quad.max(lin);

    let elapsed = started.elapsed().as_secs_f64();
    criterion(
        2,
        "gradients match finite differences",
        worst_op < 1e-4 && worst_model < 1e-3 && elapsed < 60.0,
        format!(
            "{ops} op/kernel cases max rel err {worst_op:.2e} < 1e-4; full 1-layer model \
             (both kernels, 10 coordinates each) max rel err {worst_model:.2e} < 1e-3; {elapsed:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: causal integrity — perturbing token j changes predictions
// only at positions >= j, for both attention kinds at depths 1/3/6.

#[test]
fn c03_causality_all_depths() {
    let started = Instant::now();
    let mut checked = 0usize;

    for kind in [
        AttentionKind::Quadratic,
        AttentionKind::Linear(FeatureMapKind::SquaredRelu),
    ] {
        for layers in [1usize, 3, 6] {
            let config = ModelConfig {
                attention: kind,
                layers,
                d_model: 32,
                heads: 4,
                mlp_ratio: 2,
                d_x: 5,
                k: 10,
                eps: ATTENTION_EPS,
            };
            let rng = RngStream::new(33, "acceptance-causality");
            let params: Params<f64> = Params::init(&config, &mut rng.fork(&kind.slug()));
            let batch = iclbench::datagen::sample_batch::<f64>(
                &mut rng.fork("batch"),
                2,
                config.k,
                config.d_x,
                &iclbench::datagen::CovarianceKind::Isotropic,
            )
            .unwrap();
            let tokens = embed_prompt(&batch, &params).unwrap();
            let base = forward(&config, &params, &tokens).unwrap();

            let seq = 2 * config.k + 1;
            for j in 0..seq {
                // Bump one feature of token j in batch row 0 only.
                let mut data = tokens.tokens.to_vec();
                let d = tokens.tokens.shape()[2];
                data[j * d + (j % d)] += 1.0;
                let perturbed = TokenSequence {
                    tokens: Tensor::from_vec(tokens.tokens.shape().to_vec(), data).unwrap(),
                    x_positions: tokens.x_positions.clone(),
                };
                let out = forward(&config, &params, &perturbed).unwrap();

                let mut any_change = false;
                for (i, &pos) in tokens.x_positions.iter().enumerate() {
                    let a = base.at(&[0, i]);
                    let b = out.at(&[0, i]);
                    if pos < j {
                        assert_eq!(
                            a, b,
                            "{} l{layers}: token {j} leaked into prediction at position {pos}",
                            kind.slug()
                        );
                    } else if a != b {
                        any_change = true;
                    }
                    // Batch row 1 never saw the perturbation.
                    assert_eq!(base.at(&[1, i]), out.at(&[1, i]));
                }
                assert!(
                    any_change,
                    "{} l{layers}: perturbing token {j} changed nothing at or after it",
                    kind.slug()
                );
                checked += 1;
            }
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    criterion(
        3,
        "causal mask is exact at depths 1/3/6 for both kernels",
        elapsed < 30.0,
        format!(
            "{checked} single-token perturbations: zero diff strictly before the token, \
             effect observed at/after it, sibling batch rows untouched; {elapsed:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: the closed-form least-squares baseline solves noise-free
// prompts essentially exactly.

#[test]
fn c04_least_squares_baseline_is_exact() {
    let bank = standard_bank::<f64>(1000, 1000, 10, 5).unwrap();
    let loss = ols_query_loss(&bank);
    criterion(
        4,
        "least-squares baseline on noise-free prompts",
        loss < 1e-8,
        format!("mean normalized query loss {loss:.2e} < 1e-8 over 1000 prompts (k=10, d_x=5)"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: untrained models sit at the analytic chance level
// (normalized query loss 1.0) on the standard bank.

#[test]
fn c05_untrained_loss_calibration() {
    let bank = standard_bank::<f32>(1000, 2000, 10, 5).unwrap();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for kind in [
        AttentionKind::Quadratic,
        AttentionKind::Linear(FeatureMapKind::SquaredRelu),
    ] {
        for layers in [1usize, 3, 6] {
            let config = desk_model(kind, layers);
            let params: Params<f32> =
                Params::init(&config, &mut RngStream::new(42, "init"));
            let loss = test_loss(&config, &params, &bank).unwrap();
            lo = lo.min(loss);
            hi = hi.max(loss);
        }
    }
    criterion(
        5,
        "untrained models score chance-level loss",
        lo >= 0.7 && hi <= 1.3,
        format!("6 fresh desk-scale models span [{lo:.3}, {hi:.3}] within [0.7, 1.3] on 2000 prompts"),
    );
}

// ---------------------------------------------------------------------------
// Shared desk-scale training matrix for criteria 6-9.

const SEEDS: [u64; 3] = [42, 100, 7];

fn desk_model(attention: AttentionKind, layers: usize) -> ModelConfig {
    ModelConfig {
        attention,
        layers,
        d_model: 64,
        heads: 4,
        mlp_ratio: 4,
        d_x: 5,
        k: 10,
        eps: ATTENTION_EPS,
    }
}

/// One trained seed's headline numbers.
struct SeedRun {
    final_test: f64,
    final_aniso: f64,
    convergence_samples: u64,
}

struct Matrix {
    /// Keyed by attention slug and depth.
    runs: BTreeMap<(String, usize), Vec<SeedRun>>,
}

impl Matrix {
    fn seed_runs(&self, kind: AttentionKind, layers: usize) -> &[SeedRun] {
        &self.runs[&(kind.slug(), layers)]
    }

    fn mean_final(&self, kind: AttentionKind, layers: usize) -> f64 {
        mean(&self.finals(kind, layers))
    }

    fn finals(&self, kind: AttentionKind, layers: usize) -> Vec<f64> {
        self.seed_runs(kind, layers)
            .iter()
            .map(|r| r.final_test)
            .collect()
    }

    /// 1.96 x std of the per-seed final losses.
    fn ci_final(&self, kind: AttentionKind, layers: usize) -> f64 {
        let per_seed: Vec<Vec<f64>> = self
            .finals(kind, layers)
            .into_iter()
            .map(|l| vec![l])
            .collect();
        confidence_interval(&per_seed, CiMode::PerSeedMean).unwrap()
    }

    fn median_convergence_samples(&self, kind: AttentionKind, layers: usize) -> u64 {
        let mut s: Vec<u64> = self
            .seed_runs(kind, layers)
            .iter()
            .map(|r| r.convergence_samples)
            .collect();
        s.sort_unstable();
        s[s.len() / 2]
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn matrix_configs() -> Vec<(AttentionKind, usize)> {
    vec![
        (AttentionKind::Quadratic, 1),
        (AttentionKind::Quadratic, 3),
        (AttentionKind::Quadratic, 6),
        (AttentionKind::Linear(FeatureMapKind::SquaredRelu), 1),
        (AttentionKind::Linear(FeatureMapKind::SquaredRelu), 3),
        (AttentionKind::Linear(FeatureMapKind::SquaredRelu), 6),
        (AttentionKind::Linear(FeatureMapKind::Identity), 3),
        (AttentionKind::Linear(FeatureMapKind::Relu), 3),
    ]
}

fn train_matrix() -> Matrix {
    let base = std::env::temp_dir().join("iclbench-acceptance");
    let mut runs: BTreeMap<(String, usize), Vec<SeedRun>> = BTreeMap::new();
    let started = Instant::now();

    for (kind, layers) in matrix_configs() {
        for seed in SEEDS {
            let model = desk_model(kind, layers);
            let mut train = TrainConfig::defaults_for(kind);
            train.seeds = vec![seed];
            assert_eq!(train.precision, Precision::F32);
            let run = RunConfig {
                model,
                train,
                seed,
                manifest_hash: None,
            };
            let dir: PathBuf = base.join(format!(
                "{}-l{layers}-s{seed}-{}",
                kind.slug(),
                &config_hash(&run).unwrap()[..8]
            ));
            println!(
                "[matrix] {} l{layers} seed {seed} ({:.0}s elapsed)",
                kind.slug(),
                started.elapsed().as_secs_f64()
            );
            let outcome = train_run::<f32>(&run, &dir, true).unwrap();
            assert!(outcome.completed);

            let last: &EvalRecord = outcome.records.last().unwrap();
            let curve = LossCurve {
                points: outcome
                    .records
                    .iter()
                    .map(|r| CurvePoint {
                        step: r.step,
                        samples: r.samples_seen,
                        loss: r.test_loss,
                    })
                    .collect(),
            };
            let (_, samples) = convergence_point(&curve, 0.9).unwrap();
            runs.entry((kind.slug(), layers)).or_default().push(SeedRun {
                final_test: last.test_loss,
                final_aniso: last.aniso_test_loss,
                convergence_samples: samples,
            });
        }
    }

    Matrix { runs }
}

static MATRIX: LazyLock<Matrix> = LazyLock::new(train_matrix);

// Bounds frozen from the calibration run recorded alongside this file (see
// README, acceptance section). The qualitative orderings are fixed; only
// these numeric anchors came from the pilot.
const QUAD_L1_MIN: f64 = 0.4;
const QUAD_L3_MAX: f64 = 0.25;
const LIN_L1_MIN: f64 = 0.4;
const LIN_L3_MAX: f64 = 0.25;
const IDENTITY_L3_MIN: f64 = 0.8;
const ANISO_MAX_RELATIVE_EXCESS: f64 = 0.30;

// ---------------------------------------------------------------------------
// Criterion 6: deeper models reach lower final loss for both attention
// kinds at desk scale.

#[test]
fn c06_depth_ordering_desk_scale() {
    let m = &*MATRIX;
    let quad = AttentionKind::Quadratic;
    let lin = AttentionKind::Linear(FeatureMapKind::SquaredRelu);

    let q = [
        m.mean_final(quad, 1),
        m.mean_final(quad, 3),
        m.mean_final(quad, 6),
    ];
    let l = [
        m.mean_final(lin, 1),
        m.mean_final(lin, 3),
        m.mean_final(lin, 6),
    ];

    let ordered = q[0] > q[1] && q[1] > q[2] && l[0] > l[1] && l[1] > l[2];
    let anchors = q[0] > QUAD_L1_MIN
        && q[1] < QUAD_L3_MAX
        && l[0] > LIN_L1_MIN
        && l[1] < LIN_L3_MAX;
    criterion(
        6,
        "final loss strictly improves with depth (1 > 3 > 6 layers)",
        ordered && anchors,
        format!(
            "quadratic {:.3} > {:.3} > {:.3} (l1 > {QUAD_L1_MIN}, l3 < {QUAD_L3_MAX}); \
             linear {:.3} > {:.3} > {:.3} (l1 > {LIN_L1_MIN}, l3 < {LIN_L3_MAX}); \
             3-seed means",
            q[0], q[1], q[2], l[0], l[1], l[2]
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: feature-map ablation at 3 layers — SquaredRelu < Relu <
// Identity in final loss, each gap wider than the seed scatter, and the
// identity map stays near chance level.

#[test]
fn c07_feature_map_ablation() {
    let m = &*MATRIX;
    let sq = AttentionKind::Linear(FeatureMapKind::SquaredRelu);
    let re = AttentionKind::Linear(FeatureMapKind::Relu);
    let id = AttentionKind::Linear(FeatureMapKind::Identity);

    let (m_sq, m_re, m_id) = (m.mean_final(sq, 3), m.mean_final(re, 3), m.mean_final(id, 3));
    let (ci_sq, ci_re, ci_id) = (m.ci_final(sq, 3), m.ci_final(re, 3), m.ci_final(id, 3));

    let ordered = m_sq < m_re && m_re < m_id;
    let gaps = (m_re - m_sq) > (ci_re + ci_sq) && (m_id - m_re) > (ci_id + ci_re);
    criterion(
        7,
        "feature-map ordering squared-relu < relu < identity",
        ordered && gaps && m_id > IDENTITY_L3_MIN,
        format!(
            "3-layer final losses: squared-relu {m_sq:.3} (±{ci_sq:.3}) < relu {m_re:.3} \
             (±{ci_re:.3}) < identity {m_id:.3} (±{ci_id:.3}); identity > {IDENTITY_L3_MIN}; \
             gaps exceed summed 3-seed CIs"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: trained models degrade gracefully under the anisotropic
// input shift.

#[test]
fn c08_anisotropic_robustness() {
    let m = &*MATRIX;
    let mut worst = f64::NEG_INFINITY;
    let mut detail = Vec::new();
    for kind in [
        AttentionKind::Quadratic,
        AttentionKind::Linear(FeatureMapKind::SquaredRelu),
    ] {
        for layers in [3usize, 6] {
            let runs = m.seed_runs(kind, layers);
            let iso = mean(&runs.iter().map(|r| r.final_test).collect::<Vec<_>>());
            let aniso = mean(&runs.iter().map(|r| r.final_aniso).collect::<Vec<_>>());
            let excess = (aniso - iso) / iso;
            worst = worst.max(excess);
            detail.push(format!("{} l{layers} {:+.1}%", kind.slug(), 100.0 * excess));
        }
    }
    criterion(
        8,
        "anisotropic loss within 30% of isotropic",
        worst < ANISO_MAX_RELATIVE_EXCESS,
        format!("{}; worst {:+.1}% < +30%", detail.join(", "), 100.0 * worst),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: convergence bookkeeping is exact on synthetic curves, and
// linear attention reaches its 90% point in fewer samples than quadratic
// at matched depth >= 3.

#[test]
fn c09_convergence_metric_and_sample_efficiency() {
    // Synthetic curve 1.0 -> 0.1: the 90% threshold is 0.19, first crossed
    // at step 200 here.
    let synth = LossCurve {
        points: [(0u64, 1.0f64), (100, 0.5), (200, 0.19), (300, 0.1)]
            .iter()
            .map(|&(step, loss)| CurvePoint {
                step,
                samples: step * 64,
                loss,
            })
            .collect(),
    };
    let (step, samples) = convergence_point(&synth, 0.9).unwrap();
    assert_eq!((step, samples), (200, 12800));

    // Samples-seen bookkeeping: crossing at step 4000 with batch 64 means
    // 256,000 samples.
    let book = LossCurve {
        points: [(0u64, 1.0f64), (4000, 0.05), (8000, 0.04)]
            .iter()
            .map(|&(step, loss)| CurvePoint {
                step,
                samples: step * 64,
                loss,
            })
            .collect(),
    };
    assert_eq!(convergence_point(&book, 0.9).unwrap(), (4000, 256_000));

    let m = &*MATRIX;
    let quad = AttentionKind::Quadratic;
    let lin = AttentionKind::Linear(FeatureMapKind::SquaredRelu);
    let q3 = m.median_convergence_samples(quad, 3);
    let l3 = m.median_convergence_samples(lin, 3);
    let q6 = m.median_convergence_samples(quad, 6);
    let l6 = m.median_convergence_samples(lin, 6);

    criterion(
        9,
        "convergence metric exact; linear converges in fewer samples",
        l3 < q3 && l6 < q6,
        format!(
            "synthetic checks exact (step 200; 4000 x 64 = 256k); median 90% point: \
             3 layers linear {l3} < quadratic {q3} samples, 6 layers linear {l6} < quadratic {q6}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: measured wall-clock scaling separates the kernels.

#[test]
fn c10_complexity_scaling() {
    // Wait out the training matrix first so the timing measurement below
    // never competes with it for cores.
    let _ = &*MATRIX;

    let report = bench_attention(&[64, 128, 256, 512, 1024], 64, FeatureMapKind::SquaredRelu, 5)
        .unwrap();
    let quad_ratio = report.top_ratio(true).unwrap();
    let lin_ratio = report.top_ratio(false).unwrap();
    let qe = report.quadratic_exponent;
    let le = report.linear_exponent;

    criterion(
        10,
        "quadratic vs linear wall-clock scaling",
        quad_ratio > 3.0
            && lin_ratio < 2.6
            && (1.6..=2.4).contains(&qe)
            && (0.7..=1.3).contains(&le),
        format!(
            "T=1024/T=512 time ratio: quadratic {quad_ratio:.2} > 3.0, linear {lin_ratio:.2} < 2.6; \
             log-log exponents quadratic {qe:.2} in [1.6, 2.4], linear {le:.2} in [0.7, 1.3]"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: the full-scale reproduction recipe ships and is
// well-formed; executing it is an explicitly long-running manual step.

#[test]
fn c11_full_scale_recipe_ships() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/paper-scale.toml");
    let text = std::fs::read_to_string(&path).unwrap();
    let doc: toml::Value = text.parse().unwrap();

    let seeds = doc["seeds"].as_array().unwrap();
    let runs = doc["runs"].as_array().unwrap();
    let target = runs.iter().find(|r| {
        r["model"]["attention"].as_str() == Some("quadratic")
            && r["model"]["layers"].as_integer() == Some(6)
    });
    let ok = match target {
        Some(r) => {
            r["model"]["d_model"].as_integer() == Some(256)
                && r["train"]["steps"].as_integer() == Some(30000)
                && seeds.len() == 5
        }
        None => false,
    };

    criterion(
        11,
        "full-scale recipe present (not executed here)",
        ok,
        format!(
            "configs/paper-scale.toml defines 6-layer quadratic at d_model 256, \
             30000 steps, {} seeds; run `iclbench train --manifest configs/paper-scale.toml` \
             (hours of CPU time) and expect 6-layer quadratic test loss <= 0.06",
            seeds.len()
        ),
    );
}
