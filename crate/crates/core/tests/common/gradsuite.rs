//! Shared finite-difference gradient suite.
//!
//! Each case builds a scalar loss from one op (projecting its output
//! against fixed random weights) so both the per-op test file and the
//! acceptance gate can run the identical checks: analytic reverse-mode
//! gradients vs central finite differences on a detached re-evaluation.

use super::{central_diff, max_rel_err, projection, randn_away_from_zero, rel_err};
use iclbench::attention::{
    apply_feature_map, linear_causal_attention_recurrent, quadratic_causal_attention,
    FeatureMapKind, StatePolicy, ATTENTION_EPS,
};
use iclbench::autodiff::Tape;
use iclbench::datagen::{sample_batch, CovarianceKind};
use iclbench::model::{embed_prompt, forward, targets_tensor, AttentionKind, ModelConfig, Params};
use iclbench::training::training_loss;
use iclbench::{RngStream, Tensor, Tensor64};

pub const FD_STEP: f64 = 1e-5;

/// One gradient check: named inputs and a scalar-valued graph over them.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor64>,
    pub graph: Box<dyn Fn(&[Tensor64]) -> Tensor64>,
}

impl GradCase {
    fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor64>,
        graph: impl Fn(&[Tensor64]) -> Tensor64 + 'static,
    ) -> Self {
        GradCase {
            name: name.into(),
            inputs,
            graph: Box::new(graph),
        }
    }
}

/// Worst relative error across all inputs of `case` (analytic vs numeric).
pub fn case_max_err(case: &GradCase) -> f64 {
    let tape = Tape::new();
    let attached: Vec<Tensor64> = case.inputs.iter().map(|t| t.attach(&tape)).collect();
    let loss = (case.graph)(&attached);
    assert_eq!(loss.len(), 1, "{}: loss must be scalar", case.name);
    let grads = loss.backward().unwrap();

    let mut worst = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        let analytic = grads
            .get(&attached[i])
            .unwrap_or_else(|| panic!("{}: input {i} missing gradient", case.name))
            .to_vec();
        let mut eval = |flat: &[f64]| -> f64 {
            let mut rebuilt: Vec<Tensor64> = case.inputs.to_vec();
            rebuilt[i] = Tensor::from_vec(input.shape().to_vec(), flat.to_vec()).unwrap();
            (case.graph)(&rebuilt).item().unwrap()
        };
        let numeric = central_diff(&mut eval, input.data(), FD_STEP);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

pub fn elementwise_cases() -> Vec<GradCase> {
    let mut rng = RngStream::new(1, "gradcheck-elementwise");
    let mut cases = Vec::new();

    let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let bias = Tensor::randn(vec![4], 1.0, &mut rng);
    let w = projection(&[3, 4], &mut rng);
    cases.push(GradCase::new("add broadcast", vec![a, bias], move |xs| {
        xs[0]
            .add(&xs[1])
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap()
    }));

    let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let b = Tensor::randn(vec![4], 1.0, &mut rng);
    let w = projection(&[3, 4], &mut rng);
    cases.push(GradCase::new("sub broadcast", vec![a, b], move |xs| {
        xs[0]
            .sub(&xs[1])
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap()
    }));

    let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let b = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let w = projection(&[3, 4], &mut rng);
    cases.push(GradCase::new("mul", vec![a, b], move |xs| {
        xs[0]
            .mul(&xs[1])
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap()
    }));

    let a = Tensor::randn(vec![5], 1.0, &mut rng);
    cases.push(GradCase::new("add_scalar/mul_scalar", vec![a], |xs| {
        xs[0]
            .add_scalar(0.7)
            .unwrap()
            .mul_scalar(-1.3)
            .unwrap()
            .square()
            .unwrap()
            .sum_all()
            .unwrap()
    }));

    cases
}

pub fn matmul_cases() -> Vec<GradCase> {
    let mut rng = RngStream::new(2, "gradcheck-matmul");
    let mut cases = Vec::new();

    let a = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng);
    let b = Tensor::randn(vec![4, 5], 1.0, &mut rng);
    let w = projection(&[2, 3, 5], &mut rng);
    cases.push(GradCase::new("matmul shared rhs", vec![a, b], move |xs| {
        xs[0]
            .matmul(&xs[1])
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap()
    }));

    let a = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng);
    let b = Tensor::randn(vec![2, 4, 5], 1.0, &mut rng);
    let w = projection(&[2, 3, 5], &mut rng);
    cases.push(GradCase::new("matmul batched", vec![a, b], move |xs| {
        xs[0]
            .matmul(&xs[1])
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap()
    }));

    cases
}

pub fn nonlinearity_cases() -> Vec<GradCase> {
    let mut rng = RngStream::new(3, "gradcheck-nonlin");
    let mut cases = Vec::new();

    let x = randn_away_from_zero(vec![3, 4], 0.2, &mut rng);
    let w = projection(&[3, 4], &mut rng);
    cases.push(GradCase::new("relu", vec![x], move |xs| {
        xs[0].relu().unwrap().mul(&w).unwrap().sum_all().unwrap()
    }));

    let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let w = projection(&[3, 4], &mut rng);
    cases.push(GradCase::new("square", vec![x], move |xs| {
        xs[0].square().unwrap().mul(&w).unwrap().sum_all().unwrap()
    }));

    let x = Tensor::randn(vec![3, 4], 0.5, &mut rng);
    let w = projection(&[3, 4], &mut rng);
    cases.push(GradCase::new("exp", vec![x], move |xs| {
        xs[0].exp().unwrap().mul(&w).unwrap().sum_all().unwrap()
    }));

    let x = Tensor::randn(vec![3, 4], 1.5, &mut rng);
    let w = projection(&[3, 4], &mut rng);
    cases.push(GradCase::new("gelu", vec![x], move |xs| {
        xs[0].gelu().unwrap().mul(&w).unwrap().sum_all().unwrap()
    }));

    cases
}

pub fn normalization_cases() -> Vec<GradCase> {
    let mut rng = RngStream::new(4, "gradcheck-norm");
    let mut cases = Vec::new();

    let x = Tensor::randn(vec![3, 5], 2.0, &mut rng);
    let w = projection(&[3, 5], &mut rng);
    cases.push(GradCase::new("softmax_last", vec![x], move |xs| {
        xs[0]
            .softmax_last()
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap()
    }));

    let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
    let gamma = Tensor::randn(vec![6], 1.0, &mut rng);
    let beta = Tensor::randn(vec![6], 1.0, &mut rng);
    let w = projection(&[4, 6], &mut rng);
    cases.push(GradCase::new("layer_norm", vec![x, gamma, beta], move |xs| {
        xs[0]
            .layer_norm(&xs[1], &xs[2])
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap()
    }));

    cases
}

pub fn shape_cases() -> Vec<GradCase> {
    let mut rng = RngStream::new(5, "gradcheck-shape");
    let mut cases = Vec::new();

    let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    cases.push(GradCase::new("sum_all", vec![x], |xs| {
        xs[0].sum_all().unwrap()
    }));

    let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    cases.push(GradCase::new("mean_all of square", vec![x], |xs| {
        xs[0].square().unwrap().mean_all().unwrap()
    }));

    let x = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng);
    let w = projection(&[4, 3, 2], &mut rng);
    cases.push(GradCase::new("transpose", vec![x], move |xs| {
        xs[0]
            .transpose(0, 2)
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap()
    }));

    let x = Tensor::randn(vec![2, 6], 1.0, &mut rng);
    let w = projection(&[3, 4], &mut rng);
    cases.push(GradCase::new("reshape", vec![x], move |xs| {
        xs[0]
            .reshape(vec![3, 4])
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap()
    }));

    let a = Tensor::randn(vec![2, 2], 1.0, &mut rng);
    let b = Tensor::randn(vec![2, 3], 1.0, &mut rng);
    let c = Tensor::randn(vec![2, 1], 1.0, &mut rng);
    let w = projection(&[2, 6], &mut rng);
    cases.push(GradCase::new("concat", vec![a, b, c], move |xs| {
        Tensor::concat(&[&xs[0], &xs[1], &xs[2]], 1)
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap()
    }));

    let x = Tensor::randn(vec![3, 5], 1.0, &mut rng);
    let w = projection(&[3, 2], &mut rng);
    cases.push(GradCase::new("slice_axis", vec![x], move |xs| {
        xs[0]
            .slice_axis(1, 1, 2)
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap()
    }));

    let x = Tensor::randn(vec![3, 5], 1.0, &mut rng);
    let w = projection(&[3, 3], &mut rng);
    cases.push(GradCase::new(
        "index_select with repeats",
        vec![x],
        move |xs| {
            xs[0]
                .index_select(1, &[4, 0, 4])
                .unwrap()
                .mul(&w)
                .unwrap()
                .sum_all()
                .unwrap()
        },
    ));

    cases
}

pub fn feature_map_cases() -> Vec<GradCase> {
    let mut rng = RngStream::new(6, "gradcheck-featuremap");
    let mut cases = Vec::new();
    for kind in FeatureMapKind::ALL {
        let x = randn_away_from_zero(vec![2, 3], 0.2, &mut rng);
        let dphi = kind.output_dim(3);
        let w = projection(&[2, dphi], &mut rng);
        cases.push(GradCase::new(
            format!("feature map {kind}"),
            vec![x],
            move |xs| {
                apply_feature_map(&xs[0], kind)
                    .unwrap()
                    .mul(&w)
                    .unwrap()
                    .sum_all()
                    .unwrap()
            },
        ));
    }
    cases
}

pub fn attention_cases() -> Vec<GradCase> {
    let mut cases = Vec::new();

    let mut rng = RngStream::new(7, "gradcheck-quadratic");
    let shape = vec![2, 2, 5, 3];
    let q = Tensor::randn(shape.clone(), 1.0, &mut rng);
    let k = Tensor::randn(shape.clone(), 1.0, &mut rng);
    let v = Tensor::randn(shape.clone(), 1.0, &mut rng);
    let w = projection(&shape, &mut rng);
    cases.push(GradCase::new(
        "quadratic_causal_attention",
        vec![q, k, v],
        move |xs| {
            quadratic_causal_attention(&xs[0], &xs[1], &xs[2])
                .unwrap()
                .mul(&w)
                .unwrap()
                .sum_all()
                .unwrap()
        },
    ));

    let mut rng = RngStream::new(8, "gradcheck-linear");
    let shape = vec![1, 2, 6, 4];
    for kind in FeatureMapKind::ALL {
        for policy in [StatePolicy::Store, StatePolicy::Recompute] {
            // Margin keeps relu-family inputs away from their kink so the
            // finite-difference probe stays on one side. The identity map
            // instead gets positive-shifted inputs: its denominator can
            // cross zero for centered data, which makes the output
            // ill-conditioned for finite differences (the gradient is still
            // well-defined; the quadratic truncation term is not).
            let (q, k) = if kind == FeatureMapKind::Identity {
                let shape = shape.clone();
                let shift = |t: Tensor64| {
                    let data = t.data().iter().map(|&x| 0.4 * x + 1.2).collect();
                    Tensor::from_vec(shape.clone(), data).unwrap()
                };
                (
                    shift(Tensor::randn(shape.clone(), 1.0, &mut rng)),
                    shift(Tensor::randn(shape.clone(), 1.0, &mut rng)),
                )
            } else {
                (
                    randn_away_from_zero(shape.clone(), 0.3, &mut rng),
                    randn_away_from_zero(shape.clone(), 0.3, &mut rng),
                )
            };
            let v = Tensor::randn(shape.clone(), 1.0, &mut rng);
            let w = projection(&shape, &mut rng);
            cases.push(GradCase::new(
                format!("linear attention {kind} ({policy:?})"),
                vec![q, k, v],
                move |xs| {
                    linear_causal_attention_recurrent(
                        &xs[0],
                        &xs[1],
                        &xs[2],
                        kind,
                        ATTENTION_EPS,
                        policy,
                    )
                    .unwrap()
                    .mul(&w)
                    .unwrap()
                    .sum_all()
                    .unwrap()
                },
            ));
        }
    }

    cases
}

/// Every primitive- and kernel-level case in one list.
pub fn all_cases() -> Vec<GradCase> {
    let mut cases = Vec::new();
    cases.extend(elementwise_cases());
    cases.extend(matmul_cases());
    cases.extend(nonlinearity_cases());
    cases.extend(normalization_cases());
    cases.extend(shape_cases());
    cases.extend(feature_map_cases());
    cases.extend(attention_cases());
    cases
}

/// End-to-end gradient of the training loss through a complete 1-layer
/// model, spot-checked at 10 randomly chosen parameter coordinates; returns
/// the worst relative error. The composite stacks embedding, layer norms,
/// attention, the MLP and the readout, so it catches wiring mistakes the
/// per-op checks cannot (wrong tensor reused, gradient dropped at a
/// fan-in).
pub fn model_spot_check_max_err(attention: AttentionKind, label: &str) -> f64 {
    let config = ModelConfig {
        attention,
        layers: 1,
        d_model: 16,
        heads: 2,
        mlp_ratio: 2,
        d_x: 3,
        k: 6,
        eps: ATTENTION_EPS,
    };
    let rng = RngStream::new(11, "gradcheck-model");
    let params: Params<f64> = Params::init(&config, &mut rng.fork(label));
    let batch = sample_batch::<f64>(
        &mut rng.fork("batch"),
        3,
        config.k,
        config.d_x,
        &CovarianceKind::Isotropic,
    )
    .unwrap();
    let targets = targets_tensor(&batch).unwrap();

    let loss_at = |p: &Params<f64>| -> f64 {
        let tokens = embed_prompt(&batch, p).unwrap();
        let preds = forward(&config, p, &tokens).unwrap();
        training_loss(&preds, &targets, config.d_x)
            .unwrap()
            .item()
            .unwrap()
    };

    // Analytic gradients for every parameter tensor in one backward pass.
    let tape = Tape::new();
    let attached = params.attach(&tape);
    let tokens = embed_prompt(&batch, &attached).unwrap();
    let preds = forward(&config, &attached, &tokens).unwrap();
    let loss = training_loss(&preds, &targets, config.d_x).unwrap();
    let grads = loss.backward().unwrap();
    let attached_flat = attached.flatten();
    let param_flat = params.flatten();

    // 10 distinct coordinates drawn uniformly over the global flat index
    // space, then mapped back to (tensor, element).
    let total = params.num_scalars();
    let mut coord_rng = rng.fork("coords");
    let mut picked = Vec::new();
    while picked.len() < 10 {
        let g = (coord_rng.next_u64() % total as u64) as usize;
        if !picked.contains(&g) {
            picked.push(g);
        }
    }

    let mut worst = 0.0f64;
    for global in picked {
        let (mut ti, mut ei) = (0, global);
        while ei >= param_flat[ti].1.len() {
            ei -= param_flat[ti].1.len();
            ti += 1;
        }
        let (name, tensor) = &param_flat[ti];

        let analytic = grads
            .get(attached_flat[ti].1)
            .unwrap_or_else(|| panic!("{label}: {name} missing gradient"))
            .data()[ei];

        let eval_shifted = |delta: f64| -> f64 {
            let mut shifted = params.clone();
            let mut flat = shifted.flatten_mut();
            let mut data = tensor.to_vec();
            data[ei] += delta;
            *flat[ti].1 = Tensor::from_vec(tensor.shape().to_vec(), data).unwrap();
            drop(flat);
            loss_at(&shifted)
        };
        let numeric = (eval_shifted(FD_STEP) - eval_shifted(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}
