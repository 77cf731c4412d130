//! Decoder-only transformer over interleaved regression prompts.
//!
//! A prompt becomes a stream of `T = 2k + 1` tokens: `x_1, y_1, ..., x_k,
//! y_k, x_query`. Each raw token has `d_x + 1` slots; x tokens carry the
//! input vector with a zero final slot, y tokens carry the target scalar in
//! the final slot with zeros elsewhere. A shared linear read-in lifts raw
//! tokens to `d_model`, learned absolute positional embeddings are added,
//! then standard pre-norm blocks (layer norm, attention, residual; layer
//! norm, MLP, residual) run with either the softmax or the kernelized
//! attention kernel. A final layer norm and a scalar read-out produce one
//! prediction per position; predictions are read at the x-token positions,
//! so the output is `[batch, k + 1]` covering every context pair plus the
//! query.

use serde::{Deserialize, Serialize};

use crate::attention::{
    linear_causal_attention_recurrent, quadratic_causal_attention, FeatureMapKind, StatePolicy,
    ATTENTION_EPS,
};
use crate::autodiff::Tape;
use crate::datagen::PromptBatch;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Which attention kernel the blocks use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    Quadratic,
    Linear(FeatureMapKind),
}

impl AttentionKind {
    /// Filesystem-safe identifier, e.g. `quadratic` or `linear-squared-relu`.
    pub fn slug(&self) -> String {
        match self {
            AttentionKind::Quadratic => "quadratic".to_string(),
            AttentionKind::Linear(map) => format!("linear-{map}"),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.slug())
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "quadratic" {
            return Ok(AttentionKind::Quadratic);
        }
        if let Some(map) = s.strip_prefix("linear-") {
            return Ok(AttentionKind::Linear(map.parse()?));
        }
        Err(Error::Config(format!("unknown attention kind `{s}`")))
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub attention: AttentionKind,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub d_x: usize,
    pub k: usize,
    /// Denominator guard for the kernelized attention normalizer.
    pub eps: f64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; widen `d_model` to 256 for full-scale runs.
    fn default() -> Self {
        ModelConfig {
            attention: AttentionKind::Quadratic,
            layers: 3,
            d_model: 64,
            heads: 4,
            mlp_ratio: 4,
            d_x: 5,
            k: 10,
            eps: ATTENTION_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("d_model, heads and mlp_ratio must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_x == 0 || self.k == 0 {
            return bad("d_x and k must be positive".into());
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return bad("eps must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Token count per prompt: `2k + 1`.
    pub fn seq_len(&self) -> usize {
        2 * self.k + 1
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.d_model
    }

    /// Even indices `0, 2, ..., 2k`: the positions whose outputs are the
    /// predictions for `y_1..y_k, y_query`.
    pub fn x_positions(&self) -> Vec<usize> {
        (0..=self.k).map(|i| 2 * i).collect()
    }

    /// Exact number of trainable scalars, closed form. Must agree with
    /// enumerating [`Params::flatten`].
    pub fn count_params(&self) -> usize {
        let d = self.d_model;
        let h = self.mlp_hidden();
        let read_in = (self.d_x + 1) * d + d;
        let pos = self.seq_len() * d;
        let block = 2 * d                    // ln1
            + 4 * (d * d + d)                // q, k, v, o projections
            + 2 * d                          // ln2
            + (d * h + h) + (h * d + d); // mlp
        let tail = 2 * d + (d + 1); // final norm + read-out
        read_in + pos + self.layers * block + tail
    }
}

/// Weights for one pre-norm block.
#[derive(Clone)]
pub struct LayerParams<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// All model weights. Traversal order (read-in, positions, blocks in depth
/// order, final norm, read-out) is the canonical order for initialization
/// draws, checkpoint layout and optimizer state.
#[derive(Clone)]
pub struct Params<T> {
    pub read_in_w: Tensor<T>,
    pub read_in_b: Tensor<T>,
    pub pos: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gamma: Tensor<T>,
    pub lnf_beta: Tensor<T>,
    pub read_out_w: Tensor<T>,
    pub read_out_b: Tensor<T>,
}

/// Per-tensor constructor used by [`Params::build`]; `is_weight`
/// distinguishes matmul weights and positional embeddings from biases and
/// layer-norm parameters.
pub(crate) type ParamInit<'a, T> = dyn FnMut(&str, Vec<usize>, bool) -> Tensor<T> + 'a;

impl<T: Float> Params<T> {
    /// Constructs a parameter set by calling `make(name, shape, is_weight)`
    /// once per tensor in canonical order.
    pub(crate) fn build(config: &ModelConfig, make: &mut ParamInit<'_, T>) -> Params<T> {
        let d = config.d_model;
        let h = config.mlp_hidden();
        let mut layers = Vec::with_capacity(config.layers);
        let read_in_w = make("read_in.w", vec![config.d_x + 1, d], true);
        let read_in_b = make("read_in.b", vec![d], false);
        let pos = make("pos", vec![config.seq_len(), d], true);
        for i in 0..config.layers {
            let n = |suffix: &str| format!("layer{i}.{suffix}");
            layers.push(LayerParams {
                ln1_gamma: make(&n("ln1.gamma"), vec![d], false),
                ln1_beta: make(&n("ln1.beta"), vec![d], false),
                wq: make(&n("attn.wq"), vec![d, d], true),
                bq: make(&n("attn.bq"), vec![d], false),
                wk: make(&n("attn.wk"), vec![d, d], true),
                bk: make(&n("attn.bk"), vec![d], false),
                wv: make(&n("attn.wv"), vec![d, d], true),
                bv: make(&n("attn.bv"), vec![d], false),
                wo: make(&n("attn.wo"), vec![d, d], true),
                bo: make(&n("attn.bo"), vec![d], false),
                ln2_gamma: make(&n("ln2.gamma"), vec![d], false),
                ln2_beta: make(&n("ln2.beta"), vec![d], false),
                w1: make(&n("mlp.w1"), vec![d, h], true),
                b1: make(&n("mlp.b1"), vec![h], false),
                w2: make(&n("mlp.w2"), vec![h, d], true),
                b2: make(&n("mlp.b2"), vec![d], false),
            });
        }
        let lnf_gamma = make("ln_f.gamma", vec![d], false);
        let lnf_beta = make("ln_f.beta", vec![d], false);
        let read_out_w = make("read_out.w", vec![d, 1], true);
        let read_out_b = make("read_out.b", vec![1], false);
        Params {
            read_in_w,
            read_in_b,
            pos,
            layers,
            lnf_gamma,
            lnf_beta,
            read_out_w,
            read_out_b,
        }
    }

    /// Fresh weights: matmul weights and positional embeddings drawn
    /// `N(0, 0.02^2)` in canonical order from `rng`, biases zero, layer-norm
    /// scales one and shifts zero. Layer-norm and bias tensors consume no
    /// draws, so the weight stream depends only on the architecture.
    pub fn init(config: &ModelConfig, rng: &mut RngStream) -> Params<T> {
        let stddev = T::cast(0.02);
        Params::build(config, &mut |name, shape, is_weight| {
            if !is_weight {
                if name.ends_with("gamma") {
                    Tensor::ones(shape)
                } else {
                    Tensor::zeros(shape)
                }
            } else {
                Tensor::randn(shape, stddev, rng)
            }
        })
    }

    /// All-zero tensors in canonical order (optimizer moment buffers).
    pub fn zeros(config: &ModelConfig) -> Params<T> {
        Params::build(config, &mut |_, shape, _| Tensor::zeros(shape))
    }

    /// Registers every tensor as a leaf on `tape`, in canonical order.
    pub fn attach(&self, tape: &Tape<T>) -> Params<T> {
        let mut src = self.flatten();
        src.reverse();
        let config = self.infer_config_shape();
        Params::build(&config, &mut |name, _, _| {
            let (src_name, t) = src.pop().expect("canonical orders in sync");
            debug_assert_eq!(src_name, name);
            t.attach(tape)
        })
    }

    // Shape skeleton sufficient for build() traversal; attention kind and
    // eps are irrelevant to parameter layout.
    fn infer_config_shape(&self) -> ModelConfig {
        let d = self.read_in_w.shape()[1];
        let h = self
            .layers
            .first()
            .map_or(4 * d, |l| l.w1.shape()[1]);
        ModelConfig {
            attention: AttentionKind::Quadratic,
            layers: self.layers.len(),
            d_model: d,
            heads: 1,
            mlp_ratio: h / d,
            d_x: self.read_in_w.shape()[0] - 1,
            k: (self.pos.shape()[0] - 1) / 2,
            eps: ATTENTION_EPS,
        }
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn flatten(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        out.push(("read_in.w".to_string(), &self.read_in_w));
        out.push(("read_in.b".to_string(), &self.read_in_b));
        out.push(("pos".to_string(), &self.pos));
        for (i, l) in self.layers.iter().enumerate() {
            let pairs: [(&str, &Tensor<T>); 16] = [
                ("ln1.gamma", &l.ln1_gamma),
                ("ln1.beta", &l.ln1_beta),
                ("attn.wq", &l.wq),
                ("attn.bq", &l.bq),
                ("attn.wk", &l.wk),
                ("attn.bk", &l.bk),
                ("attn.wv", &l.wv),
                ("attn.bv", &l.bv),
                ("attn.wo", &l.wo),
                ("attn.bo", &l.bo),
                ("ln2.gamma", &l.ln2_gamma),
                ("ln2.beta", &l.ln2_beta),
                ("mlp.w1", &l.w1),
                ("mlp.b1", &l.b1),
                ("mlp.w2", &l.w2),
                ("mlp.b2", &l.b2),
            ];
            for (suffix, t) in pairs {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("ln_f.gamma".to_string(), &self.lnf_gamma));
        out.push(("ln_f.beta".to_string(), &self.lnf_beta));
        out.push(("read_out.w".to_string(), &self.read_out_w));
        out.push(("read_out.b".to_string(), &self.read_out_b));
        out
    }

    /// Mutable view in canonical order; must mirror [`Params::flatten`].
    pub fn flatten_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("read_in.w".to_string(), &mut self.read_in_w));
        out.push(("read_in.b".to_string(), &mut self.read_in_b));
        out.push(("pos".to_string(), &mut self.pos));
        for (i, l) in self.layers.iter_mut().enumerate() {
            let pairs: [(&str, &mut Tensor<T>); 16] = [
                ("ln1.gamma", &mut l.ln1_gamma),
                ("ln1.beta", &mut l.ln1_beta),
                ("attn.wq", &mut l.wq),
                ("attn.bq", &mut l.bq),
                ("attn.wk", &mut l.wk),
                ("attn.bk", &mut l.bk),
                ("attn.wv", &mut l.wv),
                ("attn.bv", &mut l.bv),
                ("attn.wo", &mut l.wo),
                ("attn.bo", &mut l.bo),
                ("ln2.gamma", &mut l.ln2_gamma),
                ("ln2.beta", &mut l.ln2_beta),
                ("mlp.w1", &mut l.w1),
                ("mlp.b1", &mut l.b1),
                ("mlp.w2", &mut l.w2),
                ("mlp.b2", &mut l.b2),
            ];
            for (suffix, t) in pairs {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("ln_f.gamma".to_string(), &mut self.lnf_gamma));
        out.push(("ln_f.beta".to_string(), &mut self.lnf_beta));
        out.push(("read_out.w".to_string(), &mut self.read_out_w));
        out.push(("read_out.b".to_string(), &mut self.read_out_b));
        out
    }

    /// Total scalar count by enumeration.
    pub fn num_scalars(&self) -> usize {
        self.flatten().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Embedded prompt stream plus the positions where predictions are read.
#[derive(Clone)]
pub struct TokenSequence<T> {
    /// `[batch, 2k + 1, d_model]`.
    pub tokens: Tensor<T>,
    /// Even indices `0, 2, ..., 2k`.
    pub x_positions: Vec<usize>,
}

/// Interleaves a batch into raw tokens, applies the shared read-in and adds
/// positional embeddings. Gradients flow into `params` when they are
/// attached to a tape.
pub fn embed_prompt<T: Float>(
    batch: &PromptBatch<T>,
    params: &Params<T>,
) -> Result<TokenSequence<T>> {
    let d_x = params.read_in_w.shape()[0] - 1;
    let t_max = params.pos.shape()[0];
    let seq = 2 * batch.k + 1;
    if batch.d_x != d_x || seq != t_max {
        return Err(Error::ShapeMismatch {
            op: "embed_prompt",
            lhs: vec![batch.d_x, seq],
            rhs: vec![d_x, t_max],
        });
    }
    let slots = d_x + 1;
    let mut raw = vec![T::zero(); batch.len() * seq * slots];
    for (b, p) in batch.iter().enumerate() {
        let base = b * seq * slots;
        for i in 0..=batch.k {
            let x_off = base + 2 * i * slots;
            raw[x_off..x_off + d_x].copy_from_slice(p.x_row(i));
            if i < batch.k {
                // y token follows its x token; scalar in the final slot.
                raw[x_off + slots + d_x] = p.y(i);
            }
        }
    }
    let raw = Tensor::from_vec(vec![batch.len(), seq, slots], raw)?;
    let tokens = raw
        .matmul(&params.read_in_w)?
        .add(&params.read_in_b)?
        .add(&params.pos)?;
    Ok(TokenSequence {
        tokens,
        x_positions: (0..=batch.k).map(|i| 2 * i).collect(),
    })
}

/// Runs the transformer and returns predictions `[batch, k + 1]`: one
/// scalar per x-token position (context pairs first, query last).
pub fn forward<T: Float>(
    config: &ModelConfig,
    params: &Params<T>,
    tokens: &TokenSequence<T>,
) -> Result<Tensor<T>> {
    config.validate()?;
    let (b, t, d) = {
        let s = tokens.tokens.shape();
        (s[0], s[1], s[2])
    };
    let heads = config.heads;
    let dh = config.d_head();
    let mut h = tokens.tokens.clone();
    for layer in &params.layers {
        let normed = h.layer_norm(&layer.ln1_gamma, &layer.ln1_beta)?;
        let split = |w: &Tensor<T>, bias: &Tensor<T>| -> Result<Tensor<T>> {
            normed
                .matmul(w)?
                .add(bias)?
                .reshape(vec![b, t, heads, dh])?
                .transpose(1, 2)
        };
        let q = split(&layer.wq, &layer.bq)?;
        let k = split(&layer.wk, &layer.bk)?;
        let v = split(&layer.wv, &layer.bv)?;
        // Sequences are short (2k + 1), so the recurrent kernel always
        // stores its per-step states rather than recomputing them.
        let ctx = match config.attention {
            AttentionKind::Quadratic => quadratic_causal_attention(&q, &k, &v)?,
            AttentionKind::Linear(map) => {
                linear_causal_attention_recurrent(&q, &k, &v, map, config.eps, StatePolicy::Store)?
            }
        };
        let merged = ctx
            .transpose(1, 2)?
            .reshape(vec![b, t, d])?
            .matmul(&layer.wo)?
            .add(&layer.bo)?;
        h = h.add(&merged)?;
        let normed2 = h.layer_norm(&layer.ln2_gamma, &layer.ln2_beta)?;
        let mlp = normed2
            .matmul(&layer.w1)?
            .add(&layer.b1)?
            .gelu()?
            .matmul(&layer.w2)?
            .add(&layer.b2)?;
        h = h.add(&mlp)?;
    }
    let f = h.layer_norm(&params.lnf_gamma, &params.lnf_beta)?;
    f.matmul(&params.read_out_w)?
        .add(&params.read_out_b)?
        .reshape(vec![b, t])?
        .index_select(1, &tokens.x_positions)
}

/// Embed-and-forward convenience for inference on detached params.
pub fn predict<T: Float>(
    config: &ModelConfig,
    params: &Params<T>,
    batch: &PromptBatch<T>,
) -> Result<Tensor<T>> {
    let tokens = embed_prompt(batch, params)?;
    forward(config, params, &tokens)
}

/// Targets aligned with [`forward`] output: `[batch, k + 1]`, the `k`
/// context targets then the query target.
pub fn targets_tensor<T: Float>(batch: &PromptBatch<T>) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(batch.len() * (batch.k + 1));
    for p in batch.iter() {
        data.extend_from_slice(&p.ys);
    }
    Tensor::from_vec(vec![batch.len(), batch.k + 1], data)
}
