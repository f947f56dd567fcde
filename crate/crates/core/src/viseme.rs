//! Autoregressive viseme decoder.
//!
//! Each step appends one row `ĥ_t = v̂_{t−1} + PE(t)` (the zero start token
//! at `t = 0`) and runs it through `n_layers` post-norm transformer decoder
//! layers: causal self-attention over the rows so far, cross-attention into
//! the audio embedding under the diagonal alignment bias, then a
//! feed-forward block, each wrapped as `LayerNorm(x + sublayer(x))`. A final
//! linear layer emits `v̂_t`.
//!
//! Self-attention keys and values are cached per layer. Because every layer
//! is causal, row `t` of each layer's output never changes once computed,
//! so the cached rollout equals re-running the full prefix at each step.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioEmbedding, EMBED_DIM};
use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, BiasMatrix, Graph, Mask, Matrix, ParamStore, Tensor, Var};

pub const PARAM_PREFIX: &str = "viseme.";
pub const OUT_WEIGHT: &str = "viseme.out.weight";
pub const OUT_BIAS: &str = "viseme.out.bias";

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub leaky_slope: f64,
    pub ln_eps: f64,
    /// Bias added to the audio-motion attention scores.
    pub cross_mask: Mask,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: EMBED_DIM,
            n_heads: 4,
            d_head: 64,
            d_ff: 128,
            n_layers: 2,
            leaky_slope: 0.01,
            ln_eps: 1e-5,
            cross_mask: Mask::Diagonal,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_head == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.d_model != EMBED_DIM {
            return Err(Error::Config(format!(
                "decoder width {} must equal the embedding width {EMBED_DIM}",
                self.d_model
            )));
        }
        Ok(())
    }

    pub fn start_token(&self) -> Vec<f64> {
        vec![0.0; self.d_model]
    }
}

/// T×64 speaker-independent viseme features.
#[derive(Debug, Clone, PartialEq)]
pub struct VisemeSequence {
    frames: Matrix,
}

impl VisemeSequence {
    pub fn new(frames: Matrix) -> Result<Self> {
        if frames.cols() != EMBED_DIM {
            return Err(Error::shape("viseme sequence", &[frames.rows(), frames.cols()], &[EMBED_DIM]));
        }
        Ok(VisemeSequence { frames })
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

/// Sinusoidal encoding: dim `2k` = sin(t / 10000^(2k/d)), dim `2k+1` = cos.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let k = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * k / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Square T×T alignment bias: 0 on the diagonal, `-inf` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBias(BiasMatrix);

impl AlignmentBias {
    pub fn matrix(&self) -> &BiasMatrix {
        &self.0
    }

    pub fn into_mask(self) -> Mask {
        Mask::Custom(Arc::new(self.0))
    }
}

pub fn alignment_bias(t: usize) -> Result<AlignmentBias> {
    if t == 0 {
        return Err(Error::Length("alignment bias needs T >= 1".into()));
    }
    let data = (0..t * t)
        .map(|k| if k / t == k % t { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    Ok(AlignmentBias(BiasMatrix::new(t, t, data)?))
}

pub fn causal_mask(t: usize) -> Result<BiasMatrix> {
    if t == 0 {
        return Err(Error::Length("causal mask needs T >= 1".into()));
    }
    let data = (0..t * t)
        .map(|k| if k % t <= k / t { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    BiasMatrix::new(t, t, data)
}

/// `softmax(QKᵀ/√d_k + bias)·V` on plain matrices.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix, bias: &BiasMatrix) -> Result<Matrix> {
    if bias.rows() != q.rows() || bias.cols() != k.rows() {
        return Err(Error::shape(
            "attention bias",
            &[q.rows(), k.rows()],
            &[bias.rows(), bias.cols()],
        ));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant_matrix(q), g.constant_matrix(k), g.constant_matrix(v));
    let out = g.attention(qv, kv, vv, 1, &Mask::Custom(Arc::new(bias.clone())), 0)?;
    g.to_matrix(out)
}

fn layer_name(layer: usize, block: &str, part: &str) -> String {
    format!("viseme.l{layer}.{block}.{part}")
}

fn linear_named(g: &mut Graph, params: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(params, &format!("{prefix}.weight"))?;
    let b = g.param(params, &format!("{prefix}.bias"))?;
    g.linear(x, w, b)
}

/// Multi-head attention with parameters `{prefix}.{q,k,v,o}.{weight,bias}`:
/// projects queries from `x_q` and keys/values from `x_kv`, attends per
/// head, concatenates, and applies the output projection.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    mask: &Mask,
    row_offset: usize,
    heads: usize,
) -> Result<Var> {
    let q = linear_named(g, params, x_q, &format!("{prefix}.q"))?;
    let k = linear_named(g, params, x_kv, &format!("{prefix}.k"))?;
    let v = linear_named(g, params, x_kv, &format!("{prefix}.v"))?;
    let a = g.attention(q, k, v, heads, mask, row_offset)?;
    linear_named(g, params, a, &format!("{prefix}.o"))
}

fn add_norm(g: &mut Graph, params: &ParamStore, cfg: &DecoderConfig, x: Var, y: Var, name: &str) -> Result<Var> {
    let s = g.add(x, y)?;
    let gamma = g.param(params, &format!("{name}.gamma"))?;
    let beta = g.param(params, &format!("{name}.beta"))?;
    g.layer_norm(s, gamma, beta, cfg.ln_eps)
}

fn feed_forward(g: &mut Graph, params: &ParamStore, cfg: &DecoderConfig, layer: usize, x: Var) -> Result<Var> {
    let h = linear_named(g, params, x, &format!("viseme.l{layer}.ff1"))?;
    let h = g.leaky_relu(h, cfg.leaky_slope);
    linear_named(g, params, h, &format!("viseme.l{layer}.ff2"))
}

/// Full-block decoder layer over `h` (t×64) attending into `audio` (T×64).
pub fn decoder_layer(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &DecoderConfig,
    layer: usize,
    h: Var,
    audio: Var,
) -> Result<Var> {
    let (t, _) = g.shape(h);
    let (frames, _) = g.shape(audio);
    if t > frames {
        return Err(Error::Alignment { queries: t, frames });
    }
    let prefix = format!("viseme.l{layer}");
    let a = multi_head_attention(g, params, &format!("{prefix}.self"), h, h, &Mask::Causal, 0, cfg.n_heads)?;
    let x1 = add_norm(g, params, cfg, h, a, &format!("{prefix}.ln1"))?;
    let c = multi_head_attention(
        g,
        params,
        &format!("{prefix}.cross"),
        x1,
        audio,
        &cfg.cross_mask,
        0,
        cfg.n_heads,
    )?;
    let x2 = add_norm(g, params, cfg, x1, c, &format!("{prefix}.ln2"))?;
    let f = feed_forward(g, params, cfg, layer, x2)?;
    add_norm(g, params, cfg, x2, f, &format!("{prefix}.ln3"))
}

struct LayerCache {
    keys: Vec<Var>,
    values: Vec<Var>,
    audio_k: Var,
    audio_v: Var,
}

fn layer_step(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &DecoderConfig,
    layer: usize,
    h: Var,
    pos: usize,
    cache: &mut LayerCache,
) -> Result<Var> {
    let prefix = format!("viseme.l{layer}");
    let q = linear_named(g, params, h, &format!("{prefix}.self.q"))?;
    let k = linear_named(g, params, h, &format!("{prefix}.self.k"))?;
    let v = linear_named(g, params, h, &format!("{prefix}.self.v"))?;
    cache.keys.push(k);
    cache.values.push(v);
    let keys = g.concat_rows(&cache.keys)?;
    let values = g.concat_rows(&cache.values)?;
    let a = g.attention(q, keys, values, cfg.n_heads, &Mask::Causal, pos)?;
    let a = linear_named(g, params, a, &format!("{prefix}.self.o"))?;
    let x1 = add_norm(g, params, cfg, h, a, &format!("{prefix}.ln1"))?;

    let q2 = linear_named(g, params, x1, &format!("{prefix}.cross.q"))?;
    let c = g.attention(q2, cache.audio_k, cache.audio_v, cfg.n_heads, &cfg.cross_mask, pos)?;
    let c = linear_named(g, params, c, &format!("{prefix}.cross.o"))?;
    let x2 = add_norm(g, params, cfg, x1, c, &format!("{prefix}.ln2"))?;
    let f = feed_forward(g, params, cfg, layer, x2)?;
    add_norm(g, params, cfg, x2, f, &format!("{prefix}.ln3"))
}

/// Recorded autoregressive rollout over a T×64 audio node; returns T×64.
pub fn decode_graph(g: &mut Graph, params: &ParamStore, cfg: &DecoderConfig, audio: Var) -> Result<Var> {
    let (frames, width) = g.shape(audio);
    if frames == 0 {
        return Err(Error::Length("cannot decode empty audio".into()));
    }
    if width != cfg.d_model {
        return Err(Error::shape("decode", &[frames, width], &[cfg.d_model]));
    }
    let mut caches = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let audio_k = linear_named(g, params, audio, &format!("viseme.l{l}.cross.k"))?;
        let audio_v = linear_named(g, params, audio, &format!("viseme.l{l}.cross.v"))?;
        caches.push(LayerCache {
            keys: Vec::with_capacity(frames),
            values: Vec::with_capacity(frames),
            audio_k,
            audio_v,
        });
    }
    let mut prev = g.constant(1, cfg.d_model, cfg.start_token())?;
    let mut outputs = Vec::with_capacity(frames);
    for t in 0..frames {
        let pe = g.constant(1, cfg.d_model, positional_encoding(t, cfg.d_model))?;
        let mut h = g.add(prev, pe)?;
        for (l, cache) in caches.iter_mut().enumerate() {
            h = layer_step(g, params, cfg, l, h, t, cache)?;
        }
        let w = g.param(params, OUT_WEIGHT)?;
        let b = g.param(params, OUT_BIAS)?;
        let v = g.linear(h, w, b)?;
        outputs.push(v);
        prev = v;
    }
    g.concat_rows(&outputs)
}

/// Decodes `v̂_{1:T}` for an audio embedding.
pub fn autoregressive_decode(audio: &AudioEmbedding, params: &ParamStore, cfg: &DecoderConfig) -> Result<VisemeSequence> {
    if audio.is_empty() {
        return Err(Error::Length("cannot decode empty audio".into()));
    }
    let mut g = Graph::new();
    let a = g.constant_matrix(audio.frames());
    let v = decode_graph(&mut g, params, cfg, a)?;
    VisemeSequence::new(g.to_matrix(v)?)
}

/// Adds freshly initialised decoder parameters (Xavier weights, zero biases,
/// unit layer-norm gains) to `store`.
pub fn init_params(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let inner = cfg.n_heads * cfg.d_head;
    let mut linear = |store: &mut ParamStore, name: String, fan_in: usize, fan_out: usize| -> Result<()> {
        store.insert(&format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out))?;
        store.insert(&format!("{name}.bias"), Tensor::zeros(vec![fan_out]))
    };
    for l in 0..cfg.n_layers {
        for block in ["self", "cross"] {
            for p in ["q", "k", "v"] {
                linear(store, layer_name(l, block, p), d, inner)?;
            }
            linear(store, layer_name(l, block, "o"), inner, d)?;
        }
        linear(store, format!("viseme.l{l}.ff1"), d, cfg.d_ff)?;
        linear(store, format!("viseme.l{l}.ff2"), cfg.d_ff, d)?;
        for ln in ["ln1", "ln2", "ln3"] {
            store.insert(
                &format!("viseme.l{l}.{ln}.gamma"),
                Tensor::new(vec![d], vec![1.0; d])?,
            )?;
            store.insert(&format!("viseme.l{l}.{ln}.beta"), Tensor::zeros(vec![d]))?;
        }
    }
    linear(store, "viseme.out".to_string(), d, d)
}
