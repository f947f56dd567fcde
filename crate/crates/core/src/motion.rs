//! Style-conditioned motion decoder.
//!
//! Per frame: `concat(v̂_t, s)` (128) → four `linear 64 + leaky-ReLU` layers
//! → the linear deformation basis (64 → 3V). The style vector enters only at
//! the input concat.

use rand_chacha::ChaCha8Rng;

use crate::audio::EMBED_DIM;
use crate::error::{Error, Result};
use crate::mesh::{MeshSequence, TemplateMesh};
use crate::numerics::{xavier_uniform, Graph, ParamStore, Tensor, Var};
use crate::viseme::VisemeSequence;

pub const STYLE_EMBEDDING: &str = "style.embedding";
pub const BASIS_WEIGHT: &str = "motion.basis.weight";
pub const BASIS_BIAS: &str = "motion.basis.bias";
pub const CANONICAL_IDENTITIES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionConfig {
    pub vertices: usize,
    pub identities: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub leaky_slope: f64,
}

impl MotionConfig {
    pub fn new(vertices: usize) -> Self {
        MotionConfig {
            vertices,
            identities: CANONICAL_IDENTITIES,
            hidden_width: EMBED_DIM,
            hidden_layers: 4,
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices == 0 || self.identities == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::Config("motion decoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

pub fn hidden_name(layer: usize, part: &str) -> String {
    format!("motion.hidden{layer}.{part}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding {
    vector: Vec<f64>,
}

impl StyleEmbedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        if vector.len() != EMBED_DIM {
            return Err(Error::shape("style embedding", &[vector.len()], &[EMBED_DIM]));
        }
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "style embedding",
                index: i,
            });
        }
        Ok(StyleEmbedding { vector })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityOneHot {
    index: usize,
    len: usize,
}

impl IdentityOneHot {
    pub fn new(index: usize, len: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::InvalidArgument(format!(
                "identity {index} out of range for {len} training speakers"
            )));
        }
        Ok(IdentityOneHot { index, len })
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let ones: Vec<usize> = v.iter().enumerate().filter(|(_, x)| **x == 1.0).map(|(i, _)| i).collect();
        let rest_zero = v.iter().all(|x| *x == 0.0 || *x == 1.0);
        if ones.len() != 1 || !rest_zero {
            return Err(Error::InvalidArgument("identity vector must be one-hot".into()));
        }
        Self::new(ones[0], v.len())
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        v[self.index] = 1.0;
        v
    }
}

/// View of the final 64 → 3V layer.
#[derive(Debug, Clone, Copy)]
pub struct DeformationBasis<'a> {
    pub weight: &'a Tensor,
    pub bias: &'a Tensor,
}

impl<'a> DeformationBasis<'a> {
    pub fn from_params(params: &'a ParamStore) -> Result<Self> {
        let weight = params
            .get(BASIS_WEIGHT)
            .ok_or_else(|| Error::MissingParameter(BASIS_WEIGHT.into()))?;
        let bias = params
            .get(BASIS_BIAS)
            .ok_or_else(|| Error::MissingParameter(BASIS_BIAS.into()))?;
        if weight.shape().len() != 2 || weight.cols() % 3 != 0 || bias.len() != weight.cols() {
            return Err(Error::shape("deformation basis", weight.shape(), bias.shape()));
        }
        Ok(DeformationBasis { weight, bias })
    }

    pub fn vertex_count(&self) -> usize {
        self.weight.cols() / 3
    }

    pub fn names() -> [&'static str; 2] {
        [BASIS_WEIGHT, BASIS_BIAS]
    }
}

/// `onehot · E`: a 1×64 row of the style embedding matrix.
pub fn style_from_onehot_graph(g: &mut Graph, params: &ParamStore, id: &IdentityOneHot) -> Result<Var> {
    let e = g.param(params, STYLE_EMBEDDING)?;
    let (rows, _) = g.shape(e);
    if rows != id.len() {
        return Err(Error::shape("style one-hot", &[id.len()], &[rows]));
    }
    let oh = g.constant(1, id.len(), id.to_vec())?;
    g.matmul(oh, e)
}

pub fn style_from_onehot(id: &IdentityOneHot, params: &ParamStore) -> Result<StyleEmbedding> {
    let mut g = Graph::new();
    let s = style_from_onehot_graph(&mut g, params, id)?;
    StyleEmbedding::new(g.value(s).to_vec())
}

/// Recorded motion block: visemes T×64, style 1×64 → displacements T×3V.
pub fn motion_graph(g: &mut Graph, params: &ParamStore, slope: f64, visemes: Var, style: Var) -> Result<Var> {
    let (t, _) = g.shape(visemes);
    let s = g.repeat_rows(style, t)?;
    let mut h = g.concat_cols(&[visemes, s])?;
    let mut layer = 0;
    while params.contains(&hidden_name(layer, "weight")) {
        let w = g.param(params, &hidden_name(layer, "weight"))?;
        let b = g.param(params, &hidden_name(layer, "bias"))?;
        h = g.linear(h, w, b)?;
        h = g.leaky_relu(h, slope);
        layer += 1;
    }
    if layer == 0 {
        return Err(Error::MissingParameter(hidden_name(0, "weight")));
    }
    let w = g.param(params, BASIS_WEIGHT)?;
    let b = g.param(params, BASIS_BIAS)?;
    g.linear(h, w, b)
}

/// Per-vertex displacements for a viseme sequence under one style.
pub fn motion_synthesis(
    v: &VisemeSequence,
    s: &StyleEmbedding,
    params: &ParamStore,
    slope: f64,
    fps: f64,
) -> Result<MeshSequence> {
    let basis = DeformationBasis::from_params(params)?;
    let mut g = Graph::new();
    let vv = g.constant_matrix(v.frames());
    let sv = g.constant(1, EMBED_DIM, s.as_slice().to_vec())?;
    let d = motion_graph(&mut g, params, slope, vv, sv)?;
    MeshSequence::new(basis.vertex_count(), fps, true, g.value(d).to_vec())
}

/// Adds the template to every frame of a displacement sequence.
pub fn apply_template(d: &MeshSequence, tmpl: &TemplateMesh) -> Result<MeshSequence> {
    d.to_positions(tmpl)
}

pub fn init_params(store: &mut ParamStore, cfg: &MotionConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    store.insert(STYLE_EMBEDDING, xavier_uniform(rng, cfg.identities, EMBED_DIM))?;
    let mut fan_in = 2 * EMBED_DIM;
    for l in 0..cfg.hidden_layers {
        store.insert(&hidden_name(l, "weight"), xavier_uniform(rng, fan_in, cfg.hidden_width))?;
        store.insert(&hidden_name(l, "bias"), Tensor::zeros(vec![cfg.hidden_width]))?;
        fan_in = cfg.hidden_width;
    }
    store.insert(BASIS_WEIGHT, xavier_uniform(rng, fan_in, 3 * cfg.vertices))?;
    store.insert(BASIS_BIAS, Tensor::zeros(vec![3 * cfg.vertices]))
}
