//! Full model: audio projection, viseme decoder, motion decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{project_audio_graph, resample_linear, AudioEmbedding, FeatureSequence, EMBED_DIM, PROJ_BIAS, PROJ_WEIGHT};
use crate::error::{Error, Result};
use crate::mesh::{MeshSequence, TemplateMesh};
use crate::motion::{self, motion_graph, style_from_onehot_graph, IdentityOneHot, MotionConfig, StyleEmbedding, BASIS_WEIGHT, STYLE_EMBEDDING};
use crate::numerics::{xavier_uniform, Graph, Matrix, ParamStore, Tensor, Var};
use crate::viseme::{self, decode_graph, DecoderConfig, VisemeSequence};

/// Name of the free style vector optimised during adaptation.
pub const ADAPTED_STYLE: &str = "style.adapted";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub audio_dim: usize,
    pub fps: f64,
    pub decoder: DecoderConfig,
    pub motion: MotionConfig,
}

impl ModelConfig {
    pub fn new(audio_dim: usize, vertices: usize) -> Self {
        ModelConfig {
            audio_dim,
            fps: crate::audio::MOTION_FPS,
            decoder: DecoderConfig::default(),
            motion: MotionConfig::new(vertices),
        }
    }

    pub fn with_layers(mut self, n: usize) -> Self {
        self.decoder.n_layers = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio_dim == 0 {
            return Err(Error::Config("audio feature dimension must be positive".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        self.decoder.validate()?;
        self.motion.validate()
    }

    /// Recovers the architecture from parameter shapes. Head width is taken
    /// to be the default 64.
    pub fn infer(params: &ParamStore) -> Result<Self> {
        let get = |name: &str| params.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()));
        let proj = get(PROJ_WEIGHT)?;
        let basis = get(BASIS_WEIGHT)?;
        let style = get(STYLE_EMBEDDING)?;
        let mut cfg = ModelConfig::new(proj.rows(), basis.cols() / 3);
        cfg.motion.identities = style.rows();
        cfg.decoder.n_layers = (0..).take_while(|l| params.contains(&format!("viseme.l{l}.self.q.weight"))).count();
        cfg.motion.hidden_layers = (0..).take_while(|l| params.contains(&motion::hidden_name(*l, "weight"))).count();
        if cfg.decoder.n_layers == 0 || cfg.motion.hidden_layers == 0 {
            return Err(Error::Format("checkpoint is missing decoder layers".into()));
        }
        let inner = get("viseme.l0.self.q.weight")?.cols();
        if inner % cfg.decoder.d_head != 0 {
            return Err(Error::Format(format!("attention width {inner} is not a multiple of 64")));
        }
        cfg.decoder.n_heads = inner / cfg.decoder.d_head;
        cfg.decoder.d_ff = get("viseme.l0.ff1.weight")?.cols();
        cfg.motion.hidden_width = get(&motion::hidden_name(0, "weight"))?.cols();
        if basis.cols() % 3 != 0 {
            return Err(Error::Format("basis width is not a multiple of 3".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    p.insert(PROJ_WEIGHT, xavier_uniform(&mut rng, cfg.audio_dim, EMBED_DIM))?;
    p.insert(PROJ_BIAS, Tensor::zeros(vec![EMBED_DIM]))?;
    viseme::init_params(&mut p, &cfg.decoder, &mut rng)?;
    motion::init_params(&mut p, &cfg.motion, &mut rng)?;
    Ok(p)
}

/// Where the 64-dim style vector comes from.
#[derive(Debug, Clone)]
pub enum StyleSource {
    /// Row of the training-identity embedding.
    Identity(IdentityOneHot),
    /// The free `style.adapted` parameter.
    Adapted,
    Fixed(StyleEmbedding),
}

pub fn style_graph(g: &mut Graph, params: &ParamStore, style: &StyleSource) -> Result<Var> {
    match style {
        StyleSource::Identity(id) => style_from_onehot_graph(g, params, id),
        StyleSource::Adapted => {
            let s = g.param(params, ADAPTED_STYLE)?;
            if g.shape(s) != (1, EMBED_DIM) {
                let (r, c) = g.shape(s);
                return Err(Error::shape("adapted style", &[r, c], &[1, EMBED_DIM]));
            }
            Ok(s)
        }
        StyleSource::Fixed(s) => g.constant(1, EMBED_DIM, s.as_slice().to_vec()),
    }
}

/// Audio features resampled to `frames` motion frames.
pub fn prepare_audio(features: &FeatureSequence, frames: usize) -> Result<Matrix> {
    resample_linear(features, frames)
}

/// Recorded forward pass; returns (visemes T×64, displacements T×3V).
pub fn forward_graph(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    resampled: &Matrix,
    style: &StyleSource,
) -> Result<(Var, Var)> {
    let a = project_audio_graph(g, params, resampled)?;
    let v = decode_graph(g, params, &cfg.decoder, a)?;
    let s = style_graph(g, params, style)?;
    let d = motion_graph(g, params, cfg.motion.leaky_slope, v, s)?;
    Ok((v, d))
}

/// Recorded motion decode from precomputed visemes.
pub fn motion_from_visemes_graph(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    visemes: &VisemeSequence,
    style: &StyleSource,
) -> Result<Var> {
    let v = g.constant_matrix(visemes.frames());
    let s = style_graph(g, params, style)?;
    motion_graph(g, params, cfg.motion.leaky_slope, v, s)
}

pub fn embed_audio(resampled: &Matrix, params: &ParamStore, cfg: &ModelConfig) -> Result<AudioEmbedding> {
    crate::audio::project_audio(resampled, params, cfg.fps)
}

/// Viseme features for resampled audio.
pub fn decode_visemes(resampled: &Matrix, params: &ParamStore, cfg: &ModelConfig) -> Result<VisemeSequence> {
    let a = embed_audio(resampled, params, cfg)?;
    viseme::autoregressive_decode(&a, params, &cfg.decoder)
}

/// Displacements for precomputed visemes.
pub fn decode_motion(
    visemes: &VisemeSequence,
    params: &ParamStore,
    cfg: &ModelConfig,
    style: &StyleSource,
) -> Result<MeshSequence> {
    let mut g = Graph::new();
    let d = motion_from_visemes_graph(&mut g, params, cfg, visemes, style)?;
    MeshSequence::new(cfg.motion.vertices, cfg.fps, true, g.value(d).to_vec())
}

/// End to end: features → displacements (`frames` motion frames).
pub fn predict_displacements(
    features: &FeatureSequence,
    frames: usize,
    params: &ParamStore,
    cfg: &ModelConfig,
    style: &StyleSource,
) -> Result<MeshSequence> {
    let resampled = prepare_audio(features, frames)?;
    let v = decode_visemes(&resampled, params, cfg)?;
    decode_motion(&v, params, cfg, style)
}

/// End to end with the template added; frame count follows the features.
pub fn synthesize(
    features: &FeatureSequence,
    params: &ParamStore,
    cfg: &ModelConfig,
    style: &StyleSource,
    template: &TemplateMesh,
) -> Result<MeshSequence> {
    template.check_vertices(cfg.motion.vertices)?;
    let frames = features.motion_frames(cfg.fps);
    predict_displacements(features, frames, params, cfg, style)?.to_positions(template)
}
