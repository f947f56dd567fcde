//! Training with full autoregressive rollout, and two-stage style adaptation.
//!
//! One Adam step per sequence. The sequence order is reshuffled every epoch
//! from the run seed, so a run is a pure function of (data, initial
//! parameters, config). Reported epoch losses are sums over the epoch's
//! sequences, evaluated before each sequence's update.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureSequence;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::mesh::{MeshSequence, TemplateMesh};
use crate::metrics::metric_l2;
use crate::model::{decode_motion, decode_visemes, forward_graph, motion_from_visemes_graph, prepare_audio, ModelConfig, StyleSource, ADAPTED_STYLE};
use crate::motion::{IdentityOneHot, StyleEmbedding, BASIS_BIAS, BASIS_WEIGHT, STYLE_EMBEDDING};
use crate::numerics::{AdamConfig, AdamState, Graph, Matrix, ParamStore, Tensor};
use crate::supervision::{loss_graph, ClosureWeights, LossTerms, LossWeights, SequenceTarget};
use crate::viseme::VisemeSequence;

/// Parameter prefixes of the speaker-independent decoder.
pub const DECODER_PREFIXES: [&str; 2] = ["audio.", "viseme."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub weights: LossWeightsConfig,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

/// Serializable mirror of [`LossWeights`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeightsConfig {
    pub mse: f64,
    pub vel: f64,
    pub lip: f64,
}

impl From<LossWeightsConfig> for LossWeights {
    fn from(w: LossWeightsConfig) -> Self {
        LossWeights {
            mse: w.mse,
            vel: w.vel,
            lip: w.lip,
        }
    }
}

impl From<LossWeights> for LossWeightsConfig {
    fn from(w: LossWeights) -> Self {
        LossWeightsConfig {
            mse: w.mse,
            vel: w.vel,
            lip: w.lip,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 300,
            weights: LossWeights::default().into(),
            seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        LossWeights::from(self.weights).validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.weights.into()
    }
}

/// One training sequence prepared for the loss.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    /// Audio features resampled to the motion frame count.
    pub audio: Matrix,
    pub target: SequenceTarget,
    pub displacements: MeshSequence,
    pub identity: Option<IdentityOneHot>,
    pub template: TemplateMesh,
    /// Whether closure weights were supplied.
    pub labeled: bool,
}

impl TrainSample {
    /// `mesh` may hold positions or displacements. Training requires
    /// `weights` and `identity`; adaptation and evaluation do not.
    pub fn new(
        id: impl Into<String>,
        features: &FeatureSequence,
        mesh: &MeshSequence,
        template: &TemplateMesh,
        weights: Option<&ClosureWeights>,
        identity: Option<IdentityOneHot>,
    ) -> Result<Self> {
        let id = id.into();
        let displacements = mesh.to_displacements(template)?;
        let frames = displacements.frames();
        if frames == 0 {
            return Err(Error::Length(format!("{id}: empty mesh sequence")));
        }
        let expected = features.motion_frames(displacements.fps());
        if expected != frames {
            return Err(Error::Length(format!(
                "{id}: features cover {expected} motion frames, mesh has {frames}"
            )));
        }
        let zero;
        let w = match weights {
            Some(w) => w,
            None => {
                zero = ClosureWeights::zeros(frames);
                &zero
            }
        };
        Ok(TrainSample {
            id,
            audio: prepare_audio(features, frames)?,
            target: SequenceTarget::new(&displacements, w, template.lip_region())?,
            displacements,
            identity,
            template: template.clone(),
            labeled: weights.is_some(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossTerms,
    /// Summed reconstruction (MSE) loss on the validation set.
    pub val_mse: Option<f64>,
}

pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss_total,loss_mse,loss_vel,loss_lip\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch, r.loss.total, r.loss.mse, r.loss.vel, r.loss.lip
        );
    }
    s
}

pub fn write_loss_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, loss_csv(history))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation reconstruction loss.
    pub best: ParamStore,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub last: ParamStore,
    pub history: Vec<EpochRecord>,
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    // overflow anywhere in a pass means the parameters have blown up
    move |e| match e {
        Error::NonFinite { .. } | Error::DegenerateRow { .. } => Error::Divergence { epoch },
        e => e,
    }
}

fn sequence_step(
    params: &ParamStore,
    cfg: &ModelConfig,
    s: &TrainSample,
    style: &StyleSource,
    weights: &LossWeights,
    epoch: usize,
) -> Result<(LossTerms, crate::numerics::Gradients)> {
    let diverged = diverged(epoch);
    let mut g = Graph::new();
    let (_, d) = forward_graph(&mut g, params, cfg, &s.audio, style).map_err(&diverged)?;
    let nodes = loss_graph(&mut g, d, &s.target, weights).map_err(&diverged)?;
    let terms = nodes.terms(&g);
    if !terms.total.is_finite() {
        return Err(Error::Divergence { epoch });
    }
    g.backward(nodes.total).map(|gr| (terms, gr)).map_err(&diverged)
}

fn apply_update(
    params: &mut ParamStore,
    adam: &mut AdamState,
    mut grads: crate::numerics::Gradients,
    clip: Option<f64>,
    epoch: usize,
) -> Result<()> {
    if !grads.global_norm().is_finite() {
        return Err(Error::Divergence { epoch });
    }
    if let Some(c) = clip {
        grads.clip_global_norm(c);
    }
    params.zero_grad();
    params.accumulate(&grads)?;
    adam.step(params).map_err(diverged(epoch))
}

/// Summed reconstruction loss of a parameter snapshot over `samples`.
pub fn reconstruction_loss(params: &ParamStore, cfg: &ModelConfig, samples: &[TrainSample], exec: Exec) -> Result<f64> {
    let losses = exec.try_map(samples, |s| {
        let style = s
            .identity
            .map(StyleSource::Identity)
            .ok_or_else(|| Error::Config(format!("{}: no identity assigned", s.id)))?;
        let v = decode_visemes(&s.audio, params, cfg)?;
        let d = decode_motion(&v, params, cfg, &style)?;
        Ok::<_, Error>(
            d.data()
                .iter()
                .zip(s.target.displacements())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>(),
        )
    })?;
    Ok(losses.iter().sum())
}

/// Trains every parameter on `samples`, selecting the best epoch by
/// reconstruction loss on `val` (training loss when `val` is empty).
pub fn train(
    samples: &[TrainSample],
    val: &[TrainSample],
    params: ParamStore,
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(samples, val, params, cfg, tc, Exec::default(), |_| {})
}

/// [`train`] with an execution policy for validation and a per-epoch callback.
pub fn train_with(
    samples: &[TrainSample],
    val: &[TrainSample],
    mut params: ParamStore,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    tc.validate()?;
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training sequences".into()));
    }
    for s in samples {
        if !s.labeled {
            return Err(Error::Config(format!("{}: missing closure weights", s.id)));
        }
        if s.identity.is_none() {
            return Err(Error::Config(format!("{}: no identity assigned", s.id)));
        }
    }
    params.train_all();
    if params.contains(ADAPTED_STYLE) {
        let names: Vec<String> = params.names().filter(|n| *n != ADAPTED_STYLE).map(String::from).collect();
        params.train_only(&names)?;
    }
    let weights = tc.loss_weights();
    let mut adam = AdamState::new(&params, AdamConfig::with_lr(tc.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best = (params.clone(), 0usize, f64::INFINITY);

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        for &i in &order {
            let s = &samples[i];
            let style = StyleSource::Identity(s.identity.expect("checked above"));
            let (terms, grads) = sequence_step(&params, cfg, s, &style, &weights, epoch)?;
            sum.add(&terms);
            apply_update(&mut params, &mut adam, grads, tc.clip_norm, epoch)?;
        }
        let val_mse = if val.is_empty() {
            None
        } else {
            Some(reconstruction_loss(&params, cfg, val, exec).map_err(diverged(epoch))?)
        };
        let score = val_mse.unwrap_or(sum.total);
        if !score.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        if score < best.2 {
            best = (params.clone(), epoch, score);
        }
        let rec = EpochRecord {
            epoch,
            loss: sum,
            val_mse,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    params.zero_grad();
    let (mut best_params, best_epoch, _) = best;
    best_params.zero_grad();
    if tc.epochs == 0 {
        best_params = params.clone();
    }
    Ok(TrainOutcome {
        best: best_params,
        best_epoch,
        last: params,
        history,
    })
}

/// Viseme features decoded once with a frozen decoder.
#[derive(Debug, Clone)]
pub struct VisemeCache {
    fingerprint: String,
    visemes: Vec<VisemeSequence>,
}

impl VisemeCache {
    pub fn visemes(&self) -> &[VisemeSequence] {
        &self.visemes
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Whether the cache was produced by the decoder in `params`.
    pub fn is_valid_for(&self, params: &ParamStore) -> bool {
        decoder_fingerprint(params) == self.fingerprint
    }
}

pub fn decoder_fingerprint(params: &ParamStore) -> String {
    params.fingerprint(&DECODER_PREFIXES)
}

pub fn precompute_visemes(audio: &[Matrix], params: &ParamStore, cfg: &ModelConfig, exec: Exec) -> Result<VisemeCache> {
    let visemes = exec.try_map(audio, |a| decode_visemes(a, params, cfg))?;
    Ok(VisemeCache {
        fingerprint: decoder_fingerprint(params),
        visemes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub lr: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub init_identity: usize,
    /// Pick the training identity with the lowest reference loss instead.
    pub init_sweep: bool,
    pub mse_weight: f64,
    pub vel_weight: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lr: 1e-4,
            stage1_epochs: 300,
            stage2_epochs: 300,
            init_identity: 0,
            init_sweep: false,
            mse_weight: 1.0,
            vel_weight: 10.0,
            seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.weights().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            mse: self.mse_weight,
            vel: self.vel_weight,
            lip: 0.0,
        }
    }
}

/// Reference data for adaptation: cached visemes paired with targets.
pub struct AdaptSet<'a> {
    pub samples: &'a [TrainSample],
    pub visemes: &'a VisemeCache,
}

impl<'a> AdaptSet<'a> {
    pub fn new(samples: &'a [TrainSample], visemes: &'a VisemeCache) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("adaptation needs at least one reference sequence".into()));
        }
        if samples.len() != visemes.visemes().len() {
            return Err(Error::Config(format!(
                "{} references but {} cached viseme sequences",
                samples.len(),
                visemes.visemes().len()
            )));
        }
        Ok(AdaptSet { samples, visemes })
    }
}

fn objective(
    params: &ParamStore,
    cfg: &ModelConfig,
    set: &AdaptSet,
    style: &StyleSource,
    weights: &LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for (s, v) in set.samples.iter().zip(set.visemes.visemes()) {
        let mut g = Graph::new();
        let d = motion_from_visemes_graph(&mut g, params, cfg, v, style)?;
        let l = loss_graph(&mut g, d, &s.target, weights)?.total;
        total += g.scalar(l);
    }
    Ok(total)
}

/// Training identity whose style gives the lowest reference objective.
pub fn best_init_identity(params: &ParamStore, cfg: &ModelConfig, set: &AdaptSet, ac: &AdaptConfig) -> Result<usize> {
    let weights = ac.weights();
    let mut best = (0, f64::INFINITY);
    for k in 0..cfg.motion.identities {
        let id = IdentityOneHot::new(k, cfg.motion.identities)?;
        let l = objective(params, cfg, set, &StyleSource::Identity(id), &weights)?;
        if l < best.1 {
            best = (k, l);
        }
    }
    Ok(best.0)
}

fn run_stage(
    params: &mut ParamStore,
    cfg: &ModelConfig,
    set: &AdaptSet,
    ac: &AdaptConfig,
    trainable: &[&str],
    epochs: usize,
    seed: u64,
) -> Result<Vec<LossTerms>> {
    if !set.visemes.is_valid_for(params) {
        return Err(Error::Config("viseme cache does not match the decoder parameters".into()));
    }
    params.train_only(trainable)?;
    let weights = ac.weights();
    let mut adam = AdamState::new(params, AdamConfig::with_lr(ac.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..set.samples.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        for &i in &order {
            let diverged = diverged(epoch);
            let mut g = Graph::new();
            let d = motion_from_visemes_graph(&mut g, params, cfg, &set.visemes.visemes()[i], &StyleSource::Adapted)
                .map_err(&diverged)?;
            let nodes = loss_graph(&mut g, d, &set.samples[i].target, &weights).map_err(&diverged)?;
            let terms = nodes.terms(&g);
            if !terms.total.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            sum.add(&terms);
            let grads = g.backward(nodes.total).map_err(&diverged)?;
            apply_update(params, &mut adam, grads, ac.clip_norm, epoch)?;
        }
        curve.push(sum);
    }
    params.zero_grad();
    params.train_all();
    Ok(curve)
}

fn adapted_style(params: &ParamStore) -> Result<StyleEmbedding> {
    let t = params
        .get(ADAPTED_STYLE)
        .ok_or_else(|| Error::MissingParameter(ADAPTED_STYLE.into()))?;
    StyleEmbedding::new(t.values().to_vec())
}

/// Output of stage 1; the only way to enter stage 2.
#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub params: ParamStore,
    pub style: StyleEmbedding,
    pub init_identity: usize,
    pub init_style: StyleEmbedding,
    pub curve: Vec<LossTerms>,
}

#[derive(Debug, Clone)]
pub struct Stage2Result {
    pub params: ParamStore,
    pub style: StyleEmbedding,
    pub curve: Vec<LossTerms>,
}

/// Optimises only a free style vector initialised from a training identity.
pub fn adapt_style_stage1(set: &AdaptSet, params: &ParamStore, cfg: &ModelConfig, ac: &AdaptConfig) -> Result<Stage1Result> {
    ac.validate()?;
    let init_identity = if ac.init_sweep {
        best_init_identity(params, cfg, set, ac)?
    } else {
        ac.init_identity
    };
    let emb = params
        .get(STYLE_EMBEDDING)
        .ok_or_else(|| Error::MissingParameter(STYLE_EMBEDDING.into()))?;
    if init_identity >= emb.rows() {
        return Err(Error::Config(format!(
            "init identity {init_identity} out of range for {} training speakers",
            emb.rows()
        )));
    }
    let c = emb.cols();
    let row = emb.values()[init_identity * c..(init_identity + 1) * c].to_vec();
    let init_style = StyleEmbedding::new(row.clone())?;
    let mut p = params.clone();
    p.set(ADAPTED_STYLE, Tensor::new(vec![1, c], row)?);
    let curve = run_stage(&mut p, cfg, set, ac, &[ADAPTED_STYLE], ac.stage1_epochs, ac.seed)?;
    Ok(Stage1Result {
        style: adapted_style(&p)?,
        params: p,
        init_identity,
        init_style,
        curve,
    })
}

/// Jointly refines the style vector and the deformation basis.
pub fn adapt_basis_stage2(set: &AdaptSet, stage1: &Stage1Result, cfg: &ModelConfig, ac: &AdaptConfig) -> Result<Stage2Result> {
    ac.validate()?;
    let mut p = stage1.params.clone();
    let curve = run_stage(
        &mut p,
        cfg,
        set,
        ac,
        &[ADAPTED_STYLE, BASIS_WEIGHT, BASIS_BIAS],
        ac.stage2_epochs,
        ac.seed.wrapping_add(1),
    )?;
    Ok(Stage2Result {
        style: adapted_style(&p)?,
        params: p,
        curve,
    })
}

/// Mean L2 over the lip region for a style on precomputed visemes.
pub fn lip_error(
    samples: &[TrainSample],
    visemes: &[VisemeSequence],
    params: &ParamStore,
    cfg: &ModelConfig,
    style: &StyleSource,
) -> Result<f64> {
    if samples.is_empty() || samples.len() != visemes.len() {
        return Err(Error::InvalidArgument("lip error needs paired, non-empty inputs".into()));
    }
    let mut sum = 0.0;
    for (s, v) in samples.iter().zip(visemes) {
        let d = decode_motion(v, params, cfg, style)?;
        sum += metric_l2(&d, &s.displacements, s.template.lip_region())?;
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub init_identity: usize,
    pub stage1_curve: Vec<LossTerms>,
    pub stage2_curve: Vec<LossTerms>,
    pub style: Vec<f64>,
    pub l2_lip_init: f64,
    pub l2_lip_stage1: f64,
    pub l2_lip_stage2: f64,
    pub stage1_delta: f64,
    pub stage2_delta: f64,
}

impl AdaptationReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub stage1: Stage1Result,
    pub stage2: Stage2Result,
    pub report: AdaptationReport,
}

/// Both stages, scored on `eval` (held-out sequences of the same speaker;
/// the references themselves when `eval` is empty).
pub fn adapt(
    references: &[TrainSample],
    eval: &[TrainSample],
    params: &ParamStore,
    cfg: &ModelConfig,
    ac: &AdaptConfig,
    exec: Exec,
) -> Result<AdaptOutcome> {
    if references.is_empty() {
        return Err(Error::Config("adaptation needs at least one reference sequence".into()));
    }
    let ref_audio: Vec<Matrix> = references.iter().map(|s| s.audio.clone()).collect();
    let cache = precompute_visemes(&ref_audio, params, cfg, exec)?;
    let set = AdaptSet::new(references, &cache)?;
    let stage1 = adapt_style_stage1(&set, params, cfg, ac)?;
    let stage2 = adapt_basis_stage2(&set, &stage1, cfg, ac)?;

    let (eval, eval_cache) = if eval.is_empty() {
        (references, cache.clone())
    } else {
        let a: Vec<Matrix> = eval.iter().map(|s| s.audio.clone()).collect();
        (eval, precompute_visemes(&a, params, cfg, exec)?)
    };
    let ev = eval_cache.visemes();
    let l2_lip_init = lip_error(eval, ev, params, cfg, &StyleSource::Fixed(stage1.init_style.clone()))?;
    let l2_lip_stage1 = lip_error(eval, ev, &stage1.params, cfg, &StyleSource::Adapted)?;
    let l2_lip_stage2 = lip_error(eval, ev, &stage2.params, cfg, &StyleSource::Adapted)?;
    let report = AdaptationReport {
        init_identity: stage1.init_identity,
        stage1_curve: stage1.curve.clone(),
        stage2_curve: stage2.curve.clone(),
        style: stage2.style.as_slice().to_vec(),
        l2_lip_init,
        l2_lip_stage1,
        l2_lip_stage2,
        stage1_delta: l2_lip_stage1 - l2_lip_init,
        stage2_delta: l2_lip_stage2 - l2_lip_stage1,
    };
    Ok(AdaptOutcome { stage1, stage2, report })
}
