use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

use facemotion::audio::{filterbank_features, load_features, load_waveform, FeatureSequence, FilterbankConfig};
use facemotion::corpus::{Corpus, LoadedSequence, Split};
use facemotion::mesh::{LipMetadata, MeshSequence, TemplateMesh};
use facemotion::metrics::{evaluate, MetricReport};
use facemotion::model::{self, init_params, ModelConfig, StyleSource, ADAPTED_STYLE};
use facemotion::motion::IdentityOneHot;
use facemotion::numerics::ParamStore;
use facemotion::oracle::{export_corpus, CorpusConfig};
use facemotion::supervision::{default_search_window, label_sequence, LossWeights, PhonemeTiming, WeightMode};
use facemotion::train::{self as fit, AdaptConfig, TrainConfig, TrainSample};
use facemotion::Exec;

use crate::config::{compat, metadata, required, resolve, usage, write_sidecar};

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataArgs {
    /// JSON or key=value run-config file; flags override its values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub speakers: Option<usize>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Additional speakers without a training identity.
    #[arg(long)]
    pub heldout_speakers: Option<usize>,
    /// Sequences per held-out speaker (default: --sequences).
    #[arg(long)]
    pub heldout_sequences: Option<usize>,
    #[arg(long)]
    pub heldout_asymmetry: Option<f64>,
    #[arg(long)]
    pub phonemes: Option<usize>,
    #[arg(long)]
    pub phoneme_secs: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub symmetric_training: Option<bool>,
}

pub fn gen_data(flags: GenDataArgs) -> anyhow::Result<()> {
    let mut a = resolve(&flags, flags.config.as_deref())?;
    let out = required(&a.out, "out")?;
    let mut cfg = CorpusConfig::new(
        required(&a.speakers, "speakers")?,
        required(&a.sequences, "sequences")?,
        required(&a.seed, "seed")?,
    );
    cfg.heldout_speakers = *a.heldout_speakers.get_or_insert(0);
    cfg.heldout_sequences = *a.heldout_sequences.get_or_insert(0);
    cfg.heldout_asymmetry = a.heldout_asymmetry;
    cfg.phonemes_per_sequence = *a.phonemes.get_or_insert(cfg.phonemes_per_sequence);
    cfg.phoneme_secs = *a.phoneme_secs.get_or_insert(cfg.phoneme_secs);
    cfg.symmetric_training = *a.symmetric_training.get_or_insert(false);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = export_corpus(&cfg, &out, Exec::default())?;
    write_sidecar(&a, &out, "gen-data")?;
    println!("{}", manifest.display());
    Ok(())
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Mesh sequence (positions or displacements).
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub timing: Option<PathBuf>,
    /// Template `.msq` (one frame).
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Lip metadata JSON (default: template path with .json).
    #[arg(long)]
    pub lips: Option<PathBuf>,
    /// Output weights file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Search window before each bilabial onset, in frames.
    #[arg(long)]
    pub window: Option<usize>,
    /// Binary weights (1 at closures) instead of Gaussian windows.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub binary: Option<bool>,
}

fn lips_path(template: &Path, lips: &Option<PathBuf>) -> PathBuf {
    lips.clone().unwrap_or_else(|| template.with_extension("json"))
}

/// Template whose lip metadata problems map to the metadata exit code.
fn load_template(template: &Path, lips: &Path) -> anyhow::Result<TemplateMesh> {
    let meta = LipMetadata::load_json(lips).map_err(|e| metadata(format!("lip metadata {}: {e}", lips.display())))?;
    let seq = MeshSequence::load(template).with_context(|| format!("reading template {}", template.display()))?;
    if seq.frames() != 1 {
        return Err(facemotion::Error::Format(format!("template {} has {} frames", template.display(), seq.frames())).into());
    }
    Ok(TemplateMesh::new(seq.data().to_vec(), meta)?)
}

pub fn label(flags: LabelArgs) -> anyhow::Result<()> {
    let mut a = resolve(&flags, flags.config.as_deref())?;
    let mesh_path = required(&a.mesh, "mesh")?;
    let timing_path = required(&a.timing, "timing")?;
    let tmpl_path = required(&a.template, "template")?;
    let out = required(&a.out, "out")?;
    let radius = *a.radius.get_or_insert(2);
    let sigma = *a.sigma.get_or_insert(1.0);
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(usage(format!("--sigma must be positive, got {sigma}")));
    }
    let binary = *a.binary.get_or_insert(false);
    let lips = lips_path(&tmpl_path, &a.lips);
    a.lips = Some(lips.clone());

    let tmpl = load_template(&tmpl_path, &lips)?;
    let mesh = MeshSequence::load(&mesh_path).with_context(|| format!("reading {}", mesh_path.display()))?;
    let timing = PhonemeTiming::load(&timing_path).with_context(|| format!("reading {}", timing_path.display()))?;
    let window = *a.window.get_or_insert(default_search_window(mesh.fps()));
    let mode = if binary {
        WeightMode::Binary
    } else {
        WeightMode::Gaussian { radius, sigma }
    };
    let r = label_sequence(&mesh, &tmpl, &timing, window, mode)?;
    r.weights.save(&out)?;
    write_sidecar(&a, &out, "label")?;
    println!(
        "{} closures at frames {:?}; {} bilabials without a minimum",
        r.detection.frames.len(),
        r.detection.frames,
        r.detection.skipped.len()
    );
    Ok(())
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output checkpoint (best validation epoch).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss history CSV (default: <out>.loss.csv).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_mse: Option<f64>,
    #[arg(long)]
    pub lambda_vel: Option<f64>,
    #[arg(long)]
    pub lambda_lip: Option<f64>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long)]
    pub clip: Option<f64>,
    /// Decoder layers for a fresh model.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Start from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn identity_of(seq: &LoadedSequence, identities: usize) -> anyhow::Result<Option<IdentityOneHot>> {
    seq.identity
        .map(|k| IdentityOneHot::new(k, identities))
        .transpose()
        .map_err(|e| compat(format!("{}: {e}", seq.id)))
}

fn to_sample(seq: &LoadedSequence, identities: usize) -> anyhow::Result<TrainSample> {
    TrainSample::new(
        seq.id.clone(),
        &seq.features,
        &seq.mesh,
        &seq.template,
        seq.weights.as_ref(),
        identity_of(seq, identities)?,
    )
    .with_context(|| seq.id.clone())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(ParamStore, ModelConfig)> {
    let p = ParamStore::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let cfg = ModelConfig::infer(&p).map_err(|e| compat(format!("checkpoint {}: {e}", path.display())))?;
    Ok((p, cfg))
}

fn check_model(cfg: &ModelConfig, seqs: &[LoadedSequence]) -> anyhow::Result<()> {
    for s in seqs {
        if s.features.dim() != cfg.audio_dim {
            return Err(compat(format!(
                "{}: features have {} dims, model expects {}",
                s.id,
                s.features.dim(),
                cfg.audio_dim
            )));
        }
        s.template.check_vertices(cfg.motion.vertices).with_context(|| s.id.clone())?;
    }
    Ok(())
}

pub fn train(flags: TrainArgs) -> anyhow::Result<()> {
    let mut a = resolve(&flags, flags.config.as_deref())?;
    let manifest = required(&a.manifest, "manifest")?;
    let out = required(&a.out, "out")?;
    let loss_csv = a.loss_csv.get_or_insert_with(|| out.with_extension("loss.csv")).clone();
    let d = LossWeights::default();
    let clip = *a.clip.get_or_insert(1.0);
    let tc = TrainConfig {
        lr: *a.lr.get_or_insert(1e-4),
        epochs: *a.epochs.get_or_insert(300),
        seed: *a.seed.get_or_insert(0),
        weights: LossWeights {
            mse: *a.lambda_mse.get_or_insert(d.mse),
            vel: *a.lambda_vel.get_or_insert(d.vel),
            lip: *a.lambda_lip.get_or_insert(d.lip),
        }
        .into(),
        clip_norm: (clip > 0.0).then_some(clip),
    };
    tc.validate().map_err(|e| usage(e.to_string()))?;

    let corpus = Corpus::open(&manifest)?;
    let train = corpus.load_split(Split::Train)?;
    let val = corpus.load_split(Split::Val)?;
    let first = train.first().ok_or_else(|| usage("manifest has no training sequences"))?;
    let (params, cfg) = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None => {
            let cfg = ModelConfig::new(first.features.dim(), first.mesh.vertex_count()).with_layers(*a.layers.get_or_insert(2));
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            (init_params(&cfg, tc.seed)?, cfg)
        }
    };
    check_model(&cfg, &train)?;
    check_model(&cfg, &val)?;
    let ids = cfg.motion.identities;
    let train_s = train.iter().map(|s| to_sample(s, ids)).collect::<anyhow::Result<Vec<_>>>()?;
    let val_s = val.iter().map(|s| to_sample(s, ids)).collect::<anyhow::Result<Vec<_>>>()?;

    let outcome = fit::train_with(&train_s, &val_s, params, &cfg, &tc, Exec::default(), |r| {
        eprintln!(
            "epoch {:>4}  total {:.6e}  mse {:.6e}  vel {:.6e}  lip {:.6e}{}",
            r.epoch,
            r.loss.total,
            r.loss.mse,
            r.loss.vel,
            r.loss.lip,
            r.val_mse.map(|v| format!("  val_mse {v:.6e}")).unwrap_or_default()
        )
    })?;
    outcome.best.save(&out)?;
    fit::write_loss_csv(&outcome.history, &loss_csv)?;
    write_sidecar(&a, &out, "train")?;
    println!("best epoch {} -> {}", outcome.best_epoch, out.display());
    Ok(())
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Held-out speaker name (default: the only one in the manifest).
    #[arg(long)]
    pub speaker: Option<String>,
    /// Output checkpoint with the adapted style and basis.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Adaptation report JSON (default: <out>.report.json).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    /// Training identity whose style initialises stage 1.
    #[arg(long)]
    pub init_identity: Option<usize>,
    /// Pick the training identity with the lowest reference loss instead.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub init_sweep: Option<bool>,
    /// Use at most this many reference sequences.
    #[arg(long)]
    pub references: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_mse: Option<f64>,
    #[arg(long)]
    pub lambda_vel: Option<f64>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long)]
    pub clip: Option<f64>,
}

fn heldout_speaker(corpus: &Corpus, name: &Option<String>) -> anyhow::Result<String> {
    if let Some(n) = name {
        corpus
            .manifest
            .speaker(n)
            .ok_or_else(|| facemotion::Error::Metadata(format!("unknown speaker {n}")))?;
        return Ok(n.clone());
    }
    let heldout: Vec<&str> = corpus
        .manifest
        .speakers
        .iter()
        .filter(|s| s.identity.is_none())
        .map(|s| s.name.as_str())
        .collect();
    match heldout.as_slice() {
        [one] => Ok(one.to_string()),
        [] => Err(usage("manifest has no held-out speaker; pass --speaker")),
        _ => Err(usage(format!("several held-out speakers ({}); pass --speaker", heldout.join(", ")))),
    }
}

pub fn adapt(flags: AdaptArgs) -> anyhow::Result<()> {
    let mut a = resolve(&flags, flags.config.as_deref())?;
    let ckpt = required(&a.checkpoint, "checkpoint")?;
    let manifest = required(&a.manifest, "manifest")?;
    let out = required(&a.out, "out")?;
    let stage1_epochs = required(&a.stage1_epochs, "stage1-epochs")?;
    let stage2_epochs = required(&a.stage2_epochs, "stage2-epochs")?;
    let init_identity = required(&a.init_identity, "init-identity")?;
    let report_path = a.report.get_or_insert_with(|| with_suffix(&out, ".report.json")).clone();
    let d = AdaptConfig::default();
    let clip = *a.clip.get_or_insert(1.0);
    let ac = AdaptConfig {
        lr: *a.lr.get_or_insert(d.lr),
        stage1_epochs,
        stage2_epochs,
        init_identity,
        init_sweep: *a.init_sweep.get_or_insert(false),
        mse_weight: *a.lambda_mse.get_or_insert(d.mse_weight),
        vel_weight: *a.lambda_vel.get_or_insert(d.vel_weight),
        seed: *a.seed.get_or_insert(0),
        clip_norm: (clip > 0.0).then_some(clip),
    };
    ac.validate().map_err(|e| usage(e.to_string()))?;

    let (params, cfg) = load_checkpoint(&ckpt)?;
    if init_identity >= cfg.motion.identities {
        return Err(usage(format!(
            "--init-identity {init_identity} out of range for {} identities",
            cfg.motion.identities
        )));
    }
    let corpus = Corpus::open(&manifest)?;
    let speaker = heldout_speaker(&corpus, &a.speaker)?;
    a.speaker = Some(speaker.clone());
    let mut refs = corpus.load_speaker(&speaker, Split::Adapt)?;
    if let Some(n) = a.references {
        refs.truncate(n);
    }
    let evals = corpus.load_speaker(&speaker, Split::AdaptTest)?;
    check_model(&cfg, &refs)?;
    check_model(&cfg, &evals)?;
    // identities are not used by adaptation
    let as_samples = |v: &[LoadedSequence]| -> anyhow::Result<Vec<TrainSample>> {
        v.iter()
            .map(|s| Ok(TrainSample::new(s.id.clone(), &s.features, &s.mesh, &s.template, None, None)?))
            .collect()
    };
    let ref_s = as_samples(&refs)?;
    let eval_s = as_samples(&evals)?;
    let outcome = fit::adapt(&ref_s, &eval_s, &params, &cfg, &ac, Exec::default())?;
    outcome.stage2.params.save(&out)?;
    outcome.report.save(&report_path)?;
    write_sidecar(&a, &out, "adapt")?;
    let r = &outcome.report;
    println!(
        "init identity {}: L2_lip {:.6} -> stage 1 {:.6} -> stage 2 {:.6}",
        r.init_identity, r.l2_lip_init, r.l2_lip_stage1, r.l2_lip_stage2
    );
    Ok(())
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Audio: `.wav` (mono PCM16) or precomputed `.ftr` features.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub lips: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training identity to speak with.
    #[arg(long)]
    pub identity: Option<usize>,
    /// Use the adapted style stored in the checkpoint.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub adapted: Option<bool>,
}

fn load_input(path: &Path) -> anyhow::Result<FeatureSequence> {
    let is_wav = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let w = load_waveform(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(filterbank_features(&w, &FilterbankConfig::default())?)
    } else {
        Ok(load_features(path).with_context(|| format!("reading {}", path.display()))?)
    }
}

pub fn synth(flags: SynthArgs) -> anyhow::Result<()> {
    let mut a = resolve(&flags, flags.config.as_deref())?;
    let ckpt = required(&a.checkpoint, "checkpoint")?;
    let input = required(&a.input, "input")?;
    let tmpl_path = required(&a.template, "template")?;
    let out = required(&a.out, "out")?;
    let lips = lips_path(&tmpl_path, &a.lips);
    a.lips = Some(lips.clone());
    let (params, cfg) = load_checkpoint(&ckpt)?;
    let adapted = *a.adapted.get_or_insert(a.identity.is_none() && params.contains(ADAPTED_STYLE));
    let style = match (a.identity, adapted) {
        (Some(_), true) => return Err(usage("--identity and --adapted are mutually exclusive")),
        (Some(k), false) => StyleSource::Identity(IdentityOneHot::new(k, cfg.motion.identities).map_err(|e| usage(e.to_string()))?),
        (None, true) => StyleSource::Adapted,
        (None, false) => StyleSource::Identity(IdentityOneHot::new(*a.identity.get_or_insert(0), cfg.motion.identities)?),
    };
    let tmpl = load_template(&tmpl_path, &lips)?;
    let features = load_input(&input)?;
    if features.dim() != cfg.audio_dim {
        return Err(compat(format!(
            "{}: features have {} dims, model expects {}",
            input.display(),
            features.dim(),
            cfg.audio_dim
        )));
    }
    let mesh = model::synthesize(&features, &params, &cfg, &style, &tmpl)?;
    mesh.save(&out)?;
    write_sidecar(&a, &out, "synth")?;
    println!("{} frames -> {}", mesh.frames(), out.display());
    Ok(())
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Metric CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Predicted mesh sequence (pair mode).
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Reference mesh sequence (pair mode).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub lips: Option<PathBuf>,
    /// Checkpoint to predict with (corpus mode).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split to evaluate in corpus mode.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown split `{s}` (train, val, test, adapt, adapt_test)"))
}

pub fn eval(flags: EvalArgs) -> anyhow::Result<()> {
    let mut a = resolve(&flags, flags.config.as_deref())?;
    let out = required(&a.out, "out")?;
    let report: MetricReport = match (&a.pred, &a.checkpoint) {
        (Some(pred), None) => {
            let gt = required(&a.gt, "gt")?;
            let tmpl_path = required(&a.template, "template")?;
            let lips = lips_path(&tmpl_path, &a.lips);
            a.lips = Some(lips.clone());
            let tmpl = load_template(&tmpl_path, &lips)?;
            let p = MeshSequence::load(pred).with_context(|| format!("reading {}", pred.display()))?;
            let g = MeshSequence::load(&gt).with_context(|| format!("reading {}", gt.display()))?;
            evaluate(&[p], &[g], &[&tmpl], Exec::default())?
        }
        (None, Some(ckpt)) => {
            let manifest = required(&a.manifest, "manifest")?;
            let split = *a.split.get_or_insert(Split::Test);
            let (params, cfg) = load_checkpoint(ckpt)?;
            let corpus = Corpus::open(&manifest)?;
            let seqs = corpus.load_split(split)?;
            if seqs.is_empty() {
                return Err(usage(format!("split {split:?} is empty")));
            }
            check_model(&cfg, &seqs)?;
            let preds = Exec::default().try_map(&seqs, |s| -> anyhow::Result<MeshSequence> {
                let style = match identity_of(s, cfg.motion.identities)? {
                    Some(id) => StyleSource::Identity(id),
                    None => StyleSource::Adapted,
                };
                Ok(model::predict_displacements(&s.features, s.mesh.frames(), &params, &cfg, &style)?)
            })?;
            let gts: Vec<MeshSequence> = seqs.iter().map(|s| s.mesh.clone()).collect();
            let tmpls: Vec<&TemplateMesh> = seqs.iter().map(|s| &s.template).collect();
            evaluate(&preds, &gts, &tmpls, Exec::default())?
        }
        _ => return Err(usage("pass either --pred/--gt/--template or --checkpoint/--manifest")),
    };
    report.save_csv(&out)?;
    write_sidecar(&a, &out, "eval")?;
    print!("{}", report.table());
    Ok(())
}
