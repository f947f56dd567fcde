//! Procedural multi-speaker articulatory corpus with known ground truth.
//!
//! Each phoneme sets target values for three smoothed articulatory channels
//! (jaw opening, lip rounding, smile). Targets are convolved with a
//! truncated, normalised exponential kernel of the speaker's time constant,
//! with the rest pose assumed before the first frame. Bilabial targets take
//! effect `ANTICIPATION` frames before the acoustic onset, so the jaw is
//! already rising when the lips meet. Bilabials also add a lip
//! press envelope, a unit Gaussian (σ = 1 frame) peaking two frames before
//! the consonant onset, which scales the lip gap by `1 − press` so the lips
//! touch exactly at the peak.
//!
//! The face has 42 vertices in millimetres: 5 upper/lower lip pairs at
//! x = −20..20, two mouth corners, 8 chin, 8 cheek and 14 static upper-face
//! vertices. Lip displacements are scaled by a side gain `1 + a·x/20`
//! (clamped at the outer pair), and the template lip gap scales with it, so
//! an asymmetric speaker still closes fully.
//!
//! The audio surrogate runs at 50 Hz: a one-hot of the current phoneme, a
//! voicing level, a pre-closure cue (a triangle centred on the closure
//! frame), and small uniform noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureSequence;
use crate::corpus::{Manifest, SequenceEntry, SpeakerEntry, Split, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::mesh::{LipMetadata, MeshSequence, TemplateMesh};
use crate::numerics::Matrix;
use crate::supervision::{gaussian_weights, Phoneme, PhonemeTiming};

pub const ALPHABET: [&str; 10] = ["a", "e", "i", "o", "u", "m", "b", "p", "s", "t"];
pub const VERTICES: usize = 42;
pub const FPS: f64 = 30.0;
pub const FEATURE_RATE: f64 = 50.0;
pub const FEATURE_DIM: usize = ALPHABET.len() + 2;
pub const DEFAULT_PHONEME_SECS: f64 = 0.2;
pub const DEFAULT_PHONEMES_PER_SEQUENCE: usize = 15;
/// Frames between the lip closure and the consonant onset.
pub const CLOSURE_LEAD: usize = 2;
/// Frames by which bilabial articulation precedes the acoustic onset.
pub const ANTICIPATION: usize = CLOSURE_LEAD + 2;

const REST_GAP: f64 = 2.0;
const JAW_MM: f64 = 8.0;
const ROUND_MM: f64 = 4.0;
const SMILE_MM: f64 = 5.0;
const PRESS_MM: f64 = 1.5;
const NOISE: f64 = 0.03;

const LIP_X: [f64; 5] = [-20.0, -10.0, 0.0, 10.0, 20.0];
const UPPER: usize = 0;
const LOWER: usize = 5;
const CORNERS: usize = 10;
const CHIN: usize = 12;
const CHEEKS: usize = 20;
const UPPER_FACE: usize = 28;

/// Indices of the outermost left (+x) and right (−x) lip vertices, upper and lower.
pub const OUTER_LEFT_LIPS: [usize; 2] = [UPPER + 4, LOWER + 4];
pub const OUTER_RIGHT_LIPS: [usize; 2] = [UPPER, LOWER];

/// Planted style of one synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpeaker {
    pub seed: u64,
    pub jaw_gain: f64,
    pub round_gain: f64,
    pub press_gain: f64,
    pub smile_gain: f64,
    /// Left/right lip gain skew: left scales by `1 + a`, right by `1 − a`.
    pub asymmetry: f64,
    pub tau_ms: f64,
}

pub const GAIN_RANGE: (f64, f64) = (0.5, 2.0);
pub const ASYMMETRY_RANGE: (f64, f64) = (-0.5, 0.5);
pub const TAU_RANGE_MS: (f64, f64) = (30.0, 120.0);

pub fn gen_speaker(seed: u64) -> SyntheticSpeaker {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gain = || rng.gen_range(GAIN_RANGE.0..=GAIN_RANGE.1);
    let (jaw_gain, round_gain, press_gain, smile_gain) = (gain(), gain(), gain(), gain());
    SyntheticSpeaker {
        seed,
        jaw_gain,
        round_gain,
        press_gain,
        smile_gain,
        asymmetry: rng.gen_range(ASYMMETRY_RANGE.0..=ASYMMETRY_RANGE.1),
        tau_ms: rng.gen_range(TAU_RANGE_MS.0..=TAU_RANGE_MS.1),
    }
}

impl SyntheticSpeaker {
    pub fn symmetric(mut self) -> Self {
        self.asymmetry = 0.0;
        self
    }

    pub fn with_asymmetry(mut self, a: f64) -> Self {
        self.asymmetry = a;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, r: (f64, f64)| v >= r.0 && v <= r.1;
        let ok = [self.jaw_gain, self.round_gain, self.press_gain, self.smile_gain]
            .iter()
            .all(|g| in_range(*g, GAIN_RANGE))
            && in_range(self.asymmetry, ASYMMETRY_RANGE)
            && in_range(self.tau_ms, TAU_RANGE_MS);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("speaker parameters out of range: {self:?}")))
        }
    }

    fn side_gain(&self, x: f64) -> f64 {
        1.0 + self.asymmetry * (x / 20.0).clamp(-1.0, 1.0)
    }

    pub fn template(&self) -> TemplateMesh {
        let mut v = base_face();
        for (p, &x) in LIP_X.iter().enumerate() {
            let half = 0.5 * REST_GAP * self.side_gain(x);
            v[3 * (UPPER + p) + 1] = half;
            v[3 * (LOWER + p) + 1] = -half;
        }
        TemplateMesh::new(v, lip_metadata()).expect("valid by construction")
    }
}

pub fn lip_metadata() -> LipMetadata {
    LipMetadata {
        lip_upper: (UPPER..UPPER + 5).collect(),
        lip_lower: (LOWER..LOWER + 5).collect(),
        lip_region: (0..CHIN).collect(),
    }
}

fn base_face() -> Vec<f64> {
    let mut v = vec![0.0; 3 * VERTICES];
    let mut set = |i: usize, p: [f64; 3]| v[3 * i..3 * i + 3].copy_from_slice(&p);
    for (p, &x) in LIP_X.iter().enumerate() {
        let z = 10.0 - 0.01 * x * x;
        set(UPPER + p, [x, 0.5 * REST_GAP, z]);
        set(LOWER + p, [x, -0.5 * REST_GAP, z]);
    }
    set(CORNERS, [-27.0, 0.0, 2.0]);
    set(CORNERS + 1, [27.0, 0.0, 2.0]);
    for k in 0..8 {
        let x = -35.0 + 10.0 * k as f64;
        set(CHIN + k, [x, -35.0 - 8.0 * (1.0 - (x / 35.0).powi(2)), 5.0 - 0.005 * x * x]);
    }
    for k in 0..4 {
        let kf = k as f64;
        set(CHEEKS + k, [-(38.0 + 4.0 * kf), -10.0 + 7.0 * kf, -5.0 - kf]);
        set(CHEEKS + 4 + k, [38.0 + 4.0 * kf, -10.0 + 7.0 * kf, -5.0 - kf]);
    }
    for k in 0..14 {
        let (col, row) = ((k % 7) as f64, (k / 7) as f64);
        set(UPPER_FACE + k, [-30.0 + 10.0 * col, 25.0 + 25.0 * row, 8.0 - 0.004 * (col - 3.0).powi(2) * 100.0]);
    }
    v
}

/// Canonical (jaw, round, smile) targets.
fn targets(label: &str) -> Result<[f64; 3]> {
    Ok(match label {
        "a" => [1.0, 0.0, 0.2],
        "e" => [0.6, 0.0, 0.6],
        "i" => [0.3, 0.0, 1.0],
        "o" => [0.7, 0.9, 0.0],
        "u" => [0.3, 1.0, 0.0],
        "m" => [0.05, 0.1, 0.1],
        "b" => [0.05, 0.0, 0.0],
        "p" => [0.05, 0.0, 0.1],
        "s" => [0.2, 0.0, 0.5],
        "t" => [0.25, 0.0, 0.3],
        other => return Err(Error::UnknownPhoneme(other.to_string())),
    })
}

fn voicing(label: &str) -> f64 {
    match label {
        "a" | "e" | "i" | "o" | "u" => 1.0,
        "m" => 0.6,
        "b" => 0.3,
        _ => 0.0,
    }
}

fn is_vowel(label: &str) -> bool {
    matches!(label, "a" | "e" | "i" | "o" | "u")
}

fn is_bilabial(label: &str) -> bool {
    matches!(label, "m" | "b" | "p")
}

/// Truncated exponential kernel, `ceil(5τ)` taps, summing to one.
pub fn smoothing_kernel(tau_frames: f64) -> Vec<f64> {
    let n = (5.0 * tau_frames).ceil().max(1.0) as usize;
    let raw: Vec<f64> = (0..n).map(|k| (-(k as f64) / tau_frames).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// One generated sequence with its construction-time closure frames.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub phonemes: Vec<String>,
    pub timing: PhonemeTiming,
    /// Ground-truth positions.
    pub mesh: MeshSequence,
    pub features: FeatureSequence,
    pub template: TemplateMesh,
    pub closures: Vec<usize>,
}

/// Motion frame at which each phoneme starts.
fn onset_frame(start: f64) -> usize {
    (start * FPS).round() as usize
}

pub fn synth_sequence<S: AsRef<str>>(
    spk: &SyntheticSpeaker,
    phonemes: &[S],
    phoneme_secs: f64,
    noise_seed: u64,
) -> Result<SyntheticSequence> {
    if phonemes.is_empty() {
        return Err(Error::InvalidArgument("phoneme list is empty".into()));
    }
    if !(phoneme_secs > 0.0 && phoneme_secs.is_finite()) {
        return Err(Error::InvalidArgument(format!("phoneme duration must be positive, got {phoneme_secs}")));
    }
    let labels: Vec<String> = phonemes.iter().map(|p| p.as_ref().to_ascii_lowercase()).collect();
    let tgt = labels.iter().map(|l| targets(l)).collect::<Result<Vec<_>>>()?;

    let entries: Vec<Phoneme> = labels
        .iter()
        .enumerate()
        .map(|(k, l)| Phoneme {
            label: l.clone(),
            start: k as f64 * phoneme_secs,
            end: (k + 1) as f64 * phoneme_secs,
        })
        .collect();
    let total = labels.len() as f64 * phoneme_secs;
    let frames = ((total * FPS).round() as usize).max(1);
    let onsets: Vec<usize> = entries.iter().map(|p| onset_frame(p.start)).collect();
    // bilabials start moving the articulators before they are heard
    let mut starts = onsets.clone();
    for k in 1..starts.len() {
        if is_bilabial(&labels[k]) {
            starts[k] = starts[k].saturating_sub(ANTICIPATION).max(starts[k - 1] + 1).min(onsets[k]);
        }
    }
    let phoneme_at = |t: usize| starts.iter().rposition(|&o| o <= t).unwrap_or(0);

    let mut closures: Vec<usize> = labels
        .iter()
        .zip(&onsets)
        .filter(|(l, _)| is_bilabial(l))
        .filter_map(|(_, &c)| c.checked_sub(CLOSURE_LEAD))
        .filter(|&c| c < frames)
        .collect();
    closures.sort_unstable();
    closures.dedup();
    let press = gaussian_weights(&closures, frames, frames, 1.0);

    let kernel = smoothing_kernel(spk.tau_ms / 1000.0 * FPS);
    let channel = |t: usize, c: usize| -> f64 {
        kernel
            .iter()
            .enumerate()
            .map(|(k, w)| if t >= k { w * tgt[phoneme_at(t - k)][c] } else { 0.0 })
            .sum()
    };

    let template = spk.template();
    let mut data = Vec::with_capacity(frames * 3 * VERTICES);
    for t in 0..frames {
        let (jaw, round, smile) = (channel(t, 0), channel(t, 1), channel(t, 2));
        let frame = pose(spk, jaw, round, smile, press.values()[t]);
        data.extend(frame.iter().zip(template.vertices()).map(|(d, p)| d + p));
    }
    let mesh = MeshSequence::new(VERTICES, FPS, false, data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let audio_frames = ((frames as f64 * FEATURE_RATE / FPS).round() as usize).max(1);
    let mut feat = Vec::with_capacity(audio_frames * FEATURE_DIM);
    for j in 0..audio_frames {
        let m = j as f64 * FPS / FEATURE_RATE;
        let k = entries
            .iter()
            .rposition(|p| p.start * FPS <= m + 1e-9)
            .unwrap_or(0);
        let mut row = [0.0; FEATURE_DIM];
        row[ALPHABET.iter().position(|a| *a == labels[k]).expect("validated")] = 1.0;
        row[ALPHABET.len()] = voicing(&labels[k]);
        row[ALPHABET.len() + 1] = closures
            .iter()
            .map(|&c| (1.0 - (m - c as f64).abs() / 2.5).max(0.0))
            .fold(0.0, f64::max);
        for x in &mut row {
            *x += rng.gen_range(-NOISE..NOISE);
        }
        feat.extend_from_slice(&row);
    }
    let features = FeatureSequence::new(Matrix::new(audio_frames, FEATURE_DIM, feat)?, FEATURE_RATE)?;

    Ok(SyntheticSequence {
        phonemes: labels,
        timing: PhonemeTiming::new(entries)?,
        mesh,
        features,
        template,
        closures,
    })
}

/// Per-vertex displacement for one frame of channel values.
fn pose(spk: &SyntheticSpeaker, jaw: f64, round: f64, smile: f64, press: f64) -> Vec<f64> {
    let mut d = vec![0.0; 3 * VERTICES];
    let opening = JAW_MM * spk.jaw_gain * jaw;
    let gap = (REST_GAP + opening) * (1.0 - press);
    let dg = gap - REST_GAP;
    let (r, s, p) = (
        ROUND_MM * spk.round_gain * round,
        SMILE_MM * spk.smile_gain * smile,
        PRESS_MM * spk.press_gain * press,
    );
    for (i, &x) in LIP_X.iter().enumerate() {
        let g = spk.side_gain(x);
        let u = x / 20.0;
        let dx = g * (s * u - 0.4 * r * u);
        let dz = g * (r - p);
        let lift = g * 0.3 * s * u * u;
        d[3 * (UPPER + i)..3 * (UPPER + i) + 3].copy_from_slice(&[dx, lift + 0.3 * g * dg, dz]);
        d[3 * (LOWER + i)..3 * (LOWER + i) + 3].copy_from_slice(&[dx, lift - 0.7 * g * dg, dz]);
    }
    for (k, sign) in [(0usize, -1.0), (1, 1.0)] {
        let g = spk.side_gain(sign * 27.0);
        let i = CORNERS + k;
        d[3 * i..3 * i + 3].copy_from_slice(&[
            sign * g * 1.2 * (s - 0.4 * r),
            g * (0.4 * s - 0.35 * dg),
            0.5 * g * r,
        ]);
    }
    for k in 0..8 {
        let x = -35.0 + 10.0 * k as f64;
        let w = 0.6 + 0.4 * (1.0 - (x / 35.0).abs());
        let i = CHIN + k;
        d[3 * i + 1] = -w * opening;
        d[3 * i + 2] = -0.2 * w * opening;
    }
    for k in 0..8 {
        let sign = if k < 4 { -1.0 } else { 1.0 };
        let i = CHEEKS + k;
        d[3 * i] = sign * 0.3 * s;
        d[3 * i + 1] = 0.3 * s;
    }
    d
}

/// Random phoneme string: starts with a vowel, contains at least one
/// bilabial, and never places two bilabials next to each other.
pub fn random_phonemes(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let vowels = ["a", "e", "i", "o", "u"];
    let mut out: Vec<&str> = Vec::with_capacity(n);
    for k in 0..n {
        let p = if k == 0 {
            vowels[rng.gen_range(0..vowels.len())]
        } else {
            loop {
                let c = ALPHABET[rng.gen_range(0..ALPHABET.len())];
                if !(is_bilabial(c) && is_bilabial(out[k - 1])) {
                    break c;
                }
            }
        };
        out.push(p);
    }
    if n >= 2 && !out.iter().any(|p| is_bilabial(p)) {
        let k = rng.gen_range(1..n);
        out[k] = ["m", "b", "p"][rng.gen_range(0..3)];
    }
    debug_assert!(out.first().is_none_or(|p| is_vowel(p)));
    out.into_iter().map(String::from).collect()
}

/// Corpus generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub speakers: usize,
    pub sequences: usize,
    pub seed: u64,
    #[serde(default)]
    pub heldout_speakers: usize,
    /// Sequences per held-out speaker; 0 means `sequences`.
    #[serde(default)]
    pub heldout_sequences: usize,
    #[serde(default = "default_phonemes")]
    pub phonemes_per_sequence: usize,
    #[serde(default = "default_phoneme_secs")]
    pub phoneme_secs: f64,
    /// Force zero asymmetry for the training speakers.
    #[serde(default)]
    pub symmetric_training: bool,
    /// Override the left/right asymmetry of held-out speakers.
    #[serde(default)]
    pub heldout_asymmetry: Option<f64>,
}

fn default_phonemes() -> usize {
    DEFAULT_PHONEMES_PER_SEQUENCE
}

fn default_phoneme_secs() -> f64 {
    DEFAULT_PHONEME_SECS
}

impl CorpusConfig {
    pub fn new(speakers: usize, sequences: usize, seed: u64) -> Self {
        CorpusConfig {
            speakers,
            sequences,
            seed,
            heldout_speakers: 0,
            heldout_sequences: 0,
            phonemes_per_sequence: DEFAULT_PHONEMES_PER_SEQUENCE,
            phoneme_secs: DEFAULT_PHONEME_SECS,
            symmetric_training: false,
            heldout_asymmetry: None,
        }
    }

    pub fn sequences_for(&self, speaker: usize) -> usize {
        if speaker >= self.speakers && self.heldout_sequences > 0 {
            self.heldout_sequences
        } else {
            self.sequences
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.speakers == 0 || self.sequences == 0 || self.phonemes_per_sequence == 0 {
            return Err(Error::InvalidArgument("speakers, sequences and phonemes must be positive".into()));
        }
        if self.speakers > crate::motion::CANONICAL_IDENTITIES {
            return Err(Error::InvalidArgument(format!(
                "at most {} training speakers are supported",
                crate::motion::CANONICAL_IDENTITIES
            )));
        }
        if let Some(a) = self.heldout_asymmetry {
            if !(ASYMMETRY_RANGE.0..=ASYMMETRY_RANGE.1).contains(&a) {
                return Err(Error::InvalidArgument(format!("asymmetry {a} out of range")));
            }
        }
        if !(self.phoneme_secs > 0.0 && self.phoneme_secs.is_finite()) {
            return Err(Error::InvalidArgument(format!("phoneme duration must be positive, got {}", self.phoneme_secs)));
        }
        Ok(())
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x1_0000).wrapping_add(b));
    rng.gen()
}

/// Split for sequence `i` of `n` from a training speaker: the last
/// `ceil(n/6)` go to test, the `ceil(n/6)` before them to validation.
/// Fewer than three sequences all train.
pub fn training_split(i: usize, n: usize) -> Split {
    if n < 3 {
        return Split::Train;
    }
    let k = n.div_ceil(6);
    if i >= n - k {
        Split::Test
    } else if i >= n - 2 * k {
        Split::Val
    } else {
        Split::Train
    }
}

/// Held-out speakers: the last `ceil(n/4)` sequences are for evaluation,
/// the rest are adaptation references.
pub fn heldout_split(i: usize, n: usize) -> Split {
    if n < 2 {
        return Split::Adapt;
    }
    if i >= n - n.div_ceil(4) {
        Split::AdaptTest
    } else {
        Split::Adapt
    }
}

/// In-memory corpus: speakers (training first) and their sequences.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub config: CorpusConfig,
    pub speakers: Vec<SyntheticSpeaker>,
    /// `(speaker index, sequence index, split, data)`.
    pub sequences: Vec<(usize, usize, Split, SyntheticSequence)>,
}

pub fn speaker_for(cfg: &CorpusConfig, k: usize) -> SyntheticSpeaker {
    let spk = gen_speaker(mix(cfg.seed, 1, k as u64));
    match (k < cfg.speakers, cfg.heldout_asymmetry) {
        (true, _) if cfg.symmetric_training => spk.symmetric(),
        (false, Some(a)) => spk.with_asymmetry(a),
        _ => spk,
    }
}

pub fn generate_corpus(cfg: &CorpusConfig, exec: Exec) -> Result<GeneratedCorpus> {
    cfg.validate()?;
    let total = cfg.speakers + cfg.heldout_speakers;
    let speakers: Vec<SyntheticSpeaker> = (0..total).map(|k| speaker_for(cfg, k)).collect();
    let jobs: Vec<(usize, usize)> = (0..total).flat_map(|k| (0..cfg.sequences_for(k)).map(move |s| (k, s))).collect();
    let sequences = exec.try_map(&jobs, |&(k, s)| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 2 + k as u64, s as u64));
        let phonemes = random_phonemes(&mut rng, cfg.phonemes_per_sequence);
        let seq = synth_sequence(&speakers[k], &phonemes, cfg.phoneme_secs, rng.gen())?;
        let split = if k < cfg.speakers {
            training_split(s, cfg.sequences)
        } else {
            heldout_split(s, cfg.sequences_for(k))
        };
        Ok::<_, Error>((k, s, split, seq))
    })?;
    Ok(GeneratedCorpus {
        config: cfg.clone(),
        speakers,
        sequences,
    })
}

/// Writes the corpus under `out_dir` and returns the manifest path.
pub fn export_corpus(cfg: &CorpusConfig, out_dir: impl AsRef<Path>, exec: Exec) -> Result<PathBuf> {
    let corpus = generate_corpus(cfg, exec)?;
    write_corpus(&corpus, out_dir)
}

pub fn write_corpus(corpus: &GeneratedCorpus, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out)?;
    let mut speakers = Vec::new();
    for (k, spk) in corpus.speakers.iter().enumerate() {
        let name = format!("spk{k:02}");
        std::fs::create_dir_all(out.join(&name))?;
        let template = format!("{name}/template.msq");
        let lips = format!("{name}/template.json");
        spk.template().save(out.join(&template), out.join(&lips), FPS)?;
        let heldout = k >= corpus.config.speakers;
        speakers.push(SpeakerEntry {
            name,
            identity: (!heldout).then_some(k),
            template,
            lips,
            style: Some(spk.clone()),
        });
    }
    let mut sequences = Vec::new();
    for (k, s, split, seq) in &corpus.sequences {
        let spk = &speakers[*k].name;
        let stem = format!("{spk}/seq{s:02}");
        let entry = SequenceEntry {
            id: format!("{spk}_seq{s:02}"),
            speaker: spk.clone(),
            split: *split,
            mesh: format!("{stem}.msq"),
            features: format!("{stem}.ftr"),
            timing: format!("{stem}.timing.txt"),
            weights: Some(format!("{stem}.weights.txt")),
            phonemes: seq.phonemes.join(" "),
            closures: seq.closures.clone(),
        };
        seq.mesh.save(out.join(&entry.mesh))?;
        seq.features.save(out.join(&entry.features))?;
        seq.timing.save(out.join(&entry.timing))?;
        let w = gaussian_weights(&seq.closures, seq.mesh.frames(), 2, 1.0);
        w.save(out.join(entry.weights.as_ref().expect("set above")))?;
        sequences.push(entry);
    }
    let manifest = Manifest {
        version: 1,
        seed: corpus.config.seed,
        fps: FPS,
        corpus: Some(corpus.config.clone()),
        speakers,
        sequences,
    };
    let path = out.join(MANIFEST_NAME);
    manifest.save(&path)?;
    Ok(path)
}
