//! Audio frontend: PCM16 WAV loading, a deterministic log-mel filterbank,
//! the `.ftr` feature file hook for externally computed features, linear
//! resampling to the motion frame rate, and the learned 64-dim projection.
//!
//! Filterbank framing: a 25 ms Hann window (periodic) advanced by 20 ms;
//! only full windows are emitted, so a waveform of `N` samples yields
//! `1 + (N - win) / hop` frames (49 for one second at 16 kHz). Each window
//! is zero-padded to the next power of two, the power spectrum is pooled by
//! HTK-mel triangular filters spanning 0 Hz to Nyquist, and energies are
//! logged after flooring at 1e-10.

use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::{read_u32, Graph, Matrix, ParamStore, Var};

pub const EMBED_DIM: usize = 64;
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;
pub const MOTION_FPS: f64 = 30.0;
pub const LOG_FLOOR: f64 = 1e-10;

pub const PROJ_WEIGHT: &str = "audio.proj.weight";
pub const PROJ_BIAS: &str = "audio.proj.bias";

const FTR_MAGIC: &[u8; 4] = b"FTR1";
const FTR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Length("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::NonFinite {
                context: "waveform sample outside [-1, 1]",
                index,
            });
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn wav_error(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

/// Reads a mono PCM16 WAV file; samples are divided by 32768.
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(wav_error)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!("expected mono audio, found {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "expected PCM16, found {:?} with {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let expected = reader.len() as usize;
    let samples: Vec<f64> = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(wav_error)?;
    if samples.len() != expected {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "truncated WAV payload",
        )));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono PCM16 WAV (samples are scaled by 32768 and clamped).
pub fn save_waveform(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_error)?;
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wav_error)?;
    }
    writer.finalize().map_err(wav_error)
}

/// Per-frame audio features at their own frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Matrix,
    frame_rate: f64,
}

impl FeatureSequence {
    pub fn new(frames: Matrix, frame_rate: f64) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::Length("feature sequence needs at least one frame".into()));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad frame rate {frame_rate}")));
        }
        Ok(FeatureSequence { frames, frame_rate })
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

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    /// Number of motion frames covering the same duration.
    pub fn motion_frames(&self, fps: f64) -> usize {
        ((self.len() as f64 * fps / self.frame_rate).round() as usize).max(1)
    }

    pub fn write_ftr<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.frames.data().len() * 4);
        buf.extend_from_slice(FTR_MAGIC);
        buf.extend_from_slice(&FTR_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.frame_rate as f32).to_le_bytes());
        for &v in self.frames.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_ftr<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FTR_MAGIC {
            return Err(Error::Format("bad .ftr magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FTR_VERSION {
            return Err(Error::Format(format!("unsupported .ftr version {version}")));
        }
        let t = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        if t == 0 || d == 0 {
            return Err(Error::Format(format!(".ftr with T={t}, D={d}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rate = f32::from_le_bytes(b4) as f64;
        let mut buf = vec![0u8; t * d * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let m = Matrix::new(t, d, data).map_err(|e| Error::Format(e.to_string()))?;
        FeatureSequence::new(m, rate).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_ftr(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Loads an externally computed `.ftr` feature file.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path)?;
    FeatureSequence::read_ftr(bytes.as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterbankConfig {
    pub n_mels: usize,
    pub win_secs: f64,
    pub hop_secs: f64,
}

impl Default for FilterbankConfig {
    fn default() -> Self {
        FilterbankConfig {
            n_mels: 40,
            win_secs: 0.025,
            hop_secs: 0.020,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Lower edge, center and upper edge (Hz) of each triangular mel band.
pub fn mel_band_edges(n_mels: usize, sample_rate: u32) -> Vec<(f64, f64, f64)> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels).map(|m| (pts[m], pts[m + 1], pts[m + 2])).collect()
}

/// Log mel filterbank energies, one frame per hop.
pub fn filterbank_features(w: &Waveform, cfg: &FilterbankConfig) -> Result<FeatureSequence> {
    let sr = w.sample_rate as f64;
    let win = (cfg.win_secs * sr).round() as usize;
    let hop = (cfg.hop_secs * sr).round() as usize;
    if win == 0 || hop == 0 || cfg.n_mels == 0 {
        return Err(Error::InvalidArgument("degenerate filterbank configuration".into()));
    }
    let n = w.samples.len();
    if n < win {
        return Err(Error::Length(format!(
            "waveform of {n} samples is shorter than one {win}-sample window"
        )));
    }
    let frames = 1 + (n - win) / hop;
    let n_fft = win.next_power_of_two();
    let bins = n_fft / 2 + 1;
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let bands = mel_band_edges(cfg.n_mels, w.sample_rate);
    let weights: Vec<Vec<f64>> = bands
        .iter()
        .map(|&(lo, c, hi)| {
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sr / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= c {
                        (f - lo) / (c - lo)
                    } else {
                        (hi - f) / (hi - c)
                    }
                })
                .collect()
        })
        .collect();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; bins];
    let mut out = Vec::with_capacity(frames * cfg.n_mels);
    for f in 0..frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = if i < win { w.samples[start + i] * window[i] } else { 0.0 };
            *b = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for wts in &weights {
            let e: f64 = wts.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    FeatureSequence::new(Matrix::new(frames, cfg.n_mels, out)?, sr / hop as f64)
}

/// Linearly resamples to `target` rows. Output row `t` samples the input at
/// `t·(Ta−1)/(T−1)`, so first and last frames line up; `T = 1` returns the
/// first frame.
pub fn resample_linear(f: &FeatureSequence, target: usize) -> Result<Matrix> {
    if target == 0 {
        return Err(Error::Length("resample target must be at least 1".into()));
    }
    let src = f.frames();
    let (ta, d) = (src.rows(), src.cols());
    let mut out = Vec::with_capacity(target * d);
    for t in 0..target {
        if target == 1 || ta == 1 {
            out.extend_from_slice(src.row(0));
            continue;
        }
        if t == target - 1 {
            out.extend_from_slice(src.row(ta - 1));
            continue;
        }
        let pos = t as f64 * (ta - 1) as f64 / (target - 1) as f64;
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        let i1 = (i0 + 1).min(ta - 1);
        let (r0, r1) = (src.row(i0), src.row(i1));
        if frac == 0.0 {
            out.extend_from_slice(r0);
        } else {
            out.extend(r0.iter().zip(r1).map(|(a, b)| a + frac * (b - a)));
        }
    }
    Matrix::new(target, d, out)
}

/// T×64 audio embedding at the motion frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEmbedding {
    frames: Matrix,
    fps: f64,
}

impl AudioEmbedding {
    pub fn new(frames: Matrix, fps: f64) -> Result<Self> {
        if frames.cols() != EMBED_DIM {
            return Err(Error::shape("audio embedding", &[frames.rows(), frames.cols()], &[EMBED_DIM]));
        }
        if frames.rows() == 0 {
            return Err(Error::Length("empty audio embedding".into()));
        }
        Ok(AudioEmbedding { frames, fps })
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

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn truncate(&self, n: usize) -> AudioEmbedding {
        AudioEmbedding {
            frames: self.frames.truncate_rows(n),
            fps: self.fps,
        }
    }
}

/// Recorded projection of resampled features to the 64-dim embedding.
pub fn project_audio_graph(g: &mut Graph, params: &ParamStore, resampled: &Matrix) -> Result<Var> {
    let w = g.param(params, PROJ_WEIGHT)?;
    let (din, _) = g.shape(w);
    if din != resampled.cols() {
        return Err(Error::shape(
            "project_audio",
            &[resampled.rows(), resampled.cols()],
            &[din, EMBED_DIM],
        ));
    }
    let b = g.param(params, PROJ_BIAS)?;
    let x = g.constant_matrix(resampled);
    g.linear(x, w, b)
}

pub fn project_audio(resampled: &Matrix, params: &ParamStore, fps: f64) -> Result<AudioEmbedding> {
    let mut g = Graph::new();
    let y = project_audio_graph(&mut g, params, resampled)?;
    AudioEmbedding::new(g.to_matrix(y)?, fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, Tensor};

    fn seq(rows: &[Vec<f64>]) -> FeatureSequence {
        FeatureSequence::new(Matrix::from_rows(rows).unwrap(), 50.0).unwrap()
    }

    #[test]
    fn resample_examples() {
        let r = resample_linear(&seq(&[vec![0.0], vec![1.0]]), 3).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0]);
        let r = resample_linear(&seq(&[vec![0.0], vec![3.0], vec![6.0]]), 2).unwrap();
        assert_eq!(r.data(), &[0.0, 6.0]);
        let f = seq(&[vec![1.0, 2.0], vec![3.0, 5.0], vec![-1.0, 0.0]]);
        assert_eq!(resample_linear(&f, 3).unwrap(), *f.frames());
        assert_eq!(resample_linear(&f, 1).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn silence_gives_log_floor() {
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let f = filterbank_features(&w, &FilterbankConfig::default()).unwrap();
        assert_eq!(f.len(), 49);
        assert_eq!(f.dim(), 40);
        assert_eq!(f.frame_rate(), 50.0);
        assert!(f.frames().data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn tone_peaks_in_band_containing_its_frequency() {
        let sr = 16000;
        let samples = (0..sr)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin())
            .collect();
        let w = Waveform::new(samples, sr).unwrap();
        let cfg = FilterbankConfig::default();
        let f = filterbank_features(&w, &cfg).unwrap();
        let bands = mel_band_edges(cfg.n_mels, sr);
        for t in 0..f.len() {
            let row = f.frames().row(t);
            let arg = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            let (lo, _, hi) = bands[arg];
            assert!(lo < 440.0 && 440.0 < hi, "frame {t}: band {arg} = [{lo}, {hi}]");
        }
    }

    #[test]
    fn too_short_waveform_is_rejected() {
        let w = Waveform::new(vec![0.0; 100], 16000).unwrap();
        assert!(matches!(
            filterbank_features(&w, &FilterbankConfig::default()),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn ftr_rejects_empty_and_short_payload() {
        let f = seq(&[vec![1.0, 2.0]]);
        let mut bytes = Vec::new();
        f.write_ftr(&mut bytes).unwrap();
        let mut short = bytes.clone();
        short.truncate(short.len() - 2);
        assert!(matches!(FeatureSequence::read_ftr(short.as_slice()), Err(Error::Io(_))));
        let mut zero = bytes.clone();
        zero[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(FeatureSequence::read_ftr(zero.as_slice()), Err(Error::Format(_))));
        let back = FeatureSequence::read_ftr(bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        back.write_ftr(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    fn projection(din: usize, w: Vec<f64>, b: Vec<f64>) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(PROJ_WEIGHT, Tensor::new(vec![din, EMBED_DIM], w).unwrap()).unwrap();
        p.insert(PROJ_BIAS, Tensor::new(vec![EMBED_DIM], b).unwrap()).unwrap();
        p
    }

    #[test]
    fn projection_examples() {
        let bias: Vec<f64> = (0..EMBED_DIM).map(|i| i as f64).collect();
        let p = projection(3, vec![0.7; 3 * EMBED_DIM], bias.clone());
        let e = project_audio(&Matrix::zeros(4, 3), &p, 30.0).unwrap();
        for t in 0..4 {
            assert_eq!(e.frames().row(t), bias.as_slice());
        }

        let mut eye = vec![0.0; EMBED_DIM * EMBED_DIM];
        (0..EMBED_DIM).for_each(|i| eye[i * EMBED_DIM + i] = 1.0);
        let p = projection(EMBED_DIM, eye, vec![0.0; EMBED_DIM]);
        let x = Matrix::new(2, EMBED_DIM, (0..128).map(|i| i as f64 * 0.01).collect()).unwrap();
        assert_eq!(project_audio(&x, &p, 30.0).unwrap().frames(), &x);

        assert!(project_audio(&Matrix::zeros(2, 5), &p, 30.0).is_err());
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let w: Vec<f64> = (0..5 * EMBED_DIM).map(|i| (i as f64 * 0.13).sin()).collect();
        let p = projection(5, w, vec![0.1; EMBED_DIM]);
        let x = Matrix::new(3, 5, (0..15).map(|i| (i as f64).cos()).collect()).unwrap();
        let err = finite_diff_check(
            |g, p| {
                let y = project_audio_graph(g, p, &x)?;
                Ok(g.sum(y))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
