//! Training losses and automatic lip-closure labels.
//!
//! All reductions are sums: over frames, over vertices, over coordinates.
//! Losses compare displacement sequences; the template cancels, so the
//! values are the same as for positions.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::{LipMetadata, MeshSequence, TemplateMesh};
use crate::numerics::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mse: f64,
    pub vel: f64,
    pub lip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mse: 1.0,
            vel: 10.0,
            lip: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("mse", self.mse), ("vel", self.vel), ("lip", self.lip)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be non-negative, got {w}")));
            }
        }
        Ok(())
    }

    pub fn without_lip(self) -> Self {
        LossWeights { lip: 0.0, ..self }
    }
}

/// Per-component and weighted total loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub mse: f64,
    pub vel: f64,
    pub lip: f64,
}

impl LossTerms {
    pub fn from_components(mse: f64, vel: f64, lip: f64, w: &LossWeights) -> Self {
        LossTerms {
            total: w.mse * mse + w.vel * vel + w.lip * lip,
            mse,
            vel,
            lip,
        }
    }

    pub fn add(&mut self, other: &LossTerms) {
        self.total += other.total;
        self.mse += other.mse;
        self.vel += other.vel;
        self.lip += other.lip;
    }
}

fn check_pair(pred: &MeshSequence, gt: &MeshSequence) -> Result<()> {
    if pred.vertex_count() != gt.vertex_count() || pred.frames() != gt.frames() {
        return Err(Error::shape(
            "loss",
            &[pred.frames(), pred.vertex_count()],
            &[gt.frames(), gt.vertex_count()],
        ));
    }
    if pred.is_displacement() != gt.is_displacement() {
        return Err(Error::InvalidArgument(
            "loss operands must both be positions or both displacements".into(),
        ));
    }
    Ok(())
}

pub fn loss_mse(pred: &MeshSequence, gt: &MeshSequence) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Velocity loss value; `degenerate` is set when fewer than two frames exist.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityLoss {
    pub value: f64,
    pub degenerate: bool,
}

pub fn loss_vel(pred: &MeshSequence, gt: &MeshSequence) -> Result<VelocityLoss> {
    check_pair(pred, gt)?;
    if pred.frames() < 2 {
        return Ok(VelocityLoss {
            value: 0.0,
            degenerate: true,
        });
    }
    let w = pred.vertex_count() * 3;
    let (p, y) = (pred.data(), gt.data());
    let value = (w..p.len())
        .map(|i| {
            let d = (y[i] - y[i - w]) - (p[i] - p[i - w]);
            d * d
        })
        .sum();
    Ok(VelocityLoss {
        value,
        degenerate: false,
    })
}

pub fn loss_lip(pred: &MeshSequence, gt: &MeshSequence, w: &ClosureWeights, lip_region: &[usize]) -> Result<f64> {
    check_pair(pred, gt)?;
    if w.len() != pred.frames() {
        return Err(Error::Length(format!(
            "closure weights have {} frames, sequence has {}",
            w.len(),
            pred.frames()
        )));
    }
    let v = pred.vertex_count();
    if let Some(bad) = lip_region.iter().find(|&&i| i >= v) {
        return Err(Error::Metadata(format!("lip index {bad} out of range for V={v}")));
    }
    let mut total = 0.0;
    for (t, &wt) in w.values().iter().enumerate() {
        if wt == 0.0 {
            continue;
        }
        let frame: f64 = lip_region
            .iter()
            .map(|&i| {
                let (a, b) = (pred.vertex(t, i), gt.vertex(t, i));
                (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>()
            })
            .sum();
        total += wt * frame;
    }
    Ok(total)
}

pub fn loss_total(
    pred: &MeshSequence,
    gt: &MeshSequence,
    w: &ClosureWeights,
    lip_region: &[usize],
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let mse = loss_mse(pred, gt)?;
    let vel = loss_vel(pred, gt)?.value;
    let lip = loss_lip(pred, gt, w, lip_region)?;
    Ok(LossTerms::from_components(mse, vel, lip, weights))
}

/// Ground truth for one sequence, flattened for the recorded losses.
#[derive(Debug, Clone)]
pub struct SequenceTarget {
    frames: usize,
    width: usize,
    displacements: Vec<f64>,
    velocities: Vec<f64>,
    lip_weights: Vec<f64>,
}

impl SequenceTarget {
    /// `gt` must hold displacements. `lip_region` indexes vertices.
    pub fn new(gt: &MeshSequence, w: &ClosureWeights, lip_region: &[usize]) -> Result<Self> {
        if !gt.is_displacement() {
            return Err(Error::InvalidArgument("targets must be displacements".into()));
        }
        let (frames, v) = (gt.frames(), gt.vertex_count());
        if w.len() != frames {
            return Err(Error::Length(format!(
                "closure weights have {} frames, sequence has {frames}",
                w.len()
            )));
        }
        if let Some(bad) = lip_region.iter().find(|&&i| i >= v) {
            return Err(Error::Metadata(format!("lip index {bad} out of range for V={v}")));
        }
        let width = 3 * v;
        let d = gt.data();
        let velocities = (width..d.len()).map(|i| d[i] - d[i - width]).collect();
        let mut lip_weights = vec![0.0; d.len()];
        for (t, &wt) in w.values().iter().enumerate() {
            for &i in lip_region {
                for k in 0..3 {
                    lip_weights[t * width + 3 * i + k] = wt;
                }
            }
        }
        Ok(SequenceTarget {
            frames,
            width,
            displacements: d.to_vec(),
            velocities,
            lip_weights,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn displacements(&self) -> &[f64] {
        &self.displacements
    }

    pub fn has_lip_weight(&self) -> bool {
        self.lip_weights.iter().any(|w| *w != 0.0)
    }
}

/// Loss nodes recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub mse: Var,
    pub vel: Var,
    pub lip: Var,
}

impl LossNodes {
    pub fn terms(&self, g: &Graph) -> LossTerms {
        LossTerms {
            total: g.scalar(self.total),
            mse: g.scalar(self.mse),
            vel: g.scalar(self.vel),
            lip: g.scalar(self.lip),
        }
    }
}

/// Records the weighted loss of `pred` (T×3V displacements) on `g`.
pub fn loss_graph(g: &mut Graph, pred: Var, target: &SequenceTarget, weights: &LossWeights) -> Result<LossNodes> {
    weights.validate()?;
    if g.shape(pred) != (target.frames, target.width) {
        let (r, c) = g.shape(pred);
        return Err(Error::shape("loss", &[r, c], &[target.frames, target.width]));
    }
    let mse = g.weighted_sse(pred, &target.displacements, None)?;
    let vel = if target.frames >= 2 {
        let d = g.temporal_diff(pred)?;
        g.weighted_sse(d, &target.velocities, None)?
    } else {
        g.constant(1, 1, vec![0.0])?
    };
    let lip = g.weighted_sse(pred, &target.displacements, Some(&target.lip_weights))?;
    let total = g.combine(&[(mse, weights.mse), (vel, weights.vel), (lip, weights.lip)])?;
    Ok(LossNodes { total, mse, vel, lip })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phoneme {
    pub label: String,
    pub start: f64,
    pub end: f64,
}

/// Time-aligned phoneme labels, sorted by start.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhonemeTiming {
    entries: Vec<Phoneme>,
}

impl PhonemeTiming {
    pub fn new(entries: Vec<Phoneme>) -> Result<Self> {
        for (i, p) in entries.iter().enumerate() {
            if !(p.start.is_finite() && p.end.is_finite() && p.start < p.end && p.start >= 0.0) {
                return Err(Error::Format(format!(
                    "phoneme {i} `{}` has invalid interval [{}, {}]",
                    p.label, p.start, p.end
                )));
            }
            if p.label.is_empty() || p.label.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("phoneme {i} has an invalid label")));
            }
            if i > 0 && entries[i - 1].start > p.start {
                return Err(Error::Format(format!("phoneme {i} is not sorted by start time")));
            }
        }
        Ok(PhonemeTiming { entries })
    }

    pub fn entries(&self) -> &[Phoneme] {
        &self.entries
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Format(format!("line {}: expected label<TAB>start<TAB>end", n + 1)));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: bad time `{s}`", n + 1)))
            };
            entries.push(Phoneme {
                label: fields[0].trim().to_string(),
                start: num(fields[1])?,
                end: num(fields[2])?,
            });
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}", p.label, p.start, p.end);
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub fn is_bilabial(label: &str) -> bool {
    matches!(label.to_ascii_lowercase().as_str(), "m" | "b" | "p")
}

/// Mean Euclidean distance between paired upper and lower lip vertices of a
/// V×3 position frame.
pub fn lip_distance(frame: &[f64], lips: &LipMetadata) -> Result<f64> {
    if lips.lip_upper.is_empty() || lips.lip_upper.len() != lips.lip_lower.len() {
        return Err(Error::Metadata("lip distance needs at least one upper/lower pair".into()));
    }
    let v = frame.len() / 3;
    let mut sum = 0.0;
    for (&u, &l) in lips.lip_upper.iter().zip(&lips.lip_lower) {
        if u >= v || l >= v {
            return Err(Error::Metadata(format!("lip pair ({u}, {l}) out of range for V={v}")));
        }
        let d2: f64 = (0..3).map(|k| (frame[3 * u + k] - frame[3 * l + k]).powi(2)).sum();
        sum += d2.sqrt();
    }
    Ok(sum / lips.lip_upper.len() as f64)
}

/// Lip distance for every frame; displacement sequences get the template added.
pub fn lip_distance_curve(seq: &MeshSequence, tmpl: &TemplateMesh) -> Result<Vec<f64>> {
    let pos = seq.to_positions(tmpl)?;
    tmpl.check_vertices(pos.vertex_count())?;
    (0..pos.frames()).map(|t| lip_distance(pos.frame(t), tmpl.lips())).collect()
}

pub fn default_search_window(fps: f64) -> usize {
    ((0.25 * fps).round() as usize).max(1)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClosureDetection {
    /// Sorted, deduplicated closure frames.
    pub frames: Vec<usize>,
    /// Indices into the timing list of bilabials past the end of the curve.
    pub skipped: Vec<usize>,
}

/// For each bilabial at `c = round(start·fps)`, the first minimum of `curve`
/// over `[c − window, c]`.
pub fn detect_closures(curve: &[f64], timings: &PhonemeTiming, fps: f64, window: usize) -> Result<ClosureDetection> {
    if window == 0 {
        return Err(Error::InvalidArgument("search window must be at least one frame".into()));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    let mut out = ClosureDetection::default();
    for (i, p) in timings.entries().iter().enumerate() {
        if !is_bilabial(&p.label) {
            continue;
        }
        let c = (p.start * fps).round() as usize;
        if c >= curve.len() {
            out.skipped.push(i);
            continue;
        }
        let lo = c.saturating_sub(window);
        let mut best = lo;
        for t in lo + 1..=c {
            if curve[t] < curve[best] {
                best = t;
            }
        }
        out.frames.push(best);
    }
    out.frames.sort_unstable();
    out.frames.dedup();
    Ok(out)
}

/// Per-frame lip-loss weights in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ClosureWeights {
    values: Vec<f64>,
}

impl ClosureWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidArgument(format!(
                "closure weight {i} = {} outside [0, 1]",
                values[i]
            )));
        }
        Ok(ClosureWeights { values })
    }

    pub fn zeros(frames: usize) -> Self {
        ClosureWeights {
            values: vec![0.0; frames],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let values = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(n, l)| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("weights line {}: bad value `{l}`", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.values {
            let _ = writeln!(s, "{w}");
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightMode {
    Gaussian { radius: usize, sigma: f64 },
    /// 1 on closure frames, 0 elsewhere.
    Binary,
}

impl Default for WeightMode {
    fn default() -> Self {
        WeightMode::Gaussian {
            radius: 2,
            sigma: 1.0,
        }
    }
}

/// Gaussian windows around each closure, combined by pointwise max and
/// clipped to `[0, frames)`.
pub fn gaussian_weights(closures: &[usize], frames: usize, radius: usize, sigma: f64) -> ClosureWeights {
    let mut w = vec![0.0f64; frames];
    for &c in closures {
        let lo = c.saturating_sub(radius);
        let hi = (c + radius).min(frames.saturating_sub(1));
        for t in lo..=hi {
            if t >= frames {
                break;
            }
            let k = t as f64 - c as f64;
            w[t] = w[t].max((-k * k / (2.0 * sigma * sigma)).exp());
        }
    }
    ClosureWeights { values: w }
}

pub fn closure_weights(closures: &[usize], frames: usize, mode: WeightMode) -> ClosureWeights {
    match mode {
        WeightMode::Gaussian { radius, sigma } => gaussian_weights(closures, frames, radius, sigma),
        WeightMode::Binary => {
            let mut w = vec![0.0; frames];
            closures.iter().filter(|&&c| c < frames).for_each(|&c| w[c] = 1.0);
            ClosureWeights { values: w }
        }
    }
}

/// Output of the labeling pipeline for one sequence.
#[derive(Debug, Clone)]
pub struct LabelResult {
    pub curve: Vec<f64>,
    pub detection: ClosureDetection,
    pub weights: ClosureWeights,
}

pub fn label_sequence(
    seq: &MeshSequence,
    tmpl: &TemplateMesh,
    timings: &PhonemeTiming,
    window: usize,
    mode: WeightMode,
) -> Result<LabelResult> {
    let curve = lip_distance_curve(seq, tmpl)?;
    let detection = detect_closures(&curve, timings, seq.fps(), window)?;
    let weights = closure_weights(&detection.frames, curve.len(), mode);
    Ok(LabelResult {
        curve,
        detection,
        weights,
    })
}
