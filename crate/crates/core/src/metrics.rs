//! Evaluation metrics over mesh sequences.
//!
//! DTW uses unit steps {(1,0), (0,1), (1,1)} with a frame cost equal to the
//! mean per-vertex Euclidean distance over the compared subset. Among
//! minimum-cost warping paths the shortest one is taken, and the result is
//! that cost divided by the path length. Sequence metrics are computed per
//! pair and then averaged.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::mesh::{MeshSequence, TemplateMesh};
use crate::supervision::lip_distance;

fn check_pair(pred: &MeshSequence, gt: &MeshSequence) -> Result<()> {
    if pred.vertex_count() != gt.vertex_count() || pred.frames() != gt.frames() {
        return Err(Error::shape(
            "metric",
            &[pred.frames(), pred.vertex_count()],
            &[gt.frames(), gt.vertex_count()],
        ));
    }
    if pred.is_displacement() != gt.is_displacement() {
        return Err(Error::InvalidArgument(
            "metric operands must both be positions or both displacements".into(),
        ));
    }
    Ok(())
}

fn check_subset(subset: &[usize], v: usize) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("vertex subset is empty".into()));
    }
    if let Some(bad) = subset.iter().find(|&&i| i >= v) {
        return Err(Error::Metadata(format!("vertex {bad} out of range for V={v}")));
    }
    Ok(())
}

fn vertex_dist(a: &[f64], b: &[f64], i: usize) -> f64 {
    let d: f64 = (0..3).map(|k| (a[3 * i + k] - b[3 * i + k]).powi(2)).sum();
    d.sqrt()
}

fn frame_cost(a: &[f64], b: &[f64], subset: &[usize]) -> f64 {
    subset.iter().map(|&i| vertex_dist(a, b, i)).sum::<f64>() / subset.len() as f64
}

/// Mean over frames and subset vertices of the per-vertex distance.
pub fn metric_l2(pred: &MeshSequence, gt: &MeshSequence, subset: &[usize]) -> Result<f64> {
    check_pair(pred, gt)?;
    check_subset(subset, pred.vertex_count())?;
    let sum: f64 = (0..pred.frames()).map(|t| frame_cost(pred.frame(t), gt.frame(t), subset)).sum();
    Ok(sum / pred.frames().max(1) as f64)
}

/// DTW over an `n × m` cost function, returning cost / path length.
pub fn dtw_with_cost(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Result<f64> {
    if n == 0 || m == 0 {
        return Err(Error::Length("DTW needs non-empty sequences".into()));
    }
    // (accumulated cost, path length), compared lexicographically
    let mut acc = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let c = cost(i, j);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, usize::MAX);
                let mut consider = |p: (f64, usize)| {
                    if p.0 < best.0 || (p.0 == best.0 && p.1 < best.1) {
                        best = p;
                    }
                };
                if i > 0 {
                    consider(acc[(i - 1) * m + j]);
                }
                if j > 0 {
                    consider(acc[i * m + j - 1]);
                }
                if i > 0 && j > 0 {
                    consider(acc[(i - 1) * m + j - 1]);
                }
                best
            };
            acc[i * m + j] = (best.0 + c, best.1 + 1);
        }
    }
    let (c, len) = acc[n * m - 1];
    Ok(c / len as f64)
}

pub fn dtw_distance(a: &MeshSequence, b: &MeshSequence, subset: &[usize]) -> Result<f64> {
    if a.vertex_count() != b.vertex_count() {
        return Err(Error::shape("dtw", &[a.vertex_count()], &[b.vertex_count()]));
    }
    if a.is_displacement() != b.is_displacement() {
        return Err(Error::InvalidArgument(
            "DTW operands must both be positions or both displacements".into(),
        ));
    }
    check_subset(subset, a.vertex_count())?;
    dtw_with_cost(a.frames(), b.frames(), |i, j| frame_cost(a.frame(i), b.frame(j), subset))
}

/// Mean over frames of the largest per-vertex distance in `lip_region`.
pub fn lip_sync(pred: &MeshSequence, gt: &MeshSequence, lip_region: &[usize]) -> Result<f64> {
    check_pair(pred, gt)?;
    check_subset(lip_region, pred.vertex_count())?;
    let sum: f64 = (0..pred.frames())
        .map(|t| {
            lip_region
                .iter()
                .map(|&i| vertex_dist(pred.frame(t), gt.frame(t), i))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(sum / pred.frames().max(1) as f64)
}

/// Mean absolute lip-distance error at the given frames. Both sequences are
/// taken as positions after adding the template where needed.
pub fn closure_error(pred: &MeshSequence, gt: &MeshSequence, tmpl: &TemplateMesh, frames: &[usize]) -> Result<f64> {
    let (p, g) = (pred.to_positions(tmpl)?, gt.to_positions(tmpl)?);
    check_pair(&p, &g)?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no closure frames to score".into()));
    }
    let mut sum = 0.0;
    for &t in frames {
        if t >= p.frames() {
            return Err(Error::Length(format!("closure frame {t} beyond {} frames", p.frames())));
        }
        sum += (lip_distance(p.frame(t), tmpl.lips())? - lip_distance(g.frame(t), tmpl.lips())?).abs();
    }
    Ok(sum / frames.len() as f64)
}

/// Ratio of summed displacement magnitudes of the `left` vertices over the
/// `right` vertices (displacements only).
pub fn side_amplitude_ratio(d: &MeshSequence, left: &[usize], right: &[usize]) -> Result<f64> {
    if !d.is_displacement() {
        return Err(Error::InvalidArgument("amplitude ratio needs displacements".into()));
    }
    check_subset(left, d.vertex_count())?;
    check_subset(right, d.vertex_count())?;
    let amp = |set: &[usize]| -> f64 {
        (0..d.frames())
            .map(|t| {
                set.iter()
                    .map(|&i| {
                        let v = d.vertex(t, i);
                        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
                    })
                    .sum::<f64>()
            })
            .sum()
    };
    let r = amp(right);
    if r == 0.0 {
        return Err(Error::InvalidArgument("right-side amplitude is zero".into()));
    }
    Ok(amp(left) / r)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub l2_face: f64,
    pub l2_lip: f64,
    pub f_dtw: f64,
    pub lip_dtw: f64,
    pub lip_sync: f64,
    pub sequences: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "l2_face,l2_lip,f_dtw,lip_dtw,lip_sync,sequences";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.l2_face, self.l2_lip, self.f_dtw, self.lip_dtw, self.lip_sync, self.sequences
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>12}", "metric", "value");
        for (name, v) in [
            ("L2_face", self.l2_face),
            ("L2_lip", self.l2_lip),
            ("F-DTW", self.f_dtw),
            ("Lip-DTW", self.lip_dtw),
            ("Lip-sync", self.lip_sync),
        ] {
            let _ = writeln!(s, "{name:<10} {v:>12.6}");
        }
        let _ = writeln!(s, "{:<10} {:>12}", "sequences", self.sequences);
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// All five metrics for one pair.
pub fn sequence_metrics(pred: &MeshSequence, gt: &MeshSequence, tmpl: &TemplateMesh) -> Result<MetricReport> {
    let (p, g) = (pred.to_positions(tmpl)?, gt.to_positions(tmpl)?);
    check_pair(&p, &g)?;
    let all: Vec<usize> = (0..p.vertex_count()).collect();
    let lips = tmpl.lip_region();
    Ok(MetricReport {
        l2_face: metric_l2(&p, &g, &all)?,
        l2_lip: metric_l2(&p, &g, lips)?,
        f_dtw: dtw_distance(&p, &g, &all)?,
        lip_dtw: dtw_distance(&p, &g, lips)?,
        lip_sync: lip_sync(&p, &g, lips)?,
        sequences: 1,
    })
}

/// Per-sequence metrics averaged over the pairs.
pub fn evaluate(
    preds: &[MeshSequence],
    gts: &[MeshSequence],
    templates: &[&TemplateMesh],
    exec: Exec,
) -> Result<MetricReport> {
    if preds.len() != gts.len() || preds.len() != templates.len() {
        return Err(Error::InvalidArgument(format!(
            "pairing mismatch: {} predictions, {} references, {} templates",
            preds.len(),
            gts.len(),
            templates.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let idx: Vec<usize> = (0..preds.len()).collect();
    let rows = exec.try_map(&idx, |&i| sequence_metrics(&preds[i], &gts[i], templates[i]))?;
    let n = rows.len() as f64;
    let mut r = MetricReport {
        sequences: rows.len(),
        ..Default::default()
    };
    for m in &rows {
        r.l2_face += m.l2_face / n;
        r.l2_lip += m.l2_lip / n;
        r.f_dtw += m.f_dtw / n;
        r.lip_dtw += m.lip_dtw / n;
        r.lip_sync += m.lip_sync / n;
    }
    if rows.len() == 1 {
        r = rows[0];
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::LipMetadata;

    fn seq(v: usize, data: Vec<f64>) -> MeshSequence {
        MeshSequence::new(v, 30.0, false, data).unwrap()
    }

    fn scalar_seq(xs: &[f64]) -> MeshSequence {
        seq(1, xs.iter().flat_map(|x| [*x, 0.0, 0.0]).collect())
    }

    #[test]
    fn l2_examples() {
        let a = seq(2, vec![0.0; 6]);
        assert_eq!(metric_l2(&a, &a, &[0, 1]).unwrap(), 0.0);
        let b = seq(2, vec![1., 0., 0., 0., 0., 0.]);
        assert_eq!(metric_l2(&b, &a, &[0, 1]).unwrap(), 0.5);
        let e = seq(2, vec![0., 3., 4., 0., 0., 5.]);
        assert_eq!(metric_l2(&e, &a, &[0, 1]).unwrap(), 5.0);
        assert!(metric_l2(&e, &a, &[]).is_err());
    }

    #[test]
    fn dtw_examples() {
        let a = scalar_seq(&[0., 1., 3., 2.]);
        assert_eq!(dtw_distance(&a, &a, &[0]).unwrap(), 0.0);
        assert_eq!(dtw_distance(&scalar_seq(&[0., 1.]), &scalar_seq(&[0., 0., 1.]), &[0]).unwrap(), 0.0);
        let b = scalar_seq(&[1., 1., 2.]);
        assert_eq!(dtw_distance(&a, &b, &[0]).unwrap(), dtw_distance(&b, &a, &[0]).unwrap());
        // [0, 2] vs [1]: both frames must match the single frame
        assert_eq!(dtw_distance(&scalar_seq(&[0., 2.]), &scalar_seq(&[1.]), &[0]).unwrap(), 1.0);
        assert!(dtw_with_cost(0, 3, |_, _| 0.0).is_err());
    }

    #[test]
    fn dtw_prefers_shorter_of_equal_cost_paths() {
        // all-zero cost: the diagonal (length 3) wins over longer staircases
        assert_eq!(dtw_with_cost(3, 3, |_, _| 0.0).unwrap(), 0.0);
        // cost 1 everywhere: total is minimised by the diagonal, 3/3
        assert_eq!(dtw_with_cost(3, 3, |_, _| 1.0).unwrap(), 1.0);
    }

    #[test]
    fn lip_sync_examples() {
        let gt = seq(2, vec![0.0; 18]);
        assert_eq!(lip_sync(&gt, &gt, &[0, 1]).unwrap(), 0.0);
        let mut p = vec![0.0; 18];
        p[6 + 2] = 3.0;
        assert_eq!(lip_sync(&seq(2, p), &gt, &[0, 1]).unwrap(), 1.0);
        let u = seq(2, (0..6).flat_map(|_| [0.0, 2.0, 0.0]).collect());
        assert_eq!(lip_sync(&u, &gt, &[0, 1]).unwrap(), 2.0);
    }

    #[test]
    fn evaluate_aggregates_and_scales() {
        let lips = LipMetadata {
            lip_upper: vec![0],
            lip_lower: vec![1],
            lip_region: vec![0, 1],
        };
        let tmpl = TemplateMesh::new(vec![0.0; 9], lips).unwrap();
        let gt = seq(3, (0..18).map(|i| (i as f64).sin()).collect());
        let zero = evaluate(std::slice::from_ref(&gt), std::slice::from_ref(&gt), &[&tmpl], Exec::Sequential).unwrap();
        assert_eq!(zero, MetricReport { sequences: 1, ..Default::default() });

        let err: Vec<f64> = (0..18).map(|i| (i as f64 * 0.3).cos()).collect();
        let p1 = seq(3, gt.data().iter().zip(&err).map(|(a, e)| a + e).collect());
        let p2 = seq(3, gt.data().iter().zip(&err).map(|(a, e)| a + 2.0 * e).collect());
        let r1 = evaluate(std::slice::from_ref(&p1), std::slice::from_ref(&gt), &[&tmpl], Exec::Sequential).unwrap();
        let r2 = evaluate(&[p2], std::slice::from_ref(&gt), &[&tmpl], Exec::Sequential).unwrap();
        assert!((r2.l2_face - 2.0 * r1.l2_face).abs() < 1e-12);
        assert!((r2.l2_lip - 2.0 * r1.l2_lip).abs() < 1e-12);
        assert_eq!(r1, sequence_metrics(&p1, &gt, &tmpl).unwrap());

        let both = evaluate(&[p1.clone(), gt.clone()], &[gt.clone(), gt.clone()], &[&tmpl, &tmpl], Exec::Parallel).unwrap();
        assert!((both.l2_face - r1.l2_face / 2.0).abs() < 1e-12);
        assert_eq!(both.sequences, 2);
        assert!(evaluate(&[p1], &[], &[&tmpl], Exec::Sequential).is_err());

        let csv = r1.to_csv();
        assert!(csv.starts_with(MetricReport::CSV_HEADER));
        assert!(r1.table().contains("Lip-sync"));
    }

    #[test]
    fn ratio_and_closure_error() {
        let d = MeshSequence::new(2, 30.0, true, vec![2., 0., 0., 1., 0., 0.]).unwrap();
        assert_eq!(side_amplitude_ratio(&d, &[0], &[1]).unwrap(), 2.0);
        let lips = LipMetadata {
            lip_upper: vec![0],
            lip_lower: vec![1],
            lip_region: vec![0, 1],
        };
        let tmpl = TemplateMesh::new(vec![0., 1., 0., 0., -1., 0.], lips).unwrap();
        let gt = MeshSequence::new(2, 30.0, true, vec![0., -1., 0., 0., 1., 0.]).unwrap();
        let pred = MeshSequence::new(2, 30.0, true, vec![0.0; 6]).unwrap();
        assert_eq!(closure_error(&pred, &gt, &tmpl, &[0]).unwrap(), 2.0);
        assert_eq!(closure_error(&gt, &gt, &tmpl, &[0]).unwrap(), 0.0);
    }
}
