//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Check at most this many coordinates per tensor (sampled with `seed`).
    /// `None` checks every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Max relative error between analytic and central-difference gradients
/// over every trainable coordinate.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var> + Sync,
{
    let opts = GradCheckOptions {
        h,
        ..GradCheckOptions::default()
    };
    finite_diff_check_with(f, params, opts).map(|r| r.max_rel_error)
}

pub fn finite_diff_check_with<F>(f: F, params: &ParamStore, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var> + Sync,
{
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.h
        )));
    }
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let first = g.scalar(out);
    let grads = g.backward(out)?;
    drop(g);
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords: Vec<(String, usize, f64)> = Vec::new();
    for name in params.trainable_names() {
        let n = params.get(&name).map_or(0, |t| t.len());
        let analytic = grads.get(&name).unwrap_or_default();
        let idx: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in idx {
            let a = analytic.get(i).copied().unwrap_or(0.0);
            coords.push((name.clone(), i, a));
        }
    }

    let h = opts.h;
    let errors = opts.exec.try_map(&coords, |(name, i, analytic)| -> Result<f64> {
        let mut p = params.clone();
        let base = p.get(name).expect("trainable name").values()[*i];
        let mut perturbed = |delta: f64| -> Result<f64> {
            let t = p.get_mut(name).expect("trainable name");
            let mut vals = t.values().to_vec();
            vals[*i] = base + delta;
            t.set_values(&vals)?;
            eval(&p)
        };
        let plus = perturbed(h)?;
        let minus = perturbed(-h)?;
        let numeric = (plus - minus) / (2.0 * h);
        Ok((analytic - numeric).abs() / numeric.abs().max(1.0))
    })?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        coords_checked: coords.len(),
    };
    for ((name, i, _), e) in coords.iter().zip(errors) {
        if e > report.max_rel_error || report.worst_param.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst_param = Some(name.clone());
            report.worst_index = *i;
        }
    }
    Ok(report)
}
