//! Property tests for invariants that must hold on arbitrary inputs.

use facemotion::audio::{resample_linear, AudioEmbedding, FeatureSequence};
use facemotion::mesh::MeshSequence;
use facemotion::metrics::{dtw_distance, dtw_with_cost, lip_sync, metric_l2};
use facemotion::model::{init_params, ModelConfig};
use facemotion::motion::{motion_synthesis, StyleEmbedding};
use facemotion::numerics::{adam_step, softmax_rows, AdamConfig, AdamState, Matrix, ParamStore, Tensor};
use facemotion::supervision::{detect_closures, loss_total, loss_vel, ClosureWeights, LossWeights, Phoneme, PhonemeTiming};
use facemotion::viseme::{autoregressive_decode, VisemeSequence};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    -10.0..10.0f64
}

fn mesh(v: usize, t: usize) -> impl Strategy<Value = MeshSequence> {
    prop::collection::vec(finite(), v * t * 3).prop_map(move |d| MeshSequence::new(v, 30.0, true, d).unwrap())
}

fn pair(v: usize) -> impl Strategy<Value = (MeshSequence, MeshSequence)> {
    (1..6usize).prop_flat_map(move |t| (mesh(v, t), mesh(v, t)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1..5usize, cols in 1..7usize, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut s: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-50.0..50.0)).collect();
        for r in 0..rows {
            let keep = rng.gen_range(0..cols);
            for c in 0..cols {
                if c != keep && rng.gen_bool(0.3) {
                    s[r * cols + c] = f64::NEG_INFINITY;
                }
            }
        }
        let p = softmax_rows(&s, cols).unwrap();
        for r in 0..rows {
            let row = &p[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for c in 0..cols {
                if s[r * cols + c] == f64::NEG_INFINITY {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn tensors_reject_non_finite(n in 1..8usize, at in 0..8usize, bad in prop::sample::select(vec![f64::NAN, f64::INFINITY, f64::NEG_INFINITY])) {
        let mut v = vec![0.5; n];
        v[at % n] = bad;
        prop_assert!(Tensor::new(vec![n], v.clone()).is_err());
        prop_assert!(Matrix::new(1, n, v).is_err());
    }

    #[test]
    fn adam_is_deterministic(vals in prop::collection::vec(finite(), 1..10), grads in prop::collection::vec(finite(), 10)) {
        let n = vals.len();
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![n], vals).unwrap().with_requires_grad(true)).unwrap();
        p.get_mut("w").unwrap().accumulate_grad(&grads[..n]).unwrap();
        let mut q = p.clone();
        let mut s1 = AdamState::new(&p, AdamConfig::default());
        let mut s2 = AdamState::new(&q, AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut p, &mut s1).unwrap();
            adam_step(&mut q, &mut s2).unwrap();
        }
        prop_assert_eq!(p.fingerprint(&[]), q.fingerprint(&[]));
    }

    #[test]
    fn resampling_keeps_constants_and_lines(ta in 1..20usize, t in 1..40usize, c in finite(), slope in finite()) {
        let konst = FeatureSequence::new(Matrix::new(ta, 1, vec![c; ta]).unwrap(), 50.0).unwrap();
        prop_assert!(resample_linear(&konst, t).unwrap().data().iter().all(|v| *v == c));
        if ta > 1 && t > 1 {
            let line: Vec<f64> = (0..ta).map(|i| c + slope * i as f64).collect();
            let f = FeatureSequence::new(Matrix::new(ta, 1, line).unwrap(), 50.0).unwrap();
            let r = resample_linear(&f, t).unwrap();
            for k in 0..t {
                let x = k as f64 * (ta - 1) as f64 / (t - 1) as f64;
                prop_assert!((r.get(k, 0) - (c + slope * x)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn losses_vanish_on_ground_truth_and_ignore_offsets((a, b) in pair(3), offset in prop::collection::vec(finite(), 9)) {
        let w = ClosureWeights::new(vec![0.5; a.frames()]).unwrap();
        let lw = LossWeights::default();
        let same = loss_total(&a, &a, &w, &[0, 1], &lw).unwrap();
        prop_assert_eq!(same.total, 0.0);
        let d = loss_total(&a, &b, &w, &[0, 1], &lw).unwrap();
        prop_assert!(d.mse >= 0.0 && d.vel >= 0.0 && d.lip >= 0.0);
        let shifted: Vec<f64> = a.data().iter().enumerate().map(|(i, x)| x + offset[i % 9]).collect();
        let s = MeshSequence::new(3, 30.0, true, shifted).unwrap();
        let l0 = loss_vel(&a, &b).unwrap().value;
        let l1 = loss_vel(&s, &b).unwrap().value;
        prop_assert!((l0 - l1).abs() <= 1e-9 * (1.0 + l0));
    }

    #[test]
    fn closures_are_window_minima(curve in prop::collection::vec(0.0..5.0f64, 4..30), onsets in prop::collection::vec(0..40usize, 1..4), window in 1..6usize) {
        let mut entries = Vec::new();
        let mut at = 0usize;
        let mut sorted = onsets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        for &o in &sorted {
            if o > at {
                entries.push(Phoneme { label: "a".into(), start: at as f64 / 30.0, end: o as f64 / 30.0 });
            }
            entries.push(Phoneme { label: "m".into(), start: o as f64 / 30.0, end: (o + 1) as f64 / 30.0 });
            at = o + 1;
        }
        let timing = PhonemeTiming::new(entries).unwrap();
        let det = detect_closures(&curve, &timing, 30.0, window).unwrap();
        let valid: Vec<usize> = sorted.iter().copied().filter(|&o| o < curve.len()).collect();
        let mut expected: Vec<usize> = valid
            .iter()
            .map(|&o| {
                let lo = o.saturating_sub(window);
                let min = curve[lo..=o].iter().cloned().fold(f64::INFINITY, f64::min);
                (lo..=o).find(|&t| curve[t] == min).unwrap()
            })
            .collect();
        expected.sort_unstable();
        expected.dedup();
        prop_assert_eq!(&det.frames, &expected);
        for &f in &det.frames {
            prop_assert!(valid.iter().any(|&o| f <= o && f + window >= o));
        }
        prop_assert_eq!(det.skipped.len(), sorted.len() - valid.len());
    }

    #[test]
    fn metrics_are_zero_exactly_on_identity((a, b) in pair(4)) {
        let all = [0, 1, 2, 3];
        prop_assert_eq!(metric_l2(&a, &a, &all).unwrap(), 0.0);
        prop_assert_eq!(dtw_distance(&a, &a, &all).unwrap(), 0.0);
        prop_assert_eq!(lip_sync(&a, &a, &all).unwrap(), 0.0);
        if a != b {
            prop_assert!(metric_l2(&a, &b, &all).unwrap() > 0.0);
            prop_assert!(lip_sync(&a, &b, &all).unwrap() > 0.0);
        }
    }

    #[test]
    fn dtw_never_exceeds_the_diagonal((a, b) in pair(2)) {
        let sub = [0, 1];
        prop_assert!(dtw_distance(&a, &b, &sub).unwrap() <= metric_l2(&a, &b, &sub).unwrap() + 1e-12);
    }

    #[test]
    fn metrics_ignore_vertex_order_within_subset((a, b) in pair(4), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let sub = [0, 1, 2, 3];
        let l1 = metric_l2(&a, &b, &sub).unwrap();
        let l2 = metric_l2(&a, &b, &perm).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-12);
        let d1 = dtw_distance(&a, &b, &sub).unwrap();
        let d2 = dtw_distance(&a, &b, &perm).unwrap();
        prop_assert!((d1 - d2).abs() < 1e-12);
        prop_assert!((lip_sync(&a, &b, &sub).unwrap() - lip_sync(&a, &b, &perm).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dtw_of_scalars_matches_symmetric_swap(x in prop::collection::vec(finite(), 1..7), y in prop::collection::vec(finite(), 1..7)) {
        let d1 = dtw_with_cost(x.len(), y.len(), |i, j| (x[i] - y[j]).abs()).unwrap();
        let d2 = dtw_with_cost(y.len(), x.len(), |i, j| (y[i] - x[j]).abs()).unwrap();
        prop_assert!((d1 - d2).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn decoding_is_causal(t in 2..6usize, cut in 0..5usize, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let cut = cut % (t - 1);
        let cfg = ModelConfig::new(4, 3).with_layers(1);
        let p = init_params(&cfg, seed).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..t * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut b = a.clone();
        for v in &mut b[(cut + 1) * 64..] {
            *v += rng.gen_range(0.5..2.0);
        }
        let ea = AudioEmbedding::new(Matrix::new(t, 64, a).unwrap(), 30.0).unwrap();
        let eb = AudioEmbedding::new(Matrix::new(t, 64, b).unwrap(), 30.0).unwrap();
        let va = autoregressive_decode(&ea, &p, &cfg.decoder).unwrap();
        let vb = autoregressive_decode(&eb, &p, &cfg.decoder).unwrap();
        prop_assert_eq!(&va.frames().data()[..(cut + 1) * 64], &vb.frames().data()[..(cut + 1) * 64]);
        prop_assert!(va.frames().data()[(cut + 1) * 64..] != vb.frames().data()[(cut + 1) * 64..]);
        let again = autoregressive_decode(&ea, &p, &cfg.decoder).unwrap();
        prop_assert_eq!(va, again);
    }

    #[test]
    fn motion_is_framewise(t in 1..8usize, seed in any::<u64>(), perm_seed in any::<u64>()) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let cfg = ModelConfig::new(4, 5).with_layers(1);
        let p = init_params(&cfg, seed).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
        let v: Vec<f64> = (0..t * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = StyleEmbedding::new((0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut rng);
        let permuted: Vec<f64> = order.iter().flat_map(|&i| v[i * 64..(i + 1) * 64].to_vec()).collect();
        let y = motion_synthesis(&VisemeSequence::new(Matrix::new(t, 64, v).unwrap()).unwrap(), &s, &p, 0.01, 30.0).unwrap();
        let yp = motion_synthesis(&VisemeSequence::new(Matrix::new(t, 64, permuted).unwrap()).unwrap(), &s, &p, 0.01, 30.0).unwrap();
        for (k, &i) in order.iter().enumerate() {
            prop_assert_eq!(yp.frame(k), y.frame(i));
        }
    }
}
