use ctxdbn_core::features::{
    detection_probability, featurize_frame, quantize, train_adaboost, train_stump, DecisionStump,
    Sample, StumpEnsemble, Target,
};
use ctxdbn_core::{Environment, Error, MotionState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every midpoint of every feature, both polarities, errors computed from
/// scratch; first candidate within 1e-12 of the minimum in
/// (feature, threshold, +1 before -1) order.
fn brute_force_stump(x: &[Vec<f64>], y: &[i8], w: &[f64]) -> (usize, f64, i8, f64) {
    let total: f64 = w.iter().sum();
    let mut cands = Vec::new();
    for f in 0..x[0].len() {
        let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for pair in vals.windows(2) {
            let t = 0.5 * (pair[0] + pair[1]);
            for pol in [1i8, -1] {
                let err: f64 = (0..x.len())
                    .filter(|&i| {
                        let pred = if x[i][f] > t { pol } else { -pol };
                        pred != y[i]
                    })
                    .map(|i| w[i])
                    .sum::<f64>()
                    / total;
                cands.push((f, t, pol, err));
            }
        }
    }
    let min = cands.iter().map(|c| c.3).fold(f64::INFINITY, f64::min);
    *cands.iter().find(|c| c.3 <= min + 1e-12).unwrap()
}

fn as_samples<'a>(x: &'a [Vec<f64>], y: &[i8], w: &[f64]) -> Vec<Sample<'a>> {
    x.iter()
        .zip(y)
        .zip(w)
        .map(|((x, &label), &weight)| Sample { x, label, weight })
        .collect()
}

#[test]
fn stump_matches_brute_force() {
    let mut checked = 0;
    for seed in 0..300u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..8)
            .map(|_| vec![rng.gen_range(0..6) as f64, rng.gen_range(-1.0..1.0)])
            .collect();
        let y: Vec<i8> = (0..8).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
        let w: Vec<f64> = if seed % 2 == 0 {
            vec![0.125; 8]
        } else {
            (0..8).map(|_| rng.gen_range(0.01..1.0)).collect()
        };
        if !(y.contains(&1) && y.contains(&-1)) {
            continue;
        }
        let oracle = brute_force_stump(&x, &y, &w);
        match train_stump(&as_samples(&x, &y, &w)) {
            Ok((s, err)) => {
                assert_eq!(
                    (s.feature_index, s.threshold, s.polarity),
                    (oracle.0, oracle.1, oracle.2),
                    "seed {seed}"
                );
                assert!((err - oracle.3).abs() < 1e-12);
                checked += 1;
            }
            Err(Error::BoostingStall(e)) => assert!(oracle.3 >= 0.5 - 1e-12 && e >= 0.5 - 1e-12),
            Err(e) => panic!("seed {seed}: {e}"),
        }
    }
    assert!(checked > 200);
}

#[test]
fn noisy_point_costs_one_sample() {
    let x: Vec<Vec<f64>> = (0..8).map(|v| vec![v as f64]).collect();
    let y = [-1, -1, -1, 1, -1, 1, 1, 1];
    let (s, err) = train_stump(&as_samples(&x, &y, &[0.125; 8])).unwrap();
    assert_eq!((s.threshold, s.polarity), (2.5, 1));
    assert_eq!(err, 0.125);
}

fn xor_data() -> (Vec<Vec<f64>>, Vec<i8>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    // unequal cluster sizes so the quadrants are not all equally costly
    let clusters = [(0.0, 0.0, -1, 10), (1.0, 1.0, -1, 3), (0.0, 1.0, 1, 6), (1.0, 0.0, 1, 8)];
    for (cx, cy, label, n) in clusters {
        for j in 0..n {
            let d = 0.01 * j as f64;
            x.push(vec![cx + d, cy - d]);
            y.push(label);
        }
    }
    (x, y)
}

fn training_error(e: &StumpEnsemble, x: &[Vec<f64>], y: &[i8]) -> f64 {
    x.iter().zip(y).filter(|(r, &l)| e.predict(r).unwrap() != l).count() as f64 / x.len() as f64
}

#[test]
fn boosting_beats_one_stump_on_xor() {
    let (x, y) = xor_data();
    let t = Target::State(MotionState::Walking);
    let one = train_adaboost(&x, &y, 1, t).unwrap();
    let many = train_adaboost(&x, &y, 10, t).unwrap();
    assert!(many.stumps.len() > 1);
    assert!(training_error(&many, &x, &y) < training_error(&one, &x, &y));
}

/// The exponential-loss bound prod(2 sqrt(e_t (1 - e_t))) never increases
/// with rounds and bounds the training error.
#[test]
fn training_error_stays_under_exp_loss_bound() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<i8> = x
            .iter()
            .map(|r| {
                let s = r[0] * r[1] + 0.3 * r[2] + rng.gen_range(-0.2..0.2);
                if s > 0.0 {
                    1
                } else {
                    -1
                }
            })
            .collect();
        let mut prev_bound = 1.0;
        for rounds in 1..=15 {
            let e = train_adaboost(&x, &y, rounds, Target::Env(Environment::Outdoors)).unwrap();
            let bound: f64 = e
                .stumps
                .iter()
                .map(|s| {
                    let eps = 1.0 / (1.0 + (2.0 * s.weight).exp());
                    2.0 * (eps * (1.0 - eps)).sqrt()
                })
                .product();
            assert!(bound <= prev_bound + 1e-12);
            assert!(training_error(&e, &x, &y) <= bound + 1e-12, "seed {seed} rounds {rounds}");
            prev_bound = bound;
        }
    }
}

#[test]
fn perfect_stump_stops_early() {
    let x: Vec<Vec<f64>> = (0..6).map(|v| vec![v as f64]).collect();
    let y = [-1, -1, -1, 1, 1, 1];
    let e = train_adaboost(&x, &y, 50, Target::Env(Environment::Indoors)).unwrap();
    assert_eq!(e.stumps.len(), 1);
    assert!(e.stumps[0].weight.is_finite() && e.stumps[0].weight > 0.0);
}

#[test]
fn quantize_sweep_matches_integer_binning() {
    for bins in [1usize, 2, 3, 7, 10] {
        for i in 0..=1000usize {
            let p = i as f64 / 1000.0;
            let expected = ((i * bins) / 1000 + 1).min(bins);
            assert_eq!(quantize(p, bins).unwrap() as usize, expected, "p {p} bins {bins}");
        }
    }
}

fn constant_ensemble(target: Target, threshold: f64) -> StumpEnsemble {
    StumpEnsemble {
        target,
        stumps: vec![DecisionStump {
            feature_index: 0,
            threshold,
            polarity: 1,
            weight: 1.0,
        }],
        sigmoid_scale: 1.0,
        feature_scales: vec![1.0],
    }
}

#[test]
fn frame_bins_follow_each_ensemble() {
    let thresholds = [-3.0, -1.0, 0.0, 1.0, 3.0, 0.5, -0.5, 10.0];
    let bank: Vec<StumpEnsemble> = Target::all()
        .into_iter()
        .zip(thresholds)
        .map(|(t, thr)| constant_ensemble(t, thr))
        .collect();
    let x = [0.0];
    let obs = featurize_frame(&bank, &x).unwrap();
    let bins: Vec<u8> = obs.state_bins.iter().chain(&obs.env_bins).copied().collect();
    for (e, &b) in bank.iter().zip(&bins) {
        let p = detection_probability(e, &x).unwrap();
        assert_eq!(b, quantize(p, 10).unwrap());
    }
    assert_eq!(bins[2], 6);
    assert_eq!(bins[7], 1);

    let mut swapped = bank.clone();
    swapped.swap(0, 1);
    assert!(featurize_frame(&swapped, &x).is_err());
    assert!(featurize_frame(&bank[..7], &x).is_err());
}
