use kansae::data::synth::GridSpec;
use kansae::data::{synth_generate, Gate, SynthConfig};
use kansae::matrix::norm2;

#[test]
fn firing_frequency_matches_p_active() {
    let mut cfg = SynthConfig::gated(40, 16, 20_000, 5);
    cfg.p_active = 0.05;
    let (_, truth) = synth_generate(&cfg).unwrap();
    let f = truth.activation_frequency();
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    // Binomial std of the pooled mean is ~3.4e-4.
    assert!((mean - 0.05).abs() < 2e-3, "mean frequency {mean}");
    for v in f {
        assert!((v - 0.05).abs() < 0.01);
    }
}

#[test]
fn dictionary_rows_are_unit_and_gates_follow_mix() {
    let cfg = SynthConfig::gated(64, 32, 100, 1);
    let (_, truth) = synth_generate(&cfg).unwrap();
    for i in 0..64 {
        assert!((norm2(truth.dictionary.row(i)) - 1.0).abs() < 1e-12);
    }
    let thr = truth
        .gates
        .iter()
        .filter(|g| matches!(g, Gate::Threshold { .. }))
        .count();
    let sat = truth
        .gates
        .iter()
        .filter(|g| matches!(g, Gate::Saturate { .. }))
        .count();
    assert_eq!((thr, sat), (32, 32));
    assert!((norm2(&truth.bias) - cfg.bias_scale).abs() < 1e-12);
}

#[test]
fn gates_shape_amplitudes() {
    assert_eq!(Gate::Threshold { theta: 0.5 }.apply(0.3), 0.0);
    assert_eq!(Gate::Threshold { theta: 0.5 }.apply(1.5), 1.0);
    assert_eq!(Gate::Saturate { s: 1.5 }.apply(4.0), 1.5);
    assert_eq!(Gate::Saturate { s: 1.5 }.apply(1.0), 1.0);
    assert_eq!(Gate::Both { theta: 0.5, s: 1.0 }.apply(9.0), 1.0);
    let (_, truth) = synth_generate(&SynthConfig::gated(20, 8, 3000, 2)).unwrap();
    for i in 0..truth.codes.n_rows {
        for (j, raw, alpha) in truth.codes.row(i) {
            assert_eq!(alpha, truth.gates[j].apply(raw));
        }
    }
}

#[test]
fn residual_is_the_planted_noise() {
    let mut cfg = SynthConfig::gated(20, 12, 20_000, 9);
    cfg.noise_sigma = 0.05;
    let (store, truth) = synth_generate(&cfg).unwrap();
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
    for i in 0..store.n() {
        let clean = truth.clean_row(i);
        for (x, c) in store.row(i).iter().zip(&clean) {
            let e = *x as f64 - c;
            s += e;
            s2 += e * e;
            n += 1.0;
        }
    }
    let sd = (s2 / n - (s / n).powi(2)).sqrt();
    assert!((sd - 0.05).abs() < 0.05 * 0.02, "noise sd {sd}");
    assert!((s / n).abs() < 1e-3);

    cfg.noise_sigma = 0.0;
    let (store, truth) = synth_generate(&cfg).unwrap();
    for i in (0..store.n()).step_by(97) {
        for (x, c) in store.row(i).iter().zip(truth.clean_row(i)) {
            assert_eq!(*x, c as f32);
        }
    }
}

#[test]
fn generation_is_seed_deterministic() {
    let mut cfg = SynthConfig::gated(10, 6, 600, 4);
    cfg.grid = Some(GridSpec {
        h: 3,
        w: 4,
        lat0: 0.0,
        dlat: 5.0,
        lon0: 0.0,
        dlon: 5.0,
    });
    let (a, ta) = synth_generate(&cfg).unwrap();
    let (b, tb) = synth_generate(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    assert_eq!(a.meta().unwrap().n_days, 50);
    cfg.seed = 5;
    assert_ne!(synth_generate(&cfg).unwrap().0, a);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = SynthConfig::gated(10, 6, 600, 4);
    cfg.p_active = 1.5;
    assert!(cfg.validate().is_err());
    let mut cfg = SynthConfig::gated(10, 6, 601, 4);
    cfg.grid = Some(GridSpec {
        h: 3,
        w: 4,
        lat0: 0.0,
        dlat: 5.0,
        lon0: 0.0,
        dlon: 5.0,
    });
    assert!(cfg.validate().is_err());
}
