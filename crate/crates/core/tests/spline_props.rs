use kansae::spline::{
    alive_set, basis_deriv, basis_eval, build_knots, fit_tau, shape_profile, KnotVector,
    ShapeClass, SplineBank,
};
use kansae::Matrix;
use proptest::prelude::*;

fn knots() -> impl Strategy<Value = (f64, f64, usize, usize)> {
    (-50.0..50.0f64, 0.05..40.0f64, 1usize..=5)
        .prop_flat_map(|(lo, w, p)| (Just(lo), Just(lo + w), (p + 1)..(p + 12), Just(p)))
}

/// Interior knots drawn at random rather than uniformly spaced.
fn irregular_knots() -> impl Strategy<Value = KnotVector> {
    (1usize..=4, prop::collection::vec(0.01..1.0f64, 1..8)).prop_map(|(p, gaps)| {
        let mut ks = vec![0.0; p + 1];
        let mut t = 0.0;
        for g in &gaps {
            t += g;
            ks.push(t);
        }
        let hi = *ks.last().unwrap();
        ks.extend(std::iter::repeat_n(hi, p));
        KnotVector::from_knots(p, ks).unwrap()
    })
}

proptest! {
    #[test]
    fn partition_of_unity((lo, hi, k, p) in knots(), u in -0.2..1.2f64) {
        let kv = build_knots(lo, hi, k, p).unwrap();
        let (_, b) = basis_eval(&kv, lo + u * (hi - lo));
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(b.iter().all(|&v| v >= -1e-15));
    }

    #[test]
    fn irregular_partition_and_support(kv in irregular_knots(), u in 0.0..1.0f64) {
        let t = kv.lo() + u * (kv.hi() - kv.lo());
        let (span, b) = basis_eval(&kv, t);
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = kv.degree();
        for (i, &v) in b.iter().enumerate() {
            if i + p < span || i > span {
                prop_assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn derivative_matches_central_differences((lo, hi, k, p) in knots(), u in 0.02..0.98f64) {
        prop_assume!(p >= 2);
        let kv = build_knots(lo, hi, k, p).unwrap();
        let t = lo + u * (hi - lo);
        let step = 1e-6 * (hi - lo);
        // Keep both probes inside one knot span so the difference is smooth.
        prop_assume!(kv.find_span(t - step) == kv.find_span(t + step));
        let d = basis_deriv(&kv, t);
        let (_, up) = basis_eval(&kv, t + step);
        let (_, dn) = basis_eval(&kv, t - step);
        for i in 0..kv.n_basis() {
            let fd = (up[i] - dn[i]) / (2.0 * step);
            let scale = d[i].abs().max(fd.abs()).max(1.0 / (hi - lo));
            prop_assert!((d[i] - fd).abs() / scale < 1e-6, "i={i} d={} fd={fd}", d[i]);
        }
    }

    #[test]
    fn greville_ordinates_reproduce_lines((lo, hi, k, p) in knots(), a in -3.0..3.0f64, b in -3.0..3.0f64, u in 0.0..1.0f64) {
        let kv = build_knots(lo, hi, k, p).unwrap();
        let coeffs: Vec<f64> = kv.greville().iter().map(|g| a * g + b).collect();
        let bank = SplineBank::new(vec![kv], Matrix::from_vec(1, k, coeffs).unwrap()).unwrap();
        let t = lo + u * (hi - lo);
        let (v, dv, _) = bank.eval(0, t);
        let scale = 1.0 + (a * t).abs() + b.abs();
        prop_assert!((v - (a * t + b)).abs() < 1e-9 * scale);
        prop_assert!((dv - a).abs() < 1e-7 * (1.0 + a.abs()));
    }

    #[test]
    fn constant_outside_span(c in prop::collection::vec(-2.0..2.0f64, 9), far in 0.0..100.0f64) {
        let kv = build_knots(-1.0, 2.0, 9, 3).unwrap();
        let bank = SplineBank::new(vec![kv], Matrix::from_vec(1, 9, c.clone()).unwrap()).unwrap();
        let (lo, dlo, _) = bank.eval(0, -1.0 - far);
        let (hi, dhi, _) = bank.eval(0, 2.0 + far);
        prop_assert_eq!(lo, c[0]);
        prop_assert_eq!(hi, c[8]);
        if far > 0.0 {
            prop_assert_eq!((dlo, dhi), (0.0, 0.0));
        }
    }

    #[test]
    fn alive_set_shrinks_as_tau_grows(c in prop::collection::vec(-3.0..3.0f64, 8 * 9), t1 in 0.0..3.0f64, dt in 0.0..2.0f64) {
        let kv = build_knots(0.0, 1.0, 9, 3).unwrap();
        let bank = SplineBank::new(vec![kv; 8], Matrix::from_vec(8, 9, c).unwrap()).unwrap();
        let a = alive_set(&bank, t1);
        let b = alive_set(&bank, t1 + dt);
        prop_assert!(b.iter().all(|j| a.contains(j)));
    }
}

#[test]
fn otsu_separates_two_clusters() {
    let mut v: Vec<f64> = (0..30).map(|i| 0.01 * i as f64).collect();
    v.extend((0..10).map(|i| 2.0 + 0.05 * i as f64));
    let t = fit_tau(&v).unwrap();
    assert!(t > 0.29 && t < 2.0, "tau = {t}");
    assert!(fit_tau(&[1.0, 1.0, 1.0]).is_err());
}

#[test]
fn shape_classes() {
    let kv = build_knots(-1.0, 1.0, 9, 3).unwrap();
    let g = kv.greville();
    let rows = [
        g.iter().map(|t| t * t).collect::<Vec<_>>(),
        g.iter().map(|t| -t * t).collect(),
        g.iter().map(|t| 0.5 * t - 1.0).collect(),
    ];
    let data: Vec<f64> = rows.concat();
    let bank = SplineBank::new(vec![kv; 3], Matrix::from_vec(3, 9, data).unwrap()).unwrap();
    assert_eq!(
        shape_profile(&bank, 0, 101).unwrap().shape_class,
        ShapeClass::Convex
    );
    assert_eq!(
        shape_profile(&bank, 1, 101).unwrap().shape_class,
        ShapeClass::Concave
    );
    let lin = shape_profile(&bank, 2, 101).unwrap();
    assert_eq!(lin.shape_class, ShapeClass::NearLinear);
    assert!(lin.nonlinearity_score < 1e-12);
}
