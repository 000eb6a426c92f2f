use approx::assert_relative_eq;
use fxlv_core::io;
use fxlv_core::mc::StateSample;
use fxlv_core::rates::b_factor;
use fxlv_core::surfaces::{black_scholes_call, implied_vol};
use fxlv_core::{
    calibrate_dupire, conditional_gamma2, BinnedOptions, CalibrationGrid, CallPriceSurface, Correlation3, Currency,
    GammaSpec, HullWhite, ImpliedVolSurface, LocalVolGrid, PiecewiseConstant, SampleSet, TimeInterp, YieldCurve,
};
use proptest::prelude::*;

fn increasing(len: std::ops::Range<usize>, lo: f64, step: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.1f64..1.0, len).prop_map(move |gaps| {
        let mut x = lo;
        gaps.into_iter()
            .map(|g| {
                x += g * step;
                x
            })
            .collect()
    })
}

fn curve() -> impl Strategy<Value = YieldCurve> {
    (increasing(2..8, 0.0, 3.0), prop::collection::vec(-0.01f64..0.06, 8))
        .prop_map(|(t, r)| YieldCurve::new(t.clone(), r[..t.len()].to_vec()).unwrap())
}

proptest! {
    #[test]
    fn b_factor_is_increasing_concave_and_bounded(alpha in 0.001f64..2.0, t in 0.0f64..5.0, a in 0.0f64..10.0, d in 0.01f64..5.0) {
        let b1 = b_factor(alpha, t, t + a).unwrap();
        let b2 = b_factor(alpha, t, t + a + d).unwrap();
        let b3 = b_factor(alpha, t, t + a + 2.0 * d).unwrap();
        prop_assert!(b2 > b1);
        prop_assert!(b3 - b2 <= b2 - b1 + 1e-15);
        prop_assert!(b2 <= a + d + 1e-15);
        prop_assert!(b2 < 1.0 / alpha);
        prop_assert_eq!(b_factor(alpha, t, t).unwrap(), 0.0);
    }

    #[test]
    fn fitted_bonds_reprice_the_curve(c in curve(), alpha in 0.01f64..0.5, sigma in 0.0f64..0.02, t in 0.0f64..3.0, tau in 0.0f64..10.0, dr in -0.02f64..0.02) {
        let hw = HullWhite::fitted(alpha, PiecewiseConstant::constant(sigma), Currency::Domestic, c.clone()).unwrap();
        let m = t + tau;
        assert_relative_eq!(hw.zero_coupon_bond(0.0, m, hw.phi(0.0)).unwrap(), c.discount_factor(m).unwrap(), max_relative = 1e-12);
        prop_assert!((hw.zero_coupon_bond(t, t, hw.phi(t) + dr).unwrap() - 1.0).abs() < 1e-14);
        let p0 = hw.zero_coupon_bond(t, m, hw.phi(t)).unwrap();
        let p1 = hw.zero_coupon_bond(t, m, hw.phi(t) + dr).unwrap();
        assert_relative_eq!(p1 / p0, (-hw.b(t, m) * dr).exp(), max_relative = 1e-12);
    }

    #[test]
    fn gamma_multipliers_match_their_closed_forms(nu in 0.0f64..4.0, dnu in 0.001f64..1.0) {
        prop_assert_eq!(GammaSpec::Identity.eval(nu), nu);
        assert_relative_eq!(GammaSpec::Sqrt.eval(nu).powi(2), nu, max_relative = 1e-14);
        prop_assert!(GammaSpec::ExpSqrt.eval(nu) >= 1.0);
        for g in [GammaSpec::Identity, GammaSpec::Sqrt, GammaSpec::ExpSqrt] {
            prop_assert!(g.eval(nu + dnu) > g.eval(nu));
        }
    }

    #[test]
    fn binned_estimate_is_a_weighted_average_within_the_bin(
        rows in prop::collection::vec((0.5f64..1.5, 0.0f64..2.0, 0.1f64..2.0), 20..200),
        k in 0.6f64..1.4,
        h in 0.05f64..0.5,
    ) {
        let samples = SampleSet {
            horizon: 1.0,
            samples: rows.iter().map(|&(spot, nu, _)| StateSample { spot, r_d: 0.0, r_f: 0.0, nu: Some(nu) }).collect(),
            paths_per_unit: 1,
            weights: Some(rows.iter().map(|r| r.2).collect()),
        };
        let options = BinnedOptions { bandwidth: Some(h), min_count: 1, max_widenings: 0 };
        let in_bin: Vec<_> = rows.iter().filter(|r| (r.0 - k).abs() <= 0.5 * h).collect();
        match conditional_gamma2(&samples, GammaSpec::Identity, &[k], &options) {
            Ok(est) => {
                let e = est[0];
                prop_assert_eq!(e.count, in_bin.len());
                let ws: f64 = in_bin.iter().map(|r| r.2).sum();
                let exact: f64 = in_bin.iter().map(|r| r.2 * r.1 * r.1).sum::<f64>() / ws;
                assert_relative_eq!(e.value, exact, max_relative = 1e-12);
                let lo = in_bin.iter().map(|r| r.1 * r.1).fold(f64::INFINITY, f64::min);
                let hi = in_bin.iter().map(|r| r.1 * r.1).fold(0.0, f64::max);
                prop_assert!(e.value >= lo * (1.0 - 1e-12) && e.value <= hi * (1.0 + 1e-12));
            }
            Err(_) => prop_assert!(in_bin.is_empty()),
        }
    }

    #[test]
    fn implied_vol_inverts_the_call_price(sigma in 0.03f64..1.0, k in 0.5f64..2.0, t in 0.05f64..10.0, rd in -0.01f64..0.08, rf in -0.01f64..0.08) {
        let price = black_scholes_call(1.0, k, rd, rf, sigma, t).unwrap();
        let vega_scale = (-rd * t).exp() * t.sqrt();
        prop_assume!(price > 1e-10 * vega_scale);
        let iv = implied_vol(price, 1.0, k, rd, rf, t).unwrap();
        prop_assert!((iv - sigma).abs() < 1e-6, "{} vs {}", iv, sigma);
    }

    #[test]
    fn grid_csv_round_trips_exactly(times in increasing(1..6, 0.0, 1.0), spots in increasing(2..10, 0.3, 0.2), seed in 0u64..1000, linear in any::<bool>()) {
        let interp = if linear { TimeInterp::Linear } else { TimeInterp::PiecewiseConstant };
        let grid = LocalVolGrid::from_fn(times, spots, |t, s| 0.1 + 0.01 * ((seed as f64 + t * 7.0 + s * 13.0).sin() + 1.0) / 3.0)
            .unwrap()
            .with_time_interp(interp);
        let mut buf = Vec::new();
        io::write_grid_csv(&mut buf, &grid).unwrap();
        let back = io::parse_grid_csv(buf.as_slice(), "memory", interp).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn correlation_factor_reproduces_the_matrix(a in -0.9f64..0.9, b in -0.9f64..0.9, c in -0.9f64..0.9) {
        let corr = Correlation3 { s_d: a, s_f: b, d_f: c };
        let m = corr.matrix();
        let det = 1.0 + 2.0 * a * b * c - a * a - b * b - c * c;
        match corr.cholesky() {
            Ok(l) => {
                for i in 0..3 {
                    for j in 0..3 {
                        let v: f64 = (0..3).map(|k| l[3 * i + k] * l[3 * j + k]).sum();
                        prop_assert!((v - m[3 * i + j]).abs() < 1e-10);
                    }
                }
            }
            Err(_) => prop_assert!(det < 1e-12),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flat_smile_dupire_grid_is_flat(vol in 0.05f64..0.6, rd in 0.0f64..0.06, rf in 0.0f64..0.06) {
        let market = CallPriceSurface::from_implied(ImpliedVolSurface::flat(1.0, vol).unwrap(), YieldCurve::flat(rd), YieldCurve::flat(rf));
        let grid = CalibrationGrid::new(vec![0.25, 1.0, 2.0], vec![0.8, 0.9, 1.0, 1.1, 1.25]).unwrap();
        let cal = calibrate_dupire(&market, &grid, 1e-4).unwrap();
        for d in &cal.diagnostics {
            prop_assert!((d.sigma - vol).abs() < 1e-6 * vol.max(0.2), "{:?}", d);
        }
    }
}
