use proptest::prelude::*;

use lawforge::extract::{prune_theta, to_expression};
use lawforge::field::{ddx, l2_spacetime, sample, Grid};
use lawforge::measure::{analyze_reduced, MeasurementRecord, ReducedOperator};
use lawforge::ratfunc::{project_denominator, MonomialBasis};
use lawforge::symnet::{default_parfam_spec, forward, ParameterVector};

fn raw_vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_normalized_positive_and_idempotent(
        n in 1usize..4, d in 0usize..4, seed in raw_vector(35), eps in 1e-6f64..0.5
    ) {
        let basis = MonomialBasis::new(n, d).unwrap();
        let raw = &seed[..basis.len()];
        let den = project_denominator(raw, &basis, eps).unwrap();
        let b = den.coeffs();
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-12);
        prop_assert!(b[0] >= eps * (1.0 - 1e-12));
        for (j, c) in b.iter().enumerate() {
            prop_assert!(*c >= 0.0);
            if !basis.is_even(j) {
                prop_assert_eq!(*c, 0.0);
            }
        }
        let again = project_denominator(b, &basis, eps).unwrap();
        for (a, c) in again.coeffs().iter().zip(b) {
            prop_assert!((a - c).abs() <= 1e-14);
        }
    }

    #[test]
    fn pruning_is_monotone_and_canonical(seed in raw_vector(82), t1 in 0.0f64..0.5, t2 in 0.0f64..0.5) {
        let spec = default_parfam_spec(2);
        let theta = ParameterVector(seed);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let e_lo = to_expression(&spec, &theta, lo).unwrap();
        let e_hi = to_expression(&spec, &theta, hi).unwrap();
        prop_assert!(e_hi.term_count() <= e_lo.term_count());
        let pruned = prune_theta(&spec, &theta, hi).unwrap();
        prop_assert_eq!(to_expression(&spec, &pruned, hi).unwrap().to_string(), e_hi.to_string());
    }

    #[test]
    fn expression_agrees_with_pruned_network(seed in raw_vector(82), thr in 0.0f64..0.2, u in -1.0f64..1.0, ux in -1.0f64..1.0) {
        let mut spec = default_parfam_spec(2);
        spec.input_scale = vec![2.0, 0.7];
        spec.output_scale = 1.5;
        let theta = ParameterVector(seed);
        let pruned = prune_theta(&spec, &theta, thr).unwrap();
        let want = forward(&spec, &pruned, &[u, ux]).unwrap();
        let got = to_expression(&spec, &theta, thr).unwrap().eval(u, ux);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn reduced_operator_bessel_and_adjoint(
        m in 1usize..30, a in -3.0f64..3.0, k in 0.0f64..4.0, r in raw_vector(30)
    ) {
        let grid = Grid::new(2.0, -1.0, 1.0, 20, 31).unwrap();
        let u = sample(&grid, |t, x| a * (k * x + t).sin() + x * t).unwrap();
        let rec = analyze_reduced(&u, m).unwrap();
        prop_assert!(rec.norm() <= l2_spacetime(&u) + 1e-9);

        let op = ReducedOperator::new(&grid, m, m.min(grid.n_x - 1)).unwrap();
        let len = op.n_cells() * op.n_modes();
        let v: Vec<f64> = (0..len).map(|i| r[i % r.len()] * (1.0 + i as f64 / len as f64)).collect();
        let ku = op.apply(&u).unwrap();
        // Plain Euclidean transpose on coefficient and grid-value arrays.
        let lhs: f64 = ku.coeffs().iter().zip(&v).map(|(x, y)| x * y).sum();
        let rhs: f64 = u.values().iter().zip(op.adjoint(&v).values()).map(|(x, y)| x * y).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (lhs.abs() + rhs.abs()).max(1.0), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn record_csv_round_trip(m in 1usize..6, modes in 1usize..6, r in raw_vector(36)) {
        let grid = Grid::new(1.0, 0.0, 2.0, 5, 7).unwrap();
        let coeffs = r[..m * modes].to_vec();
        let rec = MeasurementRecord::new(grid, m, modes, coeffs).unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let back = MeasurementRecord::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, rec);
    }

    #[test]
    fn stencil_exact_on_quartics(c in raw_vector(5), n in 5usize..40) {
        let grid = Grid::new(1.0, -1.0, 2.0, 3, n).unwrap();
        let u = sample(&grid, |_, x| c[0] + c[1] * x + c[2] * x * x + c[3] * x.powi(3) + c[4] * x.powi(4)).unwrap();
        let du = ddx(&u);
        for i in 0..n {
            let x = grid.x(i);
            let want = c[1] + 2.0 * c[2] * x + 3.0 * c[3] * x * x + 4.0 * c[4] * x.powi(3);
            prop_assert!((du.get(1, i) - want).abs() <= 1e-8 * (1.0 + want.abs()), "{} vs {}", du.get(1, i), want);
        }
    }
}
