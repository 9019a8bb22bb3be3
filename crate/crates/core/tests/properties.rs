//! Property tests for structural invariants across the pipeline.

use fbsvie_lab::adjoint::{evaluate_hamiltonian, solve_adjoint, solve_lambda, AdjointProblem, HArgs};
use fbsvie_lab::bsvie::{contraction_bound_sq, picard_solve, SolverSettings};
use fbsvie_lab::control::{project_onto_info, stationarity_norm};
use fbsvie_lab::drivers::{build_grid, process_norm_sq, sample_drivers, MarkSpace};
use fbsvie_lab::forward::{simulate_forward, simulate_forward_differential};
use fbsvie_lab::models::{builtin, ControlPolicy, ControlSet, InfoStructure, Params};
use fbsvie_lab::paths::PathMatrix;
use proptest::prelude::*;

fn random_matrix(n_paths: usize, n: usize, vals: &[f64]) -> PathMatrix {
    let mut m = PathMatrix::zeros(n_paths, 0, n as isize);
    for p in 0..n_paths {
        for i in 0..=n {
            m.set(p, i as isize, vals[(p * 7 + i * 3) % vals.len()]);
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contraction_bound_matches_formula(l in 0.0f64..5.0, beta in 0.01f64..100.0) {
        let (c, flagged) = contraction_bound_sq(l, beta).unwrap();
        prop_assert!((c - 6.0 * l * l / beta).abs() <= 1e-12 * c.max(1.0));
        prop_assert_eq!(flagged, c >= 1.0);
    }

    #[test]
    fn clip_lands_in_control_set(lo in -5.0f64..0.0, width in 0.0f64..5.0, u in -20.0f64..20.0) {
        let set = ControlSet::new(lo, lo + width).unwrap();
        let c = set.clip(u);
        prop_assert!(set.contains(c));
        if set.contains(u) {
            prop_assert_eq!(c, u);
        }
    }

    #[test]
    fn process_norm_is_nonnegative_and_quadratic(vals in prop::collection::vec(-3.0f64..3.0, 5..40), scale in -4.0f64..4.0) {
        let grid = build_grid(1.0, 10, 0, 2.0).unwrap();
        let y = random_matrix(6, 10, &vals);
        let n = process_norm_sq(&y, &grid);
        prop_assert!(n >= 0.0);
        let scaled = process_norm_sq(&y.map(|v| scale * v), &grid);
        prop_assert!((scaled - scale * scale * n).abs() <= 1e-9 * (1.0 + scaled.abs()));
        prop_assert!((stationarity_norm(&y, &grid).powi(2) - n).abs() <= 1e-9 * (1.0 + n));
    }

    #[test]
    fn drivers_are_deterministic_and_prefix_stable(seed in 0u64..1000, cut in 0usize..12) {
        let grid = build_grid(1.0, 12, 0, 2.0).unwrap();
        let marks = MarkSpace::new(vec![0.5, -1.0], vec![2.0, 0.0]).unwrap();
        let a = sample_drivers(&grid, &marks, 5, seed).unwrap();
        let b = sample_drivers(&grid, &marks, 9, seed).unwrap();
        let z = a.with_future_zeroed(cut);
        for p in 0..5 {
            for i in 0..12 {
                prop_assert_eq!(a.db(p, i).to_bits(), b.db(p, i).to_bits());
                prop_assert_eq!(a.count(p, i, 0), b.count(p, i, 0));
                prop_assert_eq!(a.count(p, i, 1), 0);
                if i < cut {
                    prop_assert_eq!(z.db(p, i).to_bits(), a.db(p, i).to_bits());
                } else {
                    prop_assert_eq!(z.db(p, i), 0.0);
                }
            }
        }
    }

    #[test]
    fn projections_are_idempotent(vals in prop::collection::vec(-3.0f64..3.0, 5..40), seed in 0u64..100) {
        let grid = build_grid(1.0, 10, 2, 2.0).unwrap();
        let m = builtin("sdde", &Params::new()).unwrap();
        let dr = sample_drivers(&grid, &MarkSpace::empty(), 64, seed).unwrap();
        let u = ControlPolicy::constant(64, &grid, 0.0, InfoStructure::Full, &m.controls()).unwrap();
        let x = simulate_forward(m.as_ref(), &grid, &dr, &u).unwrap();
        let v = random_matrix(64, 10, &vals);
        prop_assert_eq!(project_onto_info(&v, InfoStructure::Full, &grid, &x, 2).unwrap(), v.clone());
        let t = project_onto_info(&v, InfoStructure::Trivial, &grid, &x, 2).unwrap();
        for i in 0..=10 {
            let col = t.column(i);
            let mean_v = v.column(i).iter().sum::<f64>() / 64.0;
            prop_assert!(col.iter().all(|c| *c == col[0]));
            prop_assert!((col[0] - mean_v).abs() <= 1e-12);
        }
        prop_assert_eq!(project_onto_info(&t, InfoStructure::Trivial, &grid, &x, 2).unwrap(), t);
        let info = InfoStructure::Delayed { lag: 0.2 };
        let d = project_onto_info(&v, info, &grid, &x, 2).unwrap();
        let dd = project_onto_info(&d, info, &grid, &x, 2).unwrap();
        prop_assert!(d.zip_map(&dd, |a, b| a - b).unwrap().max_abs() <= 1e-8 * (1.0 + d.max_abs()));
    }

    #[test]
    fn differential_scheme_matches_integral_without_memory(
        a in -2.0f64..0.5, a1 in -1.0f64..1.0, s0 in 0.0f64..0.5, s1 in -0.5f64..0.5, seed in 0u64..100,
    ) {
        let p: Params = [("a", a), ("a1", a1), ("s0", s0), ("s1", s1)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let m = builtin("sdde", &p).unwrap();
        let grid = build_grid(1.0, 20, 3, 2.0).unwrap();
        let dr = sample_drivers(&grid, &MarkSpace::empty(), 8, seed).unwrap();
        let u = ControlPolicy::constant(8, &grid, 0.3, InfoStructure::Full, &m.controls()).unwrap();
        let x = simulate_forward(m.as_ref(), &grid, &dr, &u).unwrap();
        let xd = simulate_forward_differential(m.as_ref(), &grid, &dr, &u).unwrap();
        let diff = x.states().zip_map(xd.states(), |a, b| a - b).unwrap().max_abs();
        prop_assert!(diff <= 1e-10 * (1.0 + x.states().max_abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn hamiltonian_splits_and_lambda_starts_at_terminal_slope(seed in 0u64..1000, idx in 0usize..6) {
        let name = ["zero", "det_volterra", "exp_generator", "sdde", "jump_linear", "lq"][idx];
        let marks = if name == "jump_linear" { MarkSpace::new(vec![0.5], vec![1.0]).unwrap() } else { MarkSpace::empty() };
        let grid = build_grid(1.0, 12, 2, 4.0).unwrap();
        let m = builtin(name, &Params::new()).unwrap();
        let np = 64;
        let dr = sample_drivers(&grid, &marks, np, seed).unwrap();
        let u = ControlPolicy::constant(np, &grid, 0.1, InfoStructure::Full, &m.controls()).unwrap();
        let x = simulate_forward(m.as_ref(), &grid, &dr, &u).unwrap();
        let bw = picard_solve(m.as_ref(), &grid, &dr, &x, &u, &SolverSettings::default()).unwrap();
        let pb = AdjointProblem { model: m.as_ref(), grid: &grid, drivers: &dr, state: &x, control: &u, backward: &bw };
        let adj = solve_adjoint(&pb).unwrap();
        let lam = solve_lambda(&pb).unwrap();
        prop_assert_eq!(&lam.lambda, &adj.lambda.lambda);
        for p in 0..np {
            let (_, slope) = m.terminal(bw.y.get(p, 0));
            prop_assert_eq!(lam.lambda.get(p, 0), slope);
            for i in [0usize, 5, 11] {
                let h = evaluate_hamiltonian(&pb, &adj, p, i, None).unwrap();
                let total = h.h0 + h.h1.iter().sum::<f64>();
                prop_assert!((h.h - total).abs() <= 1e-12 * (1.0 + total.abs()));
                let own: HArgs = pb.args(p, i);
                let again = evaluate_hamiltonian(&pb, &adj, p, i, Some(&own)).unwrap();
                prop_assert!((again.h - h.h).abs() <= 1e-12 * (1.0 + h.h.abs()));
            }
        }
    }

    #[test]
    fn zero_model_has_zero_backward_solution(seed in 0u64..1000) {
        let grid = build_grid(1.0, 10, 0, 2.0).unwrap();
        let m = builtin("zero", &Params::new()).unwrap();
        let dr = sample_drivers(&grid, &MarkSpace::empty(), 16, seed).unwrap();
        let u = ControlPolicy::constant(16, &grid, 0.0, InfoStructure::Full, &m.controls()).unwrap();
        let x = simulate_forward(m.as_ref(), &grid, &dr, &u).unwrap();
        let bw = picard_solve(m.as_ref(), &grid, &dr, &x, &u, &SolverSettings::default()).unwrap();
        prop_assert_eq!(bw.y.max_abs(), 0.0);
        prop_assert_eq!(bw.diagnostics.iterations, 1);
    }
}
