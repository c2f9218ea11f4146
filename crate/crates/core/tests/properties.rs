mod common;

use common::{inf_diff, inf_norm, random_direction, random_vector, strictly_complementary};
use dqp::active_set::identify;
use dqp::diff::{dqp_solve, DqpOptions, FixedMask};
use dqp::generators::{gen_chain, gen_random_dense, gen_random_dense_with, gen_random_sparse, gen_simplex, gen_two_param_family};
use dqp::kkt::{assemble_reduced_kkt, factorize, FactorMode};
use dqp::metrics::{dual_residual, primal_residual, residuals_of};
use dqp::oracles::{brute_force_solve, full_implicit_jacobian};
use dqp::problem::io::{parse_problem, problem_to_json};
use dqp::problem::{normalize_constraints, validate};
use dqp::solvers::{solve_active_set, solve_admm, solve_equality_qp, ActiveSetSolver, SolveSettings};
use dqp::sparse::CscMatrix;
use proptest::prelude::*;

fn dense(seed: u64) -> dqp::problem::QpProblem {
    gen_random_dense(3 + (seed % 8) as usize, seed)
}

fn solve(problem: &dqp::problem::QpProblem) -> dqp::diff::DifferentiableSolution {
    dqp_solve(problem, &ActiveSetSolver, &SolveSettings::with_eps(1e-10), &DqpOptions::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjoint_consistency(seed in 0u64..100_000) {
        let sol = solve(&dense(seed));
        prop_assume!(sol.diagnosis().weakly_active.is_empty());
        let dir = random_direction(sol.problem(), seed + 1);
        let grad_z = random_vector(sol.problem().n(), seed + 2);
        let dz = sol.forward_directional(&dir).unwrap().dz;
        let lhs: f64 = grad_z.iter().zip(&dz).map(|(a, b)| a * b).sum();
        let rhs = sol.backward(&grad_z, None, None, FixedMask::default()).unwrap().pair(&dir);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn forward_matches_full_implicit_system(seed in 0u64..100_000) {
        let sol = solve(&dense(seed));
        prop_assume!(strictly_complementary(&sol, 1e-3));
        let dir = random_direction(sol.problem(), seed + 7);
        let t = sol.forward_directional(&dir).unwrap();
        let (dz, dl, dm) = full_implicit_jacobian(sol.problem(), sol.point(), &dir).unwrap();
        prop_assert!(inf_diff(&t.dz, &dz) <= 1e-8);
        prop_assert!(inf_diff(&t.dlambda, &dl) <= 1e-8);
        prop_assert!(inf_diff(&t.dmu, &dm) <= 1e-8);
    }

    #[test]
    fn reduced_equality_qp_reproduces_solution(seed in 0u64..100_000) {
        let problem = dense(seed);
        let sol = solve(&problem);
        prop_assume!(sol.mode() == FactorMode::Direct);
        let a = problem.a().to_dense();
        let c_j = problem.c().select_rows(sol.active().indices()).to_dense();
        let stacked = nalgebra::DMatrix::from_fn(a.nrows() + c_j.nrows(), problem.n(), |i, j| {
            if i < a.nrows() { a[(i, j)] } else { c_j[(i - a.nrows(), j)] }
        });
        let mut rhs = problem.b().to_vec();
        rhs.extend(sol.active().indices().iter().map(|&j| problem.d()[j]));
        let (z, _) = solve_equality_qp(problem.p(), problem.q(), &CscMatrix::from_dense(&stacked), &rhs).unwrap();
        prop_assert!(inf_diff(&z, sol.z()) <= 1e-8);
    }

    #[test]
    fn grad_p_symmetric_and_on_pattern(seed in 0u64..100_000) {
        let problem = gen_random_sparse(30 + (seed % 20) as usize, seed);
        let sol = solve(&problem);
        let grad_z = random_vector(problem.n(), seed);
        let g = sol.backward(&grad_z, None, None, FixedMask::default()).unwrap();
        let gp = g.grad_p.unwrap();
        let dense_gp = gp.to_dense();
        prop_assert!((&dense_gp - dense_gp.transpose()).amax() <= 1e-12 * dense_gp.amax().max(1.0));
        prop_assert!(gp.pattern_within(problem.p()));
        prop_assert!(g.grad_a.unwrap().pattern_within(problem.a()));
        prop_assert!(g.grad_c.unwrap().pattern_within(problem.c()));
    }

    #[test]
    fn off_active_mu_gradient_has_no_effect(seed in 0u64..100_000) {
        let sol = solve(&dense(seed));
        let m = sol.problem().n_ineq();
        prop_assume!(sol.active().len() < m);
        let grad_z = random_vector(sol.problem().n(), seed);
        let mut grad_mu = random_vector(m, seed + 3);
        let base = sol.backward(&grad_z, None, Some(&grad_mu), FixedMask::default()).unwrap();
        for (j, g) in grad_mu.iter_mut().enumerate() {
            if !sol.active().contains(j) {
                *g += 10.0;
            }
        }
        let moved = sol.backward(&grad_z, None, Some(&grad_mu), FixedMask::default()).unwrap();
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn generators_deterministic_and_valid(seed in 0u64..100_000, n in 10usize..60) {
        prop_assert_eq!(gen_simplex(n, seed), gen_simplex(n, seed));
        prop_assert_eq!(gen_chain(n, 2, seed), gen_chain(n, 2, seed));
        prop_assert_eq!(gen_random_sparse(n, seed), gen_random_sparse(n, seed));
        prop_assert_eq!(gen_random_dense(n, seed), gen_random_dense(n, seed));
        for problem in [gen_simplex(n, seed).0, gen_chain(n, 2, seed).0, gen_random_sparse(n, seed), gen_random_dense(n, seed)] {
            let report = validate(&problem, true);
            prop_assert!(report.is_ok(), "{:?}", report.messages);
        }
    }

    #[test]
    fn brute_force_has_zero_gap_and_satisfies_kkt(seed in 0u64..100_000) {
        let problem = gen_random_dense_with(3 + (seed % 5) as usize, 2 + (seed % 7) as usize, (seed % 3) as usize, seed);
        let pt = brute_force_solve(&problem).unwrap();
        let (l, mu) = (pt.lambda.clone().unwrap(), pt.mu.clone().unwrap());
        let r = residuals_of(&problem, &pt.z, &l, &mu);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let pz = problem.p().mul_vec(&pt.z);
        let scale = dot(&pt.z, &pz).abs() + dot(problem.q(), &pt.z).abs() + dot(problem.b(), &l).abs() + dot(problem.d(), &mu).abs();
        prop_assert!(r.r_g <= 1e-10 * scale.max(1.0), "{r:?} scale {scale}");
        prop_assert!(r.r_p <= 1e-8 && r.r_d <= 1e-8, "{r:?}");
        let res = problem.inequality_residuals(&pt.z);
        for j in 0..mu.len() {
            prop_assert!(mu[j] >= -1e-8);
            prop_assert!((mu[j] * res[j]).abs() <= 1e-8);
        }
    }

    #[test]
    fn solved_points_meet_tolerance(seed in 0u64..100_000, eps in prop::sample::select(vec![1e-4, 1e-6, 1e-8])) {
        let problem = dense(seed);
        let settings = SolveSettings::with_eps(eps);
        for pt in [solve_active_set(&problem, &settings).unwrap(), solve_admm(&problem, &settings).unwrap()] {
            if pt.is_solved() {
                let (l, mu) = (pt.lambda.clone().unwrap(), pt.mu.clone().unwrap());
                prop_assert!(primal_residual(&problem, &pt.z) <= 2.0 * eps);
                prop_assert!(dual_residual(&problem, &pt.z, &l, &mu) <= 2.0 * eps);
                prop_assert!(mu.iter().all(|&m| m >= -eps));
            }
        }
    }

    #[test]
    fn backends_agree(seed in 0u64..100_000) {
        let problem = dense(seed);
        let settings = SolveSettings::with_eps(1e-8);
        let a = solve_active_set(&problem, &settings).unwrap();
        let b = solve_admm(&problem, &settings).unwrap();
        prop_assume!(a.is_solved() && b.is_solved());
        prop_assert!(inf_diff(&a.z, &b.z) <= 1e-5);
    }

    #[test]
    fn active_set_duals_complementary(seed in 0u64..100_000) {
        let problem = dense(seed);
        let pt = solve_active_set(&problem, &SolveSettings::with_eps(1e-10)).unwrap();
        prop_assert!(pt.is_solved());
        let mu = pt.mu.unwrap();
        let res = problem.inequality_residuals(&pt.z);
        for j in 0..mu.len() {
            prop_assert!(mu[j] >= 0.0);
            prop_assert!((mu[j] * res[j]).abs() <= 1e-8);
        }
        let working = pt.working_set.unwrap();
        prop_assert_eq!(identify(&problem, &pt.z, 1e-5).indices().to_vec(), working);
    }

    #[test]
    fn identify_monotone_in_threshold(seed in 0u64..100_000, lo in 1e-9f64..1e-3, factor in 1.0f64..1e3) {
        let problem = dense(seed);
        let z = random_vector(problem.n(), seed);
        let small = identify(&problem, &z, lo);
        let large = identify(&problem, &z, lo * factor);
        prop_assert!(small.indices().iter().all(|&j| large.contains(j)));
    }

    #[test]
    fn normalization_preserves_feasible_set(seed in 0u64..100_000, points in 1u64..1000) {
        let problem = dense(seed);
        let (normed, scaling) = normalize_constraints(&problem).unwrap();
        for k in 0..100 {
            let z = random_vector(problem.n(), points * 1000 + k);
            let before = problem.inequality_residuals(&z);
            let after = normed.inequality_residuals(&z);
            for (x, y) in before.iter().zip(&after) {
                prop_assert_eq!(x.signum(), y.signum());
            }
        }
        let (twice, again) = normalize_constraints(&normed).unwrap();
        prop_assert_eq!(&twice, &normed);
        prop_assert!(again.inequality.iter().all(|&s| s == 1.0));
        let restored = scaling.restore(&normed);
        prop_assert!(inf_diff(restored.d(), problem.d()) <= 1e-12 * (1.0 + inf_norm(problem.d())));
    }

    #[test]
    fn serialization_round_trip(seed in 0u64..100_000) {
        for problem in [dense(seed), gen_random_sparse(20, seed), gen_chain(3, 2, seed).0] {
            prop_assert_eq!(parse_problem(&problem_to_json(&problem)).unwrap(), problem);
        }
    }

    #[test]
    fn kkt_solve_inverts_matrix(seed in 0u64..100_000) {
        let problem = dense(seed);
        let sol = solve(&problem);
        prop_assume!(sol.mode() == FactorMode::Direct);
        let kkt = assemble_reduced_kkt(&problem, sol.active().indices()).unwrap();
        let k = kkt.matrix().clone();
        let fact = factorize(kkt, 0.0);
        let x = random_vector(k.nrows(), seed);
        let back = fact.solve(&k.mul_vec(&x)).unwrap();
        prop_assert!(inf_diff(&back, &x) <= 1e-8 * (1.0 + inf_norm(&x)));
    }

    #[test]
    fn two_param_regions_are_stable(t1 in 1.2f64..1.8, t2 in 1.2f64..1.8) {
        let problem = gen_two_param_family(t1, t2);
        let pt = brute_force_solve(&problem).unwrap();
        prop_assert_eq!(identify(&problem, &pt.z, 1e-5).indices().to_vec(), vec![2]);
    }
}
