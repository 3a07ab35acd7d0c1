//! In-house solver for the structured convex subproblems: linear objective
//! plus convex quadratic terms, subject to linear, convex-quadratic and
//! power-cone (`2^a <= v`) constraints.

mod program;
mod solver;

pub use program::{Affine, Constraint, ConvexProgram, QuadObjTerm, VarDef};
pub use solver::{check_kkt, solve, KktReport, Solution, SolveOptions, SolveStatus};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn minimize_x_above_one() {
        let mut p = ConvexProgram::new();
        let x = p.add_var("x", f64::NEG_INFINITY, f64::INFINITY, 0);
        p.add_obj_linear(x, 1.0);
        p.add_linear(vec![(x, -1.0)], -1.0, "x >= 1");
        let opts = SolveOptions { opt_tol: 1e-9, ..SolveOptions::default() };
        let sol = solve(&p, &opts).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.values[x] - 1.0).abs() < 1e-6, "x = {}", sol.values[x]);
        assert!((sol.objective_value - 1.0).abs() < 1e-6);
        assert!((sol.objective_value - p.objective(&sol.values)).abs() < 1e-9);
    }

    #[test]
    fn minimum_norm_precoder_projection() {
        // minimize ||p||^2 s.t. Re(h^H p) >= 1 with h = [1, 0]:
        // closed-form projection gives p = [1, 0], value 1.
        let mut prog = ConvexProgram::new();
        let pr = prog.add_var("p_re0", -10.0, 10.0, 0);
        let pi = prog.add_var("p_im0", -10.0, 10.0, 0);
        let pr1 = prog.add_var("p_re1", -10.0, 10.0, 0);
        let pi1 = prog.add_var("p_im1", -10.0, 10.0, 0);
        for v in [pr, pi, pr1, pi1] {
            prog.add_obj_quad(1.0, Affine::var(v, 1.0));
        }
        prog.add_linear(vec![(pr, -1.0)], -1.0, "Re(h^H p) >= 1");
        let opts = SolveOptions { opt_tol: 1e-9, ..SolveOptions::default() };
        let sol = solve(&prog, &opts).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.values[pr] - 1.0).abs() < 1e-5);
        for v in [pi, pr1, pi1] {
            assert!(sol.values[v].abs() < 1e-5);
        }
        assert!((sol.objective_value - 1.0).abs() < 1e-5);
    }

    #[test]
    fn power_cone_monotone_binding() {
        // minimize v s.t. v >= 2^a, a >= 3: optimum v = 8.
        let mut p = ConvexProgram::new();
        let a = p.add_var("a", f64::NEG_INFINITY, 20.0, 0);
        let v = p.add_var("v", 0.0, 1e4, 0);
        p.add_obj_linear(v, 1.0);
        p.add_exp2(Affine::var(a, 1.0), Affine::var(v, 1.0), "v >= 2^a");
        p.add_linear(vec![(a, -1.0)], -3.0, "a >= 3");
        let opts = SolveOptions { opt_tol: 1e-9, ..SolveOptions::default() };
        let sol = solve(&p, &opts).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.values[v] - 8.0).abs() < 1e-4, "v = {}", sol.values[v]);
        // Power-cone soundness in exact arithmetic of the definition.
        assert!(sol.values[a].exp2() <= sol.values[v] * (1.0 + 1e-8));
    }

    #[test]
    fn infeasible_program_is_reported() {
        let mut p = ConvexProgram::new();
        let x = p.add_var("x", 0.0, 1.0, 0);
        p.add_obj_linear(x, 1.0);
        p.add_linear(vec![(x, -1.0)], -2.0, "x >= 2");
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn quadratic_constraint_projection() {
        // minimize -x s.t. x^2 + y^2 <= 4: optimum x = 2.
        let mut p = ConvexProgram::new();
        let x = p.add_var("x", -5.0, 5.0, 0);
        let y = p.add_var("y", -5.0, 5.0, 0);
        p.add_obj_linear(x, -1.0);
        p.add_quad(
            vec![Affine::var(x, 1.0), Affine::var(y, 1.0)],
            Affine::constant(4.0),
            "ball",
        );
        let opts = SolveOptions { opt_tol: 1e-9, ..SolveOptions::default() };
        let sol = solve(&p, &opts).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.values[x] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn deterministic_resolve() {
        let build = || {
            let mut p = ConvexProgram::new();
            let x = p.add_var("x", -3.0, 7.0, 0);
            let y = p.add_var("y", -3.0, 7.0, 0);
            p.add_obj_linear(x, 0.3);
            p.add_obj_quad(2.0, Affine::new(vec![(x, 1.0), (y, -0.5)], 0.25));
            p.add_quad(
                vec![Affine::var(x, 1.0), Affine::var(y, 1.0)],
                Affine::new(vec![(x, 0.1)], 3.0),
                "q",
            );
            p.add_exp2(Affine::var(y, 1.0), Affine::new(vec![(x, 1.0)], 5.0), "e");
            p
        };
        let a = solve(&build(), &SolveOptions::default()).unwrap();
        let b = solve(&build(), &SolveOptions::default()).unwrap();
        assert_eq!(a.status, b.status);
        assert_eq!(a.objective_value, b.objective_value);
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn weak_duality_against_sampled_feasible_points() {
        let mut p = ConvexProgram::new();
        let x = p.add_var("x", -2.0, 2.0, 0);
        let y = p.add_var("y", -2.0, 2.0, 0);
        p.add_obj_linear(x, 1.0);
        p.add_obj_linear(y, 0.5);
        p.add_obj_quad(1.0, Affine::new(vec![(x, 1.0), (y, 1.0)], -0.3));
        p.add_quad(
            vec![Affine::var(x, 1.0), Affine::var(y, 1.0)],
            Affine::constant(2.0),
            "ball",
        );
        p.add_linear(vec![(x, -1.0), (y, -1.0)], 0.5, "x + y >= -0.5");
        let opts = SolveOptions { opt_tol: 1e-8, ..SolveOptions::default() };
        let sol = solve(&p, &opts).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let mut feasible_seen = 0;
        for _ in 0..1000 {
            let cand = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            if p.max_violation(&cand) <= 0.0 {
                feasible_seen += 1;
                assert!(sol.objective_value <= p.objective(&cand) + 1e-5);
            }
        }
        assert!(feasible_seen > 100);
    }

    #[test]
    fn kkt_report_cases() {
        let mut p = ConvexProgram::new();
        let x = p.add_var("x", f64::NEG_INFINITY, f64::INFINITY, 0);
        p.add_obj_linear(x, 1.0);
        p.add_linear(vec![(x, -1.0)], -1.0, "x >= 1");
        // At the optimum all residuals are small.
        let report = check_kkt(&p, &[1.0]).unwrap();
        assert!(report.primal_violation <= 1e-8);
        assert!(report.stationarity <= 1e-8);
        assert!(report.dual_violation <= 1e-8);
        assert!(report.complementarity_gap <= 1e-8);
        // An infeasible interior point shows its violation.
        let report = check_kkt(&p, &[0.0]).unwrap();
        assert!((report.primal_violation - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_structure_matches_dense_solution() {
        // Same program solved with one group and with per-slot groups plus a
        // linear coupling row must agree.
        let build = |split: bool| {
            let mut p = ConvexProgram::new();
            let mut xs = Vec::new();
            for slot in 0..6 {
                let g = if split { slot } else { 0 };
                let x = p.add_var(format!("x{slot}"), 0.0, 10.0, g);
                p.add_obj_quad(1.0, Affine::new(vec![(x, 1.0)], -(slot as f64) * 0.3));
                xs.push(x);
            }
            let phi = p.add_var("phi", 0.0, 100.0, if split { 6 } else { 0 });
            p.add_obj_linear(phi, 1.0);
            for (slot, &x) in xs.iter().enumerate() {
                p.add_linear(vec![(x, 1.0 + slot as f64), (phi, -1.0)], 0.0, "x*w <= phi");
            }
            // One dense coupling row: sum x >= 2.
            p.add_linear(xs.iter().map(|&x| (x, -1.0)).collect(), -2.0, "sum x >= 2");
            p
        };
        let opts = SolveOptions { opt_tol: 1e-9, ..SolveOptions::default() };
        let dense = solve(&build(false), &opts).unwrap();
        let block = solve(&build(true), &opts).unwrap();
        assert_eq!(dense.status, SolveStatus::Optimal);
        assert_eq!(block.status, SolveStatus::Optimal);
        assert!((dense.objective_value - block.objective_value).abs() < 1e-5);
        for (a, b) in dense.values.iter().zip(&block.values) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn iteration_limit_reports_best_iterate() {
        let mut p = ConvexProgram::new();
        let x = p.add_var("x", 0.0, 1e6, 0);
        p.add_obj_linear(x, 1.0);
        p.add_linear(vec![(x, -1.0)], -1.0, "x >= 1");
        let opts = SolveOptions { max_iters: 2, ..SolveOptions::default() };
        let sol = solve(&p, &opts).unwrap();
        assert_eq!(sol.status, SolveStatus::IterationLimit);
        assert!(sol.values[x] >= 1.0 - 1e-9);
    }

    #[test]
    fn dump_round_trips_labels() {
        let mut p = ConvexProgram::new();
        let x = p.add_var("x", 0.0, 1.0, 0);
        p.add_linear(vec![(x, 1.0)], 0.5, "cap");
        p.add_exp2(Affine::var(x, 1.0), Affine::constant(2.0), "cone");
        let text = p.dump();
        assert!(text.contains("var 0 x in [0, 1] group 0"));
        assert!(text.contains("[cap]"));
        assert!(text.contains("[cone]"));
    }
}
