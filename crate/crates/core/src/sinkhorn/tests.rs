use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::imagecore::{build_cost_matrix, Locality};
use crate::oracle::{self, TinyInstance};

fn line(n: usize) -> CostMatrix {
    build_cost_matrix(1, n, 1.0, Locality::Global).unwrap()
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|a| a / s).collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

#[test]
fn feasible_input_is_a_fixed_point() {
    let cost = build_cost_matrix(3, 3, 1.0, Locality::Window(3)).unwrap();
    let x = vec![0.05, 0.1, 0.05, 0.1, 0.3, 0.1, 0.05, 0.2, 0.05];
    let r = [1.0 / 0.3];
    let p = ProjectionProblem::new(&x, &x, &cost, 0.05, ATTACK_LAMBDA, &r).unwrap();
    let out = project(&p, None, &SinkhornLimits::attack()).unwrap();
    assert!(out.report.converged);
    assert!(out.report.w_over <= 1e-6, "{:?}", out.report);
    assert!(out.report.delta_l1 <= 1e-6);
    assert!(l2(&out.z, &x) < 0.02);
    let rows = recover_plan(&p, &out.duals).row_sums();
    for (a, b) in rows.iter().zip(&x) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn two_pixel_budget_binds_halfway() {
    let cost = line(2);
    let (x, w, r) = ([1.0, 0.0], [0.0, 1.0], [1.0]);
    let p = ProjectionProblem::new(&w, &x, &cost, 0.5, ATTACK_LAMBDA, &r).unwrap();
    let out = project(&p, None, &SinkhornLimits::attack()).unwrap();
    assert!((out.z[0] - 0.5).abs() < 0.01 && (out.z[1] - 0.5).abs() < 0.01, "{:?}", out.z);
    let plan = recover_plan(&p, &out.duals).dense(0);
    for (a, b) in plan.iter().zip([0.5, 0.5, 0.0, 0.0]) {
        assert!((a - b).abs() < 0.02, "{plan:?}");
    }
    assert!(out.report.w_over <= 0.01 * 0.5);
}

#[test]
fn pixel_cap_binds() {
    let cost = line(2);
    let (x, w, r) = ([0.5, 0.5], [0.9, 0.1], [0.55]);
    let p = ProjectionProblem::new(&w, &x, &cost, 0.1, ATTACK_LAMBDA, &r).unwrap();
    let out = project(&p, None, &SinkhornLimits::attack()).unwrap();
    assert!(out.z[0] <= 0.55 + 0.01, "{:?}", out.z);
    assert!(out.duals.phi[0] > 0.0);
    let inst = TinyInstance::new(x.to_vec(), w.to_vec(), cost.dense(), 0.1, 0.55).unwrap();
    let grid = oracle::grid_project(&inst, 1e-3).unwrap();
    assert!(l2(&out.z, &grid) < 0.02, "{:?} vs {grid:?}", out.z);
}

#[test]
fn z_is_recovered_from_duals_bit_for_bit() {
    let cost = line(3);
    let (x, w, r) = ([0.2, 0.5, 0.3], [0.6, 0.1, 0.3], [2.0]);
    let p = ProjectionProblem::new(&w, &x, &cost, 0.1, 300.0, &r).unwrap();
    let out = project(&p, None, &SinkhornLimits::attack()).unwrap();
    let again = recover_z(&p, &out.duals);
    for (a, b) in out.z.iter().zip(&again) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    for k in 0..3 {
        let direct = w[k] - (out.duals.beta[k] + out.duals.phi[k]) / 300.0;
        assert_eq!(direct.to_bits(), out.z[k].to_bits());
    }
}

#[test]
fn compliance_arithmetic() {
    // One unit cost pair carrying 0.1 mass: plan cost 0.10.
    let cost = line(2);
    let (x, w, r) = ([1.0, 0.0], [0.9, 0.1], [1.0]);
    let p = ProjectionProblem::new(&w, &x, &cost, 0.08, ATTACK_LAMBDA, &r).unwrap();
    // α_0 = 1 + ln 0.9 − ... choose duals so Π_00 = 0.9, Π_01 = 0.1 at ψ = 0.
    let duals = DualState { alpha: vec![1.0, LOG_ZERO], beta: vec![0.9f64.ln(), 0.1f64.ln()], psi: 0.0, phi: vec![0.0; 2] };
    let rep = compliance(&p, &duals, &[0.9, 0.1]);
    assert!((rep.w_over - 0.02).abs() < 1e-12);
    assert_eq!(rep.delta_l1, 0.0);
    assert!(rep.range_ok);
    assert!((SinkhornLimits::attack().w_over_threshold(0.1) - 0.001).abs() < 1e-15);
}

#[test]
fn objective_at_zero_duals() {
    let cost = build_cost_matrix(2, 2, 2.0, Locality::Global).unwrap();
    let x = [0.25; 4];
    let w = [0.4, 0.1, 0.2, 0.3];
    let r = [4.0];
    let p = ProjectionProblem::new(&w, &x, &cost, 0.2, 100.0, &r).unwrap();
    let zero = DualState { alpha: vec![0.0; 4], beta: vec![0.0; 4], psi: 0.0, phi: vec![0.0; 4] };
    let expected = -(cost.nnz() as f64) * (-1.0f64).exp();
    assert!((dual_objective(&p, &zero) - expected).abs() < 1e-12);
}

#[test]
fn coordinate_updates_never_decrease_the_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..120 {
        let n = rng.gen_range(2..=5);
        let cost = line(n);
        let x = random_distribution(&mut rng, n);
        let w: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        let cap = x.iter().copied().fold(0.0, f64::max) * rng.gen_range(1.0..2.0);
        let r = [cap];
        let lambda = [100.0, 1000.0, 3000.0][trial % 3];
        let eps = rng.gen_range(0.01..0.5);
        let p = ProjectionProblem::new(&w, &x, &cost, eps, lambda, &r).unwrap();
        let mut duals = DualState::cold(n, n);
        let mut g = dual_objective(&p, &duals);
        for _ in 0..15 {
            for block in [Block::Alpha, Block::BetaPhi, Block::MassShift, Block::Psi] {
                coordinate_step(&p, &mut duals, block);
                let next = dual_objective(&p, &duals);
                let slack = 1e-9 * (1.0 + g.abs());
                assert!(next >= g - slack, "trial {trial} {block:?}: {g} -> {next}");
                assert!(duals.psi >= 0.0 && duals.phi.iter().all(|&v| v >= 0.0));
                g = next;
            }
        }
    }
}

#[test]
fn converged_objective_beats_warm_start() {
    let cost = line(4);
    let (x, w, r) = ([0.1, 0.4, 0.3, 0.2], [0.5, 0.1, 0.1, 0.3], [3.0]);
    let p = ProjectionProblem::new(&w, &x, &cost, 0.15, 1000.0, &r).unwrap();
    let mut limits = SinkhornLimits::attack();
    limits.max_sweeps = 3;
    let partial = project(&p, None, &limits).unwrap();
    let full = project(&p, Some(&partial.duals), &SinkhornLimits::attack()).unwrap();
    assert!(dual_objective(&p, &full.duals) >= dual_objective(&p, &partial.duals));
}

#[test]
fn large_price_concentrates_plan_on_diagonal() {
    let cost = line(3);
    let (x, w, r) = ([0.2, 0.5, 0.3], [0.2, 0.5, 0.3], [2.0]);
    let p = ProjectionProblem::new(&w, &x, &cost, 0.1, 100.0, &r).unwrap();
    let mut duals = DualState::cold(3, 3);
    duals.psi = 50.0;
    coordinate_step(&p, &mut duals, Block::Alpha);
    let plan = recover_plan(&p, &duals).dense(0);
    let diag: f64 = (0..3).map(|i| plan[i * 3 + i]).sum();
    let total: f64 = plan.iter().sum();
    assert!(diag / total > 1.0 - 1e-12);
}

fn oracle_suite() -> Vec<(CostMatrix, TinyInstance)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut out = Vec::new();
    for (h, wd) in [(1usize, 2usize), (1, 3), (2, 2)] {
        for _ in 0..5 {
            let n = h * wd;
            let cost = build_cost_matrix(h, wd, 1.0, Locality::Global).unwrap();
            let x = random_distribution(&mut rng, n);
            let w: Vec<f64> = x.iter().map(|v| (v + rng.gen_range(-0.4..0.4)).max(0.0)).collect();
            let r = x.iter().copied().fold(0.0, f64::max) * rng.gen_range(1.05..1.6);
            let eps = rng.gen_range(0.03..0.3);
            let inst = TinyInstance::new(x, w, cost.dense(), eps, r).unwrap();
            out.push((cost, inst));
        }
    }
    out
}

#[test]
fn matches_exact_projection_on_tiny_instances() {
    for (cost, inst) in oracle_suite() {
        let r = [inst.r];
        let p = ProjectionProblem::new(&inst.w, &inst.x, &cost, inst.epsilon, ATTACK_LAMBDA, &r).unwrap();
        let out = project(&p, None, &SinkhornLimits::attack()).unwrap();
        let exact = oracle::exact_project(&inst).unwrap();
        assert!(l2(&out.z, &exact) < 0.02, "{inst:?}: {:?} vs {exact:?}", out.z);
    }
}

#[test]
fn error_shrinks_as_lambda_grows() {
    let mut limits = SinkhornLimits::attack();
    limits.max_sweeps = 200_000;
    limits.tolerance = 1e-9;
    for (cost, inst) in oracle_suite() {
        let exact = oracle::exact_project(&inst).unwrap();
        let r = [inst.r];
        let mut last = f64::INFINITY;
        for lambda in [100.0, 300.0, 1000.0, 3000.0] {
            let p = ProjectionProblem::new(&inst.w, &inst.x, &cost, inst.epsilon, lambda, &r).unwrap();
            let d = l2(&project(&p, None, &limits).unwrap().z, &exact);
            // Below 1e-5 both answers sit at the solvers' own noise floor.
            assert!(d <= last.max(1e-5), "{inst:?}: λ={lambda} error {d} after {last}");
            last = d;
        }
    }
}

#[test]
fn loose_cap_reduces_to_unconstrained_updates() {
    let cost = line(3);
    let (x, w) = ([0.2, 0.5, 0.3], [0.6, 0.1, 0.3]);
    let lambda = 1000.0;
    let r = [0.6 + 1.0 / lambda + 0.5];
    let p = ProjectionProblem::new(&w, &x, &cost, 0.1, lambda, &r).unwrap();
    let out = project(&p, None, &SinkhornLimits::attack()).unwrap();
    assert!(out.duals.phi.iter().all(|&v| v == 0.0), "{:?}", out.duals.phi);
}

#[test]
fn channels_share_the_budget() {
    let cost = line(2);
    let x = [1.0, 0.0, 1.0, 0.0];
    let w = [0.0, 1.0, 0.0, 1.0];
    let r = [1.0, 1.0];
    let p = ProjectionProblem::new(&w, &x, &cost, 0.5, ATTACK_LAMBDA, &r).unwrap();
    let out = project(&p, None, &SinkhornLimits::attack()).unwrap();
    // Symmetric channels split the budget: 0.25 mass moves in each.
    for c in 0..2 {
        assert!((out.z[2 * c + 1] - 0.25).abs() < 0.01, "{:?}", out.z);
        assert!((out.z[2 * c] + out.z[2 * c + 1] - 1.0).abs() < 0.01);
    }
}

#[test]
fn corrupted_warm_start_falls_back_to_cold() {
    let cost = line(2);
    let (x, w, r) = ([1.0, 0.0], [0.0, 1.0], [1.0]);
    let p = ProjectionProblem::new(&w, &x, &cost, 0.5, ATTACK_LAMBDA, &r).unwrap();
    let mut warm = DualState::cold(2, 2);
    warm.psi = f64::NAN;
    let out = project(&p, Some(&warm), &SinkhornLimits::attack()).unwrap();
    assert!(out.fell_back_to_cold);
    assert!((out.z[0] - 0.5).abs() < 0.01);
}

#[test]
fn rejects_bad_problems() {
    let cost = line(2);
    let r = [1.0];
    assert!(ProjectionProblem::new(&[0.5, 0.5], &[0.7, 0.7], &cost, 0.1, 1.0, &r).is_err());
    assert!(ProjectionProblem::new(&[0.5, 0.5], &[0.5, 0.5], &cost, 0.0, 1.0, &r).is_err());
    assert!(ProjectionProblem::new(&[0.5, 0.5], &[0.5, 0.5], &cost, 0.1, -1.0, &r).is_err());
    assert!(ProjectionProblem::new(&[0.5, 0.5], &[0.5, 0.5], &cost, 0.1, 1.0, &[0.4]).is_err());
    assert!(ProjectionProblem::new(&[0.5], &[0.5, 0.5], &cost, 0.1, 1.0, &r).is_err());
    let p = ProjectionProblem::new(&[0.5, 0.5], &[0.5, 0.5], &cost, 0.1, 1.0, &r).unwrap();
    let warm = DualState::cold(3, 3);
    assert!(matches!(project(&p, Some(&warm), &SinkhornLimits::attack()), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn hitting_the_cap_is_reported_not_raised() {
    let cost = line(3);
    let (x, w, r) = ([0.2, 0.5, 0.3], [0.9, 0.0, 0.1], [2.0]);
    let p = ProjectionProblem::new(&w, &x, &cost, 0.05, ATTACK_LAMBDA, &r).unwrap();
    let limits = SinkhornLimits { max_sweeps: 1, ..SinkhornLimits::attack() };
    let out = project(&p, None, &limits).unwrap();
    assert!(!out.report.converged);
    assert_eq!(out.report.iterations, 1);
}
