use proptest::prelude::*;

use wasserball::attack::{pgd_attack, project_lp, ThreatKind, ThreatModel};
use wasserball::imagecore::{
    ball_membership, build_cost_matrix, wasserstein_distance, BallSpec, DistanceMode, Image, Locality,
};
use wasserball::model::{Architecture, Classifier};
use wasserball::oracle::{self, TinyInstance};
use wasserball::sinkhorn::{project, recover_plan, ProjectionProblem, SinkhornLimits};

fn tiny_image(h: usize, w: usize, c: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.01f64..1.0, h * w * c).prop_map(move |px| Image::new(h, w, c, px).unwrap())
}

fn image_pair() -> impl Strategy<Value = (Image, Image)> {
    (1usize..4, 1usize..4, 1usize..3)
        .prop_flat_map(|(h, w, c)| (tiny_image(h, w, c), tiny_image(h, w, c)))
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|a| a / s).collect()
    })
}

/// A projection instance on a 1×n line: original, target, radius, cap factor.
fn line_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64, f64)> {
    (2usize..5).prop_flat_map(|n| {
        (distribution(n), prop::collection::vec(-0.4f64..0.4, n), 0.02f64..0.4, 1.05f64..2.0).prop_map(
            |(x, noise, eps, slack)| {
                let w = x.iter().zip(&noise).map(|(a, d)| (a + d).max(0.0)).collect();
                (x, w, eps, slack)
            },
        )
    })
}

fn swap_channels(im: &Image) -> Image {
    let n = im.pixel_count();
    let mut px = im.pixels()[n..2 * n].to_vec();
    px.extend_from_slice(&im.pixels()[..n]);
    Image::new(im.height(), im.width(), 2, px).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_distance_is_symmetric((a, b) in image_pair()) {
        let cost = build_cost_matrix(a.height(), a.width(), 1.0, Locality::Global).unwrap();
        let ab = wasserstein_distance(&a, &b, &cost, DistanceMode::Exact).unwrap();
        let ba = wasserstein_distance(&b, &a, &cost, DistanceMode::Exact).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9, "{ab} vs {ba}");
        prop_assert!(wasserstein_distance(&a, &a, &cost, DistanceMode::Exact).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn permuting_channels_leaves_distance_unchanged(a in tiny_image(2, 3, 2), b in tiny_image(2, 3, 2)) {
        let cost = build_cost_matrix(2, 3, 1.0, Locality::Global).unwrap();
        let d = wasserstein_distance(&a, &b, &cost, DistanceMode::Exact).unwrap();
        let swapped = wasserstein_distance(&swap_channels(&a), &swap_channels(&b), &cost, DistanceMode::Exact).unwrap();
        prop_assert!((d - swapped).abs() <= 1e-9);
    }

    #[test]
    fn every_image_is_in_its_own_ball(a in tiny_image(3, 3, 1), eps in 1e-6f64..5.0) {
        let cost = build_cost_matrix(3, 3, 1.0, Locality::Window(3)).unwrap();
        prop_assert!(ball_membership(&a, &a, &BallSpec::attack(eps), &cost).unwrap().passes);
    }

    #[test]
    fn exact_projection_passes_the_audit((x, w, eps, slack) in line_instance()) {
        let n = x.len();
        let cost = build_cost_matrix(1, n, 1.0, Locality::Global).unwrap();
        let r = x.iter().copied().fold(0.0, f64::max) * slack;
        let inst = TinyInstance::new(x.clone(), w, cost.dense(), eps, r).unwrap();
        let z = oracle::exact_project(&inst).unwrap();
        // As images: pixel = mass share / cap, so the original's brightest pixel sits below 1.
        let original = Image::gray(1, n, x.iter().map(|v| v / r).collect()).unwrap();
        let projected = Image::gray(1, n, z.iter().map(|v| (v / r).min(1.0)).collect()).unwrap();
        let report = ball_membership(&original, &projected, &BallSpec::new(eps, 1e-6, 1e-6).unwrap(), &cost).unwrap();
        prop_assert!(report.passes, "{report:?}");
    }

    #[test]
    fn converged_projections_are_feasible((x, w, eps, slack) in line_instance()) {
        let n = x.len();
        let cost = build_cost_matrix(1, n, 1.0, Locality::Global).unwrap();
        let caps = [x.iter().copied().fold(0.0, f64::max) * slack];
        let limits = SinkhornLimits { max_sweeps: 5000, ..SinkhornLimits::attack() };
        let p = ProjectionProblem::new(&w, &x, &cost, eps, 3000.0, &caps).unwrap();
        let out = project(&p, None, &limits).unwrap();
        if out.report.converged {
            prop_assert!(out.report.within(eps, &limits), "{:?}", out.report);
            prop_assert!(out.z.iter().all(|&v| v >= 0.0 && v <= caps[0] * (1.0 + 1e-6)));
            let rows = recover_plan(&p, &out.duals).row_sums();
            for (r, xi) in rows.iter().zip(&x) {
                prop_assert!((r - xi).abs() <= 1e-3, "{rows:?} vs {x:?}");
            }
        }
    }

    #[test]
    fn lp_projection_is_idempotent(
        (a, b) in image_pair(),
        eps in 0.01f64..0.5,
        linf in any::<bool>(),
    ) {
        let kind = if linf { ThreatKind::Linf } else { ThreatKind::L2 };
        let once = project_lp(&b, &a, kind, eps).unwrap();
        let twice = project_lp(&once, &a, kind, eps).unwrap();
        for (p, q) in once.pixels().iter().zip(twice.pixels()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn successful_attacks_pass_the_audit(seed in 0u64..1000, px in tiny_image(4, 4, 1), eps_n in 1.0f64..16.0) {
        let model = Classifier::init(Architecture::LinearSoftmax, (1, 4, 4), 3, seed).unwrap();
        let label = (seed % 3) as usize;
        let threat = ThreatModel::wasserstein(eps_n / 16.0).with_max_steps(20);
        let r = pgd_attack(&model, &px, label, &threat).unwrap();
        if r.success {
            prop_assert!(r.compliance.passes, "{:?}", r.compliance);
        }
        let cost = threat.wasserstein.cost_matrix(4, 4).unwrap();
        let audit = ball_membership(&px, &r.adversarial, &threat.wasserstein.ball(threat.epsilon), &cost).unwrap();
        prop_assert!(audit.passes, "{audit:?}");
    }
}
