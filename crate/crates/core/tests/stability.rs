use volterra_net::experiments::InitialLaw;
use volterra_net::paths::BrownianPath;
use volterra_net::stability::{coupled_distance, stability_scan, Channel, PerturbationPlan};
use volterra_net::Error;

#[test]
fn drift_shift_scales_quadratically() {
    let plan = PerturbationPlan::drift_shift(10_000);
    let res = stability_scan(&plan, 1).unwrap();
    assert!((res.slope - 2.0).abs() <= 0.3, "slope {}", res.slope);
    assert!(res.bound_holds(2.0));
    assert!(res.d.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn doubling_samples_moves_slope_within_its_error() {
    let plan = PerturbationPlan::drift_shift(5_000);
    let a = stability_scan(&plan, 4).unwrap();
    let b = stability_scan(&PerturbationPlan { n_mc: 10_000, ..plan }, 4).unwrap();
    assert!((a.slope - b.slope).abs() < a.slope_stderr, "{} vs {} (se {})", a.slope, b.slope, a.slope_stderr);
}

#[test]
fn bound_form_for_sup_norm_channels() {
    for plan in [
        PerturbationPlan::new(PerturbationPlan::lipschitz_ou(), Channel::Diffusion, 4_000),
        PerturbationPlan::g_shift(2_000),
    ] {
        let res = stability_scan(&plan, 2).unwrap();
        assert!(res.bound_holds(2.0), "{:?}", res.channel);
        assert!((res.slope - 2.0).abs() <= 0.3);
    }
}

#[test]
fn zero_shift_couples_exactly() {
    for channel in [Channel::Drift, Channel::Diffusion, Channel::Kernel, Channel::G] {
        let plan = PerturbationPlan::new(PerturbationPlan::lipschitz_ou(), channel, 1_000);
        let twin = plan.perturbed(0.0);
        for i in 0..20u64 {
            let w = BrownianPath::sample_indexed(plan.grid, 1, 3, i).unwrap();
            let xi = plan.initial.sample(3, i);
            let x = plan.base.solve(&xi, &w).unwrap();
            let y = twin.solve(&xi, &w).unwrap();
            assert!(x.values().iter().zip(y.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(coupled_distance(&plan, &[0.0], 100, 3).unwrap(), vec![0.0]);
    }
}

#[test]
fn vanishing_differences_cannot_be_fitted() {
    let mut plan = PerturbationPlan::g_shift(1_000);
    plan.initial = InitialLaw::Deterministic { value: vec![0.0] };
    assert!(matches!(stability_scan(&plan, 0), Err(Error::DegenerateFit(0))));
}

#[test]
fn higher_moments() {
    let mut plan = PerturbationPlan::g_shift(1_000);
    plan.p = 3.0;
    let res = stability_scan(&plan, 6).unwrap();
    let moment: f64 = (0..1000u64).map(|i| plan.initial.sample(6, i)[0].abs().powi(3)).sum::<f64>() / 1000.0;
    for (e, d) in res.eps.iter().zip(&res.d) {
        assert!((d / (moment * e.powi(3)) - 1.0).abs() < 1e-9);
    }
}
