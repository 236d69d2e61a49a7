mod common;

use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use volterra_net::paths::{mean_relative_l2, relative_l2, BrownianPath, SamplePath, TimeGrid};

const N: usize = 100_000;

/// 10^5 scalar increments: 2000 independent paths of 50 steps.
fn increments(dt: f64, seed: u64) -> Vec<f64> {
    let g = TimeGrid::uniform(50.0 * dt, dt).unwrap();
    (0..(N / 50) as u64)
        .flat_map(|i| BrownianPath::sample_indexed(g, 1, seed, i).unwrap().increments().to_vec())
        .collect()
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn increments_pass_kolmogorov_smirnov() {
    let dt = 0.1;
    let mut x = increments(dt, 42);
    assert_eq!(x.len(), N);
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let law = Normal::new(0.0, dt.sqrt()).unwrap();
    let n = N as f64;
    let stat = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = law.cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    // Asymptotic 1% critical value.
    assert!(stat < 1.628 / n.sqrt(), "KS statistic {stat}");
}

#[test]
fn increment_moments() {
    let dt = 0.1;
    let x = increments(dt, 7);
    let (mean, var) = mean_var(&x);
    let n = N as f64;
    assert!(mean.abs() < 3.0 * (dt / n).sqrt(), "mean {mean}");
    let se = dt * (2.0 / (n - 1.0)).sqrt();
    assert!((var - dt).abs() < 3.0 * se, "variance {var}");
}

#[test]
fn coarsened_variance() {
    let dt = 0.05;
    let g = TimeGrid::uniform(100.0 * dt, dt).unwrap();
    let x: Vec<f64> = (0..2000u64)
        .flat_map(|i| {
            BrownianPath::sample_indexed(g, 1, 3, i)
                .unwrap()
                .coarsen(2)
                .unwrap()
                .increments()
                .to_vec()
        })
        .collect();
    assert_eq!(x.len(), N);
    let (_, var) = mean_var(&x);
    let se = 2.0 * dt * (2.0 / (N as f64 - 1.0)).sqrt();
    assert!((var - 2.0 * dt).abs() < 3.0 * se, "variance {var}");
}

#[test]
fn sampling_is_pure() {
    let g = TimeGrid::uniform(5.0, 0.1).unwrap();
    let a = BrownianPath::sample(g, 2, 11).unwrap();
    let b = BrownianPath::sample(g, 2, 11).unwrap();
    assert!(a.increments().iter().zip(b.increments()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(a, BrownianPath::sample(g, 2, 12).unwrap());
}

/// Repeat each interval value `f` times on the refined grid; the final node
/// is carried over.
fn refine(p: &SamplePath, f: usize) -> SamplePath {
    let g = p.grid();
    let fine = TimeGrid::uniform(g.horizon(), g.dt() / f as f64).unwrap();
    let mut v = Vec::new();
    for i in 0..g.n_steps() {
        for _ in 0..f {
            v.extend_from_slice(p.at(i));
        }
    }
    v.extend_from_slice(p.at(g.n_steps()));
    SamplePath::new(fine, p.dim(), v).unwrap()
}

fn path_strategy() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (1usize..3, 2usize..12).prop_flat_map(|(d, n)| {
        let len = d * (n + 1);
        (
            Just(d),
            prop::collection::vec(0.5f64..3.0, len),
            prop::collection::vec(-3.0f64..3.0, len),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coarsening_composes(vals in prop::collection::vec(-1.0f64..1.0, 16), dim in 1usize..3) {
        let g = TimeGrid::uniform(1.6, 0.1).unwrap();
        let inc: Vec<f64> = vals.iter().cycle().take(16 * dim).copied().collect();
        let p = BrownianPath::from_increments(g, dim, inc).unwrap();
        let twice = p.coarsen(2).unwrap().coarsen(2).unwrap();
        let once = p.coarsen(4).unwrap();
        prop_assert_eq!(twice.grid(), once.grid());
        prop_assert!(twice.increments().iter().zip(once.increments()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(p.coarsen(1).unwrap(), p.clone());
    }

    #[test]
    fn constant_paths_loss_is_grid_free(c in 0.5f64..4.0, r in -2.0f64..2.0, n in 1usize..40, f in 1usize..5) {
        let g = TimeGrid::uniform(n as f64 * 0.1, 0.1).unwrap();
        let t = SamplePath::new(g, 1, vec![c; n + 1]).unwrap();
        let p = SamplePath::new(g, 1, vec![c * (1.0 + r); n + 1]).unwrap();
        let coarse = relative_l2(&p, &t).unwrap();
        let fine = relative_l2(&refine(&p, f), &refine(&t, f)).unwrap();
        prop_assert!((coarse - r.abs()).abs() < 1e-12);
        prop_assert!((fine - coarse).abs() < 1e-12);
    }

    /// Refinement changes the loss only through the weight of the final
    /// node; the step size itself cancels.
    #[test]
    fn refined_loss_depends_only_on_node_weights((d, tv, pv) in path_strategy(), f in 1usize..5) {
        let n = tv.len() / d - 1;
        let g = TimeGrid::uniform(n as f64 * 0.1, 0.1).unwrap();
        let t = SamplePath::new(g, d, tv.clone()).unwrap();
        let p = SamplePath::new(g, d, pv.clone()).unwrap();
        let w = |i: usize| if i == n { 1.0 / f as f64 } else { 1.0 };
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=n {
            for c in 0..d {
                let (a, b) = (pv[i * d + c], tv[i * d + c]);
                num += w(i) * (a - b) * (a - b);
                den += w(i) * b * b;
            }
        }
        let fine = relative_l2(&refine(&p, f), &refine(&t, f)).unwrap();
        prop_assert!((fine - (num / den).sqrt()).abs() < 1e-12);
        let m = mean_relative_l2(&[refine(&p, f)], &[refine(&t, f)]).unwrap();
        prop_assert_eq!(m, fine);
    }

    #[test]
    fn loss_identities((d, tv, pv) in path_strategy()) {
        let n = tv.len() / d - 1;
        let g = TimeGrid::uniform(n as f64 * 0.25, 0.25).unwrap();
        let t = SamplePath::new(g, d, tv).unwrap();
        let p = SamplePath::new(g, d, pv).unwrap();
        prop_assert_eq!(relative_l2(&t, &t).unwrap(), 0.0);
        prop_assert!((relative_l2(&SamplePath::zeros(g, d), &t).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(relative_l2(&p, &t).unwrap() >= 0.0);
    }
}
