mod common;

use common::*;
use volterra_net::autodiff::Tape;
use volterra_net::baselines::{DeepOnetConfig, DeepOnetModel, NeuralSdeModel};
use volterra_net::model::{AnyModel, PathModel};
use volterra_net::neural_sve::NeuralSveModel;
use volterra_net::nn::Mlp;
use volterra_net::paths::{BrownianPath, TimeGrid};

/// Straight-line neural SVE unroll with every kernel value evaluated
/// directly at its lag.
fn reference_nsve(model: &NeuralSveModel, xi: &[f64], noise: &BrownianPath) -> Vec<f64> {
    let p = &model.params.values;
    let grid = noise.grid();
    let (n, dt, d_h, m) = (grid.n_steps(), grid.dt(), model.d_h, model.m);
    let z0 = model.lift.eval(p, xi).unwrap();
    let mut z: Vec<Vec<f64>> = Vec::new();
    let mut out = Vec::new();
    for i in 0..=n {
        let ti = grid.time(i);
        let g = scalar_net(&model.g_net, p, ti);
        let mut zi: Vec<f64> = z0.iter().map(|v| v * g).collect();
        for (j, zj) in z.iter().enumerate() {
            let lag = (i - j) as f64 * dt;
            let km = scalar_net(&model.k_mu_net, p, lag);
            let ks = scalar_net(&model.k_sigma_net, p, lag);
            let mut input = vec![grid.time(j)];
            input.extend_from_slice(zj);
            let mu = model.mu_net.eval(p, &input).unwrap();
            let sigma = model.sigma_net.eval(p, &input).unwrap();
            let db = noise.increment(j);
            for r in 0..d_h {
                let shock: f64 = (0..m).map(|c| sigma[r * m + c] * db[c]).sum();
                zi[r] += km * mu[r] * dt + ks * shock;
            }
        }
        out.extend(model.readout.eval(p, &zi).unwrap());
        z.push(zi);
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "entry {k}: {x} vs {y}");
    }
}

#[test]
fn table_unroll_matches_direct_evaluation() {
    let model = NeuralSveModel::new(2, 2, 4, 5, 17).unwrap();
    let g = grid(2.0, 0.1);
    let noise = BrownianPath::sample(g, 2, 3).unwrap();
    let xi = [0.7, -1.2];
    let got = model.predict(&xi, &noise).unwrap();
    assert_close(got.values(), &reference_nsve(&model, &xi, &noise), 1e-12);
}

#[test]
fn zero_noise_unroll_matches_deterministic_oracle() {
    let mut model = NeuralSveModel::new(1, 1, 3, 4, 21).unwrap();
    let sigma = model.sigma_net.clone();
    sigma.pin_constant(&mut model.params.values, 0.0);
    let g = grid(5.0, 0.1);
    let noise = BrownianPath::from_increments(g, 1, vec![0.0; 50]).unwrap();
    let got = model.predict(&[2.0], &noise).unwrap();
    assert_close(got.values(), &reference_nsve(&model, &[2.0], &noise), 1e-12);
}

fn copy_net(from: &Mlp, src: &[f64], to: &Mlp, dst: &mut [f64]) {
    assert_eq!(from.spec, to.spec);
    dst[to.range()].copy_from_slice(&src[from.range()]);
}

#[test]
fn unit_kernels_reduce_to_neural_sde() {
    for (d, m) in [(1, 1), (2, 2), (2, 1)] {
        let sde = NeuralSdeModel::new(d, m, 4, 3, 31).unwrap();
        let mut sve = NeuralSveModel::new(d, m, 4, 3, 99).unwrap();
        let src = &sde.params.values;
        let dst = &mut sve.params.values;
        copy_net(&sde.lift, src, &sve.lift, dst);
        copy_net(&sde.readout, src, &sve.readout, dst);
        copy_net(&sde.g_net, src, &sve.g_net, dst);
        copy_net(&sde.mu_net, src, &sve.mu_net, dst);
        copy_net(&sde.sigma_net, src, &sve.sigma_net, dst);
        sve.k_mu_net.clone().pin_constant(dst, 1.0);
        sve.k_sigma_net.clone().pin_constant(dst, 1.0);

        let g = grid(5.0, 0.1);
        let noise = BrownianPath::sample(g, m, 4).unwrap();
        let xi: Vec<f64> = (0..d).map(|k| 1.0 + k as f64).collect();
        let a = sve.predict(&xi, &noise).unwrap();
        let b = sde.predict(&xi, &noise).unwrap();
        assert_close(a.values(), b.values(), 1e-13);
    }
}

/// Two different prefixes reaching the same latent state `Z(t_k)` followed
/// by the same increments give the same suffix.
#[test]
fn neural_sde_markov_splice() {
    let (d_h, m, k) = (2, 2, 6);
    let mut model = NeuralSdeModel::new(1, m, d_h, 3, 8).unwrap();
    // g = 1 so xi enters only through Z_0, and a constant invertible sigma.
    let (g, sigma) = (model.g_net.clone(), model.sigma_net.clone());
    g.pin_constant(&mut model.params.values, 1.0);
    sigma.pin_constant(&mut model.params.values, 0.0);
    let (_, bo, _, _) = sigma.output_layer();
    let s = [0.6, 0.1, -0.2, 0.5];
    model.params.values[bo..bo + 4].copy_from_slice(&s);

    let gr = grid(2.0, 0.1);
    let n = gr.n_steps();
    let a = BrownianPath::sample(gr, m, 1).unwrap();
    let xi = [1.3];
    let za = model.latent_path(&xi, &a).unwrap();

    // Prefix B: fresh increments before step k - 1, then the increment that
    // lands exactly on Z_A(t_k).
    let b0 = BrownianPath::sample(gr, m, 2).unwrap();
    let mut inc = b0.increments().to_vec();
    inc[k * m..].copy_from_slice(&a.increments()[k * m..]);
    let zb = model.latent_path(&xi, &BrownianPath::from_increments(gr, m, inc.clone()).unwrap()).unwrap();
    let zprev = &zb[(k - 1) * d_h..k * d_h];
    let mut input = vec![gr.time(k - 1)];
    input.extend_from_slice(zprev);
    let mu = model.mu_net.eval(&model.params.values, &input).unwrap();
    let target: Vec<f64> = (0..d_h)
        .map(|r| za[k * d_h + r] - zprev[r] - mu[r] * gr.dt())
        .collect();
    // Solve S db = target for the 2x2 row-major S.
    let det = s[0] * s[3] - s[1] * s[2];
    let db = [
        (s[3] * target[0] - s[1] * target[1]) / det,
        (-s[2] * target[0] + s[0] * target[1]) / det,
    ];
    inc[(k - 1) * m..k * m].copy_from_slice(&db);
    let b = BrownianPath::from_increments(gr, m, inc).unwrap();
    let zb = model.latent_path(&xi, &b).unwrap();

    assert!(max_rel_err(&zb[..k * d_h], &za[..k * d_h], 1.0) > 1e-3, "prefixes differ");
    assert_close(&zb[k * d_h..(k + 1) * d_h], &za[k * d_h..(k + 1) * d_h], 1e-12);
    let xa = model.predict(&xi, &a).unwrap();
    let xb = model.predict(&xi, &b).unwrap();
    assert_close(&xb.values()[k..=n], &xa.values()[k..=n], 1e-10);
}

#[test]
fn kernel_nets_run_once_per_lag() {
    let model = NeuralSveModel::new(1, 1, 3, 3, 2).unwrap();
    let g = grid(5.0, 0.1);
    let noise = BrownianPath::sample(g, 1, 0).unwrap();
    let mut tape = Tape::new();
    model.forward(&[1.0], &noise, &mut tape).unwrap();
    assert_eq!(tape.count_affine(model.k_mu_net.first_weights()), 50);
    assert_eq!(tape.count_affine(model.k_sigma_net.first_weights()), 50);
    assert_eq!(tape.count_affine(model.g_net.first_weights()), 51);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = grid(1.0, 0.1);
    let cfg = DeepOnetConfig {
        branch_hidden: vec![5],
        trunk_hidden: vec![4],
        p: 3,
        lr: 1e-3,
        epoch_multiplier: 1,
    };
    let models = [
        AnyModel::Nsve(NeuralSveModel::new(2, 1, 4, 3, 1).unwrap()),
        AnyModel::Nsde(NeuralSdeModel::new(1, 1, 3, 3, 2).unwrap()),
        AnyModel::Deeponet(DeepOnetModel::new(g, 1, 1, cfg, 3).unwrap()),
    ];
    for (i, model) in models.iter().enumerate() {
        let stem = format!("m{i}");
        model.save(dir.path(), &stem).unwrap();
        let back = AnyModel::load(dir.path(), &stem).unwrap();
        assert_eq!(back.header(), model.header());
        assert_eq!(back.as_dyn().params().values, model.as_dyn().params().values);
        let (d, m) = model.as_dyn().dims();
        let noise = BrownianPath::sample(g, m, 5).unwrap();
        let xi = vec![1.5; d];
        assert_eq!(
            back.as_dyn().predict(&xi, &noise).unwrap(),
            model.as_dyn().predict(&xi, &noise).unwrap()
        );
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("{stem}.json"))).unwrap()).unwrap();
        assert_eq!(header["format_version"], 1);
    }
}

#[test]
fn deeponet_rejects_other_grids() {
    let g = grid(5.0, 0.1);
    let model = DeepOnetModel::new(g, 1, 1, DeepOnetConfig::default(), 0).unwrap();
    let fine = BrownianPath::sample(TimeGrid::uniform(5.0, 0.05).unwrap(), 1, 0).unwrap();
    assert!(matches!(
        model.predict(&[2.0], &fine),
        Err(volterra_net::Error::GridMismatch)
    ));
}
