#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volterra_net::autodiff::Tape;
use volterra_net::model::PathModel;
use volterra_net::nn::{Mlp, MlpSpec, ParamVector};
use volterra_net::paths::{PathRecord, SamplePath, TimeGrid};

/// Central finite differences of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|k| {
            y[k] = x[k] + h;
            let up = f(&y);
            y[k] = x[k] - h;
            let dn = f(&y);
            y[k] = x[k];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Largest per-coordinate `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub const REL_FLOOR: f64 = 1e-6;

/// Straight-line relative L2 of two paths: sqrt(sum |p - t|^2 dt) / sqrt(sum |t|^2 dt).
pub fn rel_l2(pred: &[f64], target: &[f64], dt: f64) -> f64 {
    let num: f64 = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * dt;
    let den: f64 = target.iter().map(|b| b * b).sum::<f64>() * dt;
    num.sqrt() / den.sqrt()
}

/// Loss of `model` with parameters `theta` on `records`, evaluated without
/// the tape-based gradient path.
pub fn loss_at<M: PathModel + Clone>(model: &M, theta: &[f64], records: &[&PathRecord]) -> f64 {
    let mut m = model.clone();
    m.params_mut().values.copy_from_slice(theta);
    let total: f64 = records
        .iter()
        .map(|r| {
            let p = m.predict(&r.xi, &r.noise).unwrap();
            rel_l2(p.values(), r.path.values(), r.path.grid().dt())
        })
        .sum();
    total / records.len() as f64
}

pub fn mse_at<M: PathModel + Clone>(model: &M, theta: &[f64], records: &[&PathRecord]) -> f64 {
    let mut m = model.clone();
    m.params_mut().values.copy_from_slice(theta);
    let mut sum = 0.0;
    let mut count = 0;
    for r in records {
        let p = m.predict(&r.xi, &r.noise).unwrap();
        for (a, b) in p.values().iter().zip(r.path.values()) {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    sum / count as f64
}

/// Direct evaluation of a scalar network at a scalar input.
pub fn scalar_net(net: &Mlp, params: &[f64], x: f64) -> f64 {
    net.eval(params, &[x]).unwrap()[0]
}

pub fn grid(horizon: f64, dt: f64) -> TimeGrid {
    TimeGrid::uniform(horizon, dt).unwrap()
}

pub fn path_values(p: &SamplePath) -> Vec<f64> {
    p.values().to_vec()
}

pub fn fresh_tape() -> Tape {
    Tape::new()
}

/// Squared error of a random network against a random target.
pub fn mlp_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=3);
    let mut widths = vec![rng.random_range(1..=4)];
    for _ in 0..depth {
        widths.push(rng.random_range(1..=5));
    }
    let spec = MlpSpec::lipswish(widths).unwrap();
    let (mut pv, nets) = ParamVector::layout(vec![("net", spec.clone())]);
    for v in pv.values.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let x: Vec<f64> = (0..spec.input_width()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = (0..spec.output_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let net = &nets[0];

    let loss = |theta: &[f64]| -> f64 {
        let out = net.eval(theta, &x).unwrap();
        out.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let mut tape = Tape::new();
    let input = tape.input(&x);
    let out = net.forward(&pv.values, input, &mut tape).unwrap();
    let target = tape.input(&y);
    let diff = tape.sub(out, target).unwrap();
    let l = tape.sum_sq(diff);
    let mut grad = vec![0.0; pv.len()];
    tape.backward(l, &pv.values, &mut grad, 1.0).unwrap();
    let fd = fd_gradient(loss, &pv.values, 1e-5);
    max_rel_err(&grad, &fd, REL_FLOOR)
}
