//! Neural stochastic Volterra equations.
//!
//! ```text
//! Z_0 = L(xi)
//! Z_t = Z_0 g(t) + int_0^t K_mu(t-s) mu(s, Z_s) ds + int_0^t K_sigma(t-s) sigma(s, Z_s) dB_s
//! X_t = Pi(Z_t)
//! ```
//!
//! with all seven maps feedforward networks over one [`ParamVector`]. The
//! forward pass unrolls the left-point Volterra Euler-Maruyama scheme on a
//! [`Tape`], so gradients are obtained by backpropagating through the solver.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{ModelKind, PathModel};
use crate::nn::{Mlp, MlpSpec, ParamVector};
use crate::paths::{BrownianPath, TimeGrid};

#[derive(Debug, Clone)]
pub struct NeuralSveModel {
    pub d: usize,
    pub m: usize,
    pub d_h: usize,
    pub d_k: usize,
    pub params: ParamVector,
    pub lift: Mlp,
    pub readout: Mlp,
    pub g_net: Mlp,
    pub k_mu_net: Mlp,
    pub k_sigma_net: Mlp,
    pub mu_net: Mlp,
    pub sigma_net: Mlp,
}

pub(crate) fn check_dims(d: usize, m: usize, d_h: usize, d_k: usize) -> Result<()> {
    if d == 0 || m == 0 || d_h == 0 || d_k == 0 {
        return Err(Error::BadDims("all dimensions must be positive".into()));
    }
    if d_h <= d {
        return Err(Error::BadDims(format!(
            "latent dimension d_h = {d_h} must exceed d = {d}"
        )));
    }
    Ok(())
}

/// `d -> d_h` lift, `d_h -> d` readout, three `1 -> d_K -> d_K -> 1`
/// scalar nets, `1 + d_h -> d_h -> d_h` drift and `1 + d_h -> d_h m -> d_h m`
/// diffusion.
pub(crate) fn latent_specs(d: usize, m: usize, d_h: usize, d_k: usize, kernels: bool) -> Result<Vec<(&'static str, MlpSpec)>> {
    let scalar_net = || MlpSpec::lipswish(vec![1, d_k, d_k, 1]);
    let mut specs = vec![
        ("lift", MlpSpec::linear(d, d_h)?),
        ("readout", MlpSpec::linear(d_h, d)?),
        ("g", scalar_net()?),
    ];
    if kernels {
        specs.push(("k_mu", scalar_net()?));
        specs.push(("k_sigma", scalar_net()?));
    }
    specs.push(("mu", MlpSpec::lipswish(vec![1 + d_h, d_h, d_h])?));
    specs.push(("sigma", MlpSpec::lipswish(vec![1 + d_h, d_h * m, d_h * m])?));
    Ok(specs)
}

/// Cached evaluations of the one-dimensional networks on a uniform grid.
#[derive(Debug, Clone)]
pub struct KernelTable {
    /// `g(t_i)`, `i = 0..=n`
    pub g: Vec<NodeId>,
    /// `K_mu(k dt)` at index `k - 1`, `k = 1..=n`
    pub k_mu: Vec<NodeId>,
    /// `K_sigma(k dt)` at index `k - 1`
    pub k_sigma: Vec<NodeId>,
}

impl KernelTable {
    pub fn k_mu(&self, lag_steps: usize) -> NodeId {
        self.k_mu[lag_steps - 1]
    }

    pub fn k_sigma(&self, lag_steps: usize) -> NodeId {
        self.k_sigma[lag_steps - 1]
    }
}

/// Networks shared by the neural SVE and neural SDE unrolls.
pub(crate) struct LatentNets<'a> {
    pub m: usize,
    pub lift: &'a Mlp,
    pub readout: &'a Mlp,
    pub mu_net: &'a Mlp,
    pub sigma_net: &'a Mlp,
}

pub(crate) fn g_table(params: &[f64], g_net: &Mlp, grid: &TimeGrid, tape: &mut Tape) -> Result<Vec<NodeId>> {
    (0..grid.n_nodes())
        .map(|i| {
            let t = tape.constant(grid.time(i));
            g_net.forward(params, t, tape)
        })
        .collect()
}

/// Left-point Volterra Euler-Maruyama in the latent space. `weights(k)`
/// yields the (drift, diffusion) kernel nodes for a lag of `k` steps.
/// Returns the readout and latent nodes at every grid node.
pub(crate) fn latent_unroll(
    nets: &LatentNets<'_>,
    params: &[f64],
    g: &[NodeId],
    weights: impl Fn(usize) -> (NodeId, NodeId),
    xi: &[f64],
    noise: &BrownianPath,
    tape: &mut Tape,
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    if noise.dim() != nets.m {
        return Err(Error::DimMismatch(format!(
            "noise has dimension {}, model expects {}",
            noise.dim(),
            nets.m
        )));
    }
    let grid = noise.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let xi_node = tape.input(xi);
    let z0 = nets.lift.forward(params, xi_node, tape)?;

    let mut drift: Vec<NodeId> = Vec::with_capacity(n);
    let mut shock: Vec<NodeId> = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n + 1);
    let mut latent = Vec::with_capacity(n + 1);
    let mut terms = Vec::with_capacity(2 * n + 1);
    for i in 0..=n {
        terms.clear();
        terms.push((g[i], z0));
        for j in 0..i {
            let (km, ks) = weights(i - j);
            terms.push((km, drift[j]));
            terms.push((ks, shock[j]));
        }
        let z = tape.weighted_sum(&terms)?;
        if tape.value(z).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePath {
                node: i,
                sample: None,
            });
        }
        if i < n {
            let t = tape.constant(grid.time(i));
            let tz = tape.concat(&[t, z]);
            let mu = nets.mu_net.forward(params, tz, tape)?;
            drift.push(tape.scale_const(mu, dt));
            let sigma = nets.sigma_net.forward(params, tz, tape)?;
            // row-major d_h x m times dB
            shock.push(tape.mat_vec(sigma, noise.increment(i))?);
        }
        out.push(nets.readout.forward(params, z, tape)?);
        latent.push(z);
    }
    Ok((out, latent))
}

impl NeuralSveModel {
    pub fn new(d: usize, m: usize, d_h: usize, d_k: usize, seed: u64) -> Result<Self> {
        check_dims(d, m, d_h, d_k)?;
        let (mut params, nets) = ParamVector::layout(latent_specs(d, m, d_h, d_k, true)?);
        params.init_uniform(seed);
        let mut it = nets.into_iter();
        let mut next = || it.next().unwrap();
        Ok(Self {
            d,
            m,
            d_h,
            d_k,
            lift: next(),
            readout: next(),
            g_net: next(),
            k_mu_net: next(),
            k_sigma_net: next(),
            mu_net: next(),
            sigma_net: next(),
            params,
        })
    }

    pub fn networks(&self) -> [&Mlp; 7] {
        [
            &self.lift,
            &self.readout,
            &self.g_net,
            &self.k_mu_net,
            &self.k_sigma_net,
            &self.mu_net,
            &self.sigma_net,
        ]
    }

    /// `g` at every node and both kernels at every positive lag `k dt`:
    /// each scalar net runs once per entry instead of once per node pair.
    pub fn kernel_table(&self, grid: &TimeGrid, tape: &mut Tape) -> Result<KernelTable> {
        let p = &self.params.values;
        let g = g_table(p, &self.g_net, grid, tape)?;
        let mut k_mu = Vec::with_capacity(grid.n_steps());
        let mut k_sigma = Vec::with_capacity(grid.n_steps());
        for k in 1..=grid.n_steps() {
            let lag = tape.constant(grid.time(k));
            k_mu.push(self.k_mu_net.forward(p, lag, tape)?);
            k_sigma.push(self.k_sigma_net.forward(p, lag, tape)?);
        }
        Ok(KernelTable { g, k_mu, k_sigma })
    }

    fn latent(&self) -> LatentNets<'_> {
        LatentNets {
            m: self.m,
            lift: &self.lift,
            readout: &self.readout,
            mu_net: &self.mu_net,
            sigma_net: &self.sigma_net,
        }
    }

    pub fn nsve_forward(&self, xi: &[f64], noise: &BrownianPath, tape: &mut Tape) -> Result<Vec<NodeId>> {
        if xi.len() != self.d {
            return Err(Error::DimMismatch(format!(
                "initial value has length {}, model expects {}",
                xi.len(),
                self.d
            )));
        }
        let table = self.kernel_table(noise.grid(), tape)?;
        latent_unroll(
            &self.latent(),
            &self.params.values,
            &table.g,
            |k| (table.k_mu(k), table.k_sigma(k)),
            xi,
            noise,
            tape,
        )
        .map(|(x, _)| x)
    }
}

impl PathModel for NeuralSveModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Nsve
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn dims(&self) -> (usize, usize) {
        (self.d, self.m)
    }

    fn forward(&self, xi: &[f64], noise: &BrownianPath, tape: &mut Tape) -> Result<Vec<NodeId>> {
        self.nsve_forward(xi, noise, tape)
    }
}
