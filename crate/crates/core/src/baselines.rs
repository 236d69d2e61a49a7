//! Comparison models: the neural SDE (the neural SVE without kernels) and a
//! DeepONet bound to one time grid.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{path_from_nodes, BatchGrad, ModelKind, PathModel};
use crate::neural_sve::{check_dims, g_table, latent_specs, latent_unroll, LatentNets};
use crate::nn::{Mlp, MlpSpec, ParamVector};
use crate::paths::{BrownianPath, PathRecord, SamplePath, TimeGrid};

#[derive(Debug, Clone)]
pub struct NeuralSdeModel {
    pub d: usize,
    pub m: usize,
    pub d_h: usize,
    pub d_k: usize,
    pub params: ParamVector,
    pub lift: Mlp,
    pub readout: Mlp,
    pub g_net: Mlp,
    pub mu_net: Mlp,
    pub sigma_net: Mlp,
}

impl NeuralSdeModel {
    pub fn new(d: usize, m: usize, d_h: usize, d_k: usize, seed: u64) -> Result<Self> {
        check_dims(d, m, d_h, d_k)?;
        let (mut params, nets) = ParamVector::layout(latent_specs(d, m, d_h, d_k, false)?);
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
            mu_net: next(),
            sigma_net: next(),
            params,
        })
    }

    /// `Z_i = Z_0 g(t_i) + sum_{j<i} mu(t_j, Z_j) dt + sum_{j<i} sigma(t_j, Z_j) dB_j`
    pub fn nsde_forward(&self, xi: &[f64], noise: &BrownianPath, tape: &mut Tape) -> Result<Vec<NodeId>> {
        self.unroll(xi, noise, tape).map(|(x, _)| x)
    }

    /// Latent state `Z_i` at every grid node, row-major `(n + 1) x d_h`.
    pub fn latent_path(&self, xi: &[f64], noise: &BrownianPath) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (_, z) = self.unroll(xi, noise, &mut tape)?;
        Ok(z.iter().flat_map(|&n| tape.value(n).to_vec()).collect())
    }

    fn unroll(&self, xi: &[f64], noise: &BrownianPath, tape: &mut Tape) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        if xi.len() != self.d {
            return Err(Error::DimMismatch(format!(
                "initial value has length {}, model expects {}",
                xi.len(),
                self.d
            )));
        }
        let p = &self.params.values;
        let g = g_table(p, &self.g_net, noise.grid(), tape)?;
        let one = tape.constant(1.0);
        let nets = LatentNets {
            m: self.m,
            lift: &self.lift,
            readout: &self.readout,
            mu_net: &self.mu_net,
            sigma_net: &self.sigma_net,
        };
        latent_unroll(&nets, p, &g, |_| (one, one), xi, noise, tape)
    }
}

impl PathModel for NeuralSdeModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Nsde
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
        self.nsde_forward(xi, noise, tape)
    }
}

/// Branch/trunk architecture of the DeepONet baseline and its optimizer
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepOnetConfig {
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub p: usize,
    pub lr: f64,
    /// Default epoch budget relative to the latent models; the smaller
    /// learning rate needs longer to converge.
    #[serde(default = "default_epoch_multiplier")]
    pub epoch_multiplier: usize,
}

fn default_epoch_multiplier() -> usize {
    10
}

impl Default for DeepOnetConfig {
    fn default() -> Self {
        Self {
            branch_hidden: vec![128; 3],
            trunk_hidden: vec![128; 3],
            p: 64,
            lr: 1e-3,
            epoch_multiplier: default_epoch_multiplier(),
        }
    }
}

/// `DeepONet(B)(t) = b_0 + sum_k b_k t_k`, with `(b_0, ..., b_p)` from the
/// branch net applied to the sampled Brownian path and `(t_1, ..., t_p)`
/// from the trunk net applied to `t`.
#[derive(Debug, Clone)]
pub struct DeepOnetModel {
    grid: TimeGrid,
    pub d: usize,
    pub m: usize,
    pub config: DeepOnetConfig,
    pub params: ParamVector,
    pub branch: Mlp,
    pub trunk: Mlp,
}

impl DeepOnetModel {
    pub fn new(grid: TimeGrid, d: usize, m: usize, config: DeepOnetConfig, seed: u64) -> Result<Self> {
        if d != 1 {
            return Err(Error::BadDims(format!(
                "the DeepONet baseline supports d = 1 only, got {d}"
            )));
        }
        if m == 0 || config.p == 0 {
            return Err(Error::BadDims("m and p must be positive".into()));
        }
        let mut branch_w = vec![m * grid.n_nodes()];
        branch_w.extend(&config.branch_hidden);
        branch_w.push(config.p + 1);
        let mut trunk_w = vec![1];
        trunk_w.extend(&config.trunk_hidden);
        trunk_w.push(config.p);
        let (mut params, nets) = ParamVector::layout(vec![
            ("branch", MlpSpec::lipswish(branch_w)?),
            ("trunk", MlpSpec::lipswish(trunk_w)?),
        ]);
        params.init_uniform(seed);
        let mut it = nets.into_iter();
        let branch = it.next().unwrap();
        let trunk = it.next().unwrap();
        Ok(Self {
            grid,
            d,
            m,
            config,
            params,
            branch,
            trunk,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn check_noise(&self, noise: &BrownianPath) -> Result<()> {
        if !noise.grid().matches(&self.grid) {
            return Err(Error::GridMismatch);
        }
        if noise.dim() != self.m {
            return Err(Error::DimMismatch(format!(
                "noise has dimension {}, model expects {}",
                noise.dim(),
                self.m
            )));
        }
        Ok(())
    }

    fn branch_coeffs(&self, noise: &BrownianPath, tape: &mut Tape) -> Result<NodeId> {
        self.check_noise(noise)?;
        let input = tape.input(&noise.cumulative());
        self.branch.forward(&self.params.values, input, tape)
    }

    fn trunk_basis(&self, t: f64, tape: &mut Tape) -> Result<NodeId> {
        let input = tape.constant(t);
        self.trunk.forward(&self.params.values, input, tape)
    }

    /// Output at a single time `t`.
    pub fn deeponet_forward(&self, noise: &BrownianPath, t: f64, tape: &mut Tape) -> Result<NodeId> {
        if !(0.0..=self.grid.horizon()).contains(&t) {
            return Err(Error::Validation(format!(
                "query time {t} outside [0, {}]",
                self.grid.horizon()
            )));
        }
        let coeffs = self.branch_coeffs(noise, tape)?;
        let basis = self.trunk_basis(t, tape)?;
        tape.biased_dot(coeffs, basis)
    }

    fn basis_table(&self, tape: &mut Tape) -> Result<Vec<NodeId>> {
        (0..self.grid.n_nodes())
            .map(|i| self.trunk_basis(self.grid.time(i), tape))
            .collect()
    }

    fn path_nodes(&self, coeffs: NodeId, basis: &[NodeId], tape: &mut Tape) -> Result<Vec<NodeId>> {
        basis.iter().map(|&b| tape.biased_dot(coeffs, b)).collect()
    }
}

impl PathModel for DeepOnetModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Deeponet
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

    /// The initial value is not an input of this model.
    fn forward(&self, _xi: &[f64], noise: &BrownianPath, tape: &mut Tape) -> Result<Vec<NodeId>> {
        let coeffs = self.branch_coeffs(noise, tape)?;
        let basis = self.basis_table(tape)?;
        self.path_nodes(coeffs, &basis, tape)
    }

    fn predict_many(&self, records: &[&PathRecord]) -> Result<Vec<SamplePath>> {
        let mut tape = Tape::new();
        let basis = self.basis_table(&mut tape)?;
        let mark = tape.clone();
        let mut out = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let mut tape = mark.clone();
            let coeffs = self.branch_coeffs(&rec.noise, &mut tape)?;
            let nodes = self.path_nodes(coeffs, &basis, &mut tape)?;
            out.push(path_from_nodes(&tape, &nodes, self.grid, 1).map_err(|e| e.at_sample(i))?);
        }
        Ok(out)
    }

    /// Mean squared error over all nodes and samples; the trunk runs once
    /// per batch since every sample shares the grid.
    fn batch_grad(&self, batch: &[&PathRecord]) -> Result<BatchGrad> {
        let mut tape = Tape::new();
        let basis = self.basis_table(&mut tape)?;
        let mut errs = Vec::with_capacity(batch.len());
        for (i, rec) in batch.iter().enumerate() {
            let coeffs = self.branch_coeffs(&rec.noise, &mut tape)?;
            let nodes = self.path_nodes(coeffs, &basis, &mut tape)?;
            let stacked = tape.concat(&nodes);
            if tape.value(stacked).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinitePath {
                    node: 0,
                    sample: Some(i),
                });
            }
            let target = tape.input(rec.path.values());
            let diff = tape.sub(stacked, target)?;
            errs.push(diff);
        }
        let all = tape.concat(&errs);
        let sq = tape.sum_sq(all);
        let count = tape.node_len(all) as f64;
        let loss = tape.scale_const(sq, 1.0 / count);
        let mut grad = vec![0.0; self.params.len()];
        tape.backward(loss, &self.params.values, &mut grad, 1.0)?;
        Ok(BatchGrad {
            loss: tape.scalar(loss),
            grad,
        })
    }
}
