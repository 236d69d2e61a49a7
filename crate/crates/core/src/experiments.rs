//! The five benchmark equations, dataset generation, training and evaluation.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{evaluate_records, PathModel};
use crate::nn::AdamState;
use crate::paths::{stream_rng, BrownianPath, PathDataset, PathRecord, SamplePath, Stream, TimeGrid};
use crate::sve::{CoefficientFn, Kernel, Profile, SveProblem};

/// Benchmark horizon and step used throughout the experiments.
pub const HORIZON: f64 = 5.0;
pub const STEP: f64 = 0.1;
pub const LATENT_DIM: usize = 12;
pub const KERNEL_WIDTH: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Pendulum,
    Ou1d,
    Ou2d,
    RoughHeston,
    PathDependent,
}

impl Benchmark {
    pub const ALL: [Benchmark; 5] = [
        Benchmark::Pendulum,
        Benchmark::Ou1d,
        Benchmark::Ou2d,
        Benchmark::RoughHeston,
        Benchmark::PathDependent,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Benchmark::Pendulum => "pendulum",
            Benchmark::Ou1d => "ou1d",
            Benchmark::Ou2d => "ou2d",
            Benchmark::RoughHeston => "rough_heston",
            Benchmark::PathDependent => "path_dependent",
        }
    }
}

impl std::str::FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Config {
                key: "experiment".into(),
                msg: format!("unknown experiment `{s}`"),
            })
    }
}

/// Law of the initial value. `Normal` uses `std` as the standard deviation
/// of each independent component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    Normal { mean: Vec<f64>, std: f64 },
    Deterministic { value: Vec<f64> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Normal { mean, .. } => mean.len(),
            InitialLaw::Deterministic { value } => value.len(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, InitialLaw::Deterministic { .. })
    }

    pub fn sample(&self, seed: u64, index: u64) -> Vec<f64> {
        match self {
            InitialLaw::Deterministic { value } => value.clone(),
            InitialLaw::Normal { mean, std } => {
                let mut rng = stream_rng(seed, index, Stream::Initial);
                let normal = Normal::new(0.0, *std).expect("finite standard deviation");
                mean.iter().map(|m| m + normal.sample(&mut rng)).collect()
            }
        }
    }

    /// How `N(a, b)` is read; echoed into reports.
    pub const CONVENTION: &'static str = "N(mean, std): second parameter is the standard deviation";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub benchmark: Benchmark,
    pub problem: SveProblem,
    pub initial: InitialLaw,
}

impl ExperimentSpec {
    pub fn new(benchmark: Benchmark) -> Self {
        let sqrt = CoefficientFn::SqrtAbs;
        let (problem, initial) = match benchmark {
            Benchmark::Pendulum => (
                SveProblem::new(
                    1,
                    1,
                    Profile::Constant { value: 1.0 },
                    Kernel::LinearLag,
                    Kernel::LinearLag,
                    CoefficientFn::Identity,
                    CoefficientFn::Identity,
                ),
                InitialLaw::Normal {
                    mean: vec![2.0],
                    std: 0.2,
                },
            ),
            Benchmark::Ou1d => (
                SveProblem::new(
                    1,
                    1,
                    Profile::ExpDecay { theta: 1.0 },
                    Kernel::Exponential { theta: 1.0 },
                    Kernel::Exponential { theta: 1.0 },
                    CoefficientFn::Identity,
                    sqrt,
                ),
                InitialLaw::Normal {
                    mean: vec![2.0],
                    std: 0.2,
                },
            ),
            Benchmark::Ou2d => (
                SveProblem::new(
                    2,
                    2,
                    Profile::ExpDecay { theta: 1.0 },
                    Kernel::Exponential { theta: 1.0 },
                    Kernel::Exponential { theta: 1.0 },
                    CoefficientFn::Identity,
                    sqrt,
                ),
                InitialLaw::Deterministic {
                    value: vec![2.0, 2.0],
                },
            ),
            Benchmark::RoughHeston => (
                SveProblem::new(
                    1,
                    1,
                    Profile::Constant { value: 1.0 },
                    Kernel::PowerGamma { alpha: 0.4 },
                    Kernel::PowerGamma { alpha: 0.4 },
                    CoefficientFn::AffineReversion { level: 2.0 },
                    sqrt,
                ),
                InitialLaw::Normal {
                    mean: vec![2.0],
                    std: 0.2,
                },
            ),
            Benchmark::PathDependent => (
                SveProblem::new(
                    1,
                    1,
                    Profile::Constant { value: 1.0 },
                    Kernel::PiecewiseSign { tau: HORIZON / 4.0 },
                    Kernel::PiecewiseSign { tau: HORIZON / 4.0 },
                    CoefficientFn::AffineReversion { level: 2.0 },
                    sqrt,
                ),
                InitialLaw::Normal {
                    mean: vec![5.0],
                    std: 0.5,
                },
            ),
        };
        Self {
            benchmark,
            problem: problem.expect("benchmark problems are well formed"),
            initial,
        }
    }

    /// Same equation started from a fixed value (used for DeepONet runs).
    pub fn with_deterministic_start(mut self, value: f64) -> Self {
        self.initial = InitialLaw::Deterministic {
            value: vec![value; self.problem.d],
        };
        self
    }

    pub fn default_grid() -> TimeGrid {
        TimeGrid::uniform(HORIZON, STEP).expect("benchmark grid")
    }
}

/// Draw record `index` of a dataset: noise and initial value come from
/// streams keyed by `(seed, index)`.
pub fn generate_record(spec: &ExperimentSpec, grid: TimeGrid, seed: u64, index: u64) -> Result<PathRecord> {
    let noise = BrownianPath::sample_indexed(grid, spec.problem.m, seed, index)?;
    let xi = spec.initial.sample(seed, index);
    let path = spec
        .problem
        .solve(&xi, &noise)
        .map_err(|e| e.at_sample(index as usize))?;
    Ok(PathRecord { xi, noise, path })
}

pub fn generate_dataset(spec: &ExperimentSpec, grid: TimeGrid, n: usize, seed: u64) -> Result<PathDataset> {
    if n < 5 {
        return Err(Error::Validation(format!("dataset size {n} below 5")));
    }
    let records = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_record(spec, grid, seed, i))
        .collect::<Result<Vec<_>>>()?;
    PathDataset::new(grid, records)
}

/// Optimizer settings and the piecewise-constant learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub const DEFAULT_LR: f64 = 0.01;
    pub const DEFAULT_DECAY: f64 = 0.8;
    pub const DEFAULT_BATCH: usize = 32;

    /// 400 epochs for small, 300 for mid and 200 for large datasets.
    pub fn default_epochs(n: usize) -> usize {
        match n {
            0..=100 => 400,
            101..=500 => 300,
            _ => 200,
        }
    }

    pub fn for_size(n: usize, seed: u64) -> Self {
        Self {
            epochs: Self::default_epochs(n),
            batch_size: Self::DEFAULT_BATCH,
            lr: Self::DEFAULT_LR,
            decay: Self::DEFAULT_DECAY,
            seed,
        }
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        if self.epochs == 0 || self.epochs % 4 != 0 {
            return Err(Error::Validation(format!(
                "epochs = {} must be a positive multiple of 4",
                self.epochs
            )));
        }
        if self.batch_size == 0 || self.batch_size > n_train {
            return Err(Error::Validation(format!(
                "batch size {} must lie in 1..={n_train}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0) || !(self.decay > 0.0) {
            return Err(Error::Validation("learning rate and decay must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for 1-based `epoch`: multiplied by `decay` after each
    /// quarter of the run, i.e. past epochs `ceil(E/4)`, `ceil(E/2)`, `ceil(3E/4)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let e = self.epochs;
        let bounds = [e.div_ceil(4), e.div_ceil(2), (3 * e).div_ceil(4)];
        let passed = bounds.iter().filter(|&&b| epoch > b).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub train_loss: f64,
    pub test_loss: f64,
    /// Mean squared error per node, reported for DeepONet runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub model: String,
    pub n_params: usize,
    pub config: TrainConfig,
    /// Training objective: "relative_l2" or "mse".
    pub objective: String,
    pub epochs: Vec<EpochRecord>,
    pub metrics: Metrics,
    pub wall_time_secs: f64,
}

impl LossReport {
    pub fn write_losses_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,lr,train_loss")?;
        for e in &self.epochs {
            writeln!(out, "{},{:.16e},{:.16e}", e.epoch, e.lr, e.train_loss)?;
        }
        Ok(())
    }

    pub fn train_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Adam over minibatches of `train` only; returns the per-epoch log.
pub fn fit(model: &mut dyn PathModel, train: &[&PathRecord], cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    cfg.validate(train.len())?;
    let (d, m) = model.dims();
    if let Some(bad) = train
        .iter()
        .position(|r| r.path.dim() != d || r.noise.dim() != m || r.xi.len() != d)
    {
        return Err(Error::DimMismatch(format!(
            "training record {bad} does not match model dimensions (d = {d}, m = {m})"
        )));
    }
    let mut adam = AdamState::new(model.params().len(), cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        adam.lr = cfg.learning_rate(epoch);
        let mut rng = stream_rng(cfg.seed, epoch as u64, Stream::Shuffle);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PathRecord> = chunk.iter().map(|&i| train[i]).collect();
            let bg = model.batch_grad(&batch)?;
            if !bg.loss.is_finite() || bg.loss > 1e6 {
                return Err(Error::DivergedLoss {
                    epoch,
                    loss: bg.loss,
                });
            }
            total += bg.loss * batch.len() as f64;
            let params = model.params_mut();
            params.grads = bg.grad;
            adam.step(params);
        }
        log.push(EpochRecord {
            epoch,
            lr: adam.lr,
            train_loss: total / train.len() as f64,
        });
    }
    Ok(log)
}

/// Mean relative L2 loss on the train and test splits.
pub fn evaluate(model: &dyn PathModel, data: &PathDataset) -> Result<(f64, f64)> {
    check_model_data(model, data)?;
    let train = evaluate_records(model, &data.train())?;
    let test = evaluate_records(model, &data.test())?;
    Ok((train, test))
}

fn mse(model: &dyn PathModel, records: &[&PathRecord]) -> Result<f64> {
    let preds: Vec<SamplePath> = model.predict_many(records)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, r) in preds.iter().zip(records) {
        for (a, b) in p.values().iter().zip(r.path.values()) {
            sum += (a - b) * (a - b);
        }
        count += p.values().len();
    }
    Ok(sum / count.max(1) as f64)
}

fn check_model_data(model: &dyn PathModel, data: &PathDataset) -> Result<()> {
    let (d, m) = model.dims();
    if data.dims() != (d, m) {
        return Err(Error::DimMismatch(format!(
            "dataset has (d, m) = {:?}, model expects ({d}, {m})",
            data.dims()
        )));
    }
    Ok(())
}

/// Fit on the training split, then evaluate both splits.
pub fn train(model: &mut dyn PathModel, data: &PathDataset, cfg: &TrainConfig) -> Result<LossReport> {
    check_model_data(model, data)?;
    let deeponet = model.kind() == crate::model::ModelKind::Deeponet;
    if deeponet {
        let first = &data.records()[0].xi;
        if data.records().iter().any(|r| &r.xi != first) {
            return Err(Error::Validation(
                "DeepONet requires a deterministic initial value".into(),
            ));
        }
    }
    let start = Instant::now();
    let epochs = fit(model, &data.train(), cfg)?;
    let (train_loss, test_loss) = evaluate(model, data)?;
    let (train_mse, test_mse) = if deeponet {
        (Some(mse(model, &data.train())?), Some(mse(model, &data.test())?))
    } else {
        (None, None)
    };
    Ok(LossReport {
        model: model.kind().as_str().to_string(),
        n_params: model.params().len(),
        config: cfg.clone(),
        objective: if deeponet { "mse" } else { "relative_l2" }.to_string(),
        epochs,
        metrics: Metrics {
            train_loss,
            test_loss,
            train_mse,
            test_mse,
        },
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
