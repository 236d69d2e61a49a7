//! Common interface of the trainable path models and their on-disk format.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::baselines::{DeepOnetConfig, DeepOnetModel, NeuralSdeModel};
use crate::error::{Error, Result};
use crate::neural_sve::NeuralSveModel;
use crate::nn::ParamVector;
use crate::paths::{mean_relative_l2, BrownianPath, PathRecord, SamplePath, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Nsve,
    Nsde,
    Deeponet,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Nsve => "nsve",
            ModelKind::Nsde => "nsde",
            ModelKind::Deeponet => "deeponet",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nsve" => Ok(ModelKind::Nsve),
            "nsde" => Ok(ModelKind::Nsde),
            "deeponet" => Ok(ModelKind::Deeponet),
            other => Err(Error::Config {
                key: "model".into(),
                msg: format!("unknown model kind `{other}`"),
            }),
        }
    }
}

/// Loss and parameter gradient of one minibatch.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Relative discrete L2 error of a recorded path against a fixed target,
/// as a scalar tape node.
pub fn relative_l2_node(tape: &mut Tape, pred: &[NodeId], target: &SamplePath) -> Result<NodeId> {
    let denom = target.l2_norm();
    if denom < 1e-12 {
        return Err(Error::ZeroTargetNorm { index: 0 });
    }
    let stacked = tape.concat(pred);
    let tgt = tape.input(target.values());
    let diff = tape.sub(stacked, tgt)?;
    let sq = tape.sum_sq(diff);
    let weighted = tape.scale_const(sq, target.grid().dt());
    let norm = tape.sqrt(weighted);
    Ok(tape.scale_const(norm, 1.0 / denom))
}

pub fn path_from_nodes(tape: &Tape, nodes: &[NodeId], grid: TimeGrid, dim: usize) -> Result<SamplePath> {
    let mut values = Vec::with_capacity(nodes.len() * dim);
    for &n in nodes {
        values.extend_from_slice(tape.value(n));
    }
    let path = SamplePath::new(grid, dim, values)?;
    if let Some(node) = path.first_non_finite() {
        return Err(Error::NonFinitePath { node, sample: None });
    }
    Ok(path)
}

/// A supervised path model: maps `(xi, noise)` to a predicted trajectory.
pub trait PathModel: Sync {
    fn kind(&self) -> ModelKind;
    fn params(&self) -> &ParamVector;
    fn params_mut(&mut self) -> &mut ParamVector;
    /// `(d, m)`
    fn dims(&self) -> (usize, usize);

    /// Record the prediction, one `d`-vector node per grid node.
    fn forward(&self, xi: &[f64], noise: &BrownianPath, tape: &mut Tape) -> Result<Vec<NodeId>>;

    fn predict(&self, xi: &[f64], noise: &BrownianPath) -> Result<SamplePath> {
        let mut tape = Tape::new();
        let nodes = self.forward(xi, noise, &mut tape)?;
        path_from_nodes(&tape, &nodes, *noise.grid(), self.dims().0)
    }

    fn predict_many(&self, records: &[&PathRecord]) -> Result<Vec<SamplePath>> {
        records
            .par_iter()
            .enumerate()
            .map(|(i, r)| self.predict(&r.xi, &r.noise).map_err(|e| e.at_sample(i)))
            .collect()
    }

    /// Mean relative L2 loss of the batch and its gradient. Samples are
    /// processed in parallel on private tapes; gradients are merged in
    /// batch order so the result does not depend on the thread count.
    fn batch_grad(&self, batch: &[&PathRecord]) -> Result<BatchGrad> {
        let params = &self.params().values;
        let scale = 1.0 / batch.len() as f64;
        let per_sample: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, rec)| {
                let mut tape = Tape::new();
                let nodes = self
                    .forward(&rec.xi, &rec.noise, &mut tape)
                    .map_err(|e| e.at_sample(i))?;
                let loss = relative_l2_node(&mut tape, &nodes, &rec.path)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFinitePath {
                        node: 0,
                        sample: Some(i),
                    });
                }
                let mut grad = vec![0.0; params.len()];
                tape.backward(loss, params, &mut grad, scale)?;
                Ok((value, grad))
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; params.len()];
        for r in per_sample {
            let (l, g) = r?;
            loss += l * scale;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok(BatchGrad { loss, grad })
    }
}

/// Train and test mean relative L2 loss.
pub fn evaluate_records(model: &dyn PathModel, records: &[&PathRecord]) -> Result<f64> {
    let preds = model.predict_many(records)?;
    let targets: Vec<SamplePath> = records.iter().map(|r| r.path.clone()).collect();
    mean_relative_l2(&preds, &targets)
}

/// Any of the three model kinds.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Nsve(NeuralSveModel),
    Nsde(NeuralSdeModel),
    Deeponet(DeepOnetModel),
}

impl AnyModel {
    pub fn as_dyn(&self) -> &dyn PathModel {
        match self {
            AnyModel::Nsve(m) => m,
            AnyModel::Nsde(m) => m,
            AnyModel::Deeponet(m) => m,
        }
    }

    pub fn as_dyn_mut(&mut self) -> &mut dyn PathModel {
        match self {
            AnyModel::Nsve(m) => m,
            AnyModel::Nsde(m) => m,
            AnyModel::Deeponet(m) => m,
        }
    }

    pub fn header(&self) -> ModelHeader {
        let (d, m) = self.as_dyn().dims();
        match self {
            AnyModel::Nsve(x) => ModelHeader {
                kind: ModelKind::Nsve,
                d,
                m,
                d_h: Some(x.d_h),
                d_k: Some(x.d_k),
                deeponet: None,
                grid: None,
                format_version: FORMAT_VERSION,
            },
            AnyModel::Nsde(x) => ModelHeader {
                kind: ModelKind::Nsde,
                d,
                m,
                d_h: Some(x.d_h),
                d_k: Some(x.d_k),
                deeponet: None,
                grid: None,
                format_version: FORMAT_VERSION,
            },
            AnyModel::Deeponet(x) => ModelHeader {
                kind: ModelKind::Deeponet,
                d,
                m,
                d_h: None,
                d_k: None,
                deeponet: Some(x.config.clone()),
                grid: Some(*x.grid()),
                format_version: FORMAT_VERSION,
            },
        }
    }

    /// Writes `<stem>.json` (header), `<stem>.bin` (parameters) and
    /// `<stem>.slots.json` (layer offsets).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let header = self.header();
        let f = BufWriter::new(File::create(dir.join(format!("{stem}.json")))?);
        serde_json::to_writer_pretty(f, &header)?;
        let params = self.as_dyn().params();
        params.write_binary(BufWriter::new(File::create(dir.join(format!("{stem}.bin")))?))?;
        std::fs::write(dir.join(format!("{stem}.slots.json")), params.slots_json()?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let header: ModelHeader =
            serde_json::from_reader(BufReader::new(File::open(dir.join(format!("{stem}.json")))?))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {}",
                header.format_version
            )));
        }
        let mut model = header.build(0)?;
        let values =
            ParamVector::read_binary(BufReader::new(File::open(dir.join(format!("{stem}.bin")))?))?;
        model.as_dyn_mut().params_mut().load_values(values)?;
        Ok(model)
    }
}

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub kind: ModelKind,
    pub d: usize,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_h: Option<usize>,
    #[serde(rename = "d_K", default, skip_serializing_if = "Option::is_none")]
    pub d_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deeponet: Option<DeepOnetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<TimeGrid>,
    pub format_version: u32,
}

impl ModelHeader {
    /// Fresh model with seeded initialization.
    pub fn build(&self, seed: u64) -> Result<AnyModel> {
        let missing = |what: &str| Error::Format(format!("model header lacks `{what}`"));
        Ok(match self.kind {
            ModelKind::Nsve => AnyModel::Nsve(NeuralSveModel::new(
                self.d,
                self.m,
                self.d_h.ok_or_else(|| missing("d_h"))?,
                self.d_k.ok_or_else(|| missing("d_K"))?,
                seed,
            )?),
            ModelKind::Nsde => AnyModel::Nsde(NeuralSdeModel::new(
                self.d,
                self.m,
                self.d_h.ok_or_else(|| missing("d_h"))?,
                self.d_k.ok_or_else(|| missing("d_K"))?,
                seed,
            )?),
            ModelKind::Deeponet => AnyModel::Deeponet(DeepOnetModel::new(
                self.grid.ok_or_else(|| missing("grid"))?,
                self.d,
                self.m,
                self.deeponet.clone().ok_or_else(|| missing("deeponet"))?,
                seed,
            )?),
        })
    }
}
