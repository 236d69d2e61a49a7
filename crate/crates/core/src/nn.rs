//! Feedforward networks over a shared flat parameter vector, and Adam.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::paths::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LipSwish,
    None,
}

/// Layer widths `[w_0, ..., w_L]`; hidden layers use `hidden`, the output
/// layer is always linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::BadDims(format!("invalid layer widths {widths:?}")));
        }
        Ok(Self { widths, hidden })
    }

    pub fn linear(n_in: usize, n_out: usize) -> Result<Self> {
        Self::new(vec![n_in, n_out], Activation::None)
    }

    pub fn lipswish(widths: Vec<usize>) -> Result<Self> {
        Self::new(widths, Activation::LipSwish)
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// One layer's location inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub network: String,
    pub layer: usize,
    pub weights: usize,
    pub bias: usize,
    pub rows: usize,
    pub cols: usize,
}

/// A network bound to its layer slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub name: String,
    pub spec: MlpSpec,
    pub offset: usize,
}

impl Mlp {
    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let mut off = self.offset;
        self.spec.widths.windows(2).map(move |w| {
            let (cols, rows) = (w[0], w[1]);
            let wo = off;
            let bo = off + rows * cols;
            off = bo + rows;
            (wo, bo, rows, cols)
        })
    }

    pub fn len(&self) -> usize {
        self.spec.param_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Offset of the first layer's weights.
    pub fn first_weights(&self) -> usize {
        self.offset
    }

    /// Offsets `(weights, bias, rows, cols)` of the output layer.
    pub fn output_layer(&self) -> (usize, usize, usize, usize) {
        self.layer_offsets().last().unwrap()
    }

    /// Affine maps with `hidden` activations between them, recorded on `tape`.
    pub fn forward(&self, params: &[f64], x: NodeId, tape: &mut Tape) -> Result<NodeId> {
        if tape.node_len(x) != self.spec.input_width() {
            return Err(Error::ShapeMismatch(format!(
                "{} expects input width {}, got {}",
                self.name,
                self.spec.input_width(),
                tape.node_len(x)
            )));
        }
        let n = self.spec.n_layers();
        let mut h = x;
        for (l, (wo, bo, rows, _)) in self.layer_offsets().enumerate() {
            h = tape.affine(params, h, wo, bo, rows);
            if l + 1 < n && self.spec.hidden == Activation::LipSwish {
                h = tape.lipswish(h);
            }
        }
        Ok(h)
    }

    /// Plain evaluation without recording.
    pub fn eval(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let input = tape.input(x);
        let out = self.forward(params, input, &mut tape)?;
        Ok(tape.value(out).to_vec())
    }

    /// Zero all weights and set the output bias so the network is the
    /// constant `value` (exactly, for any input).
    pub fn pin_constant(&self, params: &mut [f64], value: f64) {
        params[self.range()].fill(0.0);
        let (_, bo, rows, _) = self.output_layer();
        params[bo..bo + rows].fill(value);
    }
}

/// Flat storage of all trainable weights with a parallel gradient array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grads: Vec<f64>,
    pub slots: Vec<LayerSlot>,
}

impl ParamVector {
    /// Lay out `specs` back to back and return the bound networks.
    pub fn layout(specs: Vec<(&str, MlpSpec)>) -> (Self, Vec<Mlp>) {
        let mut offset = 0;
        let mut nets = Vec::with_capacity(specs.len());
        let mut slots = Vec::new();
        for (name, spec) in specs {
            let net = Mlp {
                name: name.to_string(),
                spec,
                offset,
            };
            for (layer, (weights, bias, rows, cols)) in net.layer_offsets().enumerate() {
                slots.push(LayerSlot {
                    network: name.to_string(),
                    layer,
                    weights,
                    bias,
                    rows,
                    cols,
                });
            }
            offset += net.len();
            nets.push(net);
        }
        (
            Self {
                values: vec![0.0; offset],
                grads: vec![0.0; offset],
                slots,
            },
            nets,
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.grads.resize(self.values.len(), 0.0);
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases of
    /// every layer.
    pub fn init_uniform(&mut self, seed: u64) {
        let mut rng = stream_rng(seed, 0, Stream::Init);
        for slot in &self.slots {
            let bound = 1.0 / (slot.cols as f64).sqrt();
            for v in &mut self.values[slot.weights..slot.weights + slot.rows * slot.cols] {
                *v = rng.random_range(-bound..=bound);
            }
            for v in &mut self.values[slot.bias..slot.bias + slot.rows] {
                *v = rng.random_range(-bound..=bound);
            }
        }
    }

    pub const MAGIC: &'static [u8; 8] = b"NSVEPAR1";

    /// `NSVEPAR1`, little-endian u64 length, then the values as little-endian f64.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(Self::MAGIC)?;
        out.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Vec<f64>> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("bad parameter file magic".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut values = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            input.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        Ok(values)
    }

    /// Replace values from a file written by [`write_binary`](Self::write_binary).
    pub fn load_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Format(format!(
                "parameter file holds {} values, model needs {}",
                values.len(),
                self.values.len()
            )));
        }
        self.values = values;
        self.zero_grad();
        Ok(())
    }

    pub fn slots_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.slots)?)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    pub fn step(&mut self, params: &mut ParamVector) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .values
            .iter_mut()
            .zip(&params.grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
