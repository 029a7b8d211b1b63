//! Multilayer perceptron with ReLU hidden layers and logistic outputs.
//!
//! Model file layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes   "DLACBMDL"
//! version      u32       1
//! layer_count  u32       number of weight layers L
//! dims         u32 x (L+1)
//! per layer    f64 x (out*in) weights, row-major (one row per output unit)
//!              f64 x out      biases
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore};

use super::EngineError;
use crate::types::OPERATION_COUNT;

pub const DEFAULT_DIMS: [usize; 4] = [32, 64, 64, OPERATION_COUNT];
pub const MODEL_MAGIC: &[u8; 8] = b"DLACBMDL";
pub const MODEL_VERSION: u32 = 1;

// Keeps scores strictly inside (0, 1) even when a logit saturates.
const SCORE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.biases.iter().enumerate().map(|(j, b)| {
            let row = &self.weights[j * self.inputs..(j + 1) * self.inputs];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }
}

/// One training example: model input and the four 0/1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub labels: [f64; OPERATION_COUNT],
}

/// Same shapes as the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    /// Flattened in parameter order: per layer, weights then biases.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionModel {
    layers: Vec<Layer>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(z)` against `y`, computed from the logit.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

fn check_dims(dims: &[usize]) -> Result<(), EngineError> {
    if dims.len() < 2 {
        return Err(EngineError::Architecture("need at least input and output dims".into()));
    }
    if dims.contains(&0) {
        return Err(EngineError::Architecture("zero-width layer".into()));
    }
    if dims[dims.len() - 1] != OPERATION_COUNT {
        return Err(EngineError::Architecture(format!(
            "output width must be {OPERATION_COUNT}, got {}",
            dims[dims.len() - 1]
        )));
    }
    Ok(())
}

impl DecisionModel {
    pub fn zeros(dims: &[usize]) -> Result<Self, EngineError> {
        check_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    /// He-uniform weights for ReLU layers, Glorot-uniform for the output
    /// layer, zero biases.
    pub fn init<R: RngCore>(dims: &[usize], rng: &mut R) -> Result<Self, EngineError> {
        let mut model = Self::zeros(dims)?;
        let last = model.layers.len() - 1;
        for (k, layer) in model.layers.iter_mut().enumerate() {
            let limit = if k == last {
                (6.0 / (layer.inputs + layer.outputs) as f64).sqrt()
            } else {
                (6.0 / layer.inputs as f64).sqrt()
            };
            for w in &mut layer.weights {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(model)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, EngineError> {
        let mut dims: Vec<usize> = layers.iter().map(|l| l.inputs).collect();
        dims.push(layers.last().map_or(0, |l| l.outputs));
        check_dims(&dims)?;
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(EngineError::Shape {
                    expected: pair[0].outputs,
                    got: pair[1].inputs,
                });
            }
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(EngineError::Architecture("parameter count mismatch".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.layers.iter().map(|l| l.inputs).collect();
        dims.push(self.layers[self.layers.len() - 1].outputs);
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// (layer, is_bias, offset) of a flat parameter index.
    fn locate(&self, mut index: usize) -> (usize, bool, usize) {
        for (k, l) in self.layers.iter().enumerate() {
            if index < l.weights.len() {
                return (k, false, index);
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return (k, true, index);
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param(&self, index: usize) -> f64 {
        match self.locate(index) {
            (k, false, i) => self.layers[k].weights[i],
            (k, true, i) => self.layers[k].biases[i],
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        match self.locate(index) {
            (k, false, i) => self.layers[k].weights[i] = value,
            (k, true, i) => self.layers[k].biases[i] = value,
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<(), EngineError> {
        if input.len() != self.input_dim() {
            return Err(EngineError::Shape {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Pre-activations of every layer; the last entry holds the logits.
    fn pre_activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut act = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(&act, &mut z);
            if k + 1 < self.layers.len() {
                act.clear();
                act.extend(z.iter().map(|&v| v.max(0.0)));
            }
            zs.push(z);
        }
        zs
    }

    pub fn logits(&self, input: &[f64]) -> Result<[f64; OPERATION_COUNT], EngineError> {
        self.check_input(input)?;
        let zs = self.pre_activations(input);
        let last = &zs[zs.len() - 1];
        Ok(std::array::from_fn(|i| last[i]))
    }

    /// The four per-operation scores, each strictly inside (0, 1).
    pub fn forward(&self, input: &[f64]) -> Result<[f64; OPERATION_COUNT], EngineError> {
        Ok(self
            .logits(input)?
            .map(|z| sigmoid(z).clamp(SCORE_EPS, 1.0 - SCORE_EPS)))
    }

    fn check_batch(&self, batch: &[Sample]) -> Result<(), EngineError> {
        if batch.is_empty() {
            return Err(EngineError::EmptyBatch);
        }
        for s in batch {
            self.check_input(&s.input)?;
            if let Some(&bad) = s.labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
                return Err(EngineError::InvalidLabel(bad));
            }
        }
        Ok(())
    }

    /// Mean binary cross-entropy over the batch and all four outputs.
    pub fn loss(&self, batch: &[Sample]) -> Result<f64, EngineError> {
        self.check_batch(batch)?;
        let total: f64 = batch
            .iter()
            .map(|s| {
                let zs = self.pre_activations(&s.input);
                zs[zs.len() - 1]
                    .iter()
                    .zip(&s.labels)
                    .map(|(&z, &y)| bce_with_logit(z, y))
                    .sum::<f64>()
            })
            .sum();
        Ok(total / (batch.len() * OPERATION_COUNT) as f64)
    }

    /// Loss as in [`loss`](Self::loss) plus its gradient by backpropagation.
    pub fn loss_and_gradient(&self, batch: &[Sample]) -> Result<(f64, Gradients), EngineError> {
        self.check_batch(batch)?;
        let scale = 1.0 / (batch.len() * OPERATION_COUNT) as f64;
        let mut grads = Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        };
        let mut total = 0.0;
        let n = self.layers.len();

        for sample in batch {
            let zs = self.pre_activations(&sample.input);
            let logits = &zs[n - 1];
            total += logits
                .iter()
                .zip(&sample.labels)
                .map(|(&z, &y)| bce_with_logit(z, y))
                .sum::<f64>();

            let mut delta: Vec<f64> = logits
                .iter()
                .zip(&sample.labels)
                .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                .collect();

            for k in (0..n).rev() {
                let layer = &self.layers[k];
                let grad = &mut grads.layers[k];
                let act_in: Vec<f64> = if k == 0 {
                    sample.input.clone()
                } else {
                    zs[k - 1].iter().map(|&v| v.max(0.0)).collect()
                };
                for (j, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    grad.biases[j] += d;
                    let row = &mut grad.weights[j * layer.inputs..(j + 1) * layer.inputs];
                    for (g, &a) in row.iter_mut().zip(&act_in) {
                        *g += d * a;
                    }
                }
                if k > 0 {
                    let mut prev = vec![0.0; layer.inputs];
                    for (j, &d) in delta.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let row = &layer.weights[j * layer.inputs..(j + 1) * layer.inputs];
                        for (p, &w) in prev.iter_mut().zip(row) {
                            *p += w * d;
                        }
                    }
                    for (p, &z) in prev.iter_mut().zip(&zs[k - 1]) {
                        if z <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        Ok((total * scale, grads))
    }

    /// `params -= learning_rate * grads`.
    pub fn apply_gradients(&mut self, grads: &Gradients, learning_rate: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= learning_rate * gw;
            }
            for (b, gb) in layer.biases.iter_mut().zip(&g.biases) {
                *b -= learning_rate * gb;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.layer_dims();
        let mut out = Vec::with_capacity(16 + 4 * dims.len() + 8 * self.param_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.biases) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EngineError> {
        let fmt = |m: &str| EngineError::Format(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], EngineError> {
            let slice = bytes.get(pos..pos + n).ok_or_else(|| fmt("truncated file"))?;
            pos += n;
            Ok(slice)
        };
        if take(8)? != MODEL_MAGIC {
            return Err(fmt("bad magic"));
        }
        let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = read_u32(take(4)?);
        if version != MODEL_VERSION {
            return Err(EngineError::Format(format!("unsupported version {version}")));
        }
        let layer_count = read_u32(take(4)?) as usize;
        if layer_count == 0 || layer_count > 64 {
            return Err(fmt("implausible layer count"));
        }
        let dims: Vec<usize> = (0..=layer_count)
            .map(|_| take(4).map(|b| read_u32(b) as usize))
            .collect::<Result<_, _>>()?;
        check_dims(&dims).map_err(|e| EngineError::Format(e.to_string()))?;
        let mut layers = Vec::with_capacity(layer_count);
        for w in dims.windows(2) {
            let (inputs, outputs) = (w[0], w[1]);
            let mut read_f64s = |n: usize| -> Result<Vec<f64>, EngineError> {
                let raw = take(n.checked_mul(8).ok_or_else(|| fmt("size overflow"))?)?;
                Ok(raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect())
            };
            let weights = read_f64s(inputs * outputs)?;
            let biases = read_f64s(outputs)?;
            layers.push(Layer {
                inputs,
                outputs,
                weights,
                biases,
            });
        }
        if pos != bytes.len() {
            return Err(fmt("trailing bytes"));
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        fs::write(path, self.to_bytes()).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let bytes = fs::read(path).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
