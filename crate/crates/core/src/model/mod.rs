//! The CNN-BiLSTM naturalness network.
//!
//! Per segment (`1 x 48 x 15`):
//!
//! | layer          | output      |
//! |----------------|-------------|
//! | conv1          | 16 x 48 x 15|
//! | pool           | 16 x 24 x 8 |
//! | conv2          | 32 x 24 x 8 |
//! | pool, dropout  | 32 x 12 x 4 |
//! | conv3, conv4   | 64 x 12 x 4 |
//! | pool, dropout  | 64 x 6 x 2  |
//! | conv5, dropout | 64 x 6 x 2  |
//! | conv6          | 64 x 6 x 2  |
//! | fc             | 20          |
//!
//! Every convolution is followed by batch norm and ReLU; the convolutions
//! carry no bias since the batch-norm shift subsumes it. The segment feature
//! sequence feeds a one-layer bidirectional LSTM (128 units per direction);
//! the last forward state and the first backward state go through a linear
//! head to one unclamped score.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, inspect_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, CheckpointHeader, OptimizerHeader, FORMAT_VERSION, MAGIC,
};

use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{read_wav, AudioError};
use crate::autograd::{BatchStats, Graph, Mode, ParamBindings, ParameterSet, Real, Tensor, TensorError, Var};
use crate::features::{extract_segments, FeatureConfig, FeatureError, SegmentSequence};
use crate::rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("input shape {found:?} does not match the network input {expected:?}")]
    InputShape { found: Vec<usize>, expected: Vec<usize> },
    #[error("{path}: {source}")]
    File { path: String, source: Box<ModelError> },
}

/// Hyperparameters fixing every tensor shape of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_mels: usize,
    pub segment_frames: usize,
    pub conv_channels: Vec<usize>,
    pub cnn_features: usize,
    pub lstm_hidden: usize,
    pub dropout: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            n_mels: 48,
            segment_frames: 15,
            conv_channels: vec![16, 32, 64, 64, 64, 64],
            cnn_features: 20,
            lstm_hidden: 128,
            dropout: 0.2,
        }
    }
}

/// Pooling follows conv1, conv2 and conv4.
const POOL_AFTER: [bool; 6] = [true, true, false, true, false, false];
/// Dropout follows the second and third pool and conv5.
const DROPOUT_AFTER: [bool; 6] = [false, true, false, true, true, false];

pub const BN_MOMENTUM: f64 = 0.1;

impl Architecture {
    pub fn for_features(features: &FeatureConfig) -> Self {
        Self { n_mels: features.n_mels, segment_frames: features.segment_frames, ..Self::default() }
    }

    /// Spatial size after the three ceil-mode pools.
    pub fn pooled_size(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.n_mels, self.segment_frames);
        for pool in POOL_AFTER {
            if pool {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
        }
        (h, w)
    }

    pub fn flatten_dim(&self) -> usize {
        let (h, w) = self.pooled_size();
        self.conv_channels.last().copied().unwrap_or(1) * h * w
    }

    /// Every tensor of the network: (name, shape, trainable).
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut specs = Vec::new();
        let mut cin = 1;
        for (i, &cout) in self.conv_channels.iter().enumerate() {
            let l = i + 1;
            specs.push((format!("cnn.conv{l}.weight"), vec![cout, cin, 3, 3], true));
            specs.push((format!("cnn.bn{l}.gamma"), vec![cout], true));
            specs.push((format!("cnn.bn{l}.beta"), vec![cout], true));
            specs.push((format!("cnn.bn{l}.running_mean"), vec![cout], false));
            specs.push((format!("cnn.bn{l}.running_var"), vec![cout], false));
            cin = cout;
        }
        specs.push(("cnn.fc.weight".into(), vec![self.cnn_features, self.flatten_dim()], true));
        specs.push(("cnn.fc.bias".into(), vec![self.cnn_features], true));
        let h = self.lstm_hidden;
        for dir in ["fwd", "bwd"] {
            specs.push((format!("lstm.{dir}.w_ih"), vec![4 * h, self.cnn_features], true));
            specs.push((format!("lstm.{dir}.w_hh"), vec![4 * h, h], true));
            specs.push((format!("lstm.{dir}.bias"), vec![4 * h], true));
        }
        specs.push(("head.weight".into(), vec![1, 2 * h], true));
        specs.push(("head.bias".into(), vec![1], true));
        specs
    }
}

/// One row of the shape audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRecord {
    pub layer: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real = f32> {
    pub arch: Architecture,
    pub features: FeatureConfig,
    pub params: ParameterSet<T>,
}

/// Outputs of one recorded forward pass.
pub struct ForwardPass<T: Real> {
    /// Scores, shape `[B]`.
    pub scores: Var,
    /// Batch statistics per batch-norm layer (train mode only).
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

/// Segment sequences of several files, concatenated for the CNN.
///
/// Only real segments pass through the CNN (so train-mode batch statistics
/// never see padding); the per-segment features are scattered into a
/// zero-padded batch for the LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    /// `[sum(lengths), 1, n_mels, frames]`.
    pub data: Vec<f32>,
    pub lengths: Vec<usize>,
    pub n_mels: usize,
    pub frames: usize,
}

impl PackedBatch {
    pub fn new(seqs: &[&SegmentSequence]) -> Result<Self, ModelError> {
        let first = seqs.first().ok_or(TensorError::EmptyBatch)?;
        let (n_mels, frames) = (first.n_mels, first.frames);
        let mut data = Vec::with_capacity(seqs.iter().map(|s| s.data.len()).sum());
        for s in seqs {
            if (s.n_mels, s.frames) != (n_mels, frames) {
                return Err(ModelError::InputShape { found: s.shape().to_vec(), expected: vec![s.n, 1, n_mels, frames] });
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Self { data, lengths: seqs.iter().map(|s| s.n).collect(), n_mels, frames })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn total_segments(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.total_segments(), 1, self.n_mels, self.frames]
    }
}

fn kaiming_uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("spec shapes are valid")
}

impl<T: Real> Network<T> {
    /// All weights and biases zero; batch-norm gammas and running variances
    /// one.
    pub fn zeroed(features: FeatureConfig) -> Self {
        let arch = Architecture::for_features(&features);
        let mut params = ParameterSet::new();
        for (name, shape, trainable) in arch.tensor_specs() {
            let fill = if name.ends_with(".gamma") || name.ends_with(".running_var") { T::one() } else { T::zero() };
            params.insert(name, Tensor::filled(&shape, fill).with_requires_grad(trainable)).expect("unique names");
        }
        Self { arch, features, params }
    }

    /// Kaiming-uniform (fan-in) conv/linear weights, zero biases, LSTM
    /// matrices uniform in `+-1/sqrt(H)` and forget-gate bias one.
    pub fn initialized(features: FeatureConfig, seed: u64) -> Self {
        let mut net = Self::zeroed(features);
        let h = net.arch.lstm_hidden;
        let specs = net.arch.tensor_specs();
        for (idx, (name, shape, _)) in specs.iter().enumerate() {
            let mut r = rng::stream(seed, "init", idx as u64);
            let tensor = net.params.get_mut(name).expect("spec names exist");
            let fresh = if name.ends_with(".weight") && name.starts_with("cnn.conv") {
                Some(kaiming_uniform::<T>(&mut r, shape, shape[1] * 9))
            } else if name.ends_with(".weight") {
                Some(kaiming_uniform::<T>(&mut r, shape, shape[1]))
            } else if name.ends_with(".w_ih") || name.ends_with(".w_hh") {
                let bound = 1.0 / (h as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| T::of(r.gen_range(-bound..bound))).collect();
                Some(Tensor::new(shape.clone(), data).expect("valid"))
            } else if name.starts_with("lstm.") && name.ends_with(".bias") {
                let mut b = Tensor::zeros(shape);
                b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = T::one());
                Some(b)
            } else {
                None
            };
            if let Some(t) = fresh {
                *tensor = t.with_requires_grad(true);
            }
        }
        net
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Element-type conversion (e.g. to `f64` for verification).
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network { arch: self.arch.clone(), features: self.features.clone(), params: self.params.cast() }
    }

    fn input_shape(&self, n: usize) -> Vec<usize> {
        vec![n, 1, self.arch.n_mels, self.arch.segment_frames]
    }

    /// CNN over `[N, 1, n_mels, frames]` segments, giving `[N, features]`.
    #[allow(clippy::too_many_arguments)]
    pub fn cnn_forward(
        &self,
        graph: &mut Graph<T>,
        bindings: &ParamBindings,
        input: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
        mut trace: Option<&mut Vec<ShapeRecord>>,
        bn_stats: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var, ModelError> {
        let n = graph.shape(input)[0];
        if graph.shape(input) != self.input_shape(n).as_slice() {
            return Err(ModelError::InputShape { found: graph.shape(input).to_vec(), expected: self.input_shape(n) });
        }
        let mut record = |graph: &Graph<T>, layer: &str, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(ShapeRecord { layer: layer.to_string(), shape: graph.shape(v).to_vec() });
            }
        };
        record(graph, "input", input);
        let mut x = input;
        let mut pool_no = 0;
        for i in 0..self.arch.conv_channels.len() {
            let l = i + 1;
            let w = bindings.get(&format!("cnn.conv{l}.weight"))?;
            let gamma = bindings.get(&format!("cnn.bn{l}.gamma"))?;
            let beta = bindings.get(&format!("cnn.bn{l}.beta"))?;
            x = graph.conv2d(x, w, None)?;
            x = match mode {
                Mode::Train => {
                    let (y, stats) = graph.batchnorm2d_train(x, gamma, beta)?;
                    bn_stats.push((l, stats));
                    y
                }
                Mode::Eval => {
                    let mean = self.params.get(&format!("cnn.bn{l}.running_mean"))?.data();
                    let var = self.params.get(&format!("cnn.bn{l}.running_var"))?.data();
                    graph.batchnorm2d_eval(x, gamma, beta, mean, var)?
                }
            };
            x = graph.relu(x);
            record(graph, &format!("conv{l}"), x);
            if POOL_AFTER[i] {
                pool_no += 1;
                x = graph.maxpool2d_ceil(x)?;
                record(graph, &format!("pool{pool_no}"), x);
            }
            if DROPOUT_AFTER[i] {
                x = graph.dropout(x, self.arch.dropout, mode, rng)?;
            }
        }
        let flat = graph.reshape(x, &[n, self.arch.flatten_dim()])?;
        let fc = graph.linear(flat, bindings.get("cnn.fc.weight")?, bindings.get("cnn.fc.bias")?)?;
        record(graph, "fc", fc);
        Ok(fc)
    }

    /// BiLSTM and linear head over packed features `[sum(lengths), F]`,
    /// giving `[B]`.
    pub fn sequence_head_forward(
        &self,
        graph: &mut Graph<T>,
        bindings: &ParamBindings,
        features: Var,
        lengths: &[usize],
    ) -> Result<Var, ModelError> {
        let b = lengths.len();
        let max_len = lengths.iter().copied().max().ok_or(TensorError::EmptyBatch)?;
        let seq = graph.pad_sequences(features, lengths, max_len)?;
        let weights = [
            bindings.get("lstm.fwd.w_ih")?,
            bindings.get("lstm.fwd.w_hh")?,
            bindings.get("lstm.fwd.bias")?,
            bindings.get("lstm.bwd.w_ih")?,
            bindings.get("lstm.bwd.w_hh")?,
            bindings.get("lstm.bwd.bias")?,
        ];
        let out = graph.bilstm(seq, weights, lengths)?;
        let last = graph.final_states(out, lengths)?;
        let score = graph.linear(last, bindings.get("head.weight")?, bindings.get("head.bias")?)?;
        Ok(graph.reshape(score, &[b])?)
    }

    /// Full forward pass over a batch.
    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        bindings: &ParamBindings,
        batch: &PackedBatch,
        mode: Mode,
        rng: &mut dyn RngCore,
        trace: Option<&mut Vec<ShapeRecord>>,
    ) -> Result<ForwardPass<T>, ModelError> {
        let data = batch.data.iter().map(|&v| T::of(f64::from(v))).collect();
        let input = graph.constant(batch.shape(), data)?;
        let mut bn_stats = Vec::new();
        let feats = self.cnn_forward(graph, bindings, input, mode, rng, trace, &mut bn_stats)?;
        let scores = self.sequence_head_forward(graph, bindings, feats, &batch.lengths)?;
        Ok(ForwardPass { scores, bn_stats })
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn apply_bn_stats(&mut self, stats: &[(usize, BatchStats<T>)]) -> Result<(), ModelError> {
        for (l, s) in stats {
            let mut mean = self.params.get(&format!("cnn.bn{l}.running_mean"))?.data().to_vec();
            let mut var = self.params.get(&format!("cnn.bn{l}.running_var"))?.data().to_vec();
            s.update_running(&mut mean, &mut var, BN_MOMENTUM);
            self.params.get_mut(&format!("cnn.bn{l}.running_mean"))?.data_mut().copy_from_slice(&mean);
            self.params.get_mut(&format!("cnn.bn{l}.running_var"))?.data_mut().copy_from_slice(&var);
        }
        Ok(())
    }

    /// Eval-mode scores for a batch.
    pub fn predict_batch(&self, batch: &PackedBatch) -> Result<Vec<f64>, ModelError> {
        let mut graph = Graph::new();
        let frozen = frozen_copy(&self.params);
        let bindings = graph.bind(&frozen);
        let mut no_rng = rng::stream(0, "eval", 0);
        let pass = self.forward(&mut graph, &bindings, batch, Mode::Eval, &mut no_rng, None)?;
        Ok(graph.value(pass.scores).iter().map(|v| v.as_f64()).collect())
    }

    /// Eval-mode score of one segment sequence.
    pub fn predict_segments(&self, seq: &SegmentSequence) -> Result<f64, ModelError> {
        let batch = PackedBatch::new(&[seq])?;
        Ok(self.predict_batch(&batch)?[0])
    }

    /// Eval-mode CNN features `[N, features]` of one sequence.
    pub fn segment_features(&self, seq: &SegmentSequence) -> Result<Tensor<T>, ModelError> {
        let mut graph = Graph::new();
        let frozen = frozen_copy(&self.params);
        let bindings = graph.bind(&frozen);
        let input = graph.constant(seq.shape().to_vec(), seq.data.iter().map(|&v| T::of(f64::from(v))).collect())?;
        let mut no_rng = rng::stream(0, "eval", 0);
        let out = self.cnn_forward(&mut graph, &bindings, input, Mode::Eval, &mut no_rng, None, &mut Vec::new())?;
        Ok(graph.to_tensor(out))
    }

    /// Runs `n` all-zero segments through the network in eval mode and
    /// records each CNN stage's output shape.
    pub fn shape_audit(&self, n: usize) -> Result<Vec<ShapeRecord>, ModelError> {
        let mut graph = Graph::new();
        let frozen = frozen_copy(&self.params);
        let bindings = graph.bind(&frozen);
        let shape = self.input_shape(n);
        let input = graph.constant(shape.clone(), vec![T::zero(); shape.iter().product()])?;
        let mut trace = Vec::new();
        let mut no_rng = rng::stream(0, "eval", 0);
        let feats = self.cnn_forward(&mut graph, &bindings, input, Mode::Eval, &mut no_rng, Some(&mut trace), &mut Vec::new())?;
        let score = self.sequence_head_forward(&mut graph, &bindings, feats, &[n])?;
        trace.push(ShapeRecord { layer: "score".into(), shape: graph.shape(score).to_vec() });
        Ok(trace)
    }

    /// Train-mode forward and backward on one batch; fills parameter
    /// gradients, updates batch-norm buffers and returns the MSE.
    pub fn loss_and_grads(&mut self, batch: &PackedBatch, targets: &[f64], rng: &mut dyn RngCore) -> Result<f64, ModelError> {
        let mut graph = Graph::new();
        let bindings = graph.bind(&self.params);
        let pass = self.forward(&mut graph, &bindings, batch, Mode::Train, rng, None)?;
        let t: Vec<T> = targets.iter().map(|&v| T::of(v)).collect();
        let loss = graph.mse_loss(pass.scores, &t)?;
        let value = graph.value(loss)[0].as_f64();
        graph.backward(loss)?;
        graph.write_grads(&bindings, &mut self.params)?;
        self.apply_bn_stats(&pass.bn_stats)?;
        Ok(value)
    }

    /// Decodes a WAV, extracts segments with the network's feature
    /// configuration and scores it in eval mode.
    pub fn predict_file(&self, path: impl AsRef<Path>) -> Result<f64, ModelError> {
        let path = path.as_ref();
        let wrap = |e: ModelError| ModelError::File { path: path.display().to_string(), source: Box::new(e) };
        let signal = read_wav(path).map_err(ModelError::from)?;
        let seq = extract_segments(&signal, &self.features).map_err(|e| wrap(e.into()))?;
        self.predict_segments(&seq).map_err(wrap)
    }
}

/// Copy with every tensor frozen, so inference graphs record no backward
/// state.
fn frozen_copy<T: Real>(params: &ParameterSet<T>) -> ParameterSet<T> {
    let mut out = ParameterSet::new();
    for (name, t) in params.iter() {
        out.insert(name, t.clone().with_requires_grad(false)).expect("unique");
    }
    out
}

#[cfg(test)]
mod tests;
