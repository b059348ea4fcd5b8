//! The shallow convolutional EEG decoder, assembled for the two tasks:
//! 8-way user identification and 4-way intention classification.
//!
//! Layer stack over a `[N, C, T]` batch: temporal convolution (bias),
//! spatial convolution across the full montage (no bias, batch norm
//! follows), batch normalization, square, average pooling over time,
//! clamped log, dropout, dense readout. At canonical geometry the widths
//! run 750 -> 726 -> pool -> 44, so the flattened feature width is
//! 40 * 44 = 1760.

use std::path::Path;

use thiserror::Error;

use pbci_nn::ops::{self, BatchNormState};
use pbci_nn::rng::SplitMix64;
use pbci_nn::{read_checkpoint, write_checkpoint, Mode, NnError, NodeId, Parameter, Scalar, Tape, Tensor};

use crate::data::Epoch;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("batch shape {got:?} does not match spec geometry [{channels} x {samples}]")]
    GeometryMismatch {
        got: Vec<usize>,
        channels: usize,
        samples: usize,
    },
    #[error("model is a {actual:?} model, expected {expected:?}")]
    WrongTask { expected: TaskKind, actual: TaskKind },
    #[error("checkpoint does not match spec: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("sidecar: {0}")]
    Sidecar(String),
}

/// Which decoding task a model was built for.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TaskKind {
    /// Which enrolled subject produced the epoch (one output per subject).
    Identification,
    /// Which imagery class the epoch encodes (one output per label).
    Intention,
}

/// Architecture description; defaults follow the standard shallow decoder.
#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub n_channels: usize,
    pub n_samples: usize,
    pub n_outputs: usize,
    pub temporal_filters: usize,
    pub temporal_kernel: usize,
    pub spatial_filters: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub dropout_p: f64,
}

impl ModelSpec {
    pub fn new(n_outputs: usize) -> Self {
        ModelSpec {
            n_channels: 32,
            n_samples: 750,
            n_outputs,
            temporal_filters: 40,
            temporal_kernel: 25,
            spatial_filters: 40,
            pool_kernel: 75,
            pool_stride: 15,
            dropout_p: 0.5,
        }
    }

    pub fn identification() -> Self {
        ModelSpec::new(8)
    }

    pub fn intention() -> Self {
        ModelSpec::new(4)
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.n_channels == 0
            || self.n_samples == 0
            || self.n_outputs == 0
            || self.temporal_filters == 0
            || self.temporal_kernel == 0
            || self.spatial_filters == 0
            || self.pool_kernel == 0
            || self.pool_stride == 0
        {
            return Err(DecoderError::InvalidSpec("all dimensions must be positive".into()));
        }
        if self.n_samples <= self.temporal_kernel {
            return Err(DecoderError::InvalidSpec(format!(
                "n_samples {} must exceed temporal_kernel {}",
                self.n_samples, self.temporal_kernel
            )));
        }
        if self.pool_kernel > self.conv_width() {
            return Err(DecoderError::InvalidSpec(format!(
                "pool kernel {} wider than convolved signal {}",
                self.pool_kernel,
                self.conv_width()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(DecoderError::InvalidSpec(format!(
                "dropout_p {} not in [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Width after the temporal convolution (750 -> 726 canonically).
    pub fn conv_width(&self) -> usize {
        self.n_samples - self.temporal_kernel + 1
    }

    /// Width after pooling (726 -> 44 canonically).
    pub fn pooled_width(&self) -> usize {
        (self.conv_width() - self.pool_kernel) / self.pool_stride + 1
    }

    /// Dense-layer input width (40 * 44 = 1760 canonically).
    pub fn feature_width(&self) -> usize {
        self.spatial_filters * self.pooled_width()
    }

    pub fn parameter_count(&self) -> usize {
        let temporal = self.temporal_filters * self.temporal_kernel + self.temporal_filters;
        let spatial = self.spatial_filters * self.temporal_filters * self.n_channels;
        let bn = 2 * self.spatial_filters;
        let dense = self.n_outputs * self.feature_width() + self.n_outputs;
        temporal + spatial + bn + dense
    }
}

fn glorot_uniform<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(rng.uniform(-limit, limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

// parameter registration order, also the checkpoint order
const P_TEMPORAL_W: usize = 0;
const P_TEMPORAL_B: usize = 1;
const P_SPATIAL_W: usize = 2;
const P_BN_GAMMA: usize = 3;
const P_BN_BETA: usize = 4;
const P_DENSE_W: usize = 5;
const P_DENSE_B: usize = 6;

/// A decoder with its parameters, batch-norm running statistics, and task
/// tag. Training mutates it; an eval-mode model is immutable.
#[derive(Clone)]
pub struct ShallowConvNet<T: Scalar> {
    pub spec: ModelSpec,
    pub task: TaskKind,
    params: Vec<Parameter<T>>,
    bn_state: BatchNormState<T>,
}

/// Node handles from one forward pass, for routing gradients back.
pub struct ForwardPass {
    pub logits: NodeId,
    pub param_nodes: Vec<NodeId>,
}

impl<T: Scalar> ShallowConvNet<T> {
    /// Build with Glorot-uniform weights, zero biases, unit gamma — all
    /// drawn from streams derived from `seed`.
    pub fn build(spec: ModelSpec, task: TaskKind, seed: u64) -> Result<Self, DecoderError> {
        spec.validate()?;
        let f = spec.temporal_filters;
        let k = spec.temporal_kernel;
        let f2 = spec.spatial_filters;
        let c = spec.n_channels;
        let d = spec.feature_width();
        let out = spec.n_outputs;

        let mut rng_t = SplitMix64::derive(seed, &[0]);
        let mut rng_s = SplitMix64::derive(seed, &[1]);
        let mut rng_d = SplitMix64::derive(seed, &[2]);
        let params = vec![
            Parameter::new(
                "temporal.weight",
                glorot_uniform(&[f, 1, 1, k], k, f * k, &mut rng_t),
            ),
            Parameter::new("temporal.bias", Tensor::zeros(&[f])),
            Parameter::new(
                "spatial.weight",
                glorot_uniform(&[f2, f, c, 1], f * c, f2 * c, &mut rng_s),
            ),
            Parameter::new("bn.gamma", Tensor::filled(&[f2], T::one())),
            Parameter::new("bn.beta", Tensor::zeros(&[f2])),
            Parameter::new("dense.weight", glorot_uniform(&[out, d], d, out, &mut rng_d)),
            Parameter::new("dense.bias", Tensor::zeros(&[out])),
        ];
        Ok(ShallowConvNet {
            spec,
            task,
            params,
            bn_state: BatchNormState::new(f2),
        })
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn bn_state(&self) -> &BatchNormState<T> {
        &self.bn_state
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize, DecoderError> {
        match batch.shape() {
            [n, c, t] if *c == self.spec.n_channels && *t == self.spec.n_samples => Ok(*n),
            other => Err(DecoderError::GeometryMismatch {
                got: other.to_vec(),
                channels: self.spec.n_channels,
                samples: self.spec.n_samples,
            }),
        }
    }

    /// Run the stack over a `[N, C, T]` batch. Train mode needs the
    /// caller's dropout stream; eval mode runs dropout-free on running
    /// batch-norm statistics.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        batch: Tensor<T>,
        mode: Mode,
        dropout_stream: Option<&mut SplitMix64>,
    ) -> Result<ForwardPass, DecoderError> {
        let n = self.check_batch(&batch)?;
        let spec = &self.spec;
        let x = tape.constant(batch.reshaped(&[n, 1, spec.n_channels, spec.n_samples])?);
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();

        let front = ops::conv_front(
            tape,
            x,
            param_nodes[P_TEMPORAL_W],
            param_nodes[P_TEMPORAL_B],
            param_nodes[P_SPATIAL_W],
        )?;
        let bn = ops::batchnorm2d(
            tape,
            front,
            param_nodes[P_BN_GAMMA],
            param_nodes[P_BN_BETA],
            &mut self.bn_state,
            mode,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        let sq = ops::square(tape, bn)?;
        let pooled = ops::avg_pool2d(
            tape,
            sq,
            (1, spec.pool_kernel),
            (1, spec.pool_stride),
        )?;
        let features = ops::log_clamped(tape, pooled, LOG_CLAMP)?;
        let dropped = match (mode, dropout_stream) {
            (Mode::Train, Some(stream)) => {
                ops::dropout(tape, features, spec.dropout_p, mode, stream)?
            }
            _ => features,
        };
        let flat = ops::reshape(tape, dropped, &[n, spec.feature_width()])?;
        let logits = ops::dense(
            tape,
            flat,
            param_nodes[P_DENSE_W],
            Some(param_nodes[P_DENSE_B]),
        )?;
        Ok(ForwardPass {
            logits,
            param_nodes,
        })
    }

    /// Pull gradients for this pass's parameter nodes into the parameter
    /// buffers. Unreached parameters get zero gradients.
    pub fn absorb_gradients(
        &mut self,
        pass: &ForwardPass,
        grads: &mut pbci_nn::Gradients<T>,
    ) {
        for (param, &node) in self.params.iter_mut().zip(&pass.param_nodes) {
            param.grad = grads
                .take(node)
                .unwrap_or_else(|| Tensor::zeros(param.value.shape()));
        }
    }

    /// Eval-mode class prediction for one epoch: argmax label (ties to the
    /// lowest index) plus the softmax confidence vector.
    pub fn predict(&self, epoch: &Epoch) -> Result<(usize, Vec<T>), DecoderError> {
        let batch = epoch_batch(std::slice::from_ref(&epoch.clone()))?;
        let logits = self.eval_logits(batch)?;
        let probs = ops::softmax_rows(&logits);
        let row = probs.data();
        Ok((argmax_lowest(row), row.to_vec()))
    }

    /// Eval-mode logits for a `[N, C, T]` batch; does not touch model state.
    pub fn eval_logits(&self, batch: Tensor<T>) -> Result<Tensor<T>, DecoderError> {
        // eval mode leaves running stats untouched; clone keeps &self
        let mut model = self.clone();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, batch, Mode::Eval, None)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Persist parameters and running statistics (checkpoint) plus spec and
    /// task tag (JSON sidecar at `<path>.json`).
    pub fn save(&self, path: &Path) -> Result<(), DecoderError> {
        let mut entries: Vec<(&str, &Tensor<T>)> = self
            .params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        entries.push(("bn.running_mean", &self.bn_state.running_mean));
        entries.push(("bn.running_var", &self.bn_state.running_var));
        write_checkpoint(path, &entries)?;
        let sidecar = serde_json::json!({
            "spec": self.spec,
            "task": self.task,
        });
        std::fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(&sidecar).expect("spec serializes"),
        )
        .map_err(NnError::Io)?;
        Ok(())
    }

    /// Load a model saved by [`ShallowConvNet::save`].
    pub fn load(path: &Path) -> Result<Self, DecoderError> {
        let sidecar: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(sidecar_path(path)).map_err(NnError::Io)?,
        )
        .map_err(|e| DecoderError::Sidecar(e.to_string()))?;
        let spec: ModelSpec = serde_json::from_value(sidecar["spec"].clone())
            .map_err(|e| DecoderError::Sidecar(e.to_string()))?;
        let task: TaskKind = serde_json::from_value(sidecar["task"].clone())
            .map_err(|e| DecoderError::Sidecar(e.to_string()))?;

        let mut model = ShallowConvNet::build(spec, task, 0)?;
        let entries = read_checkpoint(path)?;
        let expected = model.params.len() + 2;
        if entries.len() != expected {
            return Err(DecoderError::CheckpointMismatch(format!(
                "expected {expected} entries, found {}",
                entries.len()
            )));
        }
        for (i, param) in model.params.iter_mut().enumerate() {
            let entry = &entries[i];
            if entry.name != param.name || entry.values.shape() != param.value.shape() {
                return Err(DecoderError::CheckpointMismatch(format!(
                    "entry {i}: {} {:?} vs expected {} {:?}",
                    entry.name,
                    entry.values.shape(),
                    param.name,
                    param.value.shape()
                )));
            }
            param.value = entry.values.cast();
        }
        for (offset, (name, target)) in [
            ("bn.running_mean", &mut model.bn_state.running_mean),
            ("bn.running_var", &mut model.bn_state.running_var),
        ]
        .into_iter()
        .enumerate()
        {
            let entry = &entries[entries.len() - 2 + offset];
            if entry.name != name || entry.values.shape() != target.shape() {
                return Err(DecoderError::CheckpointMismatch(format!(
                    "running-stats entry {} mismatched",
                    entry.name
                )));
            }
            *target = entry.values.cast();
        }
        Ok(model)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_lowest<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Pack epochs into a `[N, C, T]` batch tensor.
pub fn epoch_batch<T: Scalar>(epochs: &[Epoch]) -> Result<Tensor<T>, DecoderError> {
    let first = epochs.first().ok_or_else(|| {
        DecoderError::InvalidSpec("cannot build a batch from zero epochs".into())
    })?;
    let (c, t) = (first.n_channels, first.n_samples);
    let mut data = Vec::with_capacity(epochs.len() * c * t);
    for e in epochs {
        if e.n_channels != c || e.n_samples != t {
            return Err(DecoderError::GeometryMismatch {
                got: vec![e.n_channels, e.n_samples],
                channels: c,
                samples: t,
            });
        }
        data.extend(e.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Tensor::from_vec(&[epochs.len(), c, t], data).expect("shape/data agree"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageryLabel, Paradigm, SubjectId};

    fn dummy_epoch(seed: u64) -> Epoch {
        let mut rng = SplitMix64::new(seed);
        Epoch {
            n_channels: 32,
            n_samples: 750,
            data: (0..32 * 750).map(|_| rng.next_normal() as f32).collect(),
            sample_rate: 250.0,
            subject: SubjectId::new(1).unwrap(),
            paradigm: Paradigm::Mi,
            label: ImageryLabel::Apple,
            trial_id: 0,
        }
    }

    #[test]
    fn parameter_counts_match_architecture_arithmetic() {
        assert_eq!(ModelSpec::intention().parameter_count(), 59364);
        assert_eq!(ModelSpec::identification().parameter_count(), 66408);
        let built = ShallowConvNet::<f32>::build(ModelSpec::intention(), TaskKind::Intention, 1)
            .unwrap();
        assert_eq!(built.parameter_count(), 59364);
        let built8 =
            ShallowConvNet::<f32>::build(ModelSpec::identification(), TaskKind::Identification, 1)
                .unwrap();
        assert_eq!(built8.parameter_count(), 66408);
    }

    #[test]
    fn width_chain() {
        let spec = ModelSpec::identification();
        assert_eq!(spec.conv_width(), 726);
        assert_eq!(spec.pooled_width(), 44);
        assert_eq!(spec.feature_width(), 1760);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ShallowConvNet::<f32>::build(ModelSpec::intention(), TaskKind::Intention, 7)
            .unwrap();
        let b = ShallowConvNet::<f32>::build(ModelSpec::intention(), TaskKind::Intention, 7)
            .unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.value, pb.value);
        }
        let c = ShallowConvNet::<f32>::build(ModelSpec::intention(), TaskKind::Intention, 8)
            .unwrap();
        assert_ne!(a.params[0].value, c.params[0].value);
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let mut model =
            ShallowConvNet::<f32>::build(ModelSpec::intention(), TaskKind::Intention, 3).unwrap();
        let epochs: Vec<Epoch> = (0..3).map(|i| dummy_epoch(i)).collect();
        let batch = epoch_batch(&epochs).unwrap();
        let mut tape = Tape::new();
        let mut stream = SplitMix64::new(1);
        let pass = model
            .forward(&mut tape, batch, Mode::Train, Some(&mut stream))
            .unwrap();
        let logits = tape.value(pass.logits);
        assert_eq!(logits.shape(), &[3, 4]);
        assert!(logits.all_finite());
    }

    #[test]
    fn eval_mode_is_deterministic_and_batch_equivariant() {
        let model =
            ShallowConvNet::<f32>::build(ModelSpec::intention(), TaskKind::Intention, 5).unwrap();
        let a = dummy_epoch(1);
        let b = dummy_epoch(2);
        // duplicated sample yields identical rows
        let batch = epoch_batch::<f32>(&[a.clone(), b.clone(), a.clone()]).unwrap();
        let logits = model.eval_logits(batch).unwrap();
        let rows: Vec<&[f32]> = logits.data().chunks(4).collect();
        assert_eq!(rows[0], rows[2]);
        // permuting the batch permutes the rows
        let swapped = model
            .eval_logits(epoch_batch::<f32>(&[b.clone(), a.clone()]).unwrap())
            .unwrap();
        let rows_sw: Vec<&[f32]> = swapped.data().chunks(4).collect();
        assert_eq!(rows[1], rows_sw[0]);
        assert_eq!(rows[0], rows_sw[1]);
        // repeat prediction is identical
        let (l1, c1) = model.predict(&a).unwrap();
        let (l2, c2) = model.predict(&a).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn prediction_confidences_from_known_logits() {
        // uniform logits: lowest-index tie break, confidence 1/K
        assert_eq!(argmax_lowest(&[0.0f64, 0.0, 0.0, 0.0]), 0);
        let probs = ops::softmax_rows(&Tensor::from_vec(&[1, 4], vec![0.0f64; 4]).unwrap());
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-12));

        // logits [5,0,0,0]: confidence e^5 / (e^5 + 3)
        let probs =
            ops::softmax_rows(&Tensor::from_vec(&[1, 4], vec![5.0f64, 0.0, 0.0, 0.0]).unwrap());
        let expected = 5f64.exp() / (5f64.exp() + 3.0);
        assert!((probs.data()[0] - expected).abs() < 1e-12);
        assert!((expected - 0.980187).abs() < 1e-6);

        // confidence vector sums to 1 and is strictly positive
        let sum: f64 = probs.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(probs.data().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let model =
            ShallowConvNet::<f32>::build(ModelSpec::intention(), TaskKind::Intention, 5).unwrap();
        let bad = Epoch {
            n_channels: 4,
            n_samples: 100,
            data: vec![0.0; 400],
            ..dummy_epoch(0)
        };
        assert!(matches!(
            model.predict(&bad),
            Err(DecoderError::GeometryMismatch { .. })
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = ModelSpec::intention();
        spec.temporal_kernel = 800;
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::intention();
        spec.pool_kernel = 1000;
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::intention();
        spec.dropout_p = 1.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model =
            ShallowConvNet::<f32>::build(ModelSpec::intention(), TaskKind::Intention, 11).unwrap();
        // move running stats off their initial values
        let epochs: Vec<Epoch> = (0..2).map(dummy_epoch).collect();
        let batch = epoch_batch(&epochs).unwrap();
        let mut tape = Tape::new();
        let mut stream = SplitMix64::new(1);
        model
            .forward(&mut tape, batch, Mode::Train, Some(&mut stream))
            .unwrap();
        model.save(&path).unwrap();

        let loaded = ShallowConvNet::<f32>::load(&path).unwrap();
        assert_eq!(loaded.spec, model.spec);
        assert_eq!(loaded.task, model.task);
        for (a, b) in loaded.params.iter().zip(&model.params) {
            assert_eq!(a.value, b.value, "{} differs", a.name);
        }
        assert_eq!(loaded.bn_state.running_mean, model.bn_state.running_mean);
        assert_eq!(loaded.bn_state.running_var, model.bn_state.running_var);

        // predictions survive the round trip exactly
        let e = dummy_epoch(9);
        assert_eq!(model.predict(&e).unwrap(), loaded.predict(&e).unwrap());
    }
}
