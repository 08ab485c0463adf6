//! Stacked oscillator layers with an affine readout.
//!
//! Layer 1 reads the input sequence; every later layer reads the (dropout
//! masked) position sequence of the layer below. With residual stacking of
//! span `S`, layer `ℓ > S` additionally reads layer `ℓ − S` through a
//! trainable `m × m` matrix.
//!
//! Two execution strategies share this module:
//!
//! * [`GradMode::Stored`] runs one layer at a time over the whole sequence,
//!   computing the input transform of every step in a single matrix product
//!   and keeping all hidden states for the backward sweep.
//! * [`GradMode::Reconstructing`] advances all layers together one step at a
//!   time and keeps only the final states; the backward sweep walks the
//!   inverse map, so hidden storage does not depend on the sequence length.

mod fused;
pub mod naive;
mod streaming;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backward::{LayerGrads, StateMeter};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss::{cross_entropy_loss, mse_loss};
use crate::recurrence::{check_dt, LayerParams};

/// Where the readout is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutSite {
    /// Every step (sequence regression).
    PerStep,
    /// The last step only (sequence classification).
    Final,
}

/// Form of the readout map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutKind {
    /// Trainable `W y + b`.
    Affine,
    /// Emit the top layer's positions unchanged (requires `out_dim == hidden`).
    Identity,
}

/// Architecture and integrator hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
    /// Nominal time step per layer.
    pub dt: Vec<f64>,
    pub alpha: f64,
    /// Residual span `S`; layer `ℓ > S` also reads layer `ℓ − S`.
    pub skip: Option<usize>,
    pub dropout: f64,
    pub out_dim: usize,
    pub readout: ReadoutKind,
    pub site: ReadoutSite,
}

impl ModelConfig {
    /// Fully connected stack with one shared time step and an affine readout.
    pub fn new(
        layers: usize,
        hidden: usize,
        input_dim: usize,
        out_dim: usize,
        dt: f64,
        alpha: f64,
        site: ReadoutSite,
    ) -> Self {
        Self {
            layers,
            hidden,
            input_dim,
            dt: vec![dt; layers],
            alpha,
            skip: None,
            dropout: 0.0,
            out_dim,
            readout: ReadoutKind::Affine,
            site,
        }
    }

    pub fn with_skip(mut self, skip: usize) -> Self {
        self.skip = Some(skip);
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn with_first_dt(mut self, dt: f64) -> Self {
        if let Some(d) = self.dt.first_mut() {
            *d = dt;
        }
        self
    }

    /// Switches to the identity readout and sets `out_dim = hidden`.
    pub fn identity_readout(mut self) -> Self {
        self.readout = ReadoutKind::Identity;
        self.out_dim = self.hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.hidden == 0 || self.input_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("hidden, input and output sizes must be positive".into()));
        }
        if self.dt.len() != self.layers {
            return Err(Error::Config(format!(
                "{} time steps given for {} layers",
                self.dt.len(),
                self.layers
            )));
        }
        for (l, &dt) in self.dt.iter().enumerate() {
            check_dt(dt)
                .map_err(|_| Error::Config(format!("layer {}: time step must lie in (0, 1), got {dt}", l + 1)))?;
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if let Some(s) = self.skip {
            if s < 2 || s >= self.layers {
                return Err(Error::Config(format!(
                    "residual span must satisfy 2 <= S < L, got S = {s} with L = {}",
                    self.layers
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.readout == ReadoutKind::Identity && self.out_dim != self.hidden {
            return Err(Error::Config("identity readout needs out_dim equal to hidden".into()));
        }
        Ok(())
    }

    /// Input width of layer `l` (0-based).
    pub fn layer_input_dim(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.hidden
        }
    }

    /// Residual source of layer `l` (0-based), if it has one.
    pub fn skip_source(&self, l: usize) -> Option<usize> {
        self.skip.filter(|&s| l >= s).map(|s| l - s)
    }

    /// Largest nominal time step over all layers.
    pub fn max_dt(&self) -> f64 {
        self.dt.iter().copied().fold(0.0, f64::max)
    }
}

/// Affine map from the top layer's positions to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    /// `out_dim × hidden`
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// A complete network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
    /// `None` exactly when the readout is the identity.
    pub readout: Option<Readout>,
}

/// Whether dropout masks are in effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How hidden states are made available to the backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    Stored,
    Reconstructing,
}

/// A batch of equal-length sequences laid out step-major: `[step][batch][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    steps: usize,
    batch: usize,
    width: usize,
    data: Vec<f64>,
}

impl SeqBatch {
    pub fn zeros(steps: usize, batch: usize, width: usize) -> Self {
        Self {
            steps,
            batch,
            width,
            data: vec![0.0; steps * batch * width],
        }
    }

    /// Interleaves per-sequence `N × width` matrices.
    pub fn from_sequences<M: std::borrow::Borrow<Matrix>>(seqs: &[M]) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::Contract("batch contains no sequences".into()))?
            .borrow();
        let (steps, width) = first.shape();
        let batch = seqs.len();
        let mut out = Self::zeros(steps, batch, width);
        for (b, s) in seqs.iter().enumerate() {
            let s = s.borrow();
            if s.shape() != (steps, width) {
                return Err(Error::Contract(format!(
                    "sequence {b} is {}x{}, expected {steps}x{width}",
                    s.rows(),
                    s.cols()
                )));
            }
            for n in 0..steps {
                out.row_mut(n, b).copy_from_slice(s.row(n));
            }
        }
        Ok(out)
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// All sequences at step `n`, `batch × width`.
    #[inline]
    pub fn step(&self, n: usize) -> &[f64] {
        let s = self.batch * self.width;
        &self.data[n * s..(n + 1) * s]
    }

    #[inline]
    pub fn step_mut(&mut self, n: usize) -> &mut [f64] {
        let s = self.batch * self.width;
        &mut self.data[n * s..(n + 1) * s]
    }

    #[inline]
    pub fn row(&self, n: usize, b: usize) -> &[f64] {
        let o = (n * self.batch + b) * self.width;
        &self.data[o..o + self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, n: usize, b: usize) -> &mut [f64] {
        let o = (n * self.batch + b) * self.width;
        &mut self.data[o..o + self.width]
    }

    /// Sequence `b` as an `N × width` matrix.
    pub fn sequence(&self, b: usize) -> Matrix {
        let mut m = Matrix::zeros(self.steps, self.width);
        for n in 0..self.steps {
            m.row_mut(n).copy_from_slice(self.row(n, b));
        }
        m
    }

    pub(crate) fn from_matrix(steps: usize, batch: usize, m: Matrix) -> Self {
        debug_assert_eq!(m.rows(), steps * batch);
        let width = m.cols();
        Self {
            steps,
            batch,
            width,
            data: m.into_vec(),
        }
    }
}

/// Supervision for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Per-step targets, `[step][batch][out_dim]`.
    Sequence(SeqBatch),
    /// One class index per sequence.
    Classes(Vec<usize>),
}

/// Variational dropout masks for one sequence: one vector per connection
/// between consecutive hidden layers, fixed over all time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub masks: Vec<Vec<f64>>,
}

impl DropoutMask {
    /// Keeps each unit with probability `1 − p` and scales survivors by
    /// `1/(1 − p)`.
    pub fn sample(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let p = config.dropout;
        let keep = 1.0 / (1.0 - p);
        let masks = (1..config.layers)
            .map(|_| {
                (0..config.hidden)
                    .map(|_| if p > 0.0 && rng.gen::<f64>() < p { 0.0 } else { keep })
                    .collect()
            })
            .collect();
        Self { masks }
    }

    /// All-ones masks.
    pub fn ones(config: &ModelConfig) -> Self {
        Self {
            masks: vec![vec![1.0; config.hidden]; config.layers.saturating_sub(1)],
        }
    }
}

/// Per-connection masks for a batch, each `batch × hidden`.
pub(crate) fn stack_masks(config: &ModelConfig, masks: &[DropoutMask], batch: usize) -> Result<Vec<Matrix>> {
    if masks.len() != batch {
        return Err(Error::Contract(format!(
            "{} dropout masks supplied for a batch of {batch}",
            masks.len()
        )));
    }
    let m = config.hidden;
    (0..config.layers - 1)
        .map(|c| {
            let mut out = Matrix::zeros(batch, m);
            for (b, mask) in masks.iter().enumerate() {
                let v = mask
                    .masks
                    .get(c)
                    .filter(|v| v.len() == m)
                    .ok_or_else(|| Error::Contract(format!("dropout mask {b} does not match the model shape")))?;
                out.row_mut(b).copy_from_slice(v);
            }
            Ok(out)
        })
        .collect()
}

/// Gradients of every trainable tensor of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
    pub readout: Option<Readout>,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model.layers.iter().map(LayerGrads::zeros_like).collect(),
            readout: model.readout.as_ref().map(|r| Readout {
                w: Matrix::zeros(r.w.rows(), r.w.cols()),
                b: vec![0.0; r.b.len()],
            }),
        }
    }

    /// Named flat views in the same order as [`Model::tensors`].
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (l, g) in self.layers.iter().enumerate() {
            for (name, t) in g.tensors() {
                out.push((format!("layer{}.{name}", l + 1), t));
            }
        }
        if let Some(r) = &self.readout {
            out.push(("readout.W".to_string(), r.w.data()));
            out.push(("readout.b".to_string(), r.b.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (l, g) in self.layers.iter_mut().enumerate() {
            for (name, t) in g.tensors_mut() {
                out.push((format!("layer{}.{name}", l + 1), t));
            }
        }
        if let Some(r) = &mut self.readout {
            out.push(("readout.W".to_string(), r.w.data_mut()));
            out.push(("readout.b".to_string(), r.b.as_mut_slice()));
        }
        out
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Largest absolute entry over the recurrent layers only.
    pub fn max_abs_recurrent(&self) -> f64 {
        self.layers.iter().map(LayerGrads::max_abs).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Outputs of a forward pass plus whatever the backward sweep needs.
pub struct ForwardPass {
    /// `[site][batch][out_dim]`; one site for final-step readout.
    pub outputs: SeqBatch,
    pub(crate) cache: Cache,
    pub meter: StateMeter,
}

pub(crate) enum Cache {
    Stored(fused::StoredCache),
    Reconstructing(streaming::FinalStates),
    /// Evaluation only.
    None,
}

/// Loss value, gradients and outputs of one batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub grads: ModelGrads,
    pub outputs: SeqBatch,
    /// Peak hidden-state floats held during the pass.
    pub peak_state_floats: usize,
}

impl Model {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|l| {
                let mut p = LayerParams::zeros(config.hidden, config.layer_input_dim(l));
                if config.skip_source(l).is_some() {
                    p.lambda = Some(Matrix::zeros(config.hidden, config.hidden));
                }
                p
            })
            .collect();
        let readout = (config.readout == ReadoutKind::Affine).then(|| Readout {
            w: Matrix::zeros(config.out_dim, config.hidden),
            b: vec![0.0; config.out_dim],
        });
        Ok(Self {
            config,
            layers,
            readout,
        })
    }

    /// Checks parameter shapes against the configuration, naming the first
    /// offending layer.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.layers.len() != c.layers {
            return Err(Error::Config(format!(
                "configuration has {} layers but {} parameter sets were given",
                c.layers,
                self.layers.len()
            )));
        }
        for (l, p) in self.layers.iter().enumerate() {
            let tag = |e: Error| Error::Config(format!("layer {}: {e}", l + 1));
            p.validate().map_err(tag)?;
            if p.hidden() != c.hidden || p.input_dim() != c.layer_input_dim(l) {
                return Err(Error::Config(format!(
                    "layer {}: expected {}x{} input weights, got {}x{}",
                    l + 1,
                    c.hidden,
                    c.layer_input_dim(l),
                    p.v.rows(),
                    p.v.cols()
                )));
            }
            if p.lambda.is_some() != c.skip_source(l).is_some() {
                return Err(Error::Config(format!(
                    "layer {}: residual weights must be present exactly for layers above the skip span",
                    l + 1
                )));
            }
        }
        match (&self.readout, c.readout) {
            (Some(r), ReadoutKind::Affine) => {
                if r.w.shape() != (c.out_dim, c.hidden) || r.b.len() != c.out_dim {
                    return Err(Error::Config(format!(
                        "readout must be {}x{}, got {}x{}",
                        c.out_dim,
                        c.hidden,
                        r.w.rows(),
                        r.w.cols()
                    )));
                }
                if !r.w.all_finite() || !r.b.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numerical("readout contains non-finite entries".into()));
                }
            }
            (None, ReadoutKind::Identity) => {}
            _ => return Err(Error::Config("readout parameters do not match the readout kind".into())),
        }
        Ok(())
    }

    /// Named flat parameter views, layer by layer, then the readout.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (l, p) in self.layers.iter().enumerate() {
            out.push((format!("layer{}.w", l + 1), p.w.as_slice()));
            out.push((format!("layer{}.V", l + 1), p.v.data()));
            out.push((format!("layer{}.b", l + 1), p.b.as_slice()));
            out.push((format!("layer{}.c", l + 1), p.c.as_slice()));
            if let Some(lam) = &p.lambda {
                out.push((format!("layer{}.Lambda", l + 1), lam.data()));
            }
        }
        if let Some(r) = &self.readout {
            out.push(("readout.W".to_string(), r.w.data()));
            out.push(("readout.b".to_string(), r.b.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (l, p) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{}.w", l + 1), p.w.as_mut_slice()));
            out.push((format!("layer{}.V", l + 1), p.v.data_mut()));
            out.push((format!("layer{}.b", l + 1), p.b.as_mut_slice()));
            out.push((format!("layer{}.c", l + 1), p.c.as_mut_slice()));
            if let Some(lam) = &mut p.lambda {
                out.push((format!("layer{}.Lambda", l + 1), lam.data_mut()));
            }
        }
        if let Some(r) = &mut self.readout {
            out.push(("readout.W".to_string(), r.w.data_mut()));
            out.push(("readout.b".to_string(), r.b.as_mut_slice()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_input(&self, input: &SeqBatch) -> Result<()> {
        if input.steps() == 0 || input.batch() == 0 {
            return Err(Error::Contract("input batch is empty".into()));
        }
        if input.width() != self.config.input_dim {
            return Err(Error::Contract(format!(
                "input width {} does not match the model's input dimension {}",
                input.width(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn resolve_masks(
        &self,
        input: &SeqBatch,
        mode: Mode,
        masks: Option<&[DropoutMask]>,
    ) -> Result<Option<Vec<Matrix>>> {
        match (mode, masks) {
            (Mode::Eval, _) => Ok(None),
            (Mode::Train, Some(m)) => stack_masks(&self.config, m, input.batch()).map(Some),
            (Mode::Train, None) if self.config.dropout > 0.0 => Err(Error::Contract(
                "training with dropout needs one mask per sequence".into(),
            )),
            (Mode::Train, None) => Ok(None),
        }
    }

    /// Forward pass without retaining anything for a backward sweep.
    pub fn forward(&self, input: &SeqBatch, mode: Mode, masks: Option<&[DropoutMask]>) -> Result<SeqBatch> {
        self.check_input(input)?;
        let masks = self.resolve_masks(input, mode, masks)?;
        Ok(fused::forward(self, input, masks.as_deref(), false)?.outputs)
    }

    /// Forward pass that keeps what `grad_mode` needs for [`Model::backward`].
    pub fn forward_pass(
        &self,
        input: &SeqBatch,
        mode: Mode,
        masks: Option<&[DropoutMask]>,
        grad_mode: GradMode,
    ) -> Result<ForwardPass> {
        self.check_input(input)?;
        let masks = self.resolve_masks(input, mode, masks)?;
        match grad_mode {
            GradMode::Stored => fused::forward(self, input, masks.as_deref(), true),
            GradMode::Reconstructing => streaming::forward(self, input, masks),
        }
    }

    /// Backward sweep from output-space gradients `grad_out` (same layout as
    /// `pass.outputs`). Returns the gradients and the state meter.
    pub fn backward(
        &self,
        pass: ForwardPass,
        input: &SeqBatch,
        grad_out: &SeqBatch,
    ) -> Result<(ModelGrads, StateMeter)> {
        if grad_out.steps() != pass.outputs.steps()
            || grad_out.batch() != pass.outputs.batch()
            || grad_out.width() != pass.outputs.width()
        {
            return Err(Error::Contract(
                "output gradient does not match the forward outputs".into(),
            ));
        }
        let ForwardPass {
            outputs,
            cache,
            mut meter,
        } = pass;
        let grads = match cache {
            Cache::Stored(c) => fused::backward(self, c, input, &outputs, grad_out, &mut meter)?,
            Cache::Reconstructing(f) => streaming::backward(self, f, input, grad_out, &mut meter)?,
            Cache::None => {
                return Err(Error::Contract("forward pass was run without caches".into()));
            }
        };
        Ok((grads, meter))
    }

    /// Mean loss over the batch, its gradients and the outputs.
    pub fn loss_and_grad(
        &self,
        input: &SeqBatch,
        targets: &Targets,
        mode: Mode,
        masks: Option<&[DropoutMask]>,
        grad_mode: GradMode,
    ) -> Result<BatchResult> {
        let pass = self.forward_pass(input, mode, masks, grad_mode)?;
        let (loss, grad_out) = batch_loss(&pass.outputs, targets)?;
        let outputs = pass.outputs.clone();
        let (grads, meter) = self.backward(pass, input, &grad_out)?;
        Ok(BatchResult {
            loss,
            grads,
            outputs,
            peak_state_floats: meter.peak(),
        })
    }

    /// Mean loss over the batch without gradients.
    pub fn loss(&self, input: &SeqBatch, targets: &Targets, mode: Mode, masks: Option<&[DropoutMask]>) -> Result<f64> {
        let out = self.forward(input, mode, masks)?;
        Ok(batch_loss(&out, targets)?.0)
    }
}

/// Batch-mean loss and its gradient with respect to the outputs.
///
/// Sequence targets use the per-sequence mean-squared error; class targets
/// use softmax cross-entropy on the final-step outputs.
pub fn batch_loss(outputs: &SeqBatch, targets: &Targets) -> Result<(f64, SeqBatch)> {
    let batch = outputs.batch();
    let inv_b = 1.0 / batch as f64;
    let mut grad = SeqBatch::zeros(outputs.steps(), batch, outputs.width());
    let mut total = 0.0;
    match targets {
        Targets::Sequence(t) => {
            if t.steps() != outputs.steps() || t.batch() != batch || t.width() != outputs.width() {
                return Err(Error::Contract(format!(
                    "targets are {}x{}x{} but outputs are {}x{}x{}",
                    t.steps(),
                    t.batch(),
                    t.width(),
                    outputs.steps(),
                    batch,
                    outputs.width()
                )));
            }
            for b in 0..batch {
                let (l, g) = mse_loss(&outputs.sequence(b), &t.sequence(b))?;
                total += l;
                for n in 0..outputs.steps() {
                    for (o, v) in grad.row_mut(n, b).iter_mut().zip(g.row(n)) {
                        *o = v * inv_b;
                    }
                }
            }
        }
        Targets::Classes(labels) => {
            if labels.len() != batch {
                return Err(Error::Contract(format!(
                    "{} labels for a batch of {batch}",
                    labels.len()
                )));
            }
            let last = outputs.steps() - 1;
            for (b, &label) in labels.iter().enumerate() {
                let (l, g) = cross_entropy_loss(outputs.row(last, b), label)?;
                total += l;
                for (o, v) in grad.row_mut(last, b).iter_mut().zip(&g) {
                    *o = v * inv_b;
                }
            }
        }
    }
    Ok((total * inv_b, grad))
}
