//! Layered network of rectified spiking units joined by time-delayed weights.
//!
//! A connection between a pre-neuron `i` and a post-neuron `j` carries `K`
//! weights, one per delay slot. Slot 0 reads the newest timestep of the pre
//! layer and slot `K-1` reads the timestep `K-1` steps earlier; activity older
//! than that has no effect. The same tensor, transposed in space and time,
//! is used to infer the pre layer from the future activity of the post layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{HistoryWindow, TimestepFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerRole {
    Input,
    Hidden,
    PredictionHead,
    ClassificationHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub size: usize,
    pub role: LayerRole,
}

/// Layer sizes and temporal resolution of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    /// Number of delay slots per connection.
    pub k: usize,
    pub tau_us: u64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input: 1058,
            hidden: vec![1000, 1000, 1000],
            classes: 10,
            k: 5,
            tau_us: crate::event::DEFAULT_TAU_US,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 {
            return Err(Error::config("input layer must have at least one neuron"));
        }
        if self.hidden.is_empty() {
            return Err(Error::config("at least one hidden layer is required"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layers must have at least one neuron"));
        }
        if self.classes == 0 {
            return Err(Error::config("classification head needs at least one class"));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if self.tau_us == 0 {
            return Err(Error::config("tau_us must be positive"));
        }
        Ok(())
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = vec![LayerSpec {
            id: "input".into(),
            size: self.input,
            role: LayerRole::Input,
        }];
        for (n, &size) in self.hidden.iter().enumerate() {
            specs.push(LayerSpec {
                id: format!("hidden{}", n + 1),
                size,
                role: LayerRole::Hidden,
            });
        }
        specs.push(LayerSpec {
            id: "prediction".into(),
            size: self.input,
            role: LayerRole::PredictionHead,
        });
        specs.push(LayerSpec {
            id: "classification".into(),
            size: self.classes,
            role: LayerRole::ClassificationHead,
        });
        specs
    }

    /// Width of the concatenated input + hidden activity that feeds the heads.
    pub fn head_width(&self) -> usize {
        self.input + self.hidden.iter().sum::<usize>()
    }
}

/// Rectified linear activation.
pub fn relu(drive: f64) -> Result<f64> {
    if !drive.is_finite() {
        return Err(Error::Numeric("relu input"));
    }
    Ok(if drive > 0.0 { drive } else { 0.0 })
}

/// Weights `w[post j][pre i][delay k]`.
///
/// Stored delay-major (`[k][i][j]`) so that every per-spike update touches a
/// contiguous row of post-neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedWeightTensor {
    pub pre_layer: String,
    pub post_layer: String,
    pre: usize,
    post: usize,
    k: usize,
    data: Vec<f64>,
}

impl DelayedWeightTensor {
    pub fn zeros(pre_layer: &str, post_layer: &str, pre: usize, post: usize, k: usize) -> Self {
        DelayedWeightTensor {
            pre_layer: pre_layer.to_string(),
            post_layer: post_layer.to_string(),
            pre,
            post,
            k,
            data: vec![0.0; pre * post * k],
        }
    }

    /// Independent uniform draws in `[0, scale)`, generated in (post, pre, k) order.
    pub fn uniform<R: Rng + ?Sized>(
        pre_layer: &str,
        post_layer: &str,
        pre: usize,
        post: usize,
        k: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut t = Self::zeros(pre_layer, post_layer, pre, post, k);
        for j in 0..post {
            for i in 0..pre {
                for d in 0..k {
                    let v = rng.gen::<f64>() * scale;
                    t.set(j, i, d, v);
                }
            }
        }
        t
    }

    /// Builds a tensor from values listed in (post, pre, k) order.
    pub fn from_values(
        pre_layer: &str,
        post_layer: &str,
        pre: usize,
        post: usize,
        k: usize,
        values: &[f64],
    ) -> Result<Self> {
        if values.len() != pre * post * k {
            return Err(Error::Bounds {
                index: values.len(),
                size: pre * post * k,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("weight values"));
        }
        let mut t = Self::zeros(pre_layer, post_layer, pre, post, k);
        let mut it = values.iter();
        for j in 0..post {
            for i in 0..pre {
                for d in 0..k {
                    t.set(j, i, d, *it.next().unwrap());
                }
            }
        }
        Ok(t)
    }

    /// All values in (post, pre, k) order.
    pub fn to_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.post {
            for i in 0..self.pre {
                for d in 0..self.k {
                    out.push(self.get(j, i, d));
                }
            }
        }
        out
    }

    pub fn pre(&self) -> usize {
        self.pre
    }

    pub fn post(&self) -> usize {
        self.post
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    fn offset(&self, post: usize, pre: usize, delay: usize) -> usize {
        (delay * self.pre + pre) * self.post + post
    }

    /// Weight from `pre` to `post` at delay slot `delay` (0-based).
    #[inline]
    pub fn get(&self, post: usize, pre: usize, delay: usize) -> f64 {
        self.data[self.offset(post, pre, delay)]
    }

    #[inline]
    pub fn set(&mut self, post: usize, pre: usize, delay: usize, value: f64) {
        let o = self.offset(post, pre, delay);
        self.data[o] = value;
    }

    #[inline]
    fn row(&self, pre: usize, delay: usize) -> &[f64] {
        let start = (delay * self.pre + pre) * self.post;
        &self.data[start..start + self.post]
    }

    #[inline]
    fn row_mut(&mut self, pre: usize, delay: usize) -> &mut [f64] {
        let start = (delay * self.pre + pre) * self.post;
        &mut self.data[start..start + self.post]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    fn check_frames(&self, frames: &[&[f64]], width: usize) -> Result<()> {
        if frames.len() < self.k {
            return Err(Error::InsufficientHistory {
                have: frames.len(),
                need: self.k,
            });
        }
        for f in frames.iter().take(self.k) {
            if f.len() != width {
                return Err(Error::Bounds {
                    index: f.len(),
                    size: width,
                });
            }
        }
        Ok(())
    }

    /// `Q_j = sum_i sum_k w[j,i,k] * frames[k][i]`, with `frames[0]` the newest
    /// pre-layer frame. Silent pre-neurons are skipped.
    pub(crate) fn drive_frames(&self, frames_newest_first: &[&[f64]]) -> Result<Vec<f64>> {
        self.check_frames(frames_newest_first, self.pre)?;
        let mut q = vec![0.0; self.post];
        for (d, frame) in frames_newest_first.iter().take(self.k).enumerate() {
            for (i, &h) in frame.iter().enumerate() {
                if h == 0.0 {
                    continue;
                }
                for (qj, w) in q.iter_mut().zip(self.row(i, d)) {
                    *qj += w * h;
                }
            }
        }
        Ok(q)
    }

    /// `Q_i = sum_j sum_k w[j,i,k] * frames[k][j]`, with `frames[0]` the oldest
    /// post-layer frame of the window.
    pub(crate) fn inference_frames(&self, frames_oldest_first: &[&[f64]]) -> Result<Vec<f64>> {
        self.check_frames(frames_oldest_first, self.post)?;
        let mut q = vec![0.0; self.pre];
        for (d, frame) in frames_oldest_first.iter().take(self.k).enumerate() {
            if frame.iter().all(|&h| h == 0.0) {
                continue;
            }
            for (i, qi) in q.iter_mut().enumerate() {
                *qi += self
                    .row(i, d)
                    .iter()
                    .zip(frame.iter())
                    .map(|(w, h)| w * h)
                    .sum::<f64>();
            }
        }
        Ok(q)
    }

    /// `w[j,i,k] += eps * frames[k][i] * coeff[j]` for the forward orientation.
    pub(crate) fn update_forward(
        &mut self,
        frames_newest_first: &[&[f64]],
        coeff: &[f64],
        eps: f64,
    ) -> Result<()> {
        self.check_frames(frames_newest_first, self.pre)?;
        if coeff.len() != self.post {
            return Err(Error::Bounds {
                index: coeff.len(),
                size: self.post,
            });
        }
        check_finite(coeff, eps)?;
        if coeff.iter().all(|&c| c == 0.0) {
            return Ok(());
        }
        for (d, frame) in frames_newest_first.iter().take(self.k).enumerate() {
            for (i, &h) in frame.iter().enumerate() {
                if h == 0.0 {
                    continue;
                }
                let scale = eps * h;
                for (w, c) in self.row_mut(i, d).iter_mut().zip(coeff) {
                    *w += scale * c;
                }
            }
        }
        Ok(())
    }

    /// `w[j,i,k] += eps * frames[k][j] * coeff[i]` for the transposed orientation.
    pub(crate) fn update_transposed(
        &mut self,
        frames_oldest_first: &[&[f64]],
        coeff: &[f64],
        eps: f64,
    ) -> Result<()> {
        self.check_frames(frames_oldest_first, self.post)?;
        if coeff.len() != self.pre {
            return Err(Error::Bounds {
                index: coeff.len(),
                size: self.pre,
            });
        }
        check_finite(coeff, eps)?;
        for (d, frame) in frames_oldest_first.iter().take(self.k).enumerate() {
            if frame.iter().all(|&h| h == 0.0) {
                continue;
            }
            for (i, &c) in coeff.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let scale = eps * c;
                for (w, h) in self.row_mut(i, d).iter_mut().zip(frame.iter()) {
                    *w += scale * h;
                }
            }
        }
        Ok(())
    }
}

fn check_finite(coeff: &[f64], eps: f64) -> Result<()> {
    if !eps.is_finite() {
        return Err(Error::Numeric("learning rate"));
    }
    if coeff.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("update coefficients"));
    }
    Ok(())
}

pub(crate) fn newest_first(window: &HistoryWindow) -> Vec<&[f64]> {
    window.frames().rev().map(|f| f.values.as_slice()).collect()
}

pub(crate) fn oldest_first(window: &HistoryWindow) -> Vec<&[f64]> {
    window.frames().map(|f| f.values.as_slice()).collect()
}

fn require_filled(window: &HistoryWindow) -> Result<()> {
    if !window.filled() {
        return Err(Error::InsufficientHistory {
            have: window.len(),
            need: window.capacity(),
        });
    }
    Ok(())
}

/// Drive of every post-neuron given the pre-layer history.
pub fn compute_drive(weights: &DelayedWeightTensor, window: &HistoryWindow) -> Result<Vec<f64>> {
    require_filled(window)?;
    weights.drive_frames(&newest_first(window))
}

/// Estimate of every pre-neuron's activity at the start of `future_window`,
/// read out of the post layer's subsequent activity.
pub fn compute_inference(
    weights: &DelayedWeightTensor,
    future_window: &HistoryWindow,
) -> Result<Vec<f64>> {
    require_filled(future_window)?;
    weights.inference_frames(&oldest_first(future_window))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub retained: Vec<bool>,
    pub rate: f64,
}

impl DropoutMask {
    pub fn dropped_fraction(&self) -> f64 {
        if self.retained.is_empty() {
            return 0.0;
        }
        self.retained.iter().filter(|r| !**r).count() as f64 / self.retained.len() as f64
    }
}

pub fn sample_dropout_mask<R: Rng + ?Sized>(size: usize, rate: f64, rng: &mut R) -> Result<DropoutMask> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1]")));
    }
    let retained = (0..size).map(|_| rng.gen::<f64>() >= rate).collect();
    Ok(DropoutMask { retained, rate })
}

/// How a hidden layer's rectified drive is turned into emitted activity.
#[derive(Debug, Clone, Copy)]
pub enum Gate<'a> {
    Open,
    Mask(&'a DropoutMask),
    /// Multiply by a constant, e.g. the retention probability at evaluation.
    Scale(f64),
}

/// Weights plus the per-layer activity histories of a running network.
#[derive(Debug, Clone)]
pub struct Network {
    pub arch: Architecture,
    /// `layers[l]` connects layer `l` (0 = input) to hidden layer `l + 1`.
    pub layers: Vec<DelayedWeightTensor>,
    pub prediction_head: DelayedWeightTensor,
    pub classification_head: DelayedWeightTensor,
    pub(crate) windows: Vec<HistoryWindow>,
    current_t: i64,
}

impl Network {
    /// Inter-layer weights uniform in `[0, init_scale)`, heads zero.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, init_scale: f64, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let specs = arch.layer_specs();
        let mut sizes = vec![arch.input];
        sizes.extend(arch.hidden.iter().copied());
        let layers = (0..arch.hidden.len())
            .map(|l| {
                DelayedWeightTensor::uniform(
                    &specs[l].id,
                    &specs[l + 1].id,
                    sizes[l],
                    sizes[l + 1],
                    arch.k,
                    init_scale,
                    rng,
                )
            })
            .collect();
        let heads = Self::zero_heads(&arch);
        Ok(Self::assemble(arch, layers, heads.0, heads.1))
    }

    fn zero_heads(arch: &Architecture) -> (DelayedWeightTensor, DelayedWeightTensor) {
        let w = arch.head_width();
        (
            DelayedWeightTensor::zeros("all", "prediction", w, arch.input, arch.k),
            DelayedWeightTensor::zeros("all", "classification", w, arch.classes, arch.k),
        )
    }

    /// Reassembles a network from stored tensors, checking their shapes.
    pub fn from_parts(
        arch: Architecture,
        layers: Vec<DelayedWeightTensor>,
        prediction_head: DelayedWeightTensor,
        classification_head: DelayedWeightTensor,
    ) -> Result<Self> {
        arch.validate()?;
        if layers.len() != arch.hidden.len() {
            return Err(Error::config("layer tensor count does not match architecture"));
        }
        let mut sizes = vec![arch.input];
        sizes.extend(arch.hidden.iter().copied());
        let shape_ok = |t: &DelayedWeightTensor, pre: usize, post: usize| {
            t.pre == pre && t.post == post && t.k == arch.k
        };
        for (l, t) in layers.iter().enumerate() {
            if !shape_ok(t, sizes[l], sizes[l + 1]) {
                return Err(Error::config(format!("tensor {l} has the wrong shape")));
            }
        }
        let w = arch.head_width();
        if !shape_ok(&prediction_head, w, arch.input) || !shape_ok(&classification_head, w, arch.classes) {
            return Err(Error::config("head tensor has the wrong shape"));
        }
        Ok(Self::assemble(arch, layers, prediction_head, classification_head))
    }

    fn assemble(
        arch: Architecture,
        layers: Vec<DelayedWeightTensor>,
        prediction_head: DelayedWeightTensor,
        classification_head: DelayedWeightTensor,
    ) -> Self {
        let mut net = Network {
            windows: Vec::new(),
            current_t: -1,
            arch,
            layers,
            prediction_head,
            classification_head,
        };
        net.reset();
        net
    }

    /// Forgets all activity: every window becomes silent history ending at t = -1.
    pub fn reset(&mut self) {
        let k = self.arch.k;
        let mut sizes = vec![self.arch.input];
        sizes.extend(self.arch.hidden.iter().copied());
        self.windows = sizes.iter().map(|&s| HistoryWindow::silent(k, s, -1)).collect();
        self.current_t = -1;
    }

    pub fn current_t(&self) -> i64 {
        self.current_t
    }

    pub fn hidden_count(&self) -> usize {
        self.arch.hidden.len()
    }

    /// Window of layer `l` (0 = input).
    pub fn window(&self, l: usize) -> &HistoryWindow {
        &self.windows[l]
    }

    /// Newest frames of input and all hidden layers, concatenated.
    pub fn head_frame(&self) -> TimestepFrame {
        let mut values = Vec::with_capacity(self.arch.head_width());
        for w in &self.windows {
            values.extend_from_slice(&w.newest().expect("windows are never empty").values);
        }
        TimestepFrame {
            t: self.current_t,
            values,
        }
    }

    /// Advances one timestep: pushes `input`, then computes each hidden layer
    /// bottom-up from the window below it. `gates` holds one entry per hidden
    /// layer; missing entries default to [`Gate::Open`].
    pub fn forward_step(&mut self, input: TimestepFrame, gates: &[Gate]) -> Result<Vec<TimestepFrame>> {
        if input.t != self.current_t + 1 {
            return Err(Error::Gap {
                expected: self.current_t + 1,
                got: input.t,
            });
        }
        if input.len() != self.arch.input {
            return Err(Error::Bounds {
                index: input.len(),
                size: self.arch.input,
            });
        }
        let t = input.t;
        self.windows[0].push(input)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let drive = compute_drive(&self.layers[l], &self.windows[l])?;
            let mut values = Vec::with_capacity(drive.len());
            for q in drive {
                values.push(relu(q)?);
            }
            match gates.get(l).copied().unwrap_or(Gate::Open) {
                Gate::Open => {}
                Gate::Mask(mask) => {
                    if mask.retained.len() != values.len() {
                        return Err(Error::Bounds {
                            index: mask.retained.len(),
                            size: values.len(),
                        });
                    }
                    for (v, keep) in values.iter_mut().zip(&mask.retained) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                }
                Gate::Scale(s) => values.iter_mut().for_each(|v| *v *= s),
            }
            let frame = TimestepFrame { t, values };
            self.windows[l + 1].push(frame.clone())?;
            out.push(frame);
        }
        self.current_t = t;
        Ok(out)
    }
}
