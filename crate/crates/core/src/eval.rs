//! Readouts and metrics over a frozen network.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Stream;
use crate::error::{Error, Result};
use crate::event::TimestepFrame;
use crate::learn::{subtract_noise_baseline, DelayLine};
use crate::net::{compute_inference, DelayedWeightTensor, Gate, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub timestep: u64,
    pub pass: usize,
    pub layer: usize,
    pub metric: String,
    pub value: f64,
}

/// Append-only metrics log, written as `timestep,pass,layer,metric,value`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    points: Vec<MetricPoint>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, point: MetricPoint) -> Result<()> {
        if !point.value.is_finite() {
            return Err(Error::Numeric("metric value"));
        }
        if let Some(last) = self.points.last() {
            if point.timestep < last.timestep {
                return Err(Error::config("metrics must be appended in timestep order"));
            }
        }
        self.points.push(point);
        Ok(())
    }

    pub fn points(&self) -> &[MetricPoint] {
        &self.points
    }

    pub fn series(&self, metric: &str) -> Vec<&MetricPoint> {
        self.points.iter().filter(|p| p.metric == metric).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "timestep,pass,layer,metric,value")?;
        for p in &self.points {
            writeln!(w, "{},{},{},{},{}", p.timestep, p.pass, p.layer, p.metric, p.value)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `sum (e - x)^2 / sum x^2`; undefined when the truth is silent.
pub fn normalized_sse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::Bounds {
            index: estimate.len(),
            size: truth.len(),
        });
    }
    let power: f64 = truth.iter().map(|x| x * x).sum();
    if power == 0.0 {
        return Err(Error::UndefinedMetric("normalized SSE of a silent frame"));
    }
    let err: f64 = estimate.iter().zip(truth).map(|(e, x)| (e - x).powi(2)).sum();
    Ok(err / power)
}

/// Index of the largest entry, lowest index on ties.
pub fn classify(q: &[f64]) -> Result<usize> {
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("class scores"));
    }
    let mut best = 0;
    for (c, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = c;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Retention probability used to scale hidden activity.
    pub retention: f64,
    pub horizon: usize,
    /// Noise floor learned into the heads, subtracted from their readouts.
    pub noise_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub timesteps: usize,
    pub labeled_timesteps: usize,
    pub timestep_accuracy: Option<f64>,
    pub recordings: usize,
    pub recording_accuracy: Option<f64>,
    pub inference_sse: Option<f64>,
    pub prediction_sse: Option<f64>,
    /// Frames skipped by the SSE metrics because the truth was silent.
    pub silent_skipped: usize,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut rows = vec![
            ("timesteps", self.timesteps as f64),
            ("labeled_timesteps", self.labeled_timesteps as f64),
            ("recordings", self.recordings as f64),
            ("silent_skipped", self.silent_skipped as f64),
        ];
        let opt = [
            ("timestep_accuracy", self.timestep_accuracy),
            ("recording_accuracy", self.recording_accuracy),
            ("inference_sse", self.inference_sse),
            ("prediction_sse", self.prediction_sse),
        ];
        rows.extend(opt.iter().filter_map(|(k, v)| v.map(|v| (*k, v))));
        rows
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "metric,value")?;
        for (k, v) in self.rows() {
            writeln!(w, "{k},{v}")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

fn rate_readout(q: &[f64], noise_rate: f64) -> Vec<f64> {
    q.iter().map(|&v| subtract_noise_baseline(v, noise_rate)).collect()
}

/// Runs `stream` through a copy of `net` with every hidden layer scaled by
/// the retention probability and no learning.
///
/// Inference compares the input estimate read out of hidden layer 1 over
/// `t .. t+K-1` with the input at `t`; prediction compares the prediction
/// head at `t` with the input at `t + horizon`. Both clamp estimates at zero.
pub fn evaluate_stream(net: &Network, stream: &Stream, opts: &EvalOptions) -> Result<EvalReport> {
    let mut net = net.clone();
    net.reset();
    let k = net.arch.k;
    let hidden = net.hidden_count();
    let gates = vec![Gate::Scale(opts.retention); hidden];
    let mut line = DelayLine::new(k, opts.horizon);

    let mut report = EvalReport {
        timesteps: stream.len(),
        recordings: stream.recordings.len(),
        ..EvalReport::default()
    };
    let mut correct = 0usize;
    let mut summed = vec![vec![0.0; net.arch.classes]; stream.recordings.len()];
    let mut inference = Mean::default();
    let mut prediction = Mean::default();
    let labeled = stream.labels.iter().any(Option::is_some);

    for (n, frame) in stream.frames.iter().enumerate() {
        let input = TimestepFrame {
            t: n as i64,
            values: frame.values.clone(),
        };
        net.forward_step(input, &gates)?;
        line.push(net.head_frame())?;

        if let Some(frames) = line.current() {
            if labeled {
                let q = rate_readout(&net.classification_head.drive_frames(&frames)?, opts.noise_rate);
                if let Some(label) = stream.labels[n] {
                    report.labeled_timesteps += 1;
                    if classify(&q)? == label as usize {
                        correct += 1;
                    }
                }
                if let Some(r) = stream.recording[n] {
                    for (s, v) in summed[r].iter_mut().zip(&q) {
                        *s += v;
                    }
                }
            }
            if let Some(truth) = stream.frames.get(n + opts.horizon) {
                let q = rate_readout(&net.prediction_head.drive_frames(&frames)?, opts.noise_rate);
                match normalized_sse(&q, &truth.values) {
                    Ok(v) => prediction.add(v),
                    Err(Error::UndefinedMetric(_)) => report.silent_skipped += 1,
                    Err(e) => return Err(e),
                }
            }
        }

        if n + 1 >= k {
            let start = n + 1 - k;
            let q = compute_inference(&net.layers[0], net.window(1))?;
            let q: Vec<f64> = q.into_iter().map(|v| v.max(0.0)).collect();
            match normalized_sse(&q, &stream.frames[start].values) {
                Ok(v) => inference.add(v),
                Err(Error::UndefinedMetric(_)) => report.silent_skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }

    if labeled && report.labeled_timesteps > 0 {
        report.timestep_accuracy = Some(correct as f64 / report.labeled_timesteps as f64);
        let mut hits = 0usize;
        for (r, (_, label)) in stream.recordings.iter().enumerate() {
            if classify(&summed[r])? == *label as usize {
                hits += 1;
            }
        }
        report.recording_accuracy = Some(hits as f64 / stream.recordings.len().max(1) as f64);
    }
    report.inference_sse = inference.get();
    report.prediction_sse = prediction.get();
    Ok(report)
}

/// Delay-summed weights of one neuron laid out on the input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub neuron: usize,
    pub width: usize,
    pub height: usize,
    /// `channels * height * width` values, channel-major then row-major.
    pub values: Vec<f64>,
}

impl FieldMap {
    pub fn channels(&self) -> usize {
        self.values.len() / (self.width * self.height)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for (c, channel) in self.values.chunks(self.width * self.height).enumerate() {
            if c > 0 {
                writeln!(w)?;
            }
            for row in channel.chunks(self.width) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(","))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Binary graymap with channels side by side, one dark column between
    /// them; zero maps to mid-gray and +/- max_abs to white/black.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        let channels = self.channels();
        let img_w = channels * self.width + channels.saturating_sub(1);
        writeln!(w, "P5\n{} {}\n255", img_w, self.height)?;
        let scale = self.max_abs();
        let mut bytes = Vec::with_capacity(img_w * self.height);
        for r in 0..self.height {
            for c in 0..channels {
                if c > 0 {
                    bytes.push(0u8);
                }
                for x in 0..self.width {
                    let v = self.values[(c * self.height + r) * self.width + x];
                    let g = if scale > 0.0 { 127.5 + 127.5 * v / scale } else { 127.5 };
                    bytes.push(g.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }
}

/// Which side of a tensor the maps are drawn over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// One map per post-neuron over the pre layer (pre must be the input grid).
    Receptive,
    /// One map per pre-neuron in `range` over the post layer (post must be the
    /// input grid, as for the prediction head).
    Predictive { start: usize, end: usize },
}

pub fn export_fields(
    weights: &DelayedWeightTensor,
    kind: FieldKind,
    width: usize,
    height: usize,
    normalize: bool,
) -> Result<Vec<FieldMap>> {
    let grid = match kind {
        FieldKind::Receptive => weights.pre(),
        FieldKind::Predictive { .. } => weights.post(),
    };
    if width == 0 || height == 0 || grid % (width * height) != 0 {
        return Err(Error::Bounds {
            index: grid,
            size: width * height,
        });
    }
    let neurons: Vec<usize> = match kind {
        FieldKind::Receptive => (0..weights.post()).collect(),
        FieldKind::Predictive { start, end } => {
            if end > weights.pre() || start > end {
                return Err(Error::Bounds {
                    index: end,
                    size: weights.pre(),
                });
            }
            (start..end).collect()
        }
    };
    let mut maps = Vec::with_capacity(neurons.len());
    for n in neurons {
        let values: Vec<f64> = (0..grid)
            .map(|g| {
                (0..weights.k())
                    .map(|d| match kind {
                        FieldKind::Receptive => weights.get(n, g, d),
                        FieldKind::Predictive { .. } => weights.get(g, n, d),
                    })
                    .sum()
            })
            .collect();
        let mut map = FieldMap {
            neuron: n,
            width,
            height,
            values,
        };
        let m = map.max_abs();
        if normalize && m > 0.0 {
            map.values.iter_mut().for_each(|v| *v /= m);
        }
        maps.push(map);
    }
    Ok(maps)
}

/// Writes `<prefix>_<neuron>.csv` and `.pgm` for every map.
pub fn write_fields(dir: &Path, prefix: &str, maps: &[FieldMap]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for m in maps {
        let stem = format!("{prefix}_{:04}", m.neuron);
        m.write_csv(BufWriter::new(File::create(dir.join(format!("{stem}.csv")))?))?;
        m.write_pgm(BufWriter::new(File::create(dir.join(format!("{stem}.pgm")))?))?;
    }
    Ok(())
}
