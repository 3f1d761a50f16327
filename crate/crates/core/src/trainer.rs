//! Layerwise training schedule.
//!
//! Each pass trains the hidden layers one at a time, bottom-up, as
//! self-supervised reconstructors of the layer below. The prediction and
//! classification heads learn at every timestep of every layer pass. After a
//! full pass both learning rates halve.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Progress, RngState};
use crate::data::{self, assemble_stream, split_train_test, synth_moving_pattern, Recording, SensorMapping, Stream};
use crate::error::{Error, Result};
use crate::eval::{evaluate_stream, normalized_sse, EvalOptions, EvalReport, MetricPoint, MetricsLog};
use crate::event::TimestepFrame;
use crate::learn::{
    autoencoder_step, classification_step, inject_supervision_noise, prediction_step, DelayLine, LearnConfig,
    StepOutcome,
};
use crate::net::{sample_dropout_mask, Architecture, Gate, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub classes: Vec<u32>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Timesteps per recording.
    pub length: usize,
    pub noise_rate: f64,
    pub gap: usize,
    pub crop: SensorMapping,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            classes: vec![0, 1],
            train_per_class: 40,
            test_per_class: 10,
            length: 60,
            noise_rate: 0.002,
            gap: 15,
            crop: SensorMapping::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryData {
    /// Directory holding `manifest.csv` and one event file per recording.
    pub path: PathBuf,
    #[serde(default = "default_train_split")]
    pub train_per_class: usize,
    #[serde(default = "default_test_split")]
    pub test_per_class: usize,
    #[serde(default = "default_gap")]
    pub gap: usize,
    #[serde(default)]
    pub crop: SensorMapping,
}

fn default_train_split() -> usize {
    900
}

fn default_test_split() -> usize {
    100
}

fn default_gap() -> usize {
    15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    Synthetic(SyntheticData),
    Directory(DirectoryData),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticData::default())
    }
}

impl DatasetConfig {
    pub fn gap(&self) -> usize {
        match self {
            DatasetConfig::Synthetic(s) => s.gap,
            DatasetConfig::Directory(d) => d.gap,
        }
    }

    pub fn crop(&self) -> SensorMapping {
        match self {
            DatasetConfig::Synthetic(s) => s.crop,
            DatasetConfig::Directory(d) => d.crop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Full sweeps through all hidden layers.
    pub passes: usize,
    pub dropout: f64,
    /// Upper bound of the uniform inter-layer weight initialization; a
    /// negative value means "use `learn.eps_layers`".
    pub init_scale: f64,
    /// Write a checkpoint after every this many layer passes (0 = final only).
    pub checkpoint_every: usize,
    /// Evaluate the test stream after every layer pass.
    pub probe: bool,
    pub arch: Architecture,
    pub learn: LearnConfig,
    pub data: DatasetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            passes: 3,
            dropout: 0.5,
            init_scale: -1.0,
            checkpoint_every: 1,
            probe: true,
            arch: Architecture::default(),
            learn: LearnConfig::default(),
            data: DatasetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Laptop-sized synthetic two-class setup: one hidden layer of 100.
    pub fn desk() -> Self {
        TrainConfig {
            seed: 7,
            passes: 6,
            dropout: 0.0,
            init_scale: -1.0,
            checkpoint_every: 0,
            probe: false,
            arch: Architecture {
                input: 1058,
                hidden: vec![100],
                classes: 2,
                k: 5,
                tau_us: crate::event::DEFAULT_TAU_US,
            },
            learn: LearnConfig {
                eps_layers: 5e-3,
                eps_heads: 4e-3,
                halve_per_pass: true,
                noise_rate: 0.0,
                horizon: 5,
                label_strength: 1.0,
            },
            data: DatasetConfig::Synthetic(SyntheticData::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.learn.validate()?;
        if self.passes == 0 {
            return Err(Error::config("passes must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if !self.init_scale.is_finite() {
            return Err(Error::config("init_scale must be finite"));
        }
        let crop = self.data.crop();
        crop.validate()?;
        if crop.input_size() != self.arch.input {
            return Err(Error::config(format!(
                "crop gives {} input neurons but arch.input is {}",
                crop.input_size(),
                self.arch.input
            )));
        }
        if let DatasetConfig::Synthetic(s) = &self.data {
            if s.classes.is_empty() {
                return Err(Error::config("synthetic data needs at least one class"));
            }
            if let Some(c) = s.classes.iter().find(|&&c| c as usize >= self.arch.classes) {
                return Err(Error::config(format!("class {c} exceeds arch.classes")));
            }
        }
        Ok(())
    }

    pub fn init_scale(&self) -> f64 {
        if self.init_scale < 0.0 {
            self.learn.eps_layers
        } else {
            self.init_scale
        }
    }

    pub fn retention(&self) -> f64 {
        1.0 - self.dropout
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            retention: self.retention(),
            horizon: self.learn.horizon,
            noise_rate: self.learn.noise_rate,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Parses a config, applying `key=value` overrides on dotted paths first.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = if text.trim().is_empty() {
            toml::Value::Table(Default::default())
        } else {
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: TrainConfig = value.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?, overrides)
    }
}

/// Sets `a.b.c = value` inside a TOML tree. The value is parsed as TOML and
/// falls back to a plain string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::config("override key is empty"));
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for key in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{path}` does not name a table entry")))?;
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("`{path}` does not name a table entry")))?;
    table.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

mod purpose {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const ORDER: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const PROBE: u64 = 6;
}

/// Independent generator for one purpose within one (pass, layer).
pub fn derived_rng(seed: u64, purpose: u64, pass: usize, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) | ((pass as u64 & 0xff_ffff) << 24) | (layer as u64 & 0xff_ffff));
    rng
}

/// Train and test recordings for a config.
pub fn load_dataset(config: &TrainConfig) -> Result<(Vec<Recording>, Vec<Recording>)> {
    match &config.data {
        DatasetConfig::Synthetic(s) => {
            let mut rng = derived_rng(config.seed, purpose::DATA, 0, 0);
            let per_class: Vec<Vec<Recording>> = s
                .classes
                .iter()
                .map(|&c| {
                    (0..s.train_per_class + s.test_per_class)
                        .map(|n| {
                            let r = synth_moving_pattern(c, s.length, s.noise_rate, &s.crop, config.arch.tau_us, &mut rng)?;
                            Ok(Recording {
                                id: format!("c{c}_{n:04}"),
                                label: c,
                                frames: r.frames,
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            split_train_test(&per_class, s.train_per_class, s.test_per_class)
        }
        DatasetConfig::Directory(d) => {
            let per_class = data::load_directory(&d.path, &d.crop, config.arch.tau_us, config.arch.classes)?;
            let present: Vec<Vec<Recording>> = per_class.into_iter().filter(|v| !v.is_empty()).collect();
            split_train_test(&present, d.train_per_class, d.test_per_class)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub prediction_skipped: u64,
    pub classification_skipped: u64,
    pub prediction_updates: u64,
    pub classification_updates: u64,
    pub autoencoder_updates: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassMetrics {
    pub timesteps: usize,
    /// Mean normalized SSE of the reconstruction over non-silent frames.
    pub inference_sse: Option<f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub network: Network,
    pub metrics: MetricsLog,
    pub progress: Progress,
    pub counters: Counters,
    train: Vec<Recording>,
    test: Vec<Recording>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_dataset(&config)?;
        Self::with_data(config, train, test)
    }

    pub fn with_data(config: TrainConfig, train: Vec<Recording>, test: Vec<Recording>) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(config.seed, purpose::INIT, 0, 0);
        let network = Network::new(config.arch.clone(), config.init_scale(), &mut rng)?;
        let progress = Progress {
            pass: 0,
            layer: 0,
            timestep: 0,
            eps_layers: config.learn.eps_layers_at(0),
            eps_heads: config.learn.eps_heads_at(0),
            rng: RngState {
                algorithm: "chacha8".into(),
                seed: config.seed,
            },
        };
        Ok(Trainer {
            config,
            network,
            metrics: MetricsLog::new(),
            progress,
            counters: Counters::default(),
            train,
            test,
        })
    }

    /// Continues a run from a checkpoint written at a layer-pass boundary.
    pub fn resume(config: TrainConfig, checkpoint: Checkpoint) -> Result<Self> {
        let mut t = Self::new(config)?;
        if checkpoint.network.arch != t.config.arch {
            return Err(Error::config("checkpoint architecture does not match config"));
        }
        t.network = checkpoint.network;
        t.progress = checkpoint.progress;
        Ok(t)
    }

    pub fn train_recordings(&self) -> &[Recording] {
        &self.train
    }

    pub fn test_recordings(&self) -> &[Recording] {
        &self.test
    }

    pub fn stream_for(&self, pass: usize, layer: usize) -> Result<Stream> {
        let mut rng = derived_rng(self.config.seed, purpose::ORDER, pass, layer);
        assemble_stream(&self.train, self.config.data.gap(), &mut rng)
    }

    pub fn test_stream(&self) -> Result<Stream> {
        let mut rng = derived_rng(self.config.seed, purpose::PROBE, 0, 0);
        assemble_stream(&self.test, self.config.data.gap(), &mut rng)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::to_value(&self.config).map_err(|e| Error::config(e.to_string()))?;
        Ok(Checkpoint {
            network: self.network.clone(),
            progress: self.progress.clone(),
            config: Some(config),
        })
    }

    pub fn evaluate(&self, stream: &Stream) -> Result<EvalReport> {
        evaluate_stream(&self.network, stream, &self.config.eval_options())
    }

    fn label_frame(&self, t: i64, label: Option<u32>) -> TimestepFrame {
        let mut f = TimestepFrame::zeros(t, self.config.arch.classes);
        if let Some(c) = label {
            f.values[c as usize] = self.config.learn.label_strength;
        }
        f
    }

    /// Head updates for one timestep; the network has already advanced.
    pub fn train_heads_step(
        &mut self,
        line: &mut DelayLine,
        input: &TimestepFrame,
        label: Option<u32>,
        eps_heads: f64,
        noise: &mut ChaCha8Rng,
    ) -> Result<()> {
        line.push(self.network.head_frame())?;
        let m = self.config.learn.noise_rate;
        let target = inject_supervision_noise(input, m, noise)?;
        match prediction_step(&mut self.network.prediction_head, line, &target, eps_heads)? {
            StepOutcome::Skipped => self.counters.prediction_skipped += 1,
            StepOutcome::Applied(_) => self.counters.prediction_updates += 1,
        }
        let labels = inject_supervision_noise(&self.label_frame(input.t, label), m, noise)?;
        match classification_step(&mut self.network.classification_head, line, &labels, eps_heads)? {
            StepOutcome::Skipped => self.counters.classification_skipped += 1,
            StepOutcome::Applied(_) => self.counters.classification_updates += 1,
        }
        Ok(())
    }

    /// One sweep of `stream` training hidden layer `layer` (0-based) against
    /// the layer below it, with the heads learning throughout.
    pub fn train_layer_pass(&mut self, layer: usize, stream: &Stream) -> Result<PassMetrics> {
        let hidden = self.network.hidden_count();
        if layer >= hidden {
            return Err(Error::Bounds { index: layer, size: hidden });
        }
        let k = self.config.arch.k;
        if stream.len() < k + 1 {
            return Err(Error::config(format!("stream of {} frames is shorter than K+1", stream.len())));
        }
        let pass = self.progress.pass;
        let eps_layers = self.progress.eps_layers;
        let eps_heads = self.progress.eps_heads;
        let mut dropout_rng = derived_rng(self.config.seed, purpose::DROPOUT, pass, layer);
        let mut noise_rng = derived_rng(self.config.seed, purpose::NOISE, pass, layer);
        let retention = self.config.retention();
        let hidden_sizes = self.config.arch.hidden.clone();

        self.network.reset();
        let mut line = DelayLine::new(k, self.config.learn.horizon);
        let mut sse_sum = 0.0;
        let mut sse_n = 0usize;

        for (n, frame) in stream.frames.iter().enumerate() {
            let input = TimestepFrame {
                t: n as i64,
                values: frame.values.clone(),
            };
            let mask = if self.config.dropout > 0.0 {
                Some(sample_dropout_mask(hidden_sizes[layer], self.config.dropout, &mut dropout_rng)?)
            } else {
                None
            };
            let gates: Vec<Gate> = (0..hidden)
                .map(|l| match (&mask, l == layer) {
                    (Some(m), true) => Gate::Mask(m),
                    (None, true) => Gate::Open,
                    _ => Gate::Scale(retention),
                })
                .collect();
            self.network.forward_step(input.clone(), &gates)?;

            let net = &mut self.network;
            let below = net.windows[layer].oldest().expect("windows stay filled").clone();
            let q = autoencoder_step(&mut net.layers[layer], &below, &net.windows[layer + 1], eps_layers)?;
            self.counters.autoencoder_updates += 1;
            if !below.is_silent() {
                let est: Vec<f64> = q.iter().map(|v| v.max(0.0)).collect();
                sse_sum += normalized_sse(&est, &below.values)?;
                sse_n += 1;
            }

            self.train_heads_step(&mut line, &input, stream.labels[n], eps_heads, &mut noise_rng)?;
            self.progress.timestep += 1;
        }
        for (l, t) in self.network.layers.iter().enumerate() {
            if !t.is_finite() {
                return Err(Error::Numeric(if l == layer { "trained layer weights" } else { "layer weights" }));
            }
        }
        if !self.network.prediction_head.is_finite() || !self.network.classification_head.is_finite() {
            return Err(Error::Numeric("head weights"));
        }
        Ok(PassMetrics {
            timesteps: stream.len(),
            inference_sse: (sse_n > 0).then(|| sse_sum / sse_n as f64),
        })
    }

    fn log(&mut self, layer: usize, metric: &str, value: f64) -> Result<()> {
        self.metrics.push(MetricPoint {
            timestep: self.progress.timestep,
            pass: self.progress.pass,
            layer,
            metric: metric.to_string(),
            value,
        })
    }

    fn advance(&mut self) {
        self.progress.layer += 1;
        if self.progress.layer == self.network.hidden_count() {
            self.progress.layer = 0;
            self.progress.pass += 1;
            self.progress.eps_layers = self.config.learn.eps_layers_at(self.progress.pass);
            self.progress.eps_heads = self.config.learn.eps_heads_at(self.progress.pass);
        }
    }

    pub fn finished(&self) -> bool {
        self.progress.pass >= self.config.passes
    }

    /// Trains from the current position to the end of the schedule. With an
    /// output directory, writes checkpoints per the configured cadence, a
    /// final checkpoint and the metrics log; a failing layer pass leaves an
    /// `abort.spk` checkpoint behind.
    pub fn run(&mut self, out: Option<&Path>) -> Result<()> {
        let probe = if self.config.probe && !self.test.is_empty() {
            Some(self.test_stream()?)
        } else {
            None
        };
        if let Some(dir) = out {
            fs::create_dir_all(dir.join("checkpoints"))?;
        }
        let mut layer_passes = 0usize;
        while !self.finished() {
            let (pass, layer) = (self.progress.pass, self.progress.layer);
            let stream = self.stream_for(pass, layer)?;
            log::info!(
                "pass {pass} layer {} eps {:e}/{:e}: {} timesteps",
                layer + 1,
                self.progress.eps_layers,
                self.progress.eps_heads,
                stream.len()
            );
            let metrics = match self.train_layer_pass(layer, &stream) {
                Ok(m) => m,
                Err(e) => {
                    if let Some(dir) = out {
                        self.checkpoint()?.save(&dir.join("abort.spk"))?;
                    }
                    return Err(e);
                }
            };
            if let Some(v) = metrics.inference_sse {
                self.log(layer + 1, "inference_sse", v)?;
            }
            if let Some(p) = &probe {
                let report = self.evaluate(p)?;
                if let Some(a) = report.timestep_accuracy {
                    self.log(layer + 1, "probe_timestep_error", 1.0 - a)?;
                }
                if let Some(a) = report.recording_accuracy {
                    self.log(layer + 1, "probe_recording_error", 1.0 - a)?;
                }
                if let Some(v) = report.inference_sse {
                    self.log(layer + 1, "probe_inference_sse", v)?;
                }
                if let Some(v) = report.prediction_sse {
                    self.log(layer + 1, "probe_prediction_sse", v)?;
                }
            }
            self.advance();
            layer_passes += 1;
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && layer_passes.is_multiple_of(every) {
                    let name = format!("pass{pass}_layer{}.spk", layer + 1);
                    self.checkpoint()?.save(&dir.join("checkpoints").join(name))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint()?.save(&dir.join("final.spk"))?;
            self.metrics.write_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?))?;
        }
        Ok(())
    }
}

/// Builds a trainer for `config` and runs the whole schedule.
pub fn run_schedule(config: TrainConfig, out: Option<&Path>) -> Result<Trainer> {
    let mut trainer = Trainer::new(config)?;
    trainer.run(out)?;
    Ok(trainer)
}
