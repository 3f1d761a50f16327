//! The `spikerate` command line.
//!
//! Every subcommand resolves a TOML config (file, then `--seed`, subcommand
//! flags and `--set` overrides), writes it to `<out>/manifest.toml`, and then
//! runs. Rerunning with `--config <out>/manifest.toml` repeats the run.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    assemble_stream, load_directory, parse_event_file, synth_moving_pattern, write_event_file, write_manifest,
    EventFormat, SensorMapping,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_stream, export_fields, write_fields, EvalOptions, FieldKind};
use crate::event::DEFAULT_TAU_US;
use crate::oracle::{run_verify, write_report, BernoulliSpec, VerifyConfig};
use crate::trainer::{apply_override, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "spikerate", version, about = "Local spike-rate learning on event streams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML config for the subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set learn.eps_heads=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an event file to a canonical format.
    Convert {
        input: Option<PathBuf>,
        /// Input format: csv or binary.
        #[arg(long)]
        from: Option<String>,
        /// Output format: csv or binary.
        #[arg(long)]
        to: Option<String>,
    },
    /// Generate a labelled synthetic moving-pattern dataset.
    Synth {
        /// Comma-separated class list.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<u32>,
        /// Recordings per class.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a network.
    Train,
    /// Evaluate a checkpoint.
    Eval {
        checkpoint: Option<PathBuf>,
        /// Dataset directory; defaults to the test split of the training run.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Export receptive or predictive field maps.
    Fields {
        checkpoint: Option<PathBuf>,
        /// receptive or predictive.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Run the oracle benchmarks.
    Verify {
        /// Bernoulli rates to check (replaces the default benchmark set).
        #[arg(long, value_delimiter = ',')]
        p: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvertConfig {
    pub input: PathBuf,
    pub from: String,
    pub to: String,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        ConvertConfig {
            input: PathBuf::new(),
            from: "csv".into(),
            to: "binary".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub classes: Vec<u32>,
    /// Recordings per class.
    pub count: usize,
    pub length: usize,
    pub noise_rate: f64,
    pub tau_us: u64,
    pub crop: SensorMapping,
    pub format: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            classes: vec![0, 1],
            count: 10,
            length: 60,
            noise_rate: 0.002,
            tau_us: DEFAULT_TAU_US,
            crop: SensorMapping::default(),
            format: "binary".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    /// Directory with `manifest.csv`; unset means the run's own test split.
    pub dataset: Option<PathBuf>,
    pub seed: u64,
    pub gap: usize,
    pub crop: SensorMapping,
    pub retention: Option<f64>,
    pub horizon: Option<usize>,
    pub noise_rate: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: PathBuf::new(),
            dataset: None,
            seed: 1,
            gap: 15,
            crop: SensorMapping::default(),
            retention: None,
            horizon: None,
            noise_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldsConfig {
    pub checkpoint: PathBuf,
    /// `receptive` (hidden layer 1 over the input) or `predictive`
    /// (prediction-head weights of one source layer, 0 = input).
    pub kind: String,
    pub layer: usize,
    pub normalize: bool,
    pub crop: SensorMapping,
}

impl Default for FieldsConfig {
    fn default() -> Self {
        FieldsConfig {
            checkpoint: PathBuf::new(),
            kind: "receptive".into(),
            layer: 1,
            normalize: true,
            crop: SensorMapping::default(),
        }
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn toml_path(p: &Path) -> String {
    toml_string(&p.to_string_lossy())
}

/// Reads the config file (if any), applies `--seed`, the subcommand flags and
/// `--set` overrides in that order, and deserializes the result.
fn resolve<T: DeserializeOwned>(command: &str, global: &GlobalArgs, flags: Vec<String>, seeded: bool) -> Result<T> {
    let mut value = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<toml::Value>(&text).map_err(|e| Error::config(e.to_string()))?
        }
        None => toml::Value::Table(Default::default()),
    };
    if let Some(table) = value.as_table_mut() {
        if let Some(c) = table.remove("command") {
            if c.as_str() != Some(command) {
                return Err(Error::config(format!("config is for `{c}`, not `{command}`")));
            }
        }
    }
    let mut assignments = Vec::new();
    if let Some(seed) = global.seed {
        if !seeded {
            return Err(Error::config(format!("`{command}` takes no seed")));
        }
        assignments.push(format!("seed={seed}"));
    }
    assignments.extend(flags);
    assignments.extend(global.overrides.iter().cloned());
    for a in &assignments {
        apply_override(&mut value, a)?;
    }
    value.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))
}

fn write_run_manifest<T: Serialize>(out: &Path, command: &str, config: &T) -> Result<()> {
    fs::create_dir_all(out)?;
    let body = toml::to_string(config).map_err(|e| Error::config(e.to_string()))?;
    fs::write(out.join("manifest.toml"), format!("command = {}\n{body}", toml_string(command)))?;
    Ok(())
}

pub fn cmd_convert(config: &ConvertConfig, out: &Path) -> Result<usize> {
    let from: EventFormat = config.from.parse()?;
    let to: EventFormat = config.to.parse()?;
    if config.input.as_os_str().is_empty() {
        return Err(Error::config("convert needs an input file"));
    }
    let events = parse_event_file(&config.input, from)?;
    let stem = config
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "events".into());
    let target = out.join(format!("{stem}.{}", to.extension()));
    write_event_file(&target, to, &events)?;
    fs::write(out.join("report.csv"), format!("output,events\n{},{}\n", target.display(), events.len()))?;
    log::info!("wrote {} events to {}", events.len(), target.display());
    Ok(events.len())
}

pub fn cmd_synth(config: &SynthConfig, out: &Path) -> Result<usize> {
    let format: EventFormat = config.format.parse()?;
    config.crop.validate()?;
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::new();
    for &class in &config.classes {
        for n in 0..config.count {
            let rec = synth_moving_pattern(class, config.length, config.noise_rate, &config.crop, config.tau_us, &mut rng)?;
            let id = format!("c{class}_{n:04}");
            write_event_file(&out.join(format!("{id}.{}", format.extension())), format, &rec.events)?;
            entries.push((id, class));
        }
    }
    write_manifest(&out.join("manifest.csv"), &entries)?;
    if entries.is_empty() {
        log::warn!("no recordings generated");
    } else {
        log::info!("wrote {} recordings to {}", entries.len(), out.display());
    }
    Ok(entries.len())
}

pub fn cmd_train(config: &TrainConfig, out: &Path) -> Result<Trainer> {
    config.validate()?;
    let mut trainer = Trainer::new(config.clone())?;
    trainer.run(Some(out))?;
    let test = trainer.test_stream()?;
    if !test.is_empty() {
        let report = trainer.evaluate(&test)?;
        report.write_csv(BufWriter::new(File::create(out.join("eval.csv"))?))?;
        log::info!(
            "test accuracy per recording {:?}, per timestep {:?}",
            report.recording_accuracy,
            report.timestep_accuracy
        );
    }
    Ok(trainer)
}

/// Fills the config's unset evaluation options from the checkpoint's run.
fn resolve_eval(config: &mut EvalConfig, ck: &Checkpoint) -> Result<Option<TrainConfig>> {
    let run: Option<TrainConfig> = match &ck.config {
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| Error::config(e.to_string()))?),
        None => None,
    };
    config.retention.get_or_insert(run.as_ref().map_or(1.0, |r| r.retention()));
    config.horizon.get_or_insert(run.as_ref().map_or(15, |r| r.learn.horizon));
    config.noise_rate.get_or_insert(run.as_ref().map_or(0.0, |r| r.learn.noise_rate));
    Ok(run)
}

pub fn cmd_eval(config: &mut EvalConfig, out: &Path) -> Result<crate::eval::EvalReport> {
    if config.checkpoint.as_os_str().is_empty() {
        return Err(Error::config("eval needs a checkpoint"));
    }
    let ck = Checkpoint::load(&config.checkpoint)?;
    let run = resolve_eval(config, &ck)?;
    let stream = match (&config.dataset, run) {
        (Some(dir), _) => {
            let recs: Vec<_> = load_directory(dir, &config.crop, ck.network.arch.tau_us, ck.network.arch.classes)?
                .into_iter()
                .flatten()
                .collect();
            assemble_stream(&recs, config.gap, &mut ChaCha8Rng::seed_from_u64(config.seed))?
        }
        (None, Some(run)) => Trainer::new(run)?.test_stream()?,
        (None, None) => return Err(Error::config("checkpoint has no run config; pass --dataset")),
    };
    write_run_manifest(out, "eval", config)?;
    let opts = EvalOptions {
        retention: config.retention.unwrap_or(1.0),
        horizon: config.horizon.unwrap_or(15),
        noise_rate: config.noise_rate.unwrap_or(0.0),
    };
    let report = evaluate_stream(&ck.network, &stream, &opts)?;
    report.write_csv(BufWriter::new(File::create(out.join("eval.csv"))?))?;
    log::info!("evaluated {} timesteps", report.timesteps);
    Ok(report)
}

pub fn cmd_fields(config: &FieldsConfig, out: &Path) -> Result<usize> {
    if config.checkpoint.as_os_str().is_empty() {
        return Err(Error::config("fields needs a checkpoint"));
    }
    config.crop.validate()?;
    let net = Checkpoint::load(&config.checkpoint)?.network;
    if config.crop.input_size() != net.arch.input {
        return Err(Error::config("crop does not match the checkpoint's input layer"));
    }
    let (w, h) = (config.crop.size.0 as usize, config.crop.size.1 as usize);
    let maps = match config.kind.as_str() {
        "receptive" => {
            if config.layer != 1 {
                return Err(Error::config("receptive fields exist for hidden layer 1 only"));
            }
            export_fields(&net.layers[0], FieldKind::Receptive, w, h, config.normalize)?
        }
        "predictive" => {
            let mut sizes = vec![net.arch.input];
            sizes.extend(&net.arch.hidden);
            if config.layer >= sizes.len() {
                return Err(Error::config(format!("no layer {} to draw predictive fields for", config.layer)));
            }
            let start: usize = sizes[..config.layer].iter().sum();
            let end = start + sizes[config.layer];
            export_fields(&net.prediction_head, FieldKind::Predictive { start, end }, w, h, config.normalize)?
        }
        other => return Err(Error::config(format!("unknown field kind `{other}`"))),
    };
    let prefix = format!("{}_layer{}", config.kind, config.layer);
    write_fields(&out.join("fields"), &prefix, &maps)?;
    log::info!("wrote {} field maps", maps.len());
    Ok(maps.len())
}

pub fn cmd_verify(config: &VerifyConfig, out: &Path) -> Result<Vec<crate::oracle::ReportRow>> {
    let rows = run_verify(config)?;
    write_report(BufWriter::new(File::create(out.join("report.csv"))?), &rows)?;
    for r in &rows {
        log::info!(
            "{}: oracle {:.4} learned {:.4} gap {:.4} {}",
            r.context,
            r.oracle_rate,
            r.learned_q,
            r.gap(),
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    if let Some(bad) = rows.iter().find(|r| !r.passed()) {
        return Err(Error::Numeric(if bad.context.starts_with("bernoulli") {
            "bernoulli benchmark outside tolerance"
        } else {
            "two-context benchmark outside tolerance"
        }));
    }
    Ok(rows)
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let out = g.out.as_path();
    match cli.command {
        Command::Convert { input, from, to } => {
            let mut flags = Vec::new();
            if let Some(p) = input {
                flags.push(format!("input={}", toml_path(&p)));
            }
            if let Some(f) = from {
                flags.push(format!("from={}", toml_string(&f)));
            }
            if let Some(f) = to {
                flags.push(format!("to={}", toml_string(&f)));
            }
            let config: ConvertConfig = resolve("convert", g, flags, false)?;
            config.from.parse::<EventFormat>()?;
            config.to.parse::<EventFormat>()?;
            write_run_manifest(out, "convert", &config)?;
            cmd_convert(&config, out).map(|_| ())
        }
        Command::Synth {
            classes,
            count,
            length,
            noise,
        } => {
            let mut flags = Vec::new();
            if !classes.is_empty() {
                flags.push(format!("classes={classes:?}"));
            }
            if let Some(c) = count {
                flags.push(format!("count={c}"));
            }
            if let Some(l) = length {
                flags.push(format!("length={l}"));
            }
            if let Some(n) = noise {
                flags.push(format!("noise_rate={}", toml::Value::Float(n)));
            }
            let config: SynthConfig = resolve("synth", g, flags, true)?;
            config.format.parse::<EventFormat>()?;
            write_run_manifest(out, "synth", &config)?;
            cmd_synth(&config, out).map(|_| ())
        }
        Command::Train => {
            let config: TrainConfig = resolve("train", g, Vec::new(), true)?;
            config.validate()?;
            write_run_manifest(out, "train", &config)?;
            cmd_train(&config, out).map(|_| ())
        }
        Command::Eval { checkpoint, dataset } => {
            let mut flags = Vec::new();
            if let Some(p) = checkpoint {
                flags.push(format!("checkpoint={}", toml_path(&p)));
            }
            if let Some(p) = dataset {
                flags.push(format!("dataset={}", toml_path(&p)));
            }
            let mut config: EvalConfig = resolve("eval", g, flags, true)?;
            cmd_eval(&mut config, out).map(|_| ())
        }
        Command::Fields { checkpoint, kind, layer } => {
            let mut flags = Vec::new();
            if let Some(p) = checkpoint {
                flags.push(format!("checkpoint={}", toml_path(&p)));
            }
            if let Some(k) = kind {
                flags.push(format!("kind={}", toml_string(&k)));
            }
            if let Some(l) = layer {
                flags.push(format!("layer={l}"));
            }
            let config: FieldsConfig = resolve("fields", g, flags, false)?;
            write_run_manifest(out, "fields", &config)?;
            cmd_fields(&config, out).map(|_| ())
        }
        Command::Verify { p } => {
            // The seed is spread over the benchmark specs below.
            let unseeded = GlobalArgs { seed: None, ..g.clone() };
            let mut config: VerifyConfig = resolve("verify", &unseeded, Vec::new(), false)?;
            if !p.is_empty() {
                config.bernoulli = p.iter().map(|&p| BernoulliSpec { p, ..BernoulliSpec::default() }).collect();
                config.two_context.clear();
            }
            if let Some(seed) = g.seed {
                for (i, s) in config.bernoulli.iter_mut().enumerate() {
                    s.seed = seed + i as u64;
                }
                let n = config.bernoulli.len() as u64;
                for (i, s) in config.two_context.iter_mut().enumerate() {
                    s.seed = seed + n + i as u64;
                }
            }
            write_run_manifest(out, "verify", &config)?;
            cmd_verify(&config, out).map(|_| ())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}
