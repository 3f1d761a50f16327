//! Event data: file formats, sensor-to-neuron mapping, recordings and streams.
//!
//! Canonical CSV has the header `x,y,t_us,polarity` with polarity `1` for ON
//! and `0` for OFF. Canonical binary is a 4-byte magic `SPKE`, a `u16`
//! version, a `u64` record count, then little-endian records of
//! `u16 x, u16 y, u64 t_us, u8 polarity`.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{bin_events, Event, Polarity, Source, TimestepFrame};

pub const CSV_HEADER: &str = "x,y,t_us,polarity";
pub const BINARY_MAGIC: &[u8; 4] = b"SPKE";
pub const BINARY_VERSION: u16 = 1;
pub const SENSOR_SIZE: u16 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    pub fn extension(self) -> &'static str {
        match self {
            EventFormat::Csv => "csv",
            EventFormat::Binary => "bin",
        }
    }
}

impl FromStr for EventFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" | "canonical-csv" => Ok(EventFormat::Csv),
            "bin" | "binary" | "canonical-binary" => Ok(EventFormat::Binary),
            other => Err(Error::config(format!("unknown event format `{other}`"))),
        }
    }
}

impl fmt::Display for EventFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventFormat::Csv => "csv",
            EventFormat::Binary => "binary",
        })
    }
}

fn check_order(prev: &mut Option<u64>, t: u64) -> Result<()> {
    if let Some(p) = *prev {
        if t < p {
            return Err(Error::Ordering { prev: p, next: t });
        }
    }
    *prev = Some(t);
    Ok(())
}

pub fn read_csv<R: BufRead>(reader: R) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    let mut prev = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        let lineno = n + 1;
        if line.is_empty() || (n == 0 && line == CSV_HEADER) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let loc = || format!("line {lineno}");
        if fields.len() != 4 {
            return Err(Error::parse(loc(), format!("expected 4 fields, found {}", fields.len())));
        }
        let x: u16 = fields[0].parse().map_err(|_| Error::parse(loc(), format!("bad x `{}`", fields[0])))?;
        let y: u16 = fields[1].parse().map_err(|_| Error::parse(loc(), format!("bad y `{}`", fields[1])))?;
        let t: u64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(loc(), format!("bad t_us `{}`", fields[2])))?;
        let polarity = match fields[3] {
            "1" => Polarity::On,
            "0" => Polarity::Off,
            other => return Err(Error::parse(loc(), format!("bad polarity `{other}`"))),
        };
        check_order(&mut prev, t)?;
        events.push(Event::sensor(x, y, polarity, t));
    }
    Ok(events)
}

fn sensor_fields(ev: &Event) -> Result<(u16, u16, Polarity)> {
    match ev.source {
        Source::Sensor { x, y, polarity } => Ok((x, y, polarity)),
        Source::Neuron(_) => Err(Error::config("only sensor events can be written to event files")),
    }
}

pub fn write_csv<W: Write>(mut w: W, events: &[Event]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for ev in events {
        let (x, y, p) = sensor_fields(ev)?;
        writeln!(w, "{},{},{},{}", x, y, ev.timestamp_us, u8::from(p == Polarity::On))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Vec<Event>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut magic[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got == 0 {
        return Ok(Vec::new());
    }
    if got < 4 || &magic != BINARY_MAGIC {
        return Err(Error::parse("offset 0", "missing SPKE magic"));
    }
    let version = r.read_u16::<LittleEndian>().map_err(|_| Error::parse("offset 4", "truncated header"))?;
    if version != BINARY_VERSION {
        return Err(Error::parse("offset 4", format!("unsupported version {version}")));
    }
    let count = r.read_u64::<LittleEndian>().map_err(|_| Error::parse("offset 6", "truncated header"))?;
    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut prev = None;
    for n in 0..count {
        let offset = 14 + n * 13;
        let trunc = |_| Error::parse(format!("offset {offset}"), "truncated record");
        let x = r.read_u16::<LittleEndian>().map_err(trunc)?;
        let y = r.read_u16::<LittleEndian>().map_err(trunc)?;
        let t = r.read_u64::<LittleEndian>().map_err(trunc)?;
        let polarity = match r.read_u8().map_err(trunc)? {
            1 => Polarity::On,
            0 => Polarity::Off,
            other => return Err(Error::parse(format!("offset {}", offset + 12), format!("bad polarity {other}"))),
        };
        check_order(&mut prev, t)?;
        events.push(Event::sensor(x, y, polarity, t));
    }
    Ok(events)
}

pub fn write_binary<W: Write>(mut w: W, events: &[Event]) -> Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_u16::<LittleEndian>(BINARY_VERSION)?;
    w.write_u64::<LittleEndian>(events.len() as u64)?;
    for ev in events {
        let (x, y, p) = sensor_fields(ev)?;
        w.write_u16::<LittleEndian>(x)?;
        w.write_u16::<LittleEndian>(y)?;
        w.write_u64::<LittleEndian>(ev.timestamp_us)?;
        w.write_u8(u8::from(p == Polarity::On))?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_event_file(path: &Path, format: EventFormat) -> Result<Vec<Event>> {
    let file = File::open(path)?;
    let located = |e: Error| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    };
    match format {
        EventFormat::Csv => read_csv(BufReader::new(file)).map_err(located),
        EventFormat::Binary => read_binary(BufReader::new(file)).map_err(located),
    }
}

pub fn write_event_file(path: &Path, format: EventFormat, events: &[Event]) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    match format {
        EventFormat::Csv => write_csv(w, events),
        EventFormat::Binary => write_binary(w, events),
    }
}

/// Crop of the sensor array onto the input layer, two neurons per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorMapping {
    pub origin: (u16, u16),
    pub size: (u16, u16),
}

impl Default for SensorMapping {
    fn default() -> Self {
        SensorMapping {
            origin: (52, 52),
            size: (23, 23),
        }
    }
}

impl SensorMapping {
    pub fn validate(&self) -> Result<()> {
        let (x0, y0) = (u32::from(self.origin.0), u32::from(self.origin.1));
        let (w, h) = (u32::from(self.size.0), u32::from(self.size.1));
        if w == 0 || h == 0 {
            return Err(Error::config("crop size must be non-zero"));
        }
        if x0 + w > u32::from(SENSOR_SIZE) || y0 + h > u32::from(SENSOR_SIZE) {
            return Err(Error::config("crop window does not fit the 128x128 sensor"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        usize::from(self.size.0) * usize::from(self.size.1)
    }

    pub fn input_size(&self) -> usize {
        2 * self.pixels()
    }

    /// Neuron index of a sensor address, or `None` outside the crop.
    pub fn index(&self, x: u16, y: u16, polarity: Polarity) -> Option<usize> {
        let (x0, y0) = self.origin;
        let (w, h) = self.size;
        if x < x0 || y < y0 || x - x0 >= w || y - y0 >= h {
            return None;
        }
        let pixel = usize::from(y - y0) * usize::from(w) + usize::from(x - x0);
        Some(match polarity {
            Polarity::On => pixel,
            Polarity::Off => pixel + self.pixels(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mapped {
    pub events: Vec<Event>,
    pub dropped: usize,
}

/// Re-indexes sensor events onto input neurons; events outside the crop are
/// dropped and counted.
pub fn map_to_input(events: &[Event], mapping: &SensorMapping) -> Mapped {
    let mut out = Mapped::default();
    for ev in events {
        let index = match ev.source {
            Source::Sensor { x, y, polarity } => mapping.index(x, y, polarity),
            Source::Neuron(i) => (i < mapping.input_size()).then_some(i),
        };
        match index {
            Some(i) => out.events.push(Event {
                source: Source::Neuron(i),
                ..*ev
            }),
            None => out.dropped += 1,
        }
    }
    out
}

/// One labeled, binned recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub label: u32,
    pub frames: Vec<TimestepFrame>,
}

impl Recording {
    /// Maps and bins sensor events, starting the first bin at the first event
    /// and padding with silent frames up to `min_len`.
    pub fn from_events(
        id: &str,
        label: u32,
        events: &[Event],
        mapping: &SensorMapping,
        tau_us: u64,
        min_len: usize,
    ) -> Result<Self> {
        let mapped = map_to_input(events, mapping);
        let t0 = events.first().map_or(0, |e| e.timestamp_us);
        let size = mapping.input_size();
        let mut frames = bin_events(&mapped.events, tau_us, size, t0)?;
        while frames.len() < min_len.max(1) {
            frames.push(TimestepFrame::zeros(frames.len() as i64, size));
        }
        Ok(Recording {
            id: id.to_string(),
            label,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Recordings laid end to end, with per-timestep label and recording tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub frames: Vec<TimestepFrame>,
    pub labels: Vec<Option<u32>>,
    pub recording: Vec<Option<usize>>,
    /// Recording ids and labels, indexed by the values of `recording`.
    pub recordings: Vec<(String, u32)>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.len())
    }
}

/// Concatenates `recordings` in a shuffled order with `gap` silent frames
/// between consecutive recordings. Frames are renumbered from 0.
pub fn assemble_stream<R: Rng + ?Sized>(recordings: &[Recording], gap: usize, rng: &mut R) -> Result<Stream> {
    if recordings.is_empty() {
        return Err(Error::config("cannot assemble a stream from zero recordings"));
    }
    let width = recordings[0].frames.first().map_or(0, |f| f.len());
    let mut order: Vec<usize> = (0..recordings.len()).collect();
    order.shuffle(rng);
    let mut stream = Stream {
        frames: Vec::new(),
        labels: Vec::new(),
        recording: Vec::new(),
        recordings: Vec::new(),
    };
    for (n, &r) in order.iter().enumerate() {
        if n > 0 {
            for _ in 0..gap {
                let t = stream.frames.len() as i64;
                stream.frames.push(TimestepFrame::zeros(t, width));
                stream.labels.push(None);
                stream.recording.push(None);
            }
        }
        let rec = &recordings[r];
        stream.recordings.push((rec.id.clone(), rec.label));
        for f in &rec.frames {
            if f.len() != width {
                return Err(Error::Bounds {
                    index: f.len(),
                    size: width,
                });
            }
            let t = stream.frames.len() as i64;
            stream.frames.push(TimestepFrame {
                t,
                values: f.values.clone(),
            });
            stream.labels.push(Some(rec.label));
            stream.recording.push(Some(n));
        }
    }
    Ok(stream)
}

/// First `train` items of every class go to training, the last `test` to testing.
pub fn split_train_test<T: Clone>(per_class: &[Vec<T>], train: usize, test: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut tr = Vec::new();
    let mut te = Vec::new();
    for (c, items) in per_class.iter().enumerate() {
        if items.len() < train + test {
            return Err(Error::config(format!(
                "class {c} has {} recordings, {train}+{test} requested",
                items.len()
            )));
        }
        tr.extend_from_slice(&items[..train]);
        te.extend_from_slice(&items[items.len() - test..]);
    }
    Ok((tr, te))
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, u32)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = || format!("{}: line {}", path.display(), n + 1);
        let (id, label) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::parse(loc(), "expected `recording-id,label`"))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::parse(loc(), format!("bad label `{label}`")))?;
        out.push((id.trim().to_string(), label));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[(String, u32)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, label) in entries {
        writeln!(w, "{id},{label}")?;
    }
    w.flush()?;
    Ok(())
}

/// Finds `<dir>/<id>.bin` or `<dir>/<id>.csv`.
pub fn locate_recording(dir: &Path, id: &str) -> Result<(PathBuf, EventFormat)> {
    for format in [EventFormat::Binary, EventFormat::Csv] {
        let p = dir.join(format!("{id}.{}", format.extension()));
        if p.exists() {
            return Ok((p, format));
        }
    }
    Err(Error::Io(io::Error::new(
        io::ErrorKind::NotFound,
        format!("no event file for recording `{id}` in {}", dir.display()),
    )))
}

/// Loads every recording listed in `<dir>/manifest.csv`, grouped by label in
/// manifest order.
pub fn load_directory(
    dir: &Path,
    mapping: &SensorMapping,
    tau_us: u64,
    classes: usize,
) -> Result<Vec<Vec<Recording>>> {
    mapping.validate()?;
    let manifest = read_manifest(&dir.join("manifest.csv"))?;
    let mut per_class = vec![Vec::new(); classes];
    for (id, label) in manifest {
        let slot = per_class
            .get_mut(label as usize)
            .ok_or_else(|| Error::config(format!("label {label} exceeds class count {classes}")))?;
        let (path, format) = locate_recording(dir, &id)?;
        let events = parse_event_file(&path, format)?;
        slot.push(Recording::from_events(&id, label, &events, mapping, tau_us, 1)?);
    }
    Ok(per_class)
}

/// Shapes available to the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    BarRight,
    BarDown,
    BarLeft,
    BarUp,
    BlockDiagonal,
}

impl Pattern {
    pub const COUNT: u32 = 5;

    pub fn from_class(class: u32) -> Result<Self> {
        Ok(match class {
            0 => Pattern::BarRight,
            1 => Pattern::BarDown,
            2 => Pattern::BarLeft,
            3 => Pattern::BarUp,
            4 => Pattern::BlockDiagonal,
            other => return Err(Error::config(format!("unknown synthetic class {other}"))),
        })
    }

    /// Velocity in (columns, rows) per timestep.
    fn velocity(self) -> (i32, i32) {
        match self {
            Pattern::BarRight => (1, 0),
            Pattern::BarDown => (0, 1),
            Pattern::BarLeft => (-1, 0),
            Pattern::BarUp => (0, -1),
            Pattern::BlockDiagonal => (1, 1),
        }
    }

    /// Footprint relative to the pattern position, as (column, row) offsets.
    fn footprint(self) -> Vec<(i32, i32)> {
        const BAR_WIDTH: i32 = 3;
        const BAR_LENGTH: i32 = 13;
        const BLOCK: i32 = 5;
        let (w, h) = match self {
            Pattern::BarRight | Pattern::BarLeft => (BAR_WIDTH, BAR_LENGTH),
            Pattern::BarDown | Pattern::BarUp => (BAR_LENGTH, BAR_WIDTH),
            Pattern::BlockDiagonal => (BLOCK, BLOCK),
        };
        (0..h).flat_map(|r| (0..w).map(move |c| (c, r))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecording {
    pub label: u32,
    /// Sensor-addressed events, inside the crop of `mapping`.
    pub events: Vec<Event>,
    pub frames: Vec<TimestepFrame>,
}

/// A shape translating across the crop (wrapping at the borders), emitting ON
/// events where it arrives and OFF events where it leaves, plus Poisson
/// background noise of `noise_rate` expected events per neuron per timestep.
pub fn synth_moving_pattern<R: Rng + ?Sized>(
    class: u32,
    length: usize,
    noise_rate: f64,
    mapping: &SensorMapping,
    tau_us: u64,
    rng: &mut R,
) -> Result<SynthRecording> {
    let pattern = Pattern::from_class(class)?;
    if length == 0 {
        return Err(Error::config("synthetic recording length must be at least 1"));
    }
    if !(noise_rate >= 0.0 && noise_rate.is_finite()) {
        return Err(Error::config("noise rate must be non-negative"));
    }
    if tau_us == 0 {
        return Err(Error::config("tau_us must be positive"));
    }
    mapping.validate()?;
    let (gw, gh) = (i32::from(mapping.size.0), i32::from(mapping.size.1));
    let start = (rng.gen_range(0..gw), rng.gen_range(0..gh));
    let (vx, vy) = pattern.velocity();
    let footprint = pattern.footprint();
    let cells = |s: i64| -> Vec<(u16, u16)> {
        let px = start.0 as i64 + vx as i64 * s;
        let py = start.1 as i64 + vy as i64 * s;
        let mut v: Vec<(u16, u16)> = footprint
            .iter()
            .map(|&(c, r)| {
                (
                    (px + c as i64).rem_euclid(gw as i64) as u16,
                    (py + r as i64).rem_euclid(gh as i64) as u16,
                )
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let noise = if noise_rate > 0.0 {
        Some(Poisson::new(noise_rate * mapping.input_size() as f64).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };

    let (x0, y0) = mapping.origin;
    let mut events = Vec::new();
    let mut prev = cells(-1);
    for s in 0..length {
        let now = cells(s as i64);
        let base = s as u64 * tau_us;
        let mut step: Vec<Event> = Vec::new();
        for &(c, r) in now.iter().filter(|p| prev.binary_search(p).is_err()) {
            step.push(Event::sensor(x0 + c, y0 + r, Polarity::On, base + rng.gen_range(0..tau_us)));
        }
        for &(c, r) in prev.iter().filter(|p| now.binary_search(p).is_err()) {
            step.push(Event::sensor(x0 + c, y0 + r, Polarity::Off, base + rng.gen_range(0..tau_us)));
        }
        if let Some(dist) = &noise {
            let count = dist.sample(rng) as u64;
            for _ in 0..count {
                let c = rng.gen_range(0..mapping.size.0);
                let r = rng.gen_range(0..mapping.size.1);
                let p = if rng.gen_bool(0.5) { Polarity::On } else { Polarity::Off };
                step.push(Event::sensor(x0 + c, y0 + r, p, base + rng.gen_range(0..tau_us)));
            }
        }
        step.sort_by_key(|e| e.timestamp_us);
        events.extend(step);
        prev = now;
    }

    let mapped = map_to_input(&events, mapping);
    debug_assert_eq!(mapped.dropped, 0);
    let mut frames = bin_events(&mapped.events, tau_us, mapping.input_size(), 0)?;
    while frames.len() < length {
        frames.push(TimestepFrame::zeros(frames.len() as i64, mapping.input_size()));
    }
    Ok(SynthRecording {
        label: class,
        events,
        frames,
    })
}
