//! Discrete-time spike representation.
//!
//! Spikes arrive as [`Event`]s with microsecond timestamps and are binned into
//! [`TimestepFrame`]s of width `tau`. Each layer keeps the last `K` frames in a
//! [`HistoryWindow`], which is all the drive computation ever looks at.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default timestep width, 30 ms.
pub const DEFAULT_TAU_US: u64 = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    /// Already mapped to a neuron of some layer.
    Neuron(usize),
    /// Raw sensor address.
    Sensor { x: u16, y: u16, polarity: Polarity },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub source: Source,
    pub timestamp_us: u64,
    pub strength: f64,
}

impl Event {
    pub fn neuron(index: usize, timestamp_us: u64) -> Self {
        Event {
            source: Source::Neuron(index),
            timestamp_us,
            strength: 1.0,
        }
    }

    pub fn sensor(x: u16, y: u16, polarity: Polarity, timestamp_us: u64) -> Self {
        Event {
            source: Source::Sensor { x, y, polarity },
            timestamp_us,
            strength: 1.0,
        }
    }

    pub fn with_strength(mut self, strength: f64) -> Self {
        self.strength = strength;
        self
    }
}

/// Spike strengths of one layer during one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepFrame {
    pub t: i64,
    pub values: Vec<f64>,
}

impl TimestepFrame {
    pub fn zeros(t: i64, size: usize) -> Self {
        TimestepFrame {
            t,
            values: vec![0.0; size],
        }
    }

    pub fn new(t: i64, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("frame values"));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::config("frame values must be non-negative"));
        }
        Ok(TimestepFrame { t, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_silent(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Bins neuron-indexed events into consecutive frames of width `tau_us`
/// starting at `t0_us`. Bins are half-open, so an event exactly on a boundary
/// falls into the later bin. Frames run up to and including the bin of the
/// last event; events before `t0_us` are rejected as out of order.
pub fn bin_events(
    events: &[Event],
    tau_us: u64,
    layer_size: usize,
    t0_us: u64,
) -> Result<Vec<TimestepFrame>> {
    if tau_us == 0 {
        return Err(Error::config("tau must be positive"));
    }
    let mut frames: Vec<TimestepFrame> = Vec::new();
    let mut prev = t0_us;
    for ev in events {
        if ev.timestamp_us < prev {
            return Err(Error::Ordering {
                prev,
                next: ev.timestamp_us,
            });
        }
        prev = ev.timestamp_us;
        let index = match ev.source {
            Source::Neuron(i) => i,
            Source::Sensor { .. } => {
                return Err(Error::config("sensor events must be mapped before binning"))
            }
        };
        if index >= layer_size {
            return Err(Error::Bounds {
                index,
                size: layer_size,
            });
        }
        if !ev.strength.is_finite() || ev.strength < 0.0 {
            return Err(Error::Numeric("event strength"));
        }
        let bin = ((ev.timestamp_us - t0_us) / tau_us) as usize;
        while frames.len() <= bin {
            let t = frames.len() as i64;
            frames.push(TimestepFrame::zeros(t, layer_size));
        }
        frames[bin].values[index] += ev.strength;
    }
    Ok(frames)
}

/// The last `capacity` frames of one layer, oldest first, consecutive in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    capacity: usize,
    frames: VecDeque<TimestepFrame>,
}

impl HistoryWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "history capacity must be at least 1");
        HistoryWindow {
            capacity,
            frames: VecDeque::with_capacity(capacity),
        }
    }

    /// A full window of silent frames ending at `newest_t`.
    pub fn silent(capacity: usize, size: usize, newest_t: i64) -> Self {
        let mut w = HistoryWindow::new(capacity);
        for k in 0..capacity {
            let t = newest_t - (capacity - 1 - k) as i64;
            w.frames.push_back(TimestepFrame::zeros(t, size));
        }
        w
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn filled(&self) -> bool {
        self.frames.len() == self.capacity
    }

    pub fn newest_t(&self) -> Option<i64> {
        self.frames.back().map(|f| f.t)
    }

    pub fn oldest(&self) -> Option<&TimestepFrame> {
        self.frames.front()
    }

    pub fn newest(&self) -> Option<&TimestepFrame> {
        self.frames.back()
    }

    /// Frame size, taken from the stored frames.
    pub fn width(&self) -> Option<usize> {
        self.frames.front().map(|f| f.len())
    }

    pub fn frames(&self) -> impl DoubleEndedIterator<Item = &TimestepFrame> + ExactSizeIterator {
        self.frames.iter()
    }

    /// Frame `delay` steps before the newest (0 = newest).
    pub fn back(&self, delay: usize) -> Option<&TimestepFrame> {
        let n = self.frames.len();
        if delay >= n {
            None
        } else {
            self.frames.get(n - 1 - delay)
        }
    }

    /// Frame `offset` steps after the oldest (0 = oldest).
    pub fn forward(&self, offset: usize) -> Option<&TimestepFrame> {
        self.frames.get(offset)
    }

    /// Appends `frame`, evicting the oldest frame when full.
    pub fn push(&mut self, frame: TimestepFrame) -> Result<()> {
        if let Some(last) = self.frames.back() {
            if frame.t != last.t + 1 {
                return Err(Error::Gap {
                    expected: last.t + 1,
                    got: frame.t,
                });
            }
            if frame.len() != last.len() {
                return Err(Error::Bounds {
                    index: frame.len(),
                    size: last.len(),
                });
            }
        }
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }
}

/// Value-style variant of [`HistoryWindow::push`].
pub fn push_frame(mut window: HistoryWindow, frame: TimestepFrame) -> Result<HistoryWindow> {
    window.push(frame)?;
    Ok(window)
}
