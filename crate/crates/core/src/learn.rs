//! The two event-triggered weight rules and how they are scheduled.
//!
//! `d` fires every time a history window is observed and pulls the output
//! estimate `Q` down in proportion to itself: `w <- w - eps * h * Q`.
//! `u` fires on every supervision spike and pushes it up in proportion to the
//! spike strength: `w <- w + eps * h * o`. On average the two cancel exactly
//! when `Q` equals the conditional rate of the supervising neuron given the
//! window, which is the only fixed point.
//!
//! Within one timestep `u` is applied before `d` and both use the `Q` computed
//! before either update, so a co-applied step equals `w += eps * h * (o - Q)`.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{HistoryWindow, TimestepFrame};
use crate::net::{newest_first, oldest_first, DelayedWeightTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnConfig {
    /// Initial rate for inter-layer weights.
    pub eps_layers: f64,
    /// Initial rate for prediction and classification heads.
    pub eps_heads: f64,
    /// Halve both rates after every pass through the hidden layers.
    pub halve_per_pass: bool,
    /// Expected Poisson noise spikes per timestep added to head supervision.
    pub noise_rate: f64,
    /// Prediction horizon in timesteps.
    pub horizon: usize,
    /// Supervision strength of the true class during a presentation.
    pub label_strength: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            eps_layers: 1e-5,
            eps_heads: 2.5e-6,
            halve_per_pass: true,
            noise_rate: 0.0,
            horizon: 15,
            label_strength: 1.0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_layers > 0.0 && self.eps_layers.is_finite()) {
            return Err(Error::config("eps_layers must be positive"));
        }
        if !(self.eps_heads > 0.0 && self.eps_heads.is_finite()) {
            return Err(Error::config("eps_heads must be positive"));
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate.is_finite()) {
            return Err(Error::config("noise_rate must be non-negative"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if !(self.label_strength > 0.0 && self.label_strength.is_finite()) {
            return Err(Error::config("label_strength must be positive"));
        }
        Ok(())
    }

    pub fn eps_layers_at(&self, pass: usize) -> f64 {
        if self.halve_per_pass {
            epsilon_schedule(pass, self.eps_layers)
        } else {
            self.eps_layers
        }
    }

    pub fn eps_heads_at(&self, pass: usize) -> f64 {
        if self.halve_per_pass {
            epsilon_schedule(pass, self.eps_heads)
        } else {
            self.eps_heads
        }
    }
}

/// `eps0 / 2^pass`.
pub fn epsilon_schedule(pass: usize, eps0: f64) -> f64 {
    let halvings = i32::try_from(pass).unwrap_or(i32::MAX);
    eps0 * 0.5f64.powi(halvings)
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

/// The `d` rule: `w[j,i,k] -= eps * h_i(t-k) * Q_j`. `q` must be the drive
/// computed from `window` before this update.
pub fn apply_d(weights: &mut DelayedWeightTensor, window: &HistoryWindow, q: &[f64], eps: f64) -> Result<()> {
    require_filled(window)?;
    let neg: Vec<f64> = q.iter().map(|v| -v).collect();
    weights.update_forward(&newest_first(window), &neg, eps)
}

/// The `u` rule: `w[j,i,k] += eps * h_i(t-k) * o_j`.
pub fn apply_u(
    weights: &mut DelayedWeightTensor,
    window: &HistoryWindow,
    supervision: &TimestepFrame,
    eps: f64,
) -> Result<()> {
    require_filled(window)?;
    weights.update_forward(&newest_first(window), &supervision.values, eps)
}

/// `u` then `d` with a shared pre-update `q`, fused into one pass.
pub(crate) fn apply_ud_frames(
    weights: &mut DelayedWeightTensor,
    frames_newest_first: &[&[f64]],
    q: &[f64],
    supervision: &[f64],
    eps: f64,
) -> Result<()> {
    if supervision.len() != q.len() {
        return Err(Error::Bounds {
            index: supervision.len(),
            size: q.len(),
        });
    }
    let coeff: Vec<f64> = supervision.iter().zip(q).map(|(o, q)| o - q).collect();
    weights.update_forward(frames_newest_first, &coeff, eps)
}

/// Self-supervised reconstruction step for one layer pair.
///
/// The pre-layer frame at time `t` supervises its own estimate, which is read
/// out of the post layer's activity over `t .. t+K-1`. Returns the estimate
/// computed before the update.
pub fn autoencoder_step(
    weights: &mut DelayedWeightTensor,
    input_at_window_start: &TimestepFrame,
    hidden_future_window: &HistoryWindow,
    eps: f64,
) -> Result<Vec<f64>> {
    require_filled(hidden_future_window)?;
    if let Some(start) = hidden_future_window.oldest() {
        if start.t != input_at_window_start.t {
            return Err(Error::Gap {
                expected: start.t,
                got: input_at_window_start.t,
            });
        }
    }
    let frames = oldest_first(hidden_future_window);
    let q = weights.inference_frames(&frames)?;
    if input_at_window_start.len() != q.len() {
        return Err(Error::Bounds {
            index: input_at_window_start.len(),
            size: q.len(),
        });
    }
    let coeff: Vec<f64> = input_at_window_start
        .values
        .iter()
        .zip(&q)
        .map(|(x, q)| x - q)
        .collect();
    weights.update_transposed(&frames, &coeff, eps)?;
    Ok(q)
}

/// Concatenated head-source frames kept long enough to look `horizon` steps back.
#[derive(Debug, Clone)]
pub struct DelayLine {
    window: HistoryWindow,
    k: usize,
    horizon: usize,
}

impl DelayLine {
    pub fn new(k: usize, horizon: usize) -> Self {
        DelayLine {
            window: HistoryWindow::new(k + horizon),
            k,
            horizon,
        }
    }

    pub fn push(&mut self, frame: TimestepFrame) -> Result<()> {
        self.window.push(frame)
    }

    pub fn clear(&mut self) {
        self.window.clear();
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn newest_t(&self) -> Option<i64> {
        self.window.newest_t()
    }

    /// The newest `K` frames, newest first.
    pub fn current(&self) -> Option<Vec<&[f64]>> {
        if self.window.len() < self.k {
            return None;
        }
        Some((0..self.k).map(|d| self.window.back(d).unwrap().values.as_slice()).collect())
    }

    /// The `K` frames ending `horizon` steps before the newest, newest first.
    pub fn delayed(&self) -> Option<Vec<&[f64]>> {
        if !self.window.filled() {
            return None;
        }
        Some(
            (0..self.k)
                .map(|d| self.window.back(self.horizon + d).unwrap().values.as_slice())
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    /// Rules applied; carries the pre-update estimate.
    Applied(Vec<f64>),
    /// Not enough history yet.
    Skipped,
}

/// Trains the prediction head: the window that ended `horizon` steps ago is
/// supervised by the current input frame.
pub fn prediction_step(
    head: &mut DelayedWeightTensor,
    line: &DelayLine,
    target: &TimestepFrame,
    eps: f64,
) -> Result<StepOutcome> {
    let Some(frames) = line.delayed() else {
        return Ok(StepOutcome::Skipped);
    };
    let q = head.drive_frames(&frames)?;
    apply_ud_frames(head, &frames, &q, &target.values, eps)?;
    Ok(StepOutcome::Applied(q))
}

/// Trains the classification head on the current window. An all-zero label
/// frame (inter-recording gap) leaves only the `d` rule active.
pub fn classification_step(
    head: &mut DelayedWeightTensor,
    line: &DelayLine,
    label: &TimestepFrame,
    eps: f64,
) -> Result<StepOutcome> {
    let Some(frames) = line.current() else {
        return Ok(StepOutcome::Skipped);
    };
    let q = head.drive_frames(&frames)?;
    apply_ud_frames(head, &frames, &q, &label.values, eps)?;
    Ok(StepOutcome::Applied(q))
}

/// Adds an independent Poisson(`m`) count of unit spikes to every entry.
pub fn inject_supervision_noise<R: Rng + ?Sized>(
    frame: &TimestepFrame,
    m: f64,
    rng: &mut R,
) -> Result<TimestepFrame> {
    if !m.is_finite() || m < 0.0 {
        return Err(Error::config(format!("noise rate {m} must be non-negative")));
    }
    if m == 0.0 {
        return Ok(frame.clone());
    }
    let poisson = Poisson::new(m).map_err(|e| Error::config(e.to_string()))?;
    let values = frame
        .values
        .iter()
        .map(|v| v + poisson.sample(rng))
        .collect();
    Ok(TimestepFrame { t: frame.t, values })
}

/// Removes a learned noise floor: `max(q - m, 0)`.
pub fn subtract_noise_baseline(q: f64, m: f64) -> f64 {
    (q - m).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assume, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::net::compute_drive;

    fn window_of(frames: &[Vec<f64>]) -> HistoryWindow {
        let mut w = HistoryWindow::new(frames.len());
        for (t, f) in frames.iter().enumerate() {
            w.push(TimestepFrame::new(t as i64, f.clone()).unwrap()).unwrap();
        }
        w
    }

    fn single(w: f64) -> DelayedWeightTensor {
        DelayedWeightTensor::from_values("a", "b", 1, 1, 1, &[w]).unwrap()
    }

    #[test]
    fn d_rule_table() {
        let mut w = single(0.5);
        apply_d(&mut w, &window_of(&[vec![2.0]]), &[1.5], 0.1).unwrap();
        assert!((w.get(0, 0, 0) - 0.2).abs() < 1e-15);

        let mut w = DelayedWeightTensor::from_values("a", "b", 2, 1, 1, &[0.3, 0.7]).unwrap();
        apply_d(&mut w, &window_of(&[vec![0.0, 1.0]]), &[1.0], 0.1).unwrap();
        assert_eq!(w.get(0, 0, 0), 0.3);

        let mut w = single(0.5);
        apply_d(&mut w, &window_of(&[vec![2.0]]), &[0.0], 0.1).unwrap();
        assert_eq!(w.get(0, 0, 0), 0.5);
    }

    #[test]
    fn u_rule_table() {
        let win = window_of(&[vec![2.0]]);
        let mut w = single(0.2);
        apply_u(&mut w, &win, &TimestepFrame::new(0, vec![1.0]).unwrap(), 0.1).unwrap();
        assert!((w.get(0, 0, 0) - 0.4).abs() < 1e-15);

        let mut w = single(0.2);
        apply_u(&mut w, &win, &TimestepFrame::new(0, vec![0.0]).unwrap(), 0.1).unwrap();
        assert_eq!(w.get(0, 0, 0), 0.2);

        let mut w = single(0.2);
        apply_u(&mut w, &win, &TimestepFrame::new(0, vec![0.5]).unwrap(), 0.1).unwrap();
        assert!((w.get(0, 0, 0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn rules_reject_bad_input() {
        let mut w = single(0.2);
        let win = window_of(&[vec![2.0]]);
        assert!(matches!(apply_d(&mut w, &win, &[1.0, 2.0], 0.1), Err(Error::Bounds { .. })));
        assert!(matches!(apply_d(&mut w, &win, &[f64::NAN], 0.1), Err(Error::Numeric(_))));
        let mut short = HistoryWindow::new(2);
        short.push(TimestepFrame::zeros(0, 1)).unwrap();
        let mut w2 = DelayedWeightTensor::zeros("a", "b", 1, 1, 2);
        assert!(matches!(
            apply_d(&mut w2, &short, &[1.0], 0.1),
            Err(Error::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn autoencoder_examples() {
        // estimate already exact: x = Q
        let mut w = DelayedWeightTensor::from_values("a", "b", 1, 2, 2, &[0.3, 0.1, 0.2, 0.4]).unwrap();
        let before = w.clone();
        let hidden = window_of(&[vec![1.0, 2.0], vec![0.5, 1.5]]);
        let q = compute_inference_for(&w, &hidden);
        let x = TimestepFrame::new(0, vec![q]).unwrap();
        autoencoder_step(&mut w, &x, &hidden, 0.1).unwrap();
        for (a, b) in w.to_values().iter().zip(before.to_values()) {
            assert!((a - b).abs() < 1e-15);
        }

        let mut w = before.clone();
        let silent = window_of(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        autoencoder_step(&mut w, &TimestepFrame::new(0, vec![5.0]).unwrap(), &silent, 0.1).unwrap();
        assert_eq!(w, before);

        let mut w = single(0.0);
        autoencoder_step(&mut w, &TimestepFrame::new(0, vec![1.0]).unwrap(), &window_of(&[vec![1.0]]), 0.1)
            .unwrap();
        assert!((w.get(0, 0, 0) - 0.1).abs() < 1e-15);
    }

    fn compute_inference_for(w: &DelayedWeightTensor, win: &HistoryWindow) -> f64 {
        crate::net::compute_inference(w, win).unwrap()[0]
    }

    #[test]
    fn autoencoder_needs_aligned_frame() {
        let mut w = single(0.0);
        let err = autoencoder_step(&mut w, &TimestepFrame::new(3, vec![1.0]).unwrap(), &window_of(&[vec![1.0]]), 0.1);
        assert!(matches!(err, Err(Error::Gap { .. })));
    }

    fn frame(t: i64, v: Vec<f64>) -> TimestepFrame {
        TimestepFrame::new(t, v).unwrap()
    }

    #[test]
    fn prediction_warm_up_then_update() {
        let (k, horizon) = (1, 2);
        let mut head = single(0.0);
        let mut line = DelayLine::new(k, horizon);
        let mut skipped = 0;
        let mut applied = 0;
        for t in 0..4 {
            line.push(frame(t, vec![1.0])).unwrap();
            match prediction_step(&mut head, &line, &frame(t, vec![1.0]), 0.1).unwrap() {
                StepOutcome::Skipped => skipped += 1,
                StepOutcome::Applied(_) => applied += 1,
            }
        }
        // t < horizon + k - 1 = 2 are skipped
        assert_eq!((skipped, applied), (2, 2));

        let mut head = single(0.0);
        let mut line = DelayLine::new(1, 1);
        line.push(frame(0, vec![1.0])).unwrap();
        line.push(frame(1, vec![0.0])).unwrap();
        prediction_step(&mut head, &line, &frame(1, vec![0.0]), 0.1).unwrap();
        assert_eq!(head.get(0, 0, 0), 0.0);
        prediction_step(&mut head, &line, &frame(1, vec![1.0]), 0.1).unwrap();
        assert!((head.get(0, 0, 0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn classification_gap_and_label() {
        let mut line = DelayLine::new(1, 3);
        line.push(frame(0, vec![1.0])).unwrap();
        let mut head = DelayedWeightTensor::from_values("all", "c", 1, 2, 1, &[0.0, 0.4]).unwrap();
        // gap: only d, weight into class 1 shrinks by eps * h * Q
        classification_step(&mut head, &line, &frame(0, vec![0.0, 0.0]), 0.1).unwrap();
        assert_eq!(head.get(0, 0, 0), 0.0);
        assert!((head.get(1, 0, 0) - 0.36).abs() < 1e-15);

        let mut head = DelayedWeightTensor::zeros("all", "c", 1, 2, 1);
        classification_step(&mut head, &line, &frame(0, vec![1.0, 0.0]), 0.1).unwrap();
        assert!((head.get(0, 0, 0) - 0.1).abs() < 1e-15);
        assert_eq!(head.get(1, 0, 0), 0.0);
    }

    #[test]
    fn classification_balanced_at_label_rate() {
        // A window seen under two labels with rates 0.7 / 0.3 and Q set to
        // those rates: the average update over many steps vanishes.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut line = DelayLine::new(1, 1);
        line.push(frame(0, vec![1.0])).unwrap();
        let start = [0.7, 0.3];
        let mut head = DelayedWeightTensor::from_values("all", "c", 1, 2, 1, &start).unwrap();
        let eps = 1e-4;
        let n = 20_000;
        let mut counts = [0.0; 2];
        for _ in 0..n {
            let c = if rng.gen_bool(0.7) { 0 } else { 1 };
            counts[c] += 1.0;
            let mut lab = vec![0.0, 0.0];
            lab[c] = 1.0;
            classification_step(&mut head, &line, &frame(0, lab), eps).unwrap();
        }
        for c in 0..2 {
            let drift = head.get(c, 0, 0) - start[c];
            assert!(drift.abs() < 0.02, "class {c} drifted by {drift}");
            // The learned value tracks the empirical label rate.
            assert!((head.get(c, 0, 0) - counts[c] / n as f64).abs() < 0.03);
        }
    }

    #[test]
    fn fused_update_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = DelayedWeightTensor::from_values("a", "b", 3, 2, 3, &vals).unwrap();
        let mut b = a.clone();
        let win = window_of(&[vec![1.0, 0.0, 2.0], vec![0.5, 0.5, 0.0], vec![0.0, 3.0, 1.0]]);
        let q = compute_drive(&a, &win).unwrap();
        let o = frame(2, vec![1.0, 0.0]);
        apply_u(&mut a, &win, &o, 0.01).unwrap();
        apply_d(&mut a, &win, &q, 0.01).unwrap();
        apply_ud_frames(&mut b, &newest_first(&win), &q, &o.values, 0.01).unwrap();
        for (x, y) in a.to_values().iter().zip(b.to_values()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn epsilon_halving() {
        assert_eq!(epsilon_schedule(0, 1e-5), 1e-5);
        assert_eq!(epsilon_schedule(1, 1e-5), 5e-6);
        assert_eq!(epsilon_schedule(2, 1e-5), 2.5e-6);
    }

    #[test]
    fn noise_injection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = frame(0, vec![0.0, 1.0, 2.0]);
        assert_eq!(inject_supervision_noise(&f, 0.0, &mut rng).unwrap(), f);
        assert!(matches!(inject_supervision_noise(&f, -0.1, &mut rng), Err(Error::Config(_))));

        let zeros = TimestepFrame::zeros(0, 1000);
        let mut total = 0.0;
        for _ in 0..100 {
            total += inject_supervision_noise(&zeros, 0.5, &mut rng).unwrap().total();
        }
        let mean = total / 100_000.0;
        assert!((mean - 0.5).abs() <= 0.02, "{mean}");

        assert!((subtract_noise_baseline(0.7, 0.5) - 0.2).abs() < 1e-15);
        assert_eq!(subtract_noise_baseline(0.3, 0.5), 0.0);
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (DelayedWeightTensor, HistoryWindow) {
        let pre = rng.gen_range(1..5);
        let post = rng.gen_range(1..4);
        let k = rng.gen_range(1..4);
        let vals: Vec<f64> = (0..pre * post * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = DelayedWeightTensor::from_values("a", "b", pre, post, k, &vals).unwrap();
        let frames: Vec<Vec<f64>> = (0..k).map(|_| (0..pre).map(|_| rng.gen_range(0.0..2.0)).collect()).collect();
        (w, window_of(&frames))
    }

    proptest! {
        #[test]
        fn d_lowers_and_u_raises_estimate(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, win) = random_instance(&mut rng);
            let q = compute_drive(&w, &win).unwrap();
            let sum_sq: f64 = win.frames().flat_map(|f| f.values.iter()).map(|h| h * h).sum();
            prop_assume!(sum_sq > 0.0);
            let eps = 1e-3;

            let mut wd = w.clone();
            apply_d(&mut wd, &win, &q, eps).unwrap();
            let qd = compute_drive(&wd, &win).unwrap();
            for j in 0..q.len() {
                if q[j] > 0.0 {
                    prop_assert!(qd[j] < q[j]);
                    let expected = -eps * q[j] * sum_sq;
                    prop_assert!((qd[j] - q[j] - expected).abs() < 1e-9);
                }
            }

            let o = TimestepFrame::new(0, vec![1.0; q.len()]).unwrap();
            let mut wu = w.clone();
            apply_u(&mut wu, &win, &o, eps).unwrap();
            let qu = compute_drive(&wu, &win).unwrap();
            for j in 0..q.len() {
                prop_assert!(qu[j] > q[j]);
            }
        }
    }
}
