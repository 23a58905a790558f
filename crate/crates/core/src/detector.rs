//! Delivery detection by multi-window histogram comparison of BPF tracks.
//!
//! For each frame `t` and each odd window size `n`, the BPF values of one
//! motor are split into a "before" half (`floor(n/2)` frames up to `t-1`)
//! and an "after" half (`floor(n/2)+1` frames from `t`). Both halves are
//! histogrammed over 100-500 Hz and compared with a weighted sum of
//! chi-squared distance, Jensen-Shannon divergence, histogram
//! intersection, and the difference of histogram means. The final score
//! `d_t` averages the per-motor, per-window scores, skipping windows
//! whose halves have too few in-range values. Frames where the score
//! crosses a threshold become delivery events.

use std::path::Path;

use crate::audio::FRAME_RATE;
use crate::error::{Error, Result};
use crate::track::BpfTrack;

/// Histogram band lower edge, Hz.
pub const BAND_LO_HZ: f64 = 100.0;
/// Histogram band upper edge, Hz (exclusive).
pub const BAND_HI_HZ: f64 = 500.0;
/// Number of histogram bins (10 Hz each).
pub const NUM_HIST_BINS: usize = 40;

/// Fixed-band BPF histogram over [100, 500) Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    counts: [u32; NUM_HIST_BINS],
    total: u32,
}

impl Histogram {
    /// Count the values that fall inside the band; everything else
    /// (zeros from inactive frames, out-of-range estimates) is ignored.
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let mut counts = [0u32; NUM_HIST_BINS];
        let mut total = 0u32;
        let bin_width = (BAND_HI_HZ - BAND_LO_HZ) / NUM_HIST_BINS as f64;
        for v in values {
            if v >= BAND_LO_HZ && v < BAND_HI_HZ {
                let bin = ((v - BAND_LO_HZ) / bin_width) as usize;
                counts[bin.min(NUM_HIST_BINS - 1)] += 1;
                total += 1;
            }
        }
        Histogram { counts, total }
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn counts(&self) -> &[u32; NUM_HIST_BINS] {
        &self.counts
    }

    /// Normalized bin masses; sums to 1 when the total is positive.
    pub fn normalized(&self) -> [f64; NUM_HIST_BINS] {
        let mut out = [0.0; NUM_HIST_BINS];
        if self.total > 0 {
            for (o, &c) in out.iter_mut().zip(&self.counts) {
                *o = c as f64 / self.total as f64;
            }
        }
        out
    }

    /// Center frequency of bin `i` in Hz.
    pub fn bin_center(i: usize) -> f64 {
        let bin_width = (BAND_HI_HZ - BAND_LO_HZ) / NUM_HIST_BINS as f64;
        BAND_LO_HZ + (i as f64 + 0.5) * bin_width
    }

    /// Mean of the distribution using bin centers.
    pub fn mean(&self) -> f64 {
        let norm = self.normalized();
        (0..NUM_HIST_BINS)
            .map(|i| norm[i] * Self::bin_center(i))
            .sum()
    }
}

fn check_nonempty(a: &Histogram, b: &Histogram) -> Result<()> {
    if a.total == 0 || b.total == 0 {
        return Err(Error::InvalidInput(
            "histogram distance on zero-total histogram".into(),
        ));
    }
    Ok(())
}

/// Chi-squared distance in [0, 1] between normalized histograms.
pub fn chi_squared(a: &Histogram, b: &Histogram) -> Result<f64> {
    check_nonempty(a, b)?;
    let (na, nb) = (a.normalized(), b.normalized());
    Ok(na
        .iter()
        .zip(&nb)
        .map(|(&x, &y)| {
            let denom = x + y;
            if denom > 0.0 {
                (x - y) * (x - y) / denom
            } else {
                0.0
            }
        })
        .sum::<f64>()
        * 0.5)
}

/// Jensen-Shannon divergence in [0, 1] (base-2 logs).
pub fn jensen_shannon(a: &Histogram, b: &Histogram) -> Result<f64> {
    check_nonempty(a, b)?;
    let (na, nb) = (a.normalized(), b.normalized());
    let kl_to_mid = |p: &[f64; NUM_HIST_BINS], q: &[f64; NUM_HIST_BINS]| {
        p.iter()
            .zip(q)
            .map(|(&x, &y)| {
                if x > 0.0 {
                    let m = 0.5 * (x + y);
                    x * (x / m).log2()
                } else {
                    0.0
                }
            })
            .sum::<f64>()
    };
    Ok(0.5 * kl_to_mid(&na, &nb) + 0.5 * kl_to_mid(&nb, &na))
}

/// Histogram intersection in [0, 1]: 1 for identical, 0 for disjoint.
pub fn intersection(a: &Histogram, b: &Histogram) -> Result<f64> {
    check_nonempty(a, b)?;
    let (na, nb) = (a.normalized(), b.normalized());
    Ok(na.iter().zip(&nb).map(|(&x, &y)| x.min(y)).sum())
}

/// Difference of the bin-center means, `mean(a) - mean(b)`, in Hz.
///
/// With `a` the after-release half and `b` the before half, a delivery
/// (BPF drop) yields a negative value.
pub fn mean_diff(a: &Histogram, b: &Histogram) -> Result<f64> {
    check_nonempty(a, b)?;
    Ok(a.mean() - b.mean())
}

/// Weights of the four distance terms in the motor score.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreWeights {
    /// Chi-squared weight.
    pub w1: f64,
    /// Jensen-Shannon weight.
    pub w2: f64,
    /// Intersection weight.
    pub w3: f64,
    /// Mean-difference weight, per Hz.
    pub w4: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            w1: 10.0,
            w2: 2.0,
            w3: -20.0,
            w4: -0.05,
        }
    }
}

/// Window bank and event-extraction settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectorConfig {
    /// Odd window sizes in frames.
    pub window_sizes: Vec<usize>,
    /// Score threshold for event extraction.
    pub threshold: f64,
    /// Events closer than this merge into one.
    pub min_event_gap_s: f64,
}

/// The 15 default window sizes: nearest odd integers to evenly spaced
/// points between 93 frames (3 s) and 465 frames (15 s).
pub fn default_window_sizes() -> Vec<usize> {
    let count = 15;
    (0..count)
        .map(|i| {
            let x = 93.0 + (465.0 - 93.0) * i as f64 / (count - 1) as f64;
            let odd = 2.0 * (x / 2.0).round() - 1.0;
            // Round to the nearest odd integer, not just downward.
            let candidates = [odd, odd + 2.0];
            candidates
                .into_iter()
                .min_by(|a, b| (a - x).abs().partial_cmp(&(b - x).abs()).unwrap())
                .unwrap() as usize
        })
        .collect()
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window_sizes: default_window_sizes(),
            threshold: 5.0,
            min_event_gap_s: 5.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_sizes.is_empty() {
            return Err(Error::InvalidConfig("no detector windows".into()));
        }
        for &n in &self.window_sizes {
            if n % 2 == 0 || n < 3 {
                return Err(Error::InvalidConfig(format!(
                    "window sizes must be odd and >= 3, got {n}"
                )));
            }
        }
        Ok(())
    }

    /// Minimum in-range values each half must hold for a window of `n`.
    pub fn min_valid_per_half(n: usize) -> usize {
        n.div_ceil(4)
    }

    /// Frames of lag a streaming detector needs: half the largest window.
    pub fn stream_lag(&self) -> usize {
        self.window_sizes.iter().max().copied().unwrap_or(0) / 2
    }
}

/// Split a motor track around frame `t`: `before` holds `floor(n/2)`
/// values ending at `t - 1`, `after` holds `floor(n/2) + 1` starting at `t`.
pub fn split_window(
    track: &BpfTrack,
    t: usize,
    n: usize,
    motor: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let half = n / 2;
    if t < half || t + half >= track.len() {
        return Err(Error::WindowOutOfBounds {
            t,
            n,
            frames: track.len(),
        });
    }
    let before = (t - half..t).map(|i| track.bpf[i][motor]).collect();
    let after = (t..=t + half).map(|i| track.bpf[i][motor]).collect();
    Ok((before, after))
}

/// Slice-level scoring shared by the batch and streaming paths.
fn motor_score_slice(
    bpf: &[[f64; 2]],
    t: usize,
    n: usize,
    motor: usize,
    weights: &ScoreWeights,
) -> Result<Option<f64>> {
    let half = n / 2;
    if t < half || t + half >= bpf.len() {
        return Err(Error::WindowOutOfBounds {
            t,
            n,
            frames: bpf.len(),
        });
    }
    let hb = Histogram::from_values((t - half..t).map(|i| bpf[i][motor]));
    let ha = Histogram::from_values((t..=t + half).map(|i| bpf[i][motor]));
    let min_valid = DetectorConfig::min_valid_per_half(n) as u32;
    if hb.total() < min_valid || ha.total() < min_valid {
        return Ok(None);
    }
    let score = weights.w1 * chi_squared(&ha, &hb)?
        + weights.w2 * jensen_shannon(&ha, &hb)?
        + weights.w3 * intersection(&ha, &hb)?
        + weights.w4 * mean_diff(&ha, &hb)?;
    Ok(Some(score))
}

/// Weighted-sum delivery score for one motor and window, or `None` when
/// either half has fewer than `ceil(n/4)` in-range values.
pub fn motor_score(
    track: &BpfTrack,
    t: usize,
    n: usize,
    motor: usize,
    weights: &ScoreWeights,
) -> Result<Option<f64>> {
    motor_score_slice(&track.bpf, t, n, motor, weights)
}

/// Per-frame delivery scores with validity flags and extracted events.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryScoreSeries {
    /// Score `d_t`; meaningful only where `valid`.
    pub score: Vec<f64>,
    pub valid: Vec<bool>,
    pub events: Vec<DeliveryEvent>,
}

/// One extracted delivery event.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeliveryEvent {
    pub frame: usize,
    pub time_s: f64,
    pub peak_score: f64,
}

/// Score every frame of a track: `d_t` is the mean of all valid motor and
/// window scores at `t`; a frame with no valid window is marked invalid.
pub fn score_series(
    track: &BpfTrack,
    cfg: &DetectorConfig,
    weights: &ScoreWeights,
) -> Result<DeliveryScoreSeries> {
    cfg.validate()?;
    let frames = track.len();
    let mut score = vec![0.0; frames];
    let mut valid = vec![false; frames];
    for t in 0..frames {
        let (s, ok) = frame_score(&track.bpf, t, cfg, weights);
        score[t] = s;
        valid[t] = ok;
    }
    let events = extract_events(&score, &valid, cfg.threshold, cfg.min_event_gap_s);
    Ok(DeliveryScoreSeries {
        score,
        valid,
        events,
    })
}

/// Mean of valid motor/window scores at one frame. Shared by the batch
/// and streaming paths so both produce bit-identical numbers.
fn frame_score(bpf: &[[f64; 2]], t: usize, cfg: &DetectorConfig, weights: &ScoreWeights) -> (f64, bool) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &n in &cfg.window_sizes {
        let half = n / 2;
        if t < half || t + half >= bpf.len() {
            continue;
        }
        for motor in 0..2 {
            if let Ok(Some(s)) = motor_score_slice(bpf, t, n, motor, weights) {
                sum += s;
                count += 1;
            }
        }
    }
    if count == 0 {
        (0.0, false)
    } else {
        (sum / count as f64, true)
    }
}

/// Group threshold crossings into events: one event per maximal run of
/// `score >= threshold`, placed at the run's argmax; runs separated by
/// less than `min_event_gap_s` merge.
pub fn extract_events(
    score: &[f64],
    valid: &[bool],
    threshold: f64,
    min_event_gap_s: f64,
) -> Vec<DeliveryEvent> {
    let gap_frames = (min_event_gap_s * FRAME_RATE).round() as usize;
    let mut runs: Vec<(usize, usize)> = Vec::new(); // inclusive frame ranges
    let mut start: Option<usize> = None;
    for t in 0..score.len() {
        let above = valid[t] && score[t] >= threshold;
        match (above, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                runs.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, score.len() - 1));
    }

    // Merge runs closer than the gap.
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for run in runs {
        match merged.last_mut() {
            Some(prev) if run.0 - prev.1 <= gap_frames => prev.1 = run.1,
            _ => merged.push(run),
        }
    }

    merged
        .into_iter()
        .map(|(s, e)| {
            // First frame attaining the maximum.
            let peak = (s..=e)
                .filter(|&t| valid[t])
                .fold(None::<usize>, |best, t| match best {
                    Some(b) if score[t] <= score[b] => Some(b),
                    _ => Some(t),
                })
                .unwrap_or(s);
            DeliveryEvent {
                frame: peak,
                time_s: peak as f64 / FRAME_RATE,
                peak_score: score[peak],
            }
        })
        .collect()
}

/// Online detector over a bounded frame buffer.
///
/// Frames are pushed one at a time; once `stream_lag()` newer frames are
/// buffered, the score for a frame is emitted. Output matches the batch
/// detector bit for bit. Worst-case lag is half the largest window
/// (232 frames, about 7.4 s, for the default bank).
#[derive(Debug, Clone)]
pub struct StreamingDetector {
    cfg: DetectorConfig,
    weights: ScoreWeights,
    buffer: Vec<[f64; 2]>,
    /// Absolute index of the next frame to score.
    next_score: usize,
    /// Absolute index of the first buffered frame.
    buffer_start: usize,
}

/// One streaming detector output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamScore {
    pub frame: usize,
    pub score: f64,
    pub valid: bool,
}

impl StreamingDetector {
    pub fn new(cfg: DetectorConfig, weights: ScoreWeights) -> Result<Self> {
        cfg.validate()?;
        Ok(StreamingDetector {
            cfg,
            weights,
            buffer: Vec::new(),
            next_score: 0,
            buffer_start: 0,
        })
    }

    /// Push one frame; returns the score that became final, if any.
    pub fn push(&mut self, bpf: [f64; 2]) -> Option<StreamScore> {
        self.buffer.push(bpf);
        let newest = self.buffer_start + self.buffer.len() - 1;
        let lag = self.cfg.stream_lag();
        if newest < self.next_score + lag {
            return None;
        }
        let out = self.score_at(self.next_score);
        self.next_score += 1;
        self.trim();
        Some(out)
    }

    /// Drain scores for the tail frames once the input has ended.
    pub fn finish(mut self) -> Vec<StreamScore> {
        let total = self.buffer_start + self.buffer.len();
        let mut out = Vec::new();
        while self.next_score < total {
            out.push(self.score_at(self.next_score));
            self.next_score += 1;
        }
        out
    }

    fn score_at(&self, t: usize) -> StreamScore {
        // Indices shift by buffer_start but the per-window arithmetic is
        // unchanged: the buffer retains every frame a pending score can
        // reach, and windows clipped by the buffer head were equally out
        // of bounds in the batch view.
        let rel = t - self.buffer_start;
        let (score, valid) = frame_score(&self.buffer, rel, &self.cfg, &self.weights);
        StreamScore {
            frame: t,
            score,
            valid,
        }
    }

    fn trim(&mut self) {
        let lag = self.cfg.stream_lag();
        // Oldest frame any future score can touch: next_score - lag.
        let keep_from = self.next_score.saturating_sub(lag);
        if keep_from > self.buffer_start {
            self.buffer.drain(0..keep_from - self.buffer_start);
            self.buffer_start = keep_from;
        }
    }
}

/// Write a score series as CSV `frame,time_s,score,valid`.
pub fn write_score_csv(series: &DeliveryScoreSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["frame", "time_s", "score", "valid"])
        .map_err(csv_err)?;
    for t in 0..series.score.len() {
        w.write_record(&[
            t.to_string(),
            (t as f64 / FRAME_RATE).to_string(),
            series.score[t].to_string(),
            (series.valid[t] as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write extracted events as a JSON array of `{frame, time_s, peak_score}`.
pub fn write_events_json(events: &[DeliveryEvent], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::to_writer_pretty(file, events)?;
    Ok(())
}
