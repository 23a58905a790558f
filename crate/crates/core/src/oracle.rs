//! Training-free BPF estimation by harmonic-comb search.
//!
//! Every frame's 2048-sample window is zero-padded to 8192 points for
//! finer bin spacing; each candidate fundamental on a dense grid is
//! scored by the 1/h-weighted sum of interpolated spectrum magnitudes at
//! its harmonics. The best candidate and the best candidate at least
//! `min_separation` away become the frame's BPF pair. Activity is the
//! fraction of in-band power captured by the winning comb.
//!
//! The optional whitening mode divides magnitudes by a local spectral
//! floor before scoring. Under low-frequency-heavy noise this lets the
//! clean high-frequency rotor line dominate the comb, which is what keeps
//! the estimator usable when the fundamentals are buried.

use ndarray::Array2;

use crate::audio::{AudioSegment, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::features::ZERO_PAD_LEN;
use crate::track::BpfTrack;

/// Search-grid and scoring settings for the comb estimator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OracleConfig {
    /// Lower edge of the fundamental search band, Hz.
    pub f_min: f64,
    /// Upper edge of the fundamental search band, Hz.
    pub f_max: f64,
    /// Candidate spacing, Hz.
    pub grid_step: f64,
    /// Harmonics summed per candidate.
    pub num_harmonics: usize,
    /// Minimum spacing between the two reported fundamentals, Hz.
    pub min_separation: f64,
    /// Comb-to-band power ratio below which a frame is inactive.
    pub activity_ratio_threshold: f64,
    /// Second peak weaker than this fraction of the best locks both
    /// outputs to one fundamental.
    pub second_rel_threshold: f64,
    /// Divide magnitudes by a local spectral floor before scoring.
    pub whiten: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            f_min: 100.0,
            f_max: 500.0,
            grid_step: 0.5,
            num_harmonics: 8,
            min_separation: 20.0,
            activity_ratio_threshold: 0.15,
            second_rel_threshold: 0.5,
            whiten: false,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_min > 0.0 && self.f_min < self.f_max) {
            return Err(Error::InvalidConfig("need 0 < f_min < f_max".into()));
        }
        if !(self.grid_step > 0.0 && self.grid_step <= 1.0) {
            return Err(Error::InvalidConfig("grid_step must be in (0, 1] Hz".into()));
        }
        if self.num_harmonics < 3 {
            return Err(Error::InvalidConfig("num_harmonics must be >= 3".into()));
        }
        Ok(())
    }
}

/// Half-width (in padded bins) of the neighborhood counted as one
/// harmonic line when measuring comb power.
const LINE_HALF_BINS: usize = 4;
/// Half-width (in padded bins) of the moving-average window used as the
/// whitening floor.
const WHITEN_HALF_BINS: usize = 100;
/// Whitening floor regularizer as a fraction of the global mean magnitude.
const WHITEN_DELTA: f64 = 0.05;

/// Estimate the two dominant rotor fundamentals and activity per frame.
pub fn estimate_oracle(segment: &AudioSegment, cfg: &OracleConfig) -> Result<BpfTrack> {
    cfg.validate()?;
    let power = crate::features::power_frames(segment, ZERO_PAD_LEN);
    let num_frames = power.nrows();
    let bins = power.ncols();
    let hz_per_bin = SAMPLE_RATE as f64 / ZERO_PAD_LEN as f64;
    let nyquist = SAMPLE_RATE as f64 / 2.0;

    let grid: Vec<f64> = {
        let mut v = Vec::new();
        let mut f = cfg.f_min;
        while f <= cfg.f_max + 1e-9 {
            v.push(f);
            f += cfg.grid_step;
        }
        v
    };

    let band_hi_hz = (cfg.num_harmonics as f64 * cfg.f_max).min(nyquist - hz_per_bin);
    let band_lo_bin = (cfg.f_min / hz_per_bin).floor() as usize;
    let band_hi_bin = ((band_hi_hz / hz_per_bin).ceil() as usize).min(bins - 1);

    let mut bpf = Vec::with_capacity(num_frames);
    let mut activity = Vec::with_capacity(num_frames);
    let mut single = Vec::with_capacity(num_frames);

    let mut magnitude = vec![0.0f64; bins];
    let mut scoring = vec![0.0f64; bins];
    for frame in 0..num_frames {
        for (b, m) in magnitude.iter_mut().enumerate() {
            *m = power[[frame, b]].sqrt();
        }
        if cfg.whiten {
            whiten_into(&magnitude, &mut scoring);
        } else {
            scoring.copy_from_slice(&magnitude);
        }

        let score_of = |f0: f64| -> f64 {
            let mut s = 0.0;
            for h in 1..=cfg.num_harmonics {
                let f = f0 * h as f64;
                if f >= nyquist {
                    break;
                }
                s += interp(&scoring, f / hz_per_bin) / h as f64;
            }
            s
        };

        let scores: Vec<f64> = grid.iter().map(|&f| score_of(f)).collect();
        let best = argmax(&scores);
        let f_best = grid[best];
        let second = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| (grid[*i] - f_best).abs() >= cfg.min_separation)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i);

        let (f_second, is_single) = match second {
            Some(i) if scores[i] >= cfg.second_rel_threshold * scores[best] => (grid[i], false),
            _ => (f_best, true),
        };

        // Activity: power captured by the winning comb's line
        // neighborhoods over total band power, on the raw spectrum.
        let ratio = comb_ratio(
            &power,
            frame,
            f_best,
            cfg.num_harmonics,
            hz_per_bin,
            band_lo_bin,
            band_hi_bin,
        );
        let act = ratio.clamp(0.0, 1.0);

        if act >= cfg.activity_ratio_threshold {
            let pair = if f_best <= f_second {
                [f_best, f_second]
            } else {
                [f_second, f_best]
            };
            bpf.push(pair);
        } else {
            bpf.push([0.0, 0.0]);
        }
        activity.push(act);
        single.push(is_single);
    }

    let mut track = BpfTrack::new(bpf, activity)?;
    track.single_source = Some(single);
    Ok(track)
}

/// Linear interpolation of a sampled spectrum at a fractional bin.
fn interp(values: &[f64], bin: f64) -> f64 {
    if bin < 0.0 || bin >= (values.len() - 1) as f64 {
        return 0.0;
    }
    let k = bin as usize;
    let frac = bin - k as f64;
    values[k] * (1.0 - frac) + values[k + 1] * frac
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Divide each magnitude by a moving-average floor plus a global
/// regularizer, writing into `out`.
fn whiten_into(magnitude: &[f64], out: &mut [f64]) {
    let n = magnitude.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &m in magnitude {
        prefix.push(prefix.last().unwrap() + m);
    }
    let global_mean = prefix[n] / n as f64;
    let delta = (WHITEN_DELTA * global_mean).max(f64::MIN_POSITIVE);
    for (i, slot) in out.iter_mut().enumerate() {
        let lo = i.saturating_sub(WHITEN_HALF_BINS);
        let hi = (i + WHITEN_HALF_BINS + 1).min(n);
        let local = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
        *slot = magnitude[i] / (local + delta);
    }
}

#[allow(clippy::too_many_arguments)]
fn comb_ratio(
    power: &Array2<f64>,
    frame: usize,
    f0: f64,
    num_harmonics: usize,
    hz_per_bin: f64,
    band_lo_bin: usize,
    band_hi_bin: usize,
) -> f64 {
    let band_total: f64 = (band_lo_bin..=band_hi_bin)
        .map(|b| power[[frame, b]])
        .sum();
    if band_total <= 0.0 {
        return 0.0;
    }
    let mut covered = vec![false; band_hi_bin + 1];
    for h in 1..=num_harmonics {
        let center = (f0 * h as f64 / hz_per_bin).round() as usize;
        if center > band_hi_bin {
            break;
        }
        let lo = center.saturating_sub(LINE_HALF_BINS).max(band_lo_bin);
        let hi = (center + LINE_HALF_BINS).min(band_hi_bin);
        for flag in covered.iter_mut().take(hi + 1).skip(lo) {
            *flag = true;
        }
    }
    let comb_power: f64 = (band_lo_bin..=band_hi_bin)
        .filter(|&b| covered[b])
        .map(|b| power[[frame, b]])
        .sum();
    comb_power / band_total
}
