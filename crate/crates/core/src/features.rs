//! Frame-aligned spectral features: log-mel spectrogram and power cepstrum.
//!
//! Framing convention (shared with every consumer in this crate): frames
//! are centered on sample `i * hop` with reflection padding at the edges,
//! and a segment of `N` samples yields exactly `floor(N / hop)` frames.
//! Three seconds of 16 kHz audio therefore produce 93 frames.
//!
//! The mel filterbank uses 128 triangular filters whose edges are spaced
//! uniformly on the mel scale between 0 and 7000 Hz, area-normalized so
//! each filter integrates to one over Hz. Mel energies are natural-log
//! scaled with a 1e-10 floor. The power cepstrum of a frame is
//! `|idft(ln max(|X|^2, 1e-10))|^2` truncated to the lowest 128 quefrency
//! bins to match the mel dimension; bin 0 is retained.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio::{AudioSegment, HOP_SIZE, SAMPLE_RATE, WINDOW_SIZE};
use crate::error::{Error, Result};

/// Number of mel bands and retained quefrency bins.
pub const NUM_BINS: usize = 128;
/// Upper edge of the mel filterbank in Hz.
pub const MEL_MAX_HZ: f64 = 7000.0;
/// Floor applied before logs to keep them finite.
pub const LOG_FLOOR: f64 = 1e-10;
/// FFT length used by the oracle estimator for finer bin spacing.
pub const ZERO_PAD_LEN: usize = 8192;

/// Per-channel standardization statistics (channel 0 = mel, 1 = cepstrum).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl NormStats {
    /// Stats that leave features untouched.
    pub fn identity() -> Self {
        NormStats {
            mean: [0.0, 0.0],
            std: [1.0, 1.0],
        }
    }

    /// Moments of a raw (unstandardized) feature corpus, per channel.
    pub fn from_blocks<'a>(blocks: impl IntoIterator<Item = &'a FeatureBlock>) -> Result<Self> {
        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        let mut count = 0usize;
        for block in blocks {
            for (c, chan) in [&block.mel, &block.cepstrum].into_iter().enumerate() {
                for &v in chan.iter() {
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
            count += block.frames * NUM_BINS;
        }
        if count == 0 {
            return Err(Error::EmptyDataset("no feature blocks for stats".into()));
        }
        let n = count as f64;
        let mut mean = [0.0; 2];
        let mut std = [0.0; 2];
        for c in 0..2 {
            mean[c] = sum[c] / n;
            std[c] = (sum_sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-12);
        }
        Ok(NormStats { mean, std })
    }
}

/// Stacked mel + cepstrum features for one segment, `frames x 2 x 128`.
#[derive(Debug, Clone)]
pub struct FeatureBlock {
    pub frames: usize,
    /// Channel 0: log-mel energies, `frames x 128`.
    pub mel: Array2<f64>,
    /// Channel 1: power cepstrum, `frames x 128`.
    pub cepstrum: Array2<f64>,
    /// Frames per second (31.25).
    pub frame_rate: f64,
}

/// Hann window of [`WINDOW_SIZE`] samples.
fn hann_window() -> Vec<f64> {
    (0..WINDOW_SIZE)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SIZE as f64).cos()))
        .collect()
}

/// Samples of frame `i`, centered on `i * hop`, reflection-padded at edges.
///
/// Reflection excludes the edge sample itself (pad of `[a b c ...]` on the
/// left reads `... c b`), matching the usual centered-STFT convention.
fn frame_samples(samples: &[f64], frame: usize, out: &mut [f64]) {
    let n = samples.len() as isize;
    let center = (frame * HOP_SIZE) as isize;
    let half = (WINDOW_SIZE / 2) as isize;
    for (j, slot) in out.iter_mut().enumerate() {
        let mut idx = center - half + j as isize;
        // Reflect until inside [0, n); segments are >= one window so this
        // terminates after at most a couple of folds.
        loop {
            if idx < 0 {
                idx = -idx;
            } else if idx >= n {
                idx = 2 * (n - 1) - idx;
            } else {
                break;
            }
        }
        *slot = samples[idx as usize];
    }
}

/// Windowed FFT magnitudes-squared for every frame of the segment.
///
/// `fft_len >= WINDOW_SIZE`; the tail is zero-padded. Returns
/// `frames x (fft_len / 2 + 1)` one-sided power.
pub(crate) fn power_frames(segment: &AudioSegment, fft_len: usize) -> Array2<f64> {
    let window = hann_window();
    let num_frames = segment.num_frames();
    let bins = fft_len / 2 + 1;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_len);

    let mut out = Array2::zeros((num_frames, bins));
    let mut frame = vec![0.0f64; WINDOW_SIZE];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    for i in 0..num_frames {
        frame_samples(segment.samples(), i, &mut frame);
        for (j, slot) in buf.iter_mut().enumerate() {
            *slot = if j < WINDOW_SIZE {
                Complex::new(frame[j] * window[j], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (j, c) in buf.iter().take(bins).enumerate() {
            out[[i, j]] = c.norm_sqr();
        }
    }
    out
}

/// Triangular mel filterbank, `NUM_BINS x (WINDOW_SIZE / 2 + 1)`.
pub(crate) fn mel_filterbank() -> Array2<f64> {
    fn hz_to_mel(hz: f64) -> f64 {
        2595.0 * (1.0 + hz / 700.0).log10()
    }
    fn mel_to_hz(mel: f64) -> f64 {
        700.0 * (10f64.powf(mel / 2595.0) - 1.0)
    }

    let bins = WINDOW_SIZE / 2 + 1;
    let mel_max = hz_to_mel(MEL_MAX_HZ);
    let edges: Vec<f64> = (0..NUM_BINS + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (NUM_BINS + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / WINDOW_SIZE as f64;

    let mut fb = Array2::zeros((NUM_BINS, bins));
    for m in 0..NUM_BINS {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        // Area normalization: each triangle integrates to 1 over Hz.
        let norm = 2.0 / (hi - lo);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            fb[[m, k]] = w * norm;
        }
    }
    fb
}

/// Center frequencies (Hz) of the mel bands; used by tests and docs.
pub fn mel_center_frequencies() -> Vec<f64> {
    fn hz_to_mel(hz: f64) -> f64 {
        2595.0 * (1.0 + hz / 700.0).log10()
    }
    fn mel_to_hz(mel: f64) -> f64 {
        700.0 * (10f64.powf(mel / 2595.0) - 1.0)
    }
    let mel_max = hz_to_mel(MEL_MAX_HZ);
    (1..=NUM_BINS)
        .map(|i| mel_to_hz(mel_max * i as f64 / (NUM_BINS + 1) as f64))
        .collect()
}

/// Log-mel spectrogram of a segment, `frames x 128`.
pub fn mel_spectrogram(segment: &AudioSegment) -> Result<Array2<f64>> {
    let power = power_frames(segment, WINDOW_SIZE);
    let fb = mel_filterbank();
    let mut out = power.dot(&fb.t());
    out.mapv_inplace(|e| (e + LOG_FLOOR).ln());
    Ok(out)
}

/// Power cepstrum of a segment, `frames x 128` (lowest quefrency bins).
pub fn power_cepstrum(segment: &AudioSegment) -> Result<Array2<f64>> {
    let num_frames = segment.num_frames();
    let window = hann_window();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(WINDOW_SIZE);
    let ifft = planner.plan_fft_inverse(WINDOW_SIZE);

    let mut out = Array2::zeros((num_frames, NUM_BINS));
    let mut frame = vec![0.0f64; WINDOW_SIZE];
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW_SIZE];
    for i in 0..num_frames {
        frame_samples(segment.samples(), i, &mut frame);
        for (j, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(frame[j] * window[j], 0.0);
        }
        fft.process(&mut buf);
        // Log power spectrum is real and even, so the inverse transform
        // is real up to rounding; the magnitude-square below absorbs it.
        for slot in buf.iter_mut() {
            *slot = Complex::new(slot.norm_sqr().max(LOG_FLOOR).ln(), 0.0);
        }
        ifft.process(&mut buf);
        let scale = 1.0 / WINDOW_SIZE as f64;
        for (q, c) in buf.iter().take(NUM_BINS).enumerate() {
            let v = c.re * scale;
            out[[i, q]] = v * v;
        }
    }
    Ok(out)
}

/// Standardized two-channel feature stack for one segment.
pub fn feature_block(segment: &AudioSegment, normalizer: &NormStats) -> Result<FeatureBlock> {
    let mut mel = mel_spectrogram(segment)?;
    let mut cepstrum = power_cepstrum(segment)?;
    debug_assert_eq!(mel.nrows(), cepstrum.nrows());
    if mel.nrows() != cepstrum.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "mel frames {} != cepstrum frames {}",
            mel.nrows(),
            cepstrum.nrows()
        )));
    }
    mel.mapv_inplace(|v| (v - normalizer.mean[0]) / normalizer.std[0]);
    cepstrum.mapv_inplace(|v| (v - normalizer.mean[1]) / normalizer.std[1]);
    Ok(FeatureBlock {
        frames: mel.nrows(),
        mel,
        cepstrum,
        frame_rate: crate::audio::FRAME_RATE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, amp: f64, n: usize) -> AudioSegment {
        let s: Vec<f64> = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        AudioSegment::new(s, 0.0).unwrap()
    }

    /// Brute-force DFT magnitude-squared straight from the definition.
    fn dft_power(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..n / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &x) in frame.iter().enumerate() {
                    let ang = 2.0 * PI * k as f64 * t as f64 / n as f64;
                    re += x * ang.cos();
                    im -= x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn three_seconds_is_93_frames() {
        let seg = sine(440.0, 0.3, 48_000);
        let mel = mel_spectrogram(&seg).unwrap();
        assert_eq!(mel.nrows(), 93);
        assert_eq!(mel.ncols(), 128);
        let cep = power_cepstrum(&seg).unwrap();
        assert_eq!(cep.nrows(), 93);
        assert_eq!(cep.ncols(), 128);
    }

    #[test]
    fn silence_hits_log_floor() {
        let seg = AudioSegment::new(vec![0.0; 8192], 0.0).unwrap();
        let mel = mel_spectrogram(&seg).unwrap();
        let floor = LOG_FLOOR.ln();
        for &v in mel.iter() {
            assert!((v - floor).abs() < 1e-9, "expected log floor, got {v}");
        }
    }

    #[test]
    fn sine_peaks_at_nearest_mel_band() {
        let seg = sine(1000.0, 0.5, 16_384);
        let mel = mel_spectrogram(&seg).unwrap();

        let centers = mel_center_frequencies();
        let expect = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 1000.0)
                    .abs()
                    .partial_cmp(&(b.1 - 1000.0).abs())
                    .unwrap()
            })
            .unwrap()
            .0;

        // Independent check: brute-force DFT of one interior frame pushed
        // through the same filterbank must agree on the dominant band.
        let mut frame = vec![0.0; WINDOW_SIZE];
        frame_samples(seg.samples(), 10, &mut frame);
        let window = hann_window();
        let windowed: Vec<f64> = frame.iter().zip(&window).map(|(x, w)| x * w).collect();
        let power = dft_power(&windowed);
        let fb = mel_filterbank();
        let oracle_band = (0..NUM_BINS)
            .map(|m| (0..power.len()).map(|k| fb[[m, k]] * power[k]).sum::<f64>())
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(oracle_band, expect);

        for i in 0..mel.nrows() {
            let argmax = mel
                .row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, expect, "frame {i} peaked at band {argmax}");
        }
    }

    #[test]
    fn cepstrum_comb_peak_at_expected_quefrency() {
        // 10-harmonic comb at 250 Hz: quefrency = 16000 / 250 = 64 samples.
        let n = 16_384;
        let s: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                (1..=10)
                    .map(|h| 0.08 * (2.0 * PI * 250.0 * h as f64 * t).sin())
                    .sum()
            })
            .collect();
        let seg = AudioSegment::new(s, 0.0).unwrap();
        let cep = power_cepstrum(&seg).unwrap();
        for i in 0..cep.nrows() {
            let peak = (32..NUM_BINS)
                .max_by(|&a, &b| cep[[i, a]].partial_cmp(&cep[[i, b]]).unwrap())
                .unwrap();
            assert!(
                (peak as i64 - 64).abs() <= 1,
                "frame {i}: peak at bin {peak}, expected 64 +/- 1"
            );
        }

        // Independent confirmation: autocorrelation of the log spectrum of
        // one frame peaks at the same lag.
        let mut frame = vec![0.0; WINDOW_SIZE];
        frame_samples(seg.samples(), 5, &mut frame);
        let window = hann_window();
        let windowed: Vec<f64> = frame.iter().zip(&window).map(|(x, w)| x * w).collect();
        let logspec: Vec<f64> = dft_power(&windowed)
            .iter()
            .map(|&p| p.max(LOG_FLOOR).ln())
            .collect();
        let mean = logspec.iter().sum::<f64>() / logspec.len() as f64;
        let centered: Vec<f64> = logspec.iter().map(|v| v - mean).collect();
        // Lag q in quefrency samples corresponds to a spectral ripple of
        // period (WINDOW_SIZE / q) bins.
        let best_lag = (32..NUM_BINS)
            .max_by(|&a, &b| {
                let score = |q: usize| {
                    let period = WINDOW_SIZE as f64 / q as f64;
                    let shift = period.round() as usize;
                    centered
                        .iter()
                        .zip(centered.iter().skip(shift))
                        .map(|(x, y)| x * y)
                        .sum::<f64>()
                };
                score(a).partial_cmp(&score(b)).unwrap()
            })
            .unwrap();
        assert!((best_lag as i64 - 64).abs() <= 1);
    }

    #[test]
    fn white_noise_has_no_cepstral_peak() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let s: Vec<f64> = (0..32_768).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let seg = AudioSegment::new(s, 0.0).unwrap();
        let cep = power_cepstrum(&seg).unwrap();
        // Single frames fluctuate chi-squared-style, so judge the mean
        // cepstrum: a flat log spectrum leaves it peakless.
        let mean: Vec<f64> = (32..NUM_BINS)
            .map(|q| (0..cep.nrows()).map(|i| cep[[i, q]]).sum::<f64>() / cep.nrows() as f64)
            .collect();
        let mut sorted = mean.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        let max = *sorted.last().unwrap();
        assert!(
            max <= 3.0 * median,
            "spurious mean-cepstrum peak {max} vs median {median}"
        );
    }

    #[test]
    fn gain_adds_constant_in_log_mel() {
        let seg = sine(700.0, 0.2, 16_384);
        let scaled = AudioSegment::new(
            seg.samples().iter().map(|s| s * 3.0).collect(),
            0.0,
        )
        .unwrap();
        let a = mel_spectrogram(&seg).unwrap();
        let b = mel_spectrogram(&scaled).unwrap();
        let expected = 2.0 * 3.0f64.ln();
        let mut checked = 0usize;
        for (x, y) in a.iter().zip(b.iter()) {
            // The pure gain law needs energy well above the 1e-10 floor;
            // 14 nats of headroom keeps the floor's bias below 1e-6.
            if *x > LOG_FLOOR.ln() + 14.0 {
                assert!(((y - x) - expected).abs() < 1e-6, "delta {}", y - x);
                checked += 1;
            }
        }
        assert!(checked > 100, "only {checked} bins above the floor margin");
    }

    #[test]
    fn shift_by_one_hop_shifts_frames() {
        let seg = sine(333.0, 0.4, 20_480);
        let mut shifted = vec![0.0; HOP_SIZE];
        shifted.extend_from_slice(seg.samples());
        let shifted = AudioSegment::new(shifted, 0.0).unwrap();
        let a = mel_spectrogram(&seg).unwrap();
        let b = mel_spectrogram(&shifted).unwrap();
        // Interior frames: b[i + 1] == a[i] away from the padded edges.
        for i in 3..a.nrows() - 3 {
            for k in 0..NUM_BINS {
                let (x, y) = (a[[i, k]], b[[i + 1, k]]);
                assert!(
                    (x - y).abs() <= 1e-6 * x.abs().max(1.0),
                    "frame {i} bin {k}: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn feature_block_stacks_and_standardizes() {
        let seg = sine(500.0, 0.3, 48_000);
        let block = feature_block(&seg, &NormStats::identity()).unwrap();
        assert_eq!(block.frames, 93);
        let raw = mel_spectrogram(&seg).unwrap();
        assert_eq!(block.mel, raw);

        let stats = NormStats::from_blocks([&block]).unwrap();
        let std_block = feature_block(&seg, &stats).unwrap();
        let restated = NormStats::from_blocks([&std_block]).unwrap();
        for c in 0..2 {
            assert!(restated.mean[c].abs() < 0.01);
            assert!((restated.std[c] - 1.0).abs() < 0.05);
        }
    }
}
