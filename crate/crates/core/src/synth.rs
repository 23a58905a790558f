//! Synthetic rotor soundscapes with exact ground-truth labels.
//!
//! Each rotor is an additive harmonic source whose fundamental follows a
//! configurable trajectory: a base BPF, mean-reverting jitter, and step
//! events with exponential settling (a payload release is a downward
//! step applied to every rotor). A high-order harmonic near 5 kHz stands
//! in for the rotor's high-frequency vibration component, which is what
//! keeps estimation alive when low-frequency noise masks the
//! fundamentals. Amplitude falls off as `1 / max(distance, 1 m)`.
//!
//! The module also provides noise beds (white, low-passed "urban", or a
//! user file), SNR-controlled mixing, and the label-preserving
//! augmentation stack (background noise, gain, time masking, frequency
//! masking) with parameters re-randomized every second.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio::{AudioSegment, ChannelSelect, FRAME_RATE, SAMPLE_RATE};
use crate::calibration::BpfLabelTrack;
use crate::error::{Error, Result};

/// Base amplitude of a rotor fundamental at 1 m.
const ROTOR_AMP: f64 = 0.1;
/// Settling time constant for scene-level delivery steps, seconds.
const DELIVERY_TAU_S: f64 = 0.3;
/// Correlation time of the BPF jitter process, seconds.
const JITTER_CORR_S: f64 = 1.0;

/// One rotor's frequency trajectory and voicing.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RotorTraj {
    /// Nominal BPF in Hz; must lie in (0, 800).
    pub base_bpf: f64,
    /// Stationary standard deviation of the BPF jitter, Hz.
    #[serde(default)]
    pub jitter_sigma: f64,
    /// Number of harmonics, amplitude rolling off as 1/h.
    pub harmonics: usize,
    /// Target frequency of the high-order vibration line, Hz.
    #[serde(default = "default_mode2_freq")]
    pub mode2_freq: f64,
    /// Amplitude of that line relative to the fundamental.
    #[serde(default = "default_mode2_gain")]
    pub mode2_gain: f64,
    /// Overall level of this rotor relative to the others.
    #[serde(default = "default_rotor_gain")]
    pub gain: f64,
    /// `(time_s, delta_hz, settle_tau_s)` steps added to the trajectory.
    #[serde(default)]
    pub step_events: Vec<(f64, f64, f64)>,
}

fn default_mode2_freq() -> f64 {
    5000.0
}
fn default_mode2_gain() -> f64 {
    0.3
}
fn default_rotor_gain() -> f64 {
    1.0
}

impl RotorTraj {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_bpf > 0.0 && self.base_bpf < 800.0) {
            return Err(Error::InvalidConfig(format!(
                "base_bpf {} outside (0, 800)",
                self.base_bpf
            )));
        }
        if self.harmonics < 1 {
            return Err(Error::InvalidConfig("harmonics must be >= 1".into()));
        }
        if self.step_events.iter().any(|&(_, _, tau)| tau <= 0.0) {
            return Err(Error::InvalidConfig("settle tau must be positive".into()));
        }
        Ok(())
    }

    /// Harmonic index used to render the ~5 kHz line.
    pub fn mode2_harmonic(&self) -> usize {
        (self.mode2_freq / self.base_bpf).round().max(1.0) as usize
    }
}

/// Kind of background noise bed.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseKind {
    /// Flat-spectrum Gaussian noise.
    White,
    /// Low-frequency-weighted noise: white noise through a windowed-sinc
    /// low-pass, a stand-in for traffic-like ambience.
    Urban {
        #[serde(default = "default_urban_cutoff")]
        cutoff_hz: f64,
    },
    /// A caller-supplied mono 16 kHz WAV, tiled as needed.
    File { path: PathBuf },
}

fn default_urban_cutoff() -> f64 {
    1500.0
}

/// Noise bed plus mixing level for a scene.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub snr_db: f64,
}

/// Parametric description of a synthetic multirotor scene.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    /// Two to four rotors.
    pub rotors: Vec<RotorTraj>,
    pub duration_s: f64,
    /// `(time_s, meters)` breakpoints, linearly interpolated; empty means
    /// a constant 10 m.
    #[serde(default)]
    pub distance_traj: Vec<(f64, f64)>,
    /// Optional background noise mixed at a fixed SNR.
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    /// `(time_s, bpf_drop_hz)` payload releases applied to all rotors.
    #[serde(default)]
    pub delivery: Vec<(f64, f64)>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.rotors.len()) {
            return Err(Error::InvalidConfig(format!(
                "scene needs 2-4 rotors, got {}",
                self.rotors.len()
            )));
        }
        for rotor in &self.rotors {
            rotor.validate()?;
        }
        if self.duration_s < 3.0 {
            return Err(Error::InvalidConfig(format!(
                "duration must be >= 3 s, got {}",
                self.duration_s
            )));
        }
        if !self.duration_s.is_finite() {
            return Err(Error::InvalidConfig("duration must be finite".into()));
        }
        if let Some(noise) = &self.noise {
            if !noise.snr_db.is_finite() {
                return Err(Error::InvalidConfig("snr must be finite".into()));
            }
        }
        for &(t, _) in &self.delivery {
            if !(0.0..self.duration_s).contains(&t) {
                return Err(Error::InvalidConfig(format!(
                    "delivery time {t} outside scene duration"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<SceneSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let spec: SceneSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    fn distance_at(&self, t: f64) -> f64 {
        if self.distance_traj.is_empty() {
            return 10.0;
        }
        let pts = &self.distance_traj;
        if t <= pts[0].0 {
            return pts[0].1;
        }
        for pair in pts.windows(2) {
            if t <= pair[1].0 {
                let a = (t - pair[0].0) / (pair[1].0 - pair[0].0);
                return pair[0].1 + a * (pair[1].1 - pair[0].1);
            }
        }
        pts[pts.len() - 1].1
    }
}

/// A rendered scene: audio, exact frame labels, and delivery times.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub audio: AudioSegment,
    pub labels: BpfLabelTrack,
    pub delivery_times_s: Vec<f64>,
}

/// Render a scene deterministically from its spec and embedded seed.
pub fn render_scene(spec: &SceneSpec) -> Result<RenderedScene> {
    spec.validate()?;
    let num_samples = (spec.duration_s * SAMPLE_RATE as f64).round() as usize;
    let num_frames = num_samples / crate::audio::HOP_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Per-rotor BPF trajectory on the frame grid (plus one extra point so
    // per-sample interpolation covers the tail).
    let grid_len = num_frames + 2;
    let dt = 1.0 / FRAME_RATE;
    let rho = (-dt / JITTER_CORR_S).exp();
    let mut trajectories: Vec<Vec<f64>> = Vec::with_capacity(spec.rotors.len());
    for rotor in &spec.rotors {
        let innovation = Normal::new(0.0, rotor.jitter_sigma * (1.0 - rho * rho).sqrt())
            .map_err(|e| Error::InvalidConfig(format!("bad jitter sigma: {e}")))?;
        let mut jitter = if rotor.jitter_sigma > 0.0 {
            Normal::new(0.0, rotor.jitter_sigma).unwrap().sample(&mut rng)
        } else {
            0.0
        };
        let mut traj = Vec::with_capacity(grid_len);
        for k in 0..grid_len {
            let t = k as f64 * dt;
            let mut f = rotor.base_bpf + jitter;
            for &(t0, delta, tau) in &rotor.step_events {
                if t >= t0 {
                    f += delta * (1.0 - (-(t - t0) / tau).exp());
                }
            }
            for &(t0, drop) in &spec.delivery {
                if t >= t0 {
                    f -= drop * (1.0 - (-(t - t0) / DELIVERY_TAU_S).exp());
                }
            }
            traj.push(f.max(1.0));
            if rotor.jitter_sigma > 0.0 {
                jitter = rho * jitter + innovation.sample(&mut rng);
            }
        }
        trajectories.push(traj);
    }

    // Random initial phase per rotor, shared by its harmonics.
    let phases0: Vec<f64> = spec
        .rotors
        .iter()
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();

    let mut samples = vec![0.0f64; num_samples];
    for (r, rotor) in spec.rotors.iter().enumerate() {
        let traj = &trajectories[r];
        let mode2_h = rotor.mode2_harmonic();
        let mut phase = phases0[r];
        for (i, slot) in samples.iter_mut().enumerate() {
            let pos = i as f64 / crate::audio::HOP_SIZE as f64;
            let k = (pos as usize).min(grid_len - 2);
            let frac = pos - k as f64;
            let f_inst = traj[k] + frac * (traj[k + 1] - traj[k]);
            phase += std::f64::consts::TAU * f_inst / SAMPLE_RATE as f64;
            let dist = spec.distance_at(i as f64 / SAMPLE_RATE as f64);
            let amp = ROTOR_AMP * rotor.gain / dist.max(1.0);
            let mut v = 0.0;
            for h in 1..=rotor.harmonics {
                v += (phase * h as f64).sin() / h as f64;
            }
            v += rotor.mode2_gain * (phase * mode2_h as f64).sin();
            *slot += amp * v;
        }
    }

    let mut audio = AudioSegment::new(samples, 0.0)?;
    if let Some(noise) = &spec.noise {
        let bed = render_noise(&noise.kind, num_samples, spec.seed ^ 0x9e3779b97f4a7c15)?;
        audio = mix_at_snr(&audio, &bed, noise.snr_db)?;
    }

    // Labels: exact trajectory values on the frame grid, two largest
    // sorted ascending, activity 1 everywhere (the drone is always
    // present in a rendered scene).
    let mut bpf = Vec::with_capacity(num_frames);
    let mut distance = Vec::with_capacity(num_frames);
    for i in 0..num_frames {
        let mut values: Vec<f64> = trajectories.iter().map(|t| t[i]).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let top = [values[values.len() - 2], values[values.len() - 1]];
        bpf.push(top);
        distance.push(spec.distance_at(i as f64 / FRAME_RATE));
    }
    let labels = BpfLabelTrack {
        bpf,
        activity: vec![1; num_frames],
        distance_m: Some(distance),
    };
    Ok(RenderedScene {
        audio,
        labels,
        delivery_times_s: spec.delivery.iter().map(|&(t, _)| t).collect(),
    })
}

/// Generate a unit-RMS noise bed of `num_samples`.
pub fn render_noise(kind: &NoiseKind, num_samples: usize, seed: u64) -> Result<AudioSegment> {
    match kind {
        NoiseKind::White => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let samples: Vec<f64> = (0..num_samples).map(|_| normal.sample(&mut rng)).collect();
            AudioSegment::new(normalize_rms(samples), 0.0)
        }
        NoiseKind::Urban { cutoff_hz } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let white: Vec<f64> = (0..num_samples).map(|_| normal.sample(&mut rng)).collect();
            let filtered = lowpass_fir(&white, *cutoff_hz);
            AudioSegment::new(normalize_rms(filtered), 0.0)
        }
        NoiseKind::File { path } => {
            let seg = AudioSegment::read_wav(path, ChannelSelect::Average)?;
            let mut samples = Vec::with_capacity(num_samples);
            while samples.len() < num_samples {
                let take = (num_samples - samples.len()).min(seg.len());
                samples.extend_from_slice(&seg.samples()[..take]);
            }
            AudioSegment::new(samples, 0.0)
        }
    }
}

fn normalize_rms(mut samples: Vec<f64>) -> Vec<f64> {
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt();
    if rms > 0.0 {
        for s in samples.iter_mut() {
            *s /= rms;
        }
    }
    samples
}

/// Windowed-sinc FIR low-pass (257 taps, Hann window).
fn lowpass_fir(input: &[f64], cutoff_hz: f64) -> Vec<f64> {
    let taps = 257usize;
    let half = (taps / 2) as isize;
    let fc = (cutoff_hz / SAMPLE_RATE as f64).clamp(0.001, 0.499);
    let mut kernel: Vec<f64> = (0..taps)
        .map(|i| {
            let m = i as isize - half;
            let sinc = if m == 0 {
                2.0 * fc
            } else {
                (std::f64::consts::TAU * fc * m as f64).sin() / (std::f64::consts::PI * m as f64)
            };
            let w = 0.5
                * (1.0 - (std::f64::consts::TAU * i as f64 / (taps - 1) as f64).cos());
            sinc * w
        })
        .collect();
    let sum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    let mut out = vec![0.0; input.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &k) in kernel.iter().enumerate() {
            let src = i as isize + j as isize - half;
            if (0..input.len() as isize).contains(&src) {
                acc += k * input[src as usize];
            }
        }
        *slot = acc;
    }
    out
}

/// Clip fraction above which [`mix_at_snr`] logs a warning.
const CLIP_WARN_FRACTION: f64 = 0.01;

/// Mix `noise` into `signal` so the RMS ratio hits `snr_db`; the sum is
/// clipped to [-1, 1] and a clip fraction above 1% logs a warning.
pub fn mix_at_snr(signal: &AudioSegment, noise: &AudioSegment, snr_db: f64) -> Result<AudioSegment> {
    let rms_s = signal.rms();
    if rms_s <= 0.0 {
        return Err(Error::InvalidInput("zero-RMS signal in mix".into()));
    }
    let tiled: Vec<f64> = if noise.len() >= signal.len() {
        noise.samples()[..signal.len()].to_vec()
    } else {
        let mut v = Vec::with_capacity(signal.len());
        while v.len() < signal.len() {
            let take = (signal.len() - v.len()).min(noise.len());
            v.extend_from_slice(&noise.samples()[..take]);
        }
        v
    };
    let rms_n = (tiled.iter().map(|s| s * s).sum::<f64>() / tiled.len() as f64).sqrt();
    if rms_n <= 0.0 {
        return Err(Error::InvalidInput("zero-RMS noise in mix".into()));
    }
    let scale = rms_s / (rms_n * 10f64.powf(snr_db / 20.0));
    let mut clipped = 0usize;
    let mixed: Vec<f64> = signal
        .samples()
        .iter()
        .zip(&tiled)
        .map(|(&s, &n)| {
            let v = s + scale * n;
            if v.abs() > 1.0 {
                clipped += 1;
            }
            v.clamp(-1.0, 1.0)
        })
        .collect();
    let frac = clipped as f64 / mixed.len() as f64;
    if frac > CLIP_WARN_FRACTION {
        log::warn!("mix clipped {:.2}% of samples", frac * 100.0);
    }
    AudioSegment::new(mixed, signal.start_time)
}

/// Ranges and probabilities of the four augmentation transforms.
///
/// Parameters are re-drawn for every second of audio; each transform
/// fires independently with its probability.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AugmentPolicy {
    pub noise_prob: f64,
    /// SNR range for added background noise, dB.
    pub noise_snr_db: (f64, f64),
    pub noise_kind: NoiseKind,
    pub gain_prob: f64,
    /// Gain range, dB.
    pub gain_db: (f64, f64),
    pub time_mask_prob: f64,
    /// Masked span, seconds.
    pub time_mask_s: (f64, f64),
    pub freq_mask_prob: f64,
    /// Width of the stopped band, Hz; the band lies inside [0, 7000].
    pub freq_mask_width_hz: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            noise_prob: 0.5,
            noise_snr_db: (20.0, 30.0),
            noise_kind: NoiseKind::White,
            gain_prob: 0.5,
            gain_db: (-5.0, 5.0),
            time_mask_prob: 0.5,
            time_mask_s: (0.2, 0.5),
            freq_mask_prob: 0.5,
            freq_mask_width_hz: (200.0, 1000.0),
        }
    }
}

impl AugmentPolicy {
    /// All probabilities zero: augmentation becomes the identity.
    pub fn identity() -> Self {
        AugmentPolicy {
            noise_prob: 0.0,
            gain_prob: 0.0,
            time_mask_prob: 0.0,
            freq_mask_prob: 0.0,
            ..AugmentPolicy::default()
        }
    }
}

/// Upper edge of the frequency-mask band, Hz.
const FREQ_MASK_MAX_HZ: f64 = 7000.0;

/// Apply the augmentation stack, deterministic given `seed`. Labels are
/// unchanged by construction: every transform preserves time alignment.
pub fn augment(segment: &AudioSegment, policy: &AugmentPolicy, seed: u64) -> Result<AudioSegment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = segment.samples().to_vec();
    let chunk = SAMPLE_RATE as usize;
    let mut planner = FftPlanner::new();

    let num_chunks = samples.len().div_ceil(chunk);
    for c in 0..num_chunks {
        let start = c * chunk;
        let end = ((c + 1) * chunk).min(samples.len());
        let span = &mut samples[start..end];
        let len = span.len();

        // 1) light background noise
        if rng.gen_bool(policy.noise_prob) {
            let snr = rng.gen_range(policy.noise_snr_db.0..=policy.noise_snr_db.1);
            let noise_seed = rng.gen::<u64>();
            let bed = render_noise(&policy.noise_kind, len.max(crate::audio::WINDOW_SIZE), noise_seed)?;
            let rms_s = (span.iter().map(|s| s * s).sum::<f64>() / len as f64).sqrt();
            if rms_s > 0.0 {
                let scale = rms_s / 10f64.powf(snr / 20.0);
                for (s, n) in span.iter_mut().zip(bed.samples()) {
                    *s = (*s + scale * n).clamp(-1.0, 1.0);
                }
            }
        }

        // 2) random gain
        if rng.gen_bool(policy.gain_prob) {
            let db = rng.gen_range(policy.gain_db.0..=policy.gain_db.1);
            let g = 10f64.powf(db / 20.0);
            for s in span.iter_mut() {
                *s = (*s * g).clamp(-1.0, 1.0);
            }
        }

        // 3) time masking
        if rng.gen_bool(policy.time_mask_prob) {
            let dur_s = rng.gen_range(policy.time_mask_s.0..=policy.time_mask_s.1);
            let dur = ((dur_s * SAMPLE_RATE as f64) as usize).min(len);
            if dur > 0 {
                let start_in = rng.gen_range(0..=len - dur);
                for s in span[start_in..start_in + dur].iter_mut() {
                    *s = 0.0;
                }
            }
        }

        // 4) frequency masking
        if rng.gen_bool(policy.freq_mask_prob) {
            let width = rng
                .gen_range(policy.freq_mask_width_hz.0..=policy.freq_mask_width_hz.1)
                .min(FREQ_MASK_MAX_HZ);
            let lo = rng.gen_range(0.0..=FREQ_MASK_MAX_HZ - width);
            stop_band(span, lo, lo + width, &mut planner);
        }
    }

    AudioSegment::new(samples, segment.start_time)
}

/// Zero the spectral band [lo_hz, hi_hz] of a span in place.
fn stop_band(span: &mut [f64], lo_hz: f64, hi_hz: f64, planner: &mut FftPlanner<f64>) {
    let n = span.len();
    if n == 0 {
        return;
    }
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<f64>> = span.iter().map(|&s| Complex::new(s, 0.0)).collect();
    fft.process(&mut buf);
    let hz_per_bin = SAMPLE_RATE as f64 / n as f64;
    for (k, slot) in buf.iter_mut().enumerate() {
        let f = if k <= n / 2 {
            k as f64 * hz_per_bin
        } else {
            (n - k) as f64 * hz_per_bin
        };
        if f >= lo_hz && f <= hi_hz {
            *slot = Complex::new(0.0, 0.0);
        }
    }
    ifft.process(&mut buf);
    for (s, c) in span.iter_mut().zip(&buf) {
        *s = c.re / n as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_rotor_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            rotors: vec![
                RotorTraj {
                    base_bpf: 220.0,
                    jitter_sigma: 0.0,
                    harmonics: 8,
                    mode2_freq: 5000.0,
                    mode2_gain: 0.3,
                    gain: 1.0,
                    step_events: vec![],
                },
                RotorTraj {
                    base_bpf: 260.0,
                    jitter_sigma: 0.0,
                    harmonics: 8,
                    mode2_freq: 5000.0,
                    mode2_gain: 0.3,
                    gain: 1.0,
                    step_events: vec![],
                },
            ],
            duration_s: 5.0,
            distance_traj: vec![(0.0, 10.0)],
            noise: None,
            delivery: vec![],
            seed,
        }
    }

    #[test]
    fn validates_spec_fields() {
        let mut spec = two_rotor_spec(1);
        spec.duration_s = 1.0;
        assert!(spec.validate().is_err());
        let mut spec = two_rotor_spec(1);
        spec.rotors.truncate(1);
        assert!(spec.validate().is_err());
        let mut spec = two_rotor_spec(1);
        spec.delivery = vec![(99.0, 30.0)];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn renders_deterministically() {
        let spec = two_rotor_spec(42);
        let a = render_scene(&spec).unwrap();
        let b = render_scene(&spec).unwrap();
        assert_eq!(a.audio.samples(), b.audio.samples());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn labels_are_top_two_sorted() {
        let mut spec = two_rotor_spec(7);
        spec.rotors.push(RotorTraj {
            base_bpf: 180.0,
            jitter_sigma: 0.0,
            harmonics: 4,
            mode2_freq: 5000.0,
            mode2_gain: 0.0,
            gain: 1.0,
            step_events: vec![],
        });
        let scene = render_scene(&spec).unwrap();
        for pair in &scene.labels.bpf {
            assert!((pair[0] - 220.0).abs() < 1e-9);
            assert!((pair[1] - 260.0).abs() < 1e-9);
        }
    }

    #[test]
    fn doubling_distance_halves_rms() {
        let mut near = two_rotor_spec(3);
        near.distance_traj = vec![(0.0, 20.0)];
        let mut far = two_rotor_spec(3);
        far.distance_traj = vec![(0.0, 40.0)];
        let a = render_scene(&near).unwrap().audio;
        let b = render_scene(&far).unwrap().audio;
        let ratio = b.rms() / a.rms();
        assert!((ratio - 0.5).abs() < 0.005, "rms ratio {ratio}");
    }

    #[test]
    fn delivery_drops_label_means() {
        let mut spec = two_rotor_spec(5);
        spec.duration_s = 20.0;
        spec.delivery = vec![(10.0, 30.0)];
        let scene = render_scene(&spec).unwrap();
        let frames = scene.labels.len();
        let split = (10.0 * FRAME_RATE) as usize;
        // Skip the settling span right after the step.
        let settle = (5.0 * DELIVERY_TAU_S * FRAME_RATE) as usize;
        let mean = |range: std::ops::Range<usize>| {
            let vals: Vec<f64> = range.map(|i| scene.labels.bpf[i][0]).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let before = mean(0..split);
        let after = mean(split + settle..frames);
        assert!(
            ((before - after) - 30.0).abs() < 1.0,
            "drop {} Hz",
            before - after
        );
        assert_eq!(scene.delivery_times_s, vec![10.0]);
    }

    #[test]
    fn mix_reaches_requested_snr() {
        let spec = two_rotor_spec(9);
        let scene = render_scene(&spec).unwrap();
        let noise = render_noise(&NoiseKind::White, scene.audio.len(), 1234).unwrap();
        for snr in [0.0, 20.0] {
            let mixed = mix_at_snr(&scene.audio, &noise, snr).unwrap();
            // Recover the scaled noise and recompute the ratio.
            let resid: Vec<f64> = mixed
                .samples()
                .iter()
                .zip(scene.audio.samples())
                .map(|(m, s)| m - s)
                .collect();
            let rms_n = (resid.iter().map(|s| s * s).sum::<f64>() / resid.len() as f64).sqrt();
            let measured = 20.0 * (scene.audio.rms() / rms_n).log10();
            assert!(
                (measured - snr).abs() < 0.01,
                "requested {snr} dB, measured {measured} dB"
            );
        }
    }

    #[test]
    fn mix_scale_factors() {
        // Equal-RMS inputs: 0 dB leaves the noise unscaled, +20 dB scales
        // it by 0.1.
        let s = AudioSegment::new(vec![0.5; 4096], 0.0).unwrap();
        let n: Vec<f64> = (0..4096).map(|i| if i % 2 == 0 { 0.5 } else { -0.5 }).collect();
        let n = AudioSegment::new(n, 0.0).unwrap();
        let at0 = mix_at_snr(&s, &n, 0.0).unwrap();
        assert!((at0.samples()[0] - 1.0).abs() < 1e-12);
        assert!((at0.samples()[1] - 0.0).abs() < 1e-12);
        let at20 = mix_at_snr(&s, &n, 20.0).unwrap();
        assert!((at20.samples()[0] - 0.55).abs() < 1e-12);
        assert!((at20.samples()[1] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn mix_rejects_silent_signal() {
        let s = AudioSegment::new(vec![0.0; 4096], 0.0).unwrap();
        let n = AudioSegment::new(vec![0.1; 4096], 0.0).unwrap();
        assert!(mix_at_snr(&s, &n, 10.0).is_err());
    }

    #[test]
    fn augment_identity_when_probs_zero() {
        let spec = two_rotor_spec(11);
        let scene = render_scene(&spec).unwrap();
        let out = augment(&scene.audio, &AugmentPolicy::identity(), 99).unwrap();
        assert_eq!(out.samples(), scene.audio.samples());
    }

    #[test]
    fn augment_gain_only_scales_rms() {
        let spec = two_rotor_spec(13);
        let scene = render_scene(&spec).unwrap();
        let policy = AugmentPolicy {
            gain_prob: 1.0,
            gain_db: (5.0, 5.0),
            ..AugmentPolicy::identity()
        };
        let out = augment(&scene.audio, &policy, 1).unwrap();
        let ratio = out.rms() / scene.audio.rms();
        assert!((ratio - 10f64.powf(0.25)).abs() < 1e-3, "ratio {ratio}");
    }

    #[test]
    fn augment_time_mask_zeroes_span() {
        let spec = two_rotor_spec(17);
        let scene = render_scene(&spec).unwrap();
        let policy = AugmentPolicy {
            time_mask_prob: 1.0,
            time_mask_s: (0.3, 0.3),
            ..AugmentPolicy::identity()
        };
        let out = augment(&scene.audio, &policy, 2).unwrap();
        // Find the masked spans: exact zeros over ~0.3 s.
        let mask_len = (0.3 * SAMPLE_RATE as f64) as usize;
        let mut zero_runs = 0;
        let mut run = 0;
        for (o, s) in out.samples().iter().zip(scene.audio.samples()) {
            if *o == 0.0 && *s != 0.0 {
                run += 1;
            } else {
                if run >= mask_len - 2 {
                    zero_runs += 1;
                }
                if *o != 0.0 {
                    assert_eq!(o, s, "unmasked samples must be untouched");
                }
                run = 0;
            }
        }
        if run >= mask_len - 2 {
            zero_runs += 1;
        }
        assert!(zero_runs >= 1, "no masked span found");
    }

    #[test]
    fn augment_deterministic() {
        let spec = two_rotor_spec(19);
        let scene = render_scene(&spec).unwrap();
        let policy = AugmentPolicy::default();
        let a = augment(&scene.audio, &policy, 7).unwrap();
        let b = augment(&scene.audio, &policy, 7).unwrap();
        assert_eq!(a.samples(), b.samples());
        let c = augment(&scene.audio, &policy, 8).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn urban_noise_is_low_passed() {
        let white = render_noise(&NoiseKind::White, 32_768, 5).unwrap();
        let urban = render_noise(&NoiseKind::Urban { cutoff_hz: 1500.0 }, 32_768, 5).unwrap();
        let band_power = |seg: &AudioSegment, lo: f64, hi: f64| {
            let power = crate::features::power_frames(seg, 2048);
            let hz_per_bin = SAMPLE_RATE as f64 / 2048.0;
            let (b0, b1) = ((lo / hz_per_bin) as usize, (hi / hz_per_bin) as usize);
            power
                .rows()
                .into_iter()
                .map(|row| row.slice(ndarray::s![b0..b1]).sum())
                .sum::<f64>()
        };
        // Same unit RMS, but urban noise has almost no energy above 2 kHz.
        let hi_white = band_power(&white, 3000.0, 7500.0);
        let hi_urban = band_power(&urban, 3000.0, 7500.0);
        assert!(
            hi_urban < hi_white * 1e-3,
            "urban high-band power {hi_urban} vs white {hi_white}"
        );
    }
}
