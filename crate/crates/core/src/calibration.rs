//! Ground-truth BPF label construction from flight telemetry.
//!
//! The label path: motor PWM commands are mapped to BPF through a
//! measured calibration curve (monotone shape-preserving cubic through
//! the tachometer knots), the two fastest motors are kept and sorted
//! ascending, a linear battery-drift offset is applied across the
//! recording, and each motor track is lightly smoothed with a
//! constant-velocity Kalman filter. Labels land on the 31.25 fps audio
//! frame grid using nearest-in-time telemetry samples.

use std::path::Path;

use crate::audio::FRAME_RATE;
use crate::error::{Error, Result};

/// Monotone mapping from motor PWM command (microseconds) to BPF (Hz).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CalibrationCurve {
    /// `(pwm_us, bpf_hz)` knots, strictly increasing in both coordinates.
    knots: Vec<(f64, f64)>,
    /// Hermite slopes at the knots (Fritsch–Carlson).
    slopes: Vec<f64>,
}

/// Fit a calibration curve through measured `(pwm_us, mean_bpf_hz)` knots.
pub fn fit_calibration(measurements: &[(f64, f64)]) -> Result<CalibrationCurve> {
    if measurements.len() < 2 {
        return Err(Error::InvalidConfig(
            "calibration needs at least 2 knots".into(),
        ));
    }
    let mut knots = measurements.to_vec();
    knots.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for pair in knots.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(Error::InvalidConfig(format!(
                "duplicate or non-increasing pwm knot at {} us",
                pair[1].0
            )));
        }
        if pair[1].1 <= pair[0].1 {
            return Err(Error::NonMonotoneCalibration(format!(
                "bpf decreases between {} us and {} us",
                pair[0].0, pair[1].0
            )));
        }
    }
    let slopes = fritsch_carlson_slopes(&knots);
    Ok(CalibrationCurve { knots, slopes })
}

/// Knot slopes that keep the cubic Hermite interpolant monotone.
fn fritsch_carlson_slopes(knots: &[(f64, f64)]) -> Vec<f64> {
    let n = knots.len();
    let h: Vec<f64> = knots.windows(2).map(|p| p[1].0 - p[0].0).collect();
    let secant: Vec<f64> = knots
        .windows(2)
        .map(|p| (p[1].1 - p[0].1) / (p[1].0 - p[0].0))
        .collect();

    let mut m = vec![0.0; n];
    // One-sided three-point estimates at the ends, clamped to preserve shape.
    let end_slope = |h0: f64, h1: f64, s0: f64, s1: f64| -> f64 {
        let d = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
        if d.signum() != s0.signum() {
            0.0
        } else if s0.signum() != s1.signum() && d.abs() > 3.0 * s0.abs() {
            3.0 * s0
        } else {
            d
        }
    };
    if n == 2 {
        m[0] = secant[0];
        m[1] = secant[0];
        return m;
    }
    m[0] = end_slope(h[0], h[1], secant[0], secant[1]);
    m[n - 1] = end_slope(h[n - 2], h[n - 3], secant[n - 2], secant[n - 3]);
    for i in 1..n - 1 {
        let (s0, s1) = (secant[i - 1], secant[i]);
        if s0 * s1 <= 0.0 {
            m[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            m[i] = (w1 + w2) / (w1 / s0 + w2 / s1);
        }
    }
    m
}

impl CalibrationCurve {
    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// Interpolated BPF for a PWM command; clamps outside the knot domain.
    pub fn pwm_to_bpf(&self, pwm_us: f64) -> f64 {
        let first = self.knots[0];
        let last = *self.knots.last().unwrap();
        if pwm_us <= first.0 {
            return first.1;
        }
        if pwm_us >= last.0 {
            return last.1;
        }
        let i = match self
            .knots
            .binary_search_by(|k| k.0.partial_cmp(&pwm_us).unwrap())
        {
            Ok(exact) => return self.knots[exact].1,
            Err(ins) => ins - 1,
        };
        let (x0, y0) = self.knots[i];
        let (x1, y1) = self.knots[i + 1];
        let h = x1 - x0;
        let t = (pwm_us - x0) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * y0 + h10 * h * self.slopes[i] + h01 * y1 + h11 * h * self.slopes[i + 1]
    }

    /// Fit from a CSV of `pwm_us,bpf_hz` rows (header allowed).
    pub fn from_csv(path: impl AsRef<Path>) -> Result<CalibrationCurve> {
        let path = path.as_ref();
        let csv_err = |e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        };
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_path(path)
            .map_err(csv_err)?;
        let mut knots = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::InvalidInput(format!("short row in {}", path.display())))?
                    .trim()
                    .parse()
                    .map_err(|e| {
                        Error::InvalidInput(format!("bad number in {}: {e}", path.display()))
                    })
            };
            knots.push((parse(0)?, parse(1)?));
        }
        fit_calibration(&knots)
    }
}

/// Linear battery-drift offset across one recording.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DriftProfile {
    pub start_offset_hz: f64,
    pub end_offset_hz: f64,
}

impl DriftProfile {
    pub const MAX_OFFSET_HZ: f64 = 50.0;

    pub fn new(start_offset_hz: f64, end_offset_hz: f64) -> Result<Self> {
        if start_offset_hz.abs() > Self::MAX_OFFSET_HZ || end_offset_hz.abs() > Self::MAX_OFFSET_HZ
        {
            return Err(Error::InvalidConfig(format!(
                "drift offset exceeds {} Hz sanity bound",
                Self::MAX_OFFSET_HZ
            )));
        }
        Ok(DriftProfile {
            start_offset_hz,
            end_offset_hz,
        })
    }

    pub fn zero() -> Self {
        DriftProfile {
            start_offset_hz: 0.0,
            end_offset_hz: 0.0,
        }
    }

    /// Offset at time `t` of a recording lasting `duration_s`.
    pub fn offset_at(&self, t: f64, duration_s: f64) -> f64 {
        let a = (t / duration_s).clamp(0.0, 1.0);
        self.start_offset_hz + a * (self.end_offset_hz - self.start_offset_hz)
    }
}

/// Servo payload-latch position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ServoState {
    Holding,
    Released,
}

/// Coarse flight status from the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FlightStatus {
    Idle,
    Active,
}

/// One telemetry sample from the flight log.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryFrame {
    /// Seconds on the telemetry clock (strictly increasing within a log).
    pub timestamp: f64,
    /// Per-motor PWM command in microseconds.
    pub motor_pwm: [f64; 4],
    /// Position in meters relative to the microphone array, when logged.
    pub position: Option<[f64; 3]>,
    pub servo_state: ServoState,
    pub flight_status: FlightStatus,
}

impl TelemetryFrame {
    pub fn distance_m(&self) -> Option<f64> {
        self.position
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
    }
}

/// PWM command domain accepted from telemetry, in microseconds.
pub const PWM_RANGE_US: (f64, f64) = (1000.0, 2200.0);

/// Read a telemetry log CSV with columns
/// `timestamp_s,pwm1,pwm2,pwm3,pwm4,x,y,z,servo,status`.
///
/// `servo`: 0 = holding, 1 = released. `status`: 0 = idle, 1 = active.
/// Empty `x,y,z` fields mean position was not logged.
pub fn read_telemetry_csv(path: impl AsRef<Path>) -> Result<Vec<TelemetryFrame>> {
    let path = path.as_ref();
    let csv_err = |e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut frames: Vec<TelemetryFrame> = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let get = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| {
                Error::InvalidInput(format!("row {row}: missing column {i} in {}", path.display()))
            })
        };
        let num = |i: usize| -> Result<f64> {
            get(i)?.trim().parse().map_err(|e| {
                Error::InvalidInput(format!("row {row}: bad number in {}: {e}", path.display()))
            })
        };
        let timestamp = num(0)?;
        if let Some(prev) = frames.last() {
            if timestamp <= prev.timestamp {
                return Err(Error::InvalidInput(format!(
                    "row {row}: non-monotone timestamp {timestamp} in {}",
                    path.display()
                )));
            }
        }
        let mut motor_pwm = [0.0; 4];
        for (m, slot) in motor_pwm.iter_mut().enumerate() {
            let v = num(1 + m)?;
            if !(PWM_RANGE_US.0..=PWM_RANGE_US.1).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "row {row}: pwm {v} us outside [{}, {}]",
                    PWM_RANGE_US.0, PWM_RANGE_US.1
                )));
            }
            *slot = v;
        }
        let pos_fields: Vec<&str> = (5..8).map(get).collect::<Result<_>>()?;
        let position = if pos_fields.iter().all(|f| f.trim().is_empty()) {
            None
        } else {
            let mut p = [0.0; 3];
            for (j, f) in pos_fields.iter().enumerate() {
                p[j] = f.trim().parse().map_err(|e| {
                    Error::InvalidInput(format!("row {row}: bad position in {}: {e}", path.display()))
                })?;
            }
            Some(p)
        };
        let servo_state = if num(8)? > 0.5 {
            ServoState::Released
        } else {
            ServoState::Holding
        };
        let flight_status = if num(9)? > 0.5 {
            FlightStatus::Active
        } else {
            FlightStatus::Idle
        };
        frames.push(TelemetryFrame {
            timestamp,
            motor_pwm,
            position,
            servo_state,
            flight_status,
        });
    }
    Ok(frames)
}

/// Delivery instants: holding-to-released servo transitions, in telemetry time.
pub fn delivery_times_from_telemetry(telemetry: &[TelemetryFrame]) -> Vec<f64> {
    telemetry
        .windows(2)
        .filter(|w| w[0].servo_state == ServoState::Holding && w[1].servo_state == ServoState::Released)
        .map(|w| w[1].timestamp)
        .collect()
}

/// Per-audio-frame ground-truth labels on the 31.25 fps grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BpfLabelTrack {
    /// `(low, high)` BPF in Hz; zeros when inactive.
    pub bpf: Vec<[f64; 2]>,
    /// 0 or 1 per frame.
    pub activity: Vec<u8>,
    /// Drone-to-array distance per frame, when telemetry has positions.
    pub distance_m: Option<Vec<f64>>,
}

impl BpfLabelTrack {
    pub fn len(&self) -> usize {
        self.bpf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bpf.is_empty()
    }

    pub fn zeros(num_frames: usize) -> Self {
        BpfLabelTrack {
            bpf: vec![[0.0, 0.0]; num_frames],
            activity: vec![0; num_frames],
            distance_m: None,
        }
    }

    /// Write the label cache CSV
    /// `frame,time_s,bpf1,bpf2,activity,distance_m`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["frame", "time_s", "bpf1", "bpf2", "activity", "distance_m"])
            .map_err(csv_err)?;
        for i in 0..self.len() {
            let dist = self
                .distance_m
                .as_ref()
                .map(|d| d[i].to_string())
                .unwrap_or_default();
            w.write_record(&[
                i.to_string(),
                (i as f64 / FRAME_RATE).to_string(),
                self.bpf[i][0].to_string(),
                self.bpf[i][1].to_string(),
                self.activity[i].to_string(),
                dist,
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Read a label cache written by [`BpfLabelTrack::write_csv`].
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let csv_err = |e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut bpf = Vec::new();
        let mut activity = Vec::new();
        let mut distance: Vec<f64> = Vec::new();
        let mut any_distance = false;
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let num = |i: usize| -> Result<f64> {
                field(i).parse().map_err(|e| {
                    Error::InvalidInput(format!("bad float in {}: {e}", path.display()))
                })
            };
            bpf.push([num(2)?, num(3)?]);
            activity.push(if num(4)? > 0.5 { 1 } else { 0 });
            if field(5).is_empty() {
                distance.push(f64::NAN);
            } else {
                distance.push(num(5)?);
                any_distance = true;
            }
        }
        Ok(BpfLabelTrack {
            bpf,
            activity,
            distance_m: any_distance.then_some(distance),
        })
    }
}

/// Add the linearly interpolated drift offset to every nonzero BPF value.
pub fn apply_drift(track: &mut BpfLabelTrack, profile: &DriftProfile, duration_s: f64) {
    for (i, pair) in track.bpf.iter_mut().enumerate() {
        let t = i as f64 / FRAME_RATE;
        let offset = profile.offset_at(t, duration_s);
        for v in pair.iter_mut() {
            if *v != 0.0 {
                *v += offset;
            }
        }
    }
}

/// Forward one-dimensional constant-velocity Kalman filter.
///
/// `q` is the process variance (Hz^2/frame^2), `r` the measurement
/// variance (Hz^2). Zero or non-finite input frames are treated as gaps:
/// they pass through unchanged and the filter re-initializes on the next
/// valid sample.
pub fn kalman_smooth(series: &[f64], q: f64, r: f64) -> Vec<f64> {
    assert!(q > 0.0 && r > 0.0, "kalman variances must be positive");
    // State [value, velocity]; F = [[1, 1], [0, 1]]; H = [1, 0].
    // Discrete white-acceleration process noise.
    let qm = [q / 4.0, q / 2.0, q / 2.0, q];
    let mut out = Vec::with_capacity(series.len());
    let mut state: Option<([f64; 2], [f64; 4])> = None;
    for &z in series {
        if z == 0.0 || !z.is_finite() {
            state = None;
            out.push(z);
            continue;
        }
        match state.take() {
            None => {
                state = Some(([z, 0.0], [r, 0.0, 0.0, r]));
                out.push(z);
            }
            Some((x, p)) => {
                // Predict.
                let xp = [x[0] + x[1], x[1]];
                let pp = [
                    p[0] + p[1] + p[2] + p[3] + qm[0],
                    p[1] + p[3] + qm[1],
                    p[2] + p[3] + qm[2],
                    p[3] + qm[3],
                ];
                // Update with scalar measurement of the first component.
                let s = pp[0] + r;
                let k = [pp[0] / s, pp[2] / s];
                let innov = z - xp[0];
                let xn = [xp[0] + k[0] * innov, xp[1] + k[1] * innov];
                let pn = [
                    (1.0 - k[0]) * pp[0],
                    (1.0 - k[0]) * pp[1],
                    pp[2] - k[1] * pp[0],
                    pp[3] - k[1] * pp[1],
                ];
                out.push(xn[0]);
                state = Some((xn, pn));
            }
        }
    }
    out
}

/// Default Kalman process variance for label smoothing.
pub const KALMAN_Q_DEFAULT: f64 = 1.0;
/// Default Kalman measurement variance for label smoothing.
pub const KALMAN_R_DEFAULT: f64 = 25.0;

/// Maximum telemetry gap tolerated inside an active flight, seconds.
pub const MAX_TELEMETRY_GAP_S: f64 = 1.0;
/// Half-width of the activity association window around a frame, seconds.
pub const ACTIVITY_WINDOW_S: f64 = 0.1;

/// Result of a label build: the track plus any coverage warnings.
#[derive(Debug, Clone)]
pub struct LabelBuild {
    pub track: BpfLabelTrack,
    pub warnings: Vec<String>,
}

/// Build per-frame labels for `num_frames` audio frames.
///
/// `sync_offset_s` converts telemetry timestamps to audio time:
/// `audio_time = telemetry_time + sync_offset_s`.
pub fn build_labels(
    telemetry: &[TelemetryFrame],
    curve: &CalibrationCurve,
    drift: &DriftProfile,
    sync_offset_s: f64,
    num_frames: usize,
) -> LabelBuild {
    let mut warnings = Vec::new();
    let mut track = BpfLabelTrack::zeros(num_frames);
    if telemetry.is_empty() {
        warnings.push("telemetry log is empty; labels all zero".into());
        return LabelBuild { track, warnings };
    }

    let audio_times: Vec<f64> = telemetry
        .iter()
        .map(|s| s.timestamp + sync_offset_s)
        .collect();
    let duration_s = num_frames as f64 / FRAME_RATE;
    if audio_times[audio_times.len() - 1] < 0.0 || audio_times[0] > duration_s {
        warnings.push("telemetry does not overlap the audio span; labels all zero".into());
        return LabelBuild { track, warnings };
    }

    let mut distance = vec![f64::NAN; num_frames];
    let mut any_distance = false;
    let mut gap_warned = false;
    let mut cursor = 0usize;
    for i in 0..num_frames {
        let t = i as f64 / FRAME_RATE;
        // Advance to the nearest telemetry sample in audio time.
        while cursor + 1 < audio_times.len()
            && (audio_times[cursor + 1] - t).abs() <= (audio_times[cursor] - t).abs()
        {
            cursor += 1;
        }
        let sample = &telemetry[cursor];
        let dt = (audio_times[cursor] - t).abs();
        if dt > MAX_TELEMETRY_GAP_S / 2.0 {
            if !gap_warned && sample.flight_status == FlightStatus::Active {
                warnings.push(format!(
                    "telemetry gap over {MAX_TELEMETRY_GAP_S} s near frame {i}; activity zeroed"
                ));
                gap_warned = true;
            }
            continue;
        }

        let active_nearby = nearby_active(telemetry, &audio_times, cursor, t);
        if !active_nearby {
            continue;
        }
        track.activity[i] = 1;
        let mut bpfs: Vec<f64> = sample
            .motor_pwm
            .iter()
            .map(|&pwm| curve.pwm_to_bpf(pwm))
            .collect();
        bpfs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Two fastest motors, ascending.
        track.bpf[i] = [bpfs[2], bpfs[3]];
        if let Some(d) = sample.distance_m() {
            distance[i] = d;
            any_distance = true;
        }
    }

    apply_drift(&mut track, drift, duration_s);

    for m in 0..2 {
        let series: Vec<f64> = track.bpf.iter().map(|p| p[m]).collect();
        let smooth = kalman_smooth(&series, KALMAN_Q_DEFAULT, KALMAN_R_DEFAULT);
        for (pair, v) in track.bpf.iter_mut().zip(smooth) {
            pair[m] = v;
        }
    }
    // Smoothing can nudge the pair past each other; restore the order.
    for pair in track.bpf.iter_mut() {
        if pair[0] > pair[1] {
            pair.swap(0, 1);
        }
    }

    if any_distance {
        track.distance_m = Some(distance);
    }
    LabelBuild { track, warnings }
}

/// Is any active-flight sample within the activity window of frame time `t`?
fn nearby_active(
    telemetry: &[TelemetryFrame],
    audio_times: &[f64],
    cursor: usize,
    t: f64,
) -> bool {
    let lo = t - ACTIVITY_WINDOW_S;
    let hi = t + ACTIVITY_WINDOW_S;
    let check = |i: usize| {
        audio_times[i] >= lo && audio_times[i] <= hi
            && telemetry[i].flight_status == FlightStatus::Active
    };
    if check(cursor) {
        return true;
    }
    let mut i = cursor;
    while i > 0 && audio_times[i - 1] >= lo {
        i -= 1;
        if check(i) {
            return true;
        }
    }
    let mut i = cursor;
    while i + 1 < audio_times.len() && audio_times[i + 1] <= hi {
        i += 1;
        if check(i) {
            return true;
        }
    }
    false
}
