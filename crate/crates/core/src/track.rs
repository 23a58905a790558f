//! Estimated BPF tracks: the interface between estimators and the
//! delivery detector.

use std::path::Path;

use crate::audio::FRAME_RATE;
use crate::error::{Error, Result};

/// Per-frame estimate of the two dominant rotor BPFs plus drone activity.
///
/// BPF pairs are sorted ascending within each frame. Frames judged
/// inactive carry zeros for both BPF values. `single_source` marks frames
/// where the estimator could not find a second, separated fundamental and
/// reported the same one twice.
#[derive(Debug, Clone, PartialEq)]
pub struct BpfTrack {
    /// `(low, high)` BPF in Hz per frame; zeros when inactive.
    pub bpf: Vec<[f64; 2]>,
    /// Activity score in `[0, 1]` per frame.
    pub activity: Vec<f64>,
    /// Drone-to-microphone distance in meters, when known.
    pub distance_m: Option<Vec<f64>>,
    /// Frames where both outputs lock to one fundamental.
    pub single_source: Option<Vec<bool>>,
}

impl BpfTrack {
    pub fn new(bpf: Vec<[f64; 2]>, activity: Vec<f64>) -> Result<Self> {
        if bpf.len() != activity.len() {
            return Err(Error::ShapeMismatch(format!(
                "bpf frames {} != activity frames {}",
                bpf.len(),
                activity.len()
            )));
        }
        Ok(BpfTrack {
            bpf,
            activity,
            distance_m: None,
            single_source: None,
        })
    }

    pub fn len(&self) -> usize {
        self.bpf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bpf.is_empty()
    }

    /// Frame center time in seconds.
    pub fn time_of(&self, frame: usize) -> f64 {
        frame as f64 / FRAME_RATE
    }

    /// BPF series for one motor index (0 = lower, 1 = higher).
    pub fn motor(&self, m: usize) -> impl Iterator<Item = f64> + '_ {
        self.bpf.iter().map(move |pair| pair[m])
    }

    /// Write as CSV `frame,time_s,bpf1,bpf2,activity`.
    ///
    /// Floats use the shortest round-trippable representation so a
    /// written track reads back bit-identical.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        w.write_record(["frame", "time_s", "bpf1", "bpf2", "activity"])
            .map_err(|e| Error::Csv {
                path: path.display().to_string(),
                source: e,
            })?;
        for (i, (pair, act)) in self.bpf.iter().zip(&self.activity).enumerate() {
            w.write_record(&[
                i.to_string(),
                self.time_of(i).to_string(),
                pair[0].to_string(),
                pair[1].to_string(),
                act.to_string(),
            ])
            .map_err(|e| Error::Csv {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Read a track written by [`BpfTrack::write_csv`].
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let csv_err = |e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut bpf = Vec::new();
        let mut activity = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| {
                        Error::InvalidInput(format!("short row in {}", path.display()))
                    })?
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("bad float in {}: {e}", path.display())))
            };
            bpf.push([field(2)?, field(3)?]);
            activity.push(field(4)?);
        }
        BpfTrack::new(bpf, activity)
    }
}
