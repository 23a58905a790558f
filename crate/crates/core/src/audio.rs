//! Audio segments and WAV I/O.
//!
//! All analysis in this crate runs on 16 kHz mono audio. A segment is a
//! validated slice of samples together with its position in the source
//! recording; the framing constants shared by every downstream stage
//! (window, hop, frame rate) live here.

use std::path::Path;

use crate::error::{Error, Result};

/// Fixed sample rate of every input, in Hz.
pub const SAMPLE_RATE: u32 = 16_000;
/// Analysis window length in samples.
pub const WINDOW_SIZE: usize = 2048;
/// Hop between analysis frames in samples.
pub const HOP_SIZE: usize = 512;
/// Frames per second implied by the hop (16000 / 512).
pub const FRAME_RATE: f64 = SAMPLE_RATE as f64 / HOP_SIZE as f64;

/// How to reduce a multi-channel file to mono.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSelect {
    /// Take one channel by index.
    Index(usize),
    /// Average all channels.
    Average,
}

impl std::str::FromStr for ChannelSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("avg") || s.eq_ignore_ascii_case("average") {
            Ok(ChannelSelect::Average)
        } else {
            s.parse::<usize>().map(ChannelSelect::Index).map_err(|_| {
                Error::InvalidConfig(format!("channel must be an index or 'avg', got {s:?}"))
            })
        }
    }
}

/// A validated run of 16 kHz mono samples.
#[derive(Debug, Clone)]
pub struct AudioSegment {
    samples: Vec<f64>,
    /// Offset of the first sample from the recording origin, in seconds.
    pub start_time: f64,
}

impl AudioSegment {
    /// Build a segment, checking the input contract: at least one
    /// analysis window of finite samples.
    pub fn new(samples: Vec<f64>, start_time: f64) -> Result<Self> {
        if samples.len() < WINDOW_SIZE {
            return Err(Error::InvalidAudio(format!(
                "segment too short: {} samples, need at least {WINDOW_SIZE}",
                samples.len()
            )));
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(Error::InvalidAudio(
                "invalid audio: non-finite sample".into(),
            ));
        }
        Ok(Self {
            samples,
            start_time,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fixed at [`SAMPLE_RATE`]; kept as a method so call sites read naturally.
    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Number of analysis frames this segment yields: `floor(len / hop)`.
    pub fn num_frames(&self) -> usize {
        self.samples.len() / HOP_SIZE
    }

    /// Root-mean-square amplitude.
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Sub-segment covering `[start, start + len)` samples.
    pub fn slice(&self, start: usize, len: usize) -> Result<AudioSegment> {
        if start + len > self.samples.len() {
            return Err(Error::InvalidAudio(format!(
                "slice [{start}, {}) exceeds segment of {} samples",
                start + len,
                self.samples.len()
            )));
        }
        AudioSegment::new(
            self.samples[start..start + len].to_vec(),
            self.start_time + start as f64 / SAMPLE_RATE as f64,
        )
    }

    /// Read a WAV file (16-bit PCM or 32-bit float) at 16 kHz.
    ///
    /// Multi-channel files are reduced with `channel`; mono files ignore it.
    pub fn read_wav(path: impl AsRef<Path>, channel: ChannelSelect) -> Result<AudioSegment> {
        let path = path.as_ref();
        let wav_err = |e| Error::Wav {
            path: path.display().to_string(),
            source: e,
        };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.sample_rate != SAMPLE_RATE {
            return Err(Error::InvalidAudio(format!(
                "{} is {} Hz; inputs must already be {SAMPLE_RATE} Hz",
                path.display(),
                spec.sample_rate
            )));
        }
        let channels = spec.channels as usize;
        let interleaved: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(wav_err)?
            }
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?,
        };
        let mono = mixdown(&interleaved, channels, channel)?;
        AudioSegment::new(mono, 0.0)
    }

    /// Write as 16-bit PCM mono WAV.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wav_err = |e| Error::Wav {
            path: path.display().to_string(),
            source: e,
        };
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
            writer.write_sample(v).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }
}

fn mixdown(interleaved: &[f64], channels: usize, select: ChannelSelect) -> Result<Vec<f64>> {
    if channels == 0 {
        return Err(Error::InvalidAudio("zero-channel file".into()));
    }
    if channels == 1 {
        return Ok(interleaved.to_vec());
    }
    let frames = interleaved.len() / channels;
    match select {
        ChannelSelect::Index(i) => {
            if i >= channels {
                return Err(Error::InvalidConfig(format!(
                    "channel index {i} out of range for {channels}-channel file"
                )));
            }
            Ok((0..frames).map(|f| interleaved[f * channels + i]).collect())
        }
        ChannelSelect::Average => Ok((0..frames)
            .map(|f| {
                interleaved[f * channels..(f + 1) * channels]
                    .iter()
                    .sum::<f64>()
                    / channels as f64
            })
            .collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_segment() {
        let err = AudioSegment::new(vec![0.0; 100], 0.0).unwrap_err();
        assert!(err.to_string().contains("segment too short"));
    }

    #[test]
    fn rejects_non_finite() {
        let mut s = vec![0.0; 4096];
        s[17] = f64::NAN;
        let err = AudioSegment::new(s, 0.0).unwrap_err();
        assert!(err.to_string().contains("invalid audio"));
    }

    #[test]
    fn frame_count_is_floor_of_hop() {
        let seg = AudioSegment::new(vec![0.0; 48_000], 0.0).unwrap();
        assert_eq!(seg.num_frames(), 93);
        let seg = AudioSegment::new(vec![0.0; 96_000], 0.0).unwrap();
        assert_eq!(seg.num_frames(), 187);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..4096).map(|i| (i as f64 * 0.01).sin() * 0.5).collect();
        let seg = AudioSegment::new(samples.clone(), 0.0).unwrap();
        seg.write_wav(&path).unwrap();
        let back = AudioSegment::read_wav(&path, ChannelSelect::Index(0)).unwrap();
        assert_eq!(back.len(), seg.len());
        for (a, b) in back.samples().iter().zip(seg.samples()) {
            assert!((a - b).abs() < 1.0 / i16::MAX as f64 * 2.0);
        }
    }

    #[test]
    fn multichannel_mixdown() {
        let inter = vec![0.2, 0.4, 0.2, 0.4, 0.2, 0.4];
        let avg = mixdown(&inter, 2, ChannelSelect::Average).unwrap();
        assert!(avg.iter().all(|&v| (v - 0.3).abs() < 1e-12));
        let ch1 = mixdown(&inter, 2, ChannelSelect::Index(1)).unwrap();
        assert!(ch1.iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }
}
