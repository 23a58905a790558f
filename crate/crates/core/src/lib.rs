//! Acoustic rotor analysis: blade-passing-frequency estimation and
//! package-delivery detection for multirotor drones.
//!
//! The pipeline has two stages. First an estimator (a trainable
//! convolutional-recurrent network or a classical harmonic-comb search)
//! turns 16 kHz audio into a per-frame track of the two dominant rotor
//! blade passing frequencies plus a drone-activity score. Second, a
//! change-point detector compares histograms of BPF values before and
//! after each frame across a bank of sliding windows and scores how
//! delivery-like the change is; score peaks above a threshold become
//! delivery events.
//!
//! Supporting modules cover ground-truth label construction from flight
//! telemetry (PWM-to-BPF calibration, drift correction, Kalman
//! smoothing), synthetic scene generation with exact labels, dataset
//! assembly with the augmentation and distance-filtering rules used for
//! training, and an evaluation harness for MAE/MMAE, activity metrics,
//! ROC curves, SNR sweeps, and event-level delivery scoring.

pub mod audio;
pub mod calibration;
pub mod crnn;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod features;
pub mod oracle;
pub mod synth;
pub mod track;

pub use audio::{AudioSegment, ChannelSelect, FRAME_RATE, HOP_SIZE, SAMPLE_RATE, WINDOW_SIZE};
pub use error::{Error, Result};
