//! Manifest-driven dataset assembly: recordings in, labeled 93-frame
//! feature segments out, with the training-set filtering and
//! augmentation rules applied.
//!
//! A manifest lists recordings (WAV plus either a telemetry log, a
//! precomputed label cache, or nothing for noise-only files) and assigns
//! each a split role. Assembly enforces the leakage rule (no delivery
//! flights in training), drops training/validation segments recorded
//! beyond 150 m, adds two augmented copies of each raw training file,
//! and standardizes features with statistics from the training split.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{AudioSegment, ChannelSelect, HOP_SIZE};
use crate::calibration::{
    build_labels, read_telemetry_csv, BpfLabelTrack, CalibrationCurve, DriftProfile,
    TelemetryFrame,
};
use crate::error::{Error, Result};
use crate::features::{feature_block, FeatureBlock, NormStats};
use crate::synth::{augment, AugmentPolicy};

/// Frames per training segment.
pub const SEGMENT_FRAMES: usize = 93;
/// Maximum drone-to-array distance kept in train/valid splits, meters.
pub const MAX_TRAIN_DISTANCE_M: f64 = 150.0;
/// Augmented copies generated per raw training file.
pub const AUGMENT_COPIES: usize = 2;

/// Dataset split a recording belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Valid,
    Test,
}

/// One recording in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub wav: PathBuf,
    /// Telemetry log for label building; mutually exclusive with `labels`.
    #[serde(default)]
    pub telemetry: Option<PathBuf>,
    /// Precomputed label cache (written by the scene generator).
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub sync_offset_s: f64,
    #[serde(default)]
    pub drift_start_hz: f64,
    #[serde(default)]
    pub drift_end_hz: f64,
    #[serde(default)]
    pub delivery_times_s: Vec<f64>,
    pub role: Role,
}

/// Manifest of recordings plus the shared calibration table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordingManifest {
    /// CSV of `(pwm_us, bpf_hz)` knots; required when any entry carries
    /// telemetry.
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    pub entries: Vec<ManifestEntry>,
}

impl RecordingManifest {
    /// Load a manifest, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<RecordingManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut manifest: RecordingManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(c) = manifest.calibration.as_mut() {
            resolve(c);
        }
        for entry in manifest.entries.iter_mut() {
            resolve(&mut entry.wav);
            if let Some(t) = entry.telemetry.as_mut() {
                resolve(t);
            }
            if let Some(l) = entry.labels.as_mut() {
                resolve(l);
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    fn curve(&self) -> Result<Option<CalibrationCurve>> {
        match &self.calibration {
            Some(path) => Ok(Some(CalibrationCurve::from_csv(path)?)),
            None => Ok(None),
        }
    }
}

/// A recording loaded and labeled on the frame grid.
#[derive(Debug, Clone)]
pub struct LoadedRecording {
    pub id: String,
    pub audio: AudioSegment,
    pub labels: BpfLabelTrack,
    pub telemetry: Option<Vec<TelemetryFrame>>,
    pub delivery_times_s: Vec<f64>,
    pub role: Role,
}

/// Load one manifest entry: audio plus aligned labels.
pub fn load_recording(
    entry: &ManifestEntry,
    curve: Option<&CalibrationCurve>,
) -> Result<LoadedRecording> {
    let audio = AudioSegment::read_wav(&entry.wav, ChannelSelect::Average).map_err(|e| {
        Error::InvalidInput(format!("entry {}: {e}", entry.id))
    })?;
    let num_frames = audio.num_frames();
    let (labels, telemetry) = match (&entry.telemetry, &entry.labels) {
        (Some(tel_path), None) => {
            let telemetry = read_telemetry_csv(tel_path)
                .map_err(|e| Error::InvalidInput(format!("entry {}: {e}", entry.id)))?;
            let curve = curve.ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "entry {}: telemetry labels need a calibration table",
                    entry.id
                ))
            })?;
            let drift = DriftProfile::new(entry.drift_start_hz, entry.drift_end_hz)?;
            let build = build_labels(&telemetry, curve, &drift, entry.sync_offset_s, num_frames);
            for w in &build.warnings {
                log::warn!("entry {}: {w}", entry.id);
            }
            (build.track, Some(telemetry))
        }
        (None, Some(label_path)) => {
            let mut labels = BpfLabelTrack::read_csv(label_path)
                .map_err(|e| Error::InvalidInput(format!("entry {}: {e}", entry.id)))?;
            if labels.len() < num_frames {
                return Err(Error::ShapeMismatch(format!(
                    "entry {}: label cache has {} frames, audio has {num_frames}",
                    entry.id,
                    labels.len()
                )));
            }
            labels.bpf.truncate(num_frames);
            labels.activity.truncate(num_frames);
            if let Some(d) = labels.distance_m.as_mut() {
                d.truncate(num_frames);
            }
            (labels, None)
        }
        (None, None) => (BpfLabelTrack::zeros(num_frames), None),
        (Some(_), Some(_)) => {
            return Err(Error::InvalidConfig(format!(
                "entry {}: telemetry and labels are mutually exclusive",
                entry.id
            )))
        }
    };
    Ok(LoadedRecording {
        id: entry.id.clone(),
        audio,
        labels,
        telemetry,
        delivery_times_s: entry.delivery_times_s.clone(),
        role: entry.role,
    })
}

/// One 93-frame training/evaluation example.
#[derive(Debug, Clone)]
pub struct LabeledSegment {
    pub source_id: String,
    pub features: FeatureBlock,
    pub bpf: Vec<[f64; 2]>,
    pub activity: Vec<u8>,
    pub augmented: bool,
    pub distance_mean_m: Option<f64>,
    pub distance_max_m: Option<f64>,
}

impl LabeledSegment {
    /// A segment counts as drone content if any frame is active.
    pub fn has_drone(&self) -> bool {
        self.activity.iter().any(|&a| a == 1)
    }
}

/// Assembled train/valid/test splits plus the feature statistics that
/// standardized them.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<LabeledSegment>,
    pub valid: Vec<LabeledSegment>,
    pub test: Vec<LabeledSegment>,
    pub norm: NormStats,
}

/// Cut a recording (one audio variant) into consecutive 93-frame
/// segments with raw (identity-normalized) features.
fn cut_segments(
    id: &str,
    audio: &AudioSegment,
    labels: &BpfLabelTrack,
    augmented: bool,
) -> Result<Vec<LabeledSegment>> {
    let seg_samples = SEGMENT_FRAMES * HOP_SIZE;
    let count = audio.len() / seg_samples;
    let identity = NormStats::identity();
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let slice = audio.slice(k * seg_samples, seg_samples)?;
        let features = feature_block(&slice, &identity)?;
        debug_assert_eq!(features.frames, SEGMENT_FRAMES);
        let f0 = k * SEGMENT_FRAMES;
        let bpf = labels.bpf[f0..f0 + SEGMENT_FRAMES].to_vec();
        let activity = labels.activity[f0..f0 + SEGMENT_FRAMES].to_vec();
        let (mean_d, max_d) = match &labels.distance_m {
            Some(d) => {
                let span: Vec<f64> = d[f0..f0 + SEGMENT_FRAMES]
                    .iter()
                    .copied()
                    .filter(|v| v.is_finite())
                    .collect();
                if span.is_empty() {
                    (None, None)
                } else {
                    (
                        Some(span.iter().sum::<f64>() / span.len() as f64),
                        Some(span.iter().cloned().fold(f64::MIN, f64::max)),
                    )
                }
            }
            None => (None, None),
        };
        out.push(LabeledSegment {
            source_id: id.to_string(),
            features,
            bpf,
            activity,
            augmented,
            distance_mean_m: mean_d,
            distance_max_m: max_d,
        });
    }
    Ok(out)
}

fn standardize(segment: &mut LabeledSegment, norm: &NormStats) {
    segment
        .features
        .mel
        .mapv_inplace(|v| (v - norm.mean[0]) / norm.std[0]);
    segment
        .features
        .cepstrum
        .mapv_inplace(|v| (v - norm.mean[1]) / norm.std[1]);
}

/// Assemble dataset splits from a manifest.
///
/// Deterministic given `seed` (augmentation draws). Returns an error if
/// a delivery flight lands in the training role or a split other than
/// `test` ends up empty while its recordings existed.
pub fn assemble(
    manifest: &RecordingManifest,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<DatasetSplits> {
    if manifest.entries.is_empty() {
        return Err(Error::EmptyDataset("manifest has no entries".into()));
    }
    for entry in &manifest.entries {
        if entry.role == Role::Train && !entry.delivery_times_s.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "entry {}: delivery flights are excluded from training",
                entry.id
            )));
        }
    }
    let curve = manifest.curve()?;

    let mut train: Vec<LabeledSegment> = Vec::new();
    let mut valid: Vec<LabeledSegment> = Vec::new();
    let mut test: Vec<LabeledSegment> = Vec::new();
    for (idx, entry) in manifest.entries.iter().enumerate() {
        let rec = load_recording(entry, curve.as_ref())?;
        let mut segments = cut_segments(&rec.id, &rec.audio, &rec.labels, false)?;
        if entry.role == Role::Train {
            for copy in 0..AUGMENT_COPIES {
                let aug_seed = seed
                    .wrapping_mul(0x9e3779b97f4a7c15)
                    .wrapping_add((idx * AUGMENT_COPIES + copy) as u64);
                let aug_audio = augment(&rec.audio, policy, aug_seed)?;
                segments.extend(cut_segments(&rec.id, &aug_audio, &rec.labels, true)?);
            }
        }
        match entry.role {
            Role::Train => train.extend(segments),
            Role::Valid => valid.extend(segments),
            Role::Test => test.extend(segments),
        }
    }

    // Distance filter applies to training and validation only.
    let within_range = |s: &LabeledSegment| match s.distance_max_m {
        Some(d) => d <= MAX_TRAIN_DISTANCE_M,
        None => true,
    };
    train.retain(within_range);
    valid.retain(within_range);

    if train.is_empty() && manifest.entries.iter().any(|e| e.role == Role::Train) {
        return Err(Error::EmptyDataset(
            "training split empty after filtering".into(),
        ));
    }
    if valid.is_empty() && manifest.entries.iter().any(|e| e.role == Role::Valid) {
        return Err(Error::EmptyDataset(
            "validation split empty after filtering".into(),
        ));
    }

    let norm = if train.is_empty() {
        NormStats::identity()
    } else {
        NormStats::from_blocks(train.iter().map(|s| &s.features))?
    };
    for segment in train.iter_mut().chain(&mut valid).chain(&mut test) {
        standardize(segment, &norm);
    }

    Ok(DatasetSplits {
        train,
        valid,
        test,
        norm,
    })
}

/// One distance bin of the grouped evaluation sets.
#[derive(Debug, Clone)]
pub struct DistanceGroup {
    /// `[lo, hi)` in meters.
    pub range_m: (f64, f64),
    /// Indices into the evaluated segment slice.
    pub drone: Vec<usize>,
    pub noise: Vec<usize>,
    /// True when no drone segment fell in the bin; excluded from reports.
    pub empty: bool,
}

/// Partition segments into `group_count` equal-width distance bins over
/// `[0, max_m)` and pad each occupied bin with noise segments to a 50/50
/// balance. Noise segments cycle when the pool is short.
pub fn distance_groups(
    segments: &[LabeledSegment],
    group_count: usize,
    max_m: f64,
) -> Result<Vec<DistanceGroup>> {
    if group_count == 0 || max_m <= 0.0 {
        return Err(Error::InvalidConfig("bad distance grouping".into()));
    }
    let width = max_m / group_count as f64;
    let mut groups: Vec<DistanceGroup> = (0..group_count)
        .map(|g| DistanceGroup {
            range_m: (g as f64 * width, (g + 1) as f64 * width),
            drone: Vec::new(),
            noise: Vec::new(),
            empty: false,
        })
        .collect();

    let noise_pool: Vec<usize> = segments
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.has_drone())
        .map(|(i, _)| i)
        .collect();

    for (i, segment) in segments.iter().enumerate() {
        if !segment.has_drone() {
            continue;
        }
        let Some(d) = segment.distance_mean_m else {
            continue;
        };
        let bin = ((d / width) as usize).min(group_count - 1);
        groups[bin].drone.push(i);
    }

    let mut cursor = 0usize;
    for group in groups.iter_mut() {
        if group.drone.is_empty() {
            group.empty = true;
            continue;
        }
        if noise_pool.is_empty() {
            log::warn!("no noise segments available to balance distance groups");
            continue;
        }
        for _ in 0..group.drone.len() {
            group.noise.push(noise_pool[cursor % noise_pool.len()]);
            cursor += 1;
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_noise, render_scene, NoiseKind, RotorTraj, SceneSpec};

    fn write_scene(
        dir: &Path,
        id: &str,
        base: (f64, f64),
        duration_s: f64,
        distance_m: f64,
        seed: u64,
    ) -> (PathBuf, PathBuf) {
        let spec = SceneSpec {
            rotors: vec![
                RotorTraj {
                    base_bpf: base.0,
                    jitter_sigma: 1.0,
                    harmonics: 6,
                    mode2_freq: 5000.0,
                    mode2_gain: 0.3,
                    gain: 1.0,
                    step_events: vec![],
                },
                RotorTraj {
                    base_bpf: base.1,
                    jitter_sigma: 1.0,
                    harmonics: 6,
                    mode2_freq: 5000.0,
                    mode2_gain: 0.3,
                    gain: 1.0,
                    step_events: vec![],
                },
            ],
            duration_s,
            distance_traj: vec![(0.0, distance_m)],
            noise: None,
            delivery: vec![],
            seed,
        };
        let scene = render_scene(&spec).unwrap();
        let wav = dir.join(format!("{id}.wav"));
        let labels = dir.join(format!("{id}_labels.csv"));
        scene.audio.write_wav(&wav).unwrap();
        scene.labels.write_csv(&labels).unwrap();
        (wav, labels)
    }

    fn write_noise(dir: &Path, id: &str, seconds: f64, seed: u64) -> PathBuf {
        let n = (seconds * crate::audio::SAMPLE_RATE as f64) as usize;
        let noise = render_noise(&NoiseKind::White, n, seed).unwrap();
        let scaled =
            AudioSegment::new(noise.samples().iter().map(|s| s * 0.1).collect(), 0.0).unwrap();
        let path = dir.join(format!("{id}.wav"));
        scaled.write_wav(&path).unwrap();
        path
    }

    fn entry(id: &str, wav: &Path, labels: Option<&Path>, role: Role) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            wav: wav.to_path_buf(),
            telemetry: None,
            labels: labels.map(|p| p.to_path_buf()),
            sync_offset_s: 0.0,
            drift_start_hz: 0.0,
            drift_end_hz: 0.0,
            delivery_times_s: vec![],
            role,
        }
    }

    #[test]
    fn scene_labels_round_trip_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let (wav, labels) = write_scene(dir.path(), "s1", (220.0, 260.0), 6.0, 12.0, 1);
        let e = entry("s1", &wav, Some(&labels), Role::Valid);
        let rec = load_recording(&e, None).unwrap();
        let direct = BpfLabelTrack::read_csv(&labels).unwrap();
        assert_eq!(rec.labels.bpf[..rec.labels.len()], direct.bpf[..rec.labels.len()]);
        assert!(rec.labels.len() == rec.audio.num_frames());
    }

    #[test]
    fn delivery_flight_in_training_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (wav, labels) = write_scene(dir.path(), "s1", (220.0, 260.0), 6.0, 12.0, 2);
        let mut e = entry("s1", &wav, Some(&labels), Role::Train);
        e.delivery_times_s = vec![3.0];
        let manifest = RecordingManifest {
            calibration: None,
            entries: vec![e],
        };
        let err = assemble(&manifest, &AugmentPolicy::identity(), 1).unwrap_err();
        assert!(err.to_string().contains("excluded from training"));
    }

    #[test]
    fn train_gets_two_augmented_copies() {
        let dir = tempfile::tempdir().unwrap();
        let (wav, labels) = write_scene(dir.path(), "s1", (220.0, 260.0), 6.0, 12.0, 3);
        let manifest = RecordingManifest {
            calibration: None,
            entries: vec![entry("s1", &wav, Some(&labels), Role::Train)],
        };
        let splits = assemble(&manifest, &AugmentPolicy::identity(), 1).unwrap();
        // 6 s = 2 segments per variant, 3 variants.
        assert_eq!(splits.train.len(), 6);
        assert_eq!(splits.train.iter().filter(|s| s.augmented).count(), 4);
    }

    #[test]
    fn noise_only_entries_get_zero_labels() {
        let dir = tempfile::tempdir().unwrap();
        let noise = write_noise(dir.path(), "n1", 6.0, 4);
        let manifest = RecordingManifest {
            calibration: None,
            entries: vec![entry("n1", &noise, None, Role::Test)],
        };
        let splits = assemble(&manifest, &AugmentPolicy::identity(), 1).unwrap();
        assert!(!splits.test.is_empty());
        for s in &splits.test {
            assert!(s.activity.iter().all(|&a| a == 0));
            assert!(s.bpf.iter().all(|p| p == &[0.0, 0.0]));
        }
    }

    #[test]
    fn distance_filter_applies_to_train_and_valid_only() {
        let dir = tempfile::tempdir().unwrap();
        let (near_wav, near_labels) = write_scene(dir.path(), "near", (220.0, 260.0), 6.0, 40.0, 5);
        let (far_wav, far_labels) = write_scene(dir.path(), "far", (220.0, 260.0), 6.0, 170.0, 6);
        let (far2_wav, far2_labels) =
            write_scene(dir.path(), "far2", (220.0, 260.0), 6.0, 170.0, 7);
        let manifest = RecordingManifest {
            calibration: None,
            entries: vec![
                entry("near", &near_wav, Some(&near_labels), Role::Train),
                entry("far", &far_wav, Some(&far_labels), Role::Train),
                entry("far2", &far2_wav, Some(&far2_labels), Role::Test),
            ],
        };
        let splits = assemble(&manifest, &AugmentPolicy::identity(), 1).unwrap();
        assert!(splits
            .train
            .iter()
            .all(|s| s.distance_max_m.unwrap() <= MAX_TRAIN_DISTANCE_M));
        assert!(splits.train.iter().all(|s| s.source_id == "near"));
        // Test split keeps the distant recording.
        assert!(splits.test.iter().any(|s| s.source_id == "far2"));
    }

    #[test]
    fn assemble_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (wav, labels) = write_scene(dir.path(), "s1", (200.0, 300.0), 6.0, 12.0, 8);
        let manifest = RecordingManifest {
            calibration: None,
            entries: vec![entry("s1", &wav, Some(&labels), Role::Train)],
        };
        let a = assemble(&manifest, &AugmentPolicy::default(), 77).unwrap();
        let b = assemble(&manifest, &AugmentPolicy::default(), 77).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.features.mel, y.features.mel);
            assert_eq!(x.features.cepstrum, y.features.cepstrum);
        }
    }

    #[test]
    fn feature_label_alignment_is_93() {
        let dir = tempfile::tempdir().unwrap();
        let (wav, labels) = write_scene(dir.path(), "s1", (220.0, 260.0), 9.0, 12.0, 9);
        let manifest = RecordingManifest {
            calibration: None,
            entries: vec![entry("s1", &wav, Some(&labels), Role::Test)],
        };
        let splits = assemble(&manifest, &AugmentPolicy::identity(), 1).unwrap();
        for s in &splits.test {
            assert_eq!(s.features.frames, SEGMENT_FRAMES);
            assert_eq!(s.bpf.len(), SEGMENT_FRAMES);
            assert_eq!(s.activity.len(), SEGMENT_FRAMES);
        }
    }

    fn fake_segment(distance: Option<f64>, drone: bool) -> LabeledSegment {
        LabeledSegment {
            source_id: "x".into(),
            features: FeatureBlock {
                frames: 1,
                mel: ndarray::Array2::zeros((1, 128)),
                cepstrum: ndarray::Array2::zeros((1, 128)),
                frame_rate: crate::audio::FRAME_RATE,
            },
            bpf: vec![[if drone { 250.0 } else { 0.0 }, if drone { 260.0 } else { 0.0 }]],
            activity: vec![u8::from(drone)],
            augmented: false,
            distance_mean_m: distance,
            distance_max_m: distance,
        }
    }

    #[test]
    fn distance_grouping_bins_and_balance() {
        let mut segments: Vec<LabeledSegment> = Vec::new();
        // 30 drone segments at 90 m -> bin 4 of [80, 100).
        for _ in 0..30 {
            segments.push(fake_segment(Some(90.0), true));
        }
        // plenty of noise
        for _ in 0..35 {
            segments.push(fake_segment(None, false));
        }
        let groups = distance_groups(&segments, 9, 180.0).unwrap();
        assert_eq!(groups.len(), 9);
        assert_eq!(groups[4].range_m, (80.0, 100.0));
        assert_eq!(groups[4].drone.len(), 30);
        assert_eq!(groups[4].noise.len(), 30);
        let empties = groups.iter().filter(|g| g.empty).count();
        assert_eq!(empties, 8);
    }

    #[test]
    fn degenerate_distances_flag_bins() {
        let segments: Vec<LabeledSegment> =
            (0..5).map(|_| fake_segment(Some(10.0), true)).collect();
        let groups = distance_groups(&segments, 9, 180.0).unwrap();
        assert_eq!(groups.iter().filter(|g| g.empty).count(), 8);
        assert_eq!(groups[0].drone.len(), 5);
    }
}
