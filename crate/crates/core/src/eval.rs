//! Metrics: BPF error, activity classification, ROC/AUC, SNR sweeps, and
//! delivery-event evaluation.
//!
//! Undefined quantities (no qualifying frames, zero denominators) are
//! reported as explicit `None`/null, never as zero.

use std::path::Path;

use crate::audio::{AudioSegment, FRAME_RATE};
use crate::calibration::BpfLabelTrack;
use crate::detector::{DeliveryEvent, DeliveryScoreSeries};
use crate::error::{Error, Result};
use crate::synth::mix_at_snr;
use crate::track::BpfTrack;

/// Mean absolute BPF error in Hz.
///
/// MAE averages over frames where the label is active; the masked MAE
/// additionally requires the predicted activity to reach `threshold`.
/// Either value is `None` when no frame qualifies.
pub fn bpf_errors(
    pred: &BpfTrack,
    label: &BpfLabelTrack,
    activity_threshold: f64,
) -> Result<(Option<f64>, Option<f64>)> {
    if pred.len() != label.len() {
        return Err(Error::ShapeMismatch(format!(
            "pred frames {} != label frames {}",
            pred.len(),
            label.len()
        )));
    }
    let mut mae_sum = 0.0;
    let mut mae_n = 0usize;
    let mut mmae_sum = 0.0;
    let mut mmae_n = 0usize;
    for i in 0..pred.len() {
        if label.activity[i] != 1 {
            continue;
        }
        for m in 0..2 {
            let err = (pred.bpf[i][m] - label.bpf[i][m]).abs();
            mae_sum += err;
            mae_n += 1;
            if pred.activity[i] >= activity_threshold {
                mmae_sum += err;
                mmae_n += 1;
            }
        }
    }
    let mae = (mae_n > 0).then(|| mae_sum / mae_n as f64);
    let mmae = (mmae_n > 0).then(|| mmae_sum / mmae_n as f64);
    Ok((mae, mmae))
}

/// Confusion-matrix rates for the activity flag.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ActivityMetrics {
    pub accuracy: f64,
    /// `None` when there are no positive predictions.
    pub precision: Option<f64>,
    /// `None` when there are no positive labels.
    pub recall: Option<f64>,
}

/// Accuracy, precision, and recall of thresholded activity predictions.
pub fn activity_metrics(
    pred: &BpfTrack,
    label: &BpfLabelTrack,
    threshold: f64,
) -> Result<ActivityMetrics> {
    if pred.len() != label.len() {
        return Err(Error::ShapeMismatch(format!(
            "pred frames {} != label frames {}",
            pred.len(),
            label.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("empty tracks".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..pred.len() {
        let p = pred.activity[i] >= threshold;
        let l = label.activity[i] == 1;
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let total = (tp + fp + tn + fn_) as f64;
    Ok(ActivityMetrics {
        accuracy: (tp + tn) as f64 / total,
        precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
        recall: (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
    })
}

/// One point of an ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC curve with trapezoidal AUC.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// Best TPR among operating points with FPR at or below the cap.
    pub fn tpr_at_fpr(&self, max_fpr: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fpr <= max_fpr)
            .map(|p| p.tpr)
            .fold(0.0, f64::max)
    }
}

/// Threshold-sweep ROC over scores with binary labels.
///
/// Requires at least one positive and one negative label. The curve runs
/// from (0, 0) at threshold +inf to (1, 1) at the lowest score.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidInput(
            "roc needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // Consume every sample tied at this threshold before emitting.
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold,
        });
    }

    let mut auc = 0.0;
    for pair in points.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }
    Ok(RocCurve { points, auc })
}

/// An estimator under evaluation: audio in, BPF track out.
pub trait Estimator {
    fn estimate(&self, audio: &AudioSegment) -> Result<BpfTrack>;
    fn name(&self) -> &str;
}

impl<F> Estimator for (&str, F)
where
    F: Fn(&AudioSegment) -> Result<BpfTrack>,
{
    fn estimate(&self, audio: &AudioSegment) -> Result<BpfTrack> {
        (self.1)(audio)
    }
    fn name(&self) -> &str {
        self.0
    }
}

/// MAE at one SNR operating point.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SnrPoint {
    pub snr_db: f64,
    pub mae_hz: Option<f64>,
    pub mmae_hz: Option<f64>,
}

/// Mix a clean scene with noise at each SNR and measure estimator MAE.
pub fn snr_sweep(
    clean: &AudioSegment,
    labels: &BpfLabelTrack,
    noise: &AudioSegment,
    snr_list: &[f64],
    estimator: &dyn Estimator,
    activity_threshold: f64,
) -> Result<Vec<SnrPoint>> {
    let mut out = Vec::with_capacity(snr_list.len());
    for &snr_db in snr_list {
        let mixed = mix_at_snr(clean, noise, snr_db)?;
        let track = estimator.estimate(&mixed)?;
        let frames = track.len().min(labels.len());
        let track = BpfTrack {
            bpf: track.bpf[..frames].to_vec(),
            activity: track.activity[..frames].to_vec(),
            distance_m: None,
            single_source: None,
        };
        let labels_cut = BpfLabelTrack {
            bpf: labels.bpf[..frames].to_vec(),
            activity: labels.activity[..frames].to_vec(),
            distance_m: None,
        };
        let (mae, mmae) = bpf_errors(&track, &labels_cut, activity_threshold)?;
        out.push(SnrPoint {
            snr_db,
            mae_hz: mae,
            mmae_hz: mmae,
        });
    }
    Ok(out)
}

/// Outcome of delivery-event evaluation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DeliveryEval {
    /// Frame-wise ROC: frames within the tolerance of a true delivery
    /// count as positive.
    pub frame_roc: RocCurve,
    pub event_tp: usize,
    pub event_fp: usize,
    pub event_fn: usize,
}

/// Frame-wise labels for delivery scoring: valid frames within
/// `tolerance_s` of any true delivery are positives.
pub fn delivery_frame_labels(
    series: &DeliveryScoreSeries,
    true_times_s: &[f64],
    tolerance_s: f64,
) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for t in 0..series.score.len() {
        if !series.valid[t] {
            continue;
        }
        let time = t as f64 / FRAME_RATE;
        let positive = true_times_s
            .iter()
            .any(|&truth| (time - truth).abs() <= tolerance_s);
        scores.push(series.score[t]);
        labels.push(positive);
    }
    (scores, labels)
}

/// Evaluate extracted events and the score series against true delivery
/// times with a symmetric tolerance (0.25 s each side by default).
pub fn delivery_eval(
    events: &[DeliveryEvent],
    true_times_s: &[f64],
    tolerance_s: f64,
    series: &DeliveryScoreSeries,
) -> Result<DeliveryEval> {
    let (scores, labels) = delivery_frame_labels(series, true_times_s, tolerance_s);
    let frame_roc = roc(&scores, &labels)?;

    // Greedy nearest-first event matching, one truth per event.
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (e, event) in events.iter().enumerate() {
        for (t, &truth) in true_times_s.iter().enumerate() {
            let dt = (event.time_s - truth).abs();
            if dt <= tolerance_s {
                pairs.push((e, t, dt));
            }
        }
    }
    pairs.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap());
    let mut event_used = vec![false; events.len()];
    let mut truth_used = vec![false; true_times_s.len()];
    let mut tp = 0usize;
    for (e, t, _) in pairs {
        if !event_used[e] && !truth_used[t] {
            event_used[e] = true;
            truth_used[t] = true;
            tp += 1;
        }
    }
    Ok(DeliveryEval {
        frame_roc,
        event_tp: tp,
        event_fp: events.len() - tp,
        event_fn: true_times_s.len() - tp,
    })
}

/// Aggregated metrics for one evaluation group (a split, a distance bin,
/// an SNR point).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub group: String,
    pub mae_hz: Option<f64>,
    pub mmae_hz: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub auc: Option<f64>,
}

/// Write an ROC curve as plot-ready CSV `fpr,tpr,threshold`.
pub fn write_roc_csv(curve: &RocCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["fpr", "tpr", "threshold"]).map_err(csv_err)?;
    for p in &curve.points {
        w.write_record(&[p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write an SNR sweep as plot-ready CSV `snr_db,mae_hz,mmae_hz`.
pub fn write_sweep_csv(points: &[SnrPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["snr_db", "mae_hz", "mmae_hz"]).map_err(csv_err)?;
    for p in points {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record(&[p.snr_db.to_string(), fmt(p.mae_hz), fmt(p.mmae_hz)])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(bpf: Vec<[f64; 2]>, activity: Vec<f64>) -> BpfTrack {
        BpfTrack::new(bpf, activity).unwrap()
    }

    fn labels(bpf: Vec<[f64; 2]>, activity: Vec<u8>) -> BpfLabelTrack {
        BpfLabelTrack {
            bpf,
            activity,
            distance_m: None,
        }
    }

    #[test]
    fn perfect_prediction_zero_errors() {
        let l = labels(vec![[200.0, 300.0]; 10], vec![1; 10]);
        let p = track(vec![[200.0, 300.0]; 10], vec![1.0; 10]);
        let (mae, mmae) = bpf_errors(&p, &l, 0.5).unwrap();
        assert_eq!(mae, Some(0.0));
        assert_eq!(mmae, Some(0.0));
    }

    #[test]
    fn constant_offset_gives_that_mae() {
        let l = labels(vec![[200.0, 300.0]; 10], vec![1; 10]);
        let p = track(vec![[210.0, 310.0]; 10], vec![0.9; 10]);
        let (mae, mmae) = bpf_errors(&p, &l, 0.5).unwrap();
        assert_eq!(mae, Some(10.0));
        assert_eq!(mmae, Some(10.0));
    }

    #[test]
    fn masking_separates_mae_and_mmae() {
        // Half the frames: predicted activity 0.1 with 100 Hz error;
        // other half exact with high confidence.
        let mut bpf = vec![[300.0, 400.0]; 10];
        let mut act = vec![0.9; 10];
        for i in 0..5 {
            bpf[i] = [200.0, 300.0];
            act[i] = 0.1;
        }
        let l = labels(vec![[300.0, 400.0]; 10], vec![1; 10]);
        let p = track(bpf, act);
        let (mae, mmae) = bpf_errors(&p, &l, 0.5).unwrap();
        assert_eq!(mae, Some(50.0));
        assert_eq!(mmae, Some(0.0));
    }

    #[test]
    fn no_qualifying_frames_is_none() {
        let l = labels(vec![[0.0, 0.0]; 4], vec![0; 4]);
        let p = track(vec![[0.0, 0.0]; 4], vec![0.0; 4]);
        let (mae, mmae) = bpf_errors(&p, &l, 0.5).unwrap();
        assert_eq!(mae, None);
        assert_eq!(mmae, None);
    }

    #[test]
    fn activity_metric_cases() {
        let l = labels(vec![[0.0, 0.0]; 8], vec![1, 1, 1, 1, 0, 0, 0, 0]);

        let perfect = track(
            vec![[0.0, 0.0]; 8],
            vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        );
        let m = activity_metrics(&perfect, &l, 0.5).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.recall, Some(1.0));

        let all_pos = track(vec![[0.0, 0.0]; 8], vec![1.0; 8]);
        let m = activity_metrics(&all_pos, &l, 0.5).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.precision, Some(0.5));
        assert_eq!(m.recall, Some(1.0));

        let all_neg = track(vec![[0.0, 0.0]; 8], vec![0.0; 8]);
        let m = activity_metrics(&all_neg, &l, 0.5).unwrap();
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.precision, None);
    }

    #[test]
    fn empty_input_is_error() {
        let l = labels(vec![], vec![]);
        let p = track(vec![], vec![]);
        assert!(activity_metrics(&p, &l, 0.5).is_err());
    }

    #[test]
    fn roc_perfect_separation() {
        let scores = vec![0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = vec![true, true, true, false, false];
        let curve = roc(&scores, &labels).unwrap();
        assert!((curve.auc - 1.0).abs() < 1e-12);
        assert_eq!(curve.points.first().unwrap().tpr, 0.0);
        assert_eq!(curve.points.last().unwrap().tpr, 1.0);
        assert_eq!(curve.points.last().unwrap().fpr, 1.0);
    }

    #[test]
    fn roc_random_scores_near_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<bool> = (0..10_000).map(|_| rng.gen_bool(0.5)).collect();
        let curve = roc(&scores, &labels).unwrap();
        assert!((curve.auc - 0.5).abs() < 0.05, "auc {}", curve.auc);
    }

    #[test]
    fn roc_matches_pairwise_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let scores: Vec<f64> = (0..200).map(|_| (rng.gen::<f64>() * 8.0).round()).collect();
        let labels: Vec<bool> = scores
            .iter()
            .map(|&s| rng.gen_bool((0.2 + s / 16.0).min(1.0)))
            .collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            panic!("degenerate draw");
        }
        let curve = roc(&scores, &labels).unwrap();

        // Exhaustive pairwise AUC: P(score+ > score-) + 0.5 P(equal).
        let pos: Vec<f64> = scores
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| !l)
            .map(|(&s, _)| s)
            .collect();
        let mut wins = 0.0;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        let pairwise = wins / (pos.len() * neg.len()) as f64;
        assert!(
            (curve.auc - pairwise).abs() < 1e-10,
            "trapezoid {} vs pairwise {}",
            curve.auc,
            pairwise
        );
    }

    #[test]
    fn roc_single_class_is_error() {
        assert!(roc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn event_matching_rules() {
        let series = DeliveryScoreSeries {
            score: vec![10.0; 1000],
            valid: vec![true; 1000],
            events: vec![],
        };
        let ev = |time_s: f64| DeliveryEvent {
            frame: (time_s * FRAME_RATE) as usize,
            time_s,
            peak_score: 10.0,
        };
        // Event 0.1 s from truth: TP.
        let truths = [10.0];
        // Need both classes in the frame labels for the ROC; perturb one
        // score below so a negative exists.
        let mut series = series;
        series.score[0] = -20.0;
        let eval = delivery_eval(&[ev(10.1)], &truths, 0.25, &series).unwrap();
        assert_eq!((eval.event_tp, eval.event_fp, eval.event_fn), (1, 0, 0));

        // Event 0.4 s away: FP and FN.
        let eval = delivery_eval(&[ev(10.4)], &truths, 0.25, &series).unwrap();
        assert_eq!((eval.event_tp, eval.event_fp, eval.event_fn), (0, 1, 1));

        // No events: FN.
        let eval = delivery_eval(&[], &truths, 0.25, &series).unwrap();
        assert_eq!((eval.event_tp, eval.event_fp, eval.event_fn), (0, 0, 1));
    }
}
