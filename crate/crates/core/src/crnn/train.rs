//! Adam optimizer and the training loop.

use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::PathBuf;

use super::model::{batch_loss, loss_gradients, BpfEstimator, LossConfig, ModelConfig};
use super::scalar::Scalar;
use crate::dataset::LabeledSegment;
use crate::error::{Error, Result};

/// Adam with per-parameter first/second moment estimates.
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut BpfEstimator<T>) {
        self.step += 1;
        let b1 = T::from_double(self.beta1);
        let b2 = T::from_double(self.beta2);
        let one_m_b1 = T::from_double(1.0 - self.beta1);
        let one_m_b2 = T::from_double(1.0 - self.beta2);
        // Fold the bias corrections into one step-size factor.
        let correct1 = 1.0 - self.beta1.powi(self.step as i32);
        let correct2 = 1.0 - self.beta2.powi(self.step as i32);
        let alpha = T::from_double(self.lr * correct2.sqrt() / correct1);
        let eps_hat = T::from_double(self.eps * correct2.sqrt());
        let moments = &mut self.moments;
        let mut index = 0usize;
        model.visit_params(&mut |_, param, grad| {
            if moments.len() == index {
                moments.push((vec![T::zero(); param.len()], vec![T::zero(); param.len()]));
            }
            let (m, v) = &mut moments[index];
            index += 1;
            for ((p, &g), (m_i, v_i)) in param
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m_i = b1 * *m_i + one_m_b1 * g;
                *v_i = b2 * *v_i + one_m_b2 * g * g;
                *p = *p - alpha * *m_i / (v_i.sqrt() + eps_hat);
            }
        });
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Early stopping on validation masked MAE: stop after this many
    /// epochs without improvement (needs a validation split).
    pub patience: Option<usize>,
    /// Stop once training MAE (Hz) and accuracy targets are both met, if
    /// set; checked in eval mode.
    pub target_train_mae_hz: Option<f64>,
    pub target_train_accuracy: Option<f64>,
    /// Where to append per-epoch JSON lines, if anywhere.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            patience: None,
            target_train_mae_hz: None,
            target_train_accuracy: None,
            log_path: None,
        }
    }
}

/// One epoch's numbers, logged as a JSON line.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mae_hz: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_mmae_hz: Option<f64>,
    pub seconds: f64,
}

/// A model paired with everything inference needs.
pub struct TrainOutcome<T: Scalar> {
    pub model: BpfEstimator<T>,
    pub log: Vec<EpochLog>,
}

/// Segments packed as tensors once, reused across epochs.
struct Prepared<T: Scalar> {
    inputs: Vec<Array4<T>>,     // each [1, 2, frames, bins]
    label_bpf: Vec<Array2<T>>,  // [frames, 2]
    label_act: Vec<Array2<T>>,  // [frames, 1] stored as column
}

fn prepare<T: Scalar>(segments: &[LabeledSegment]) -> Prepared<T> {
    let mut inputs = Vec::with_capacity(segments.len());
    let mut label_bpf = Vec::with_capacity(segments.len());
    let mut label_act = Vec::with_capacity(segments.len());
    for seg in segments {
        let frames = seg.features.frames;
        let bins = seg.features.mel.ncols();
        let mut x = Array4::zeros((1, 2, frames, bins));
        for t in 0..frames {
            for k in 0..bins {
                x[[0, 0, t, k]] = T::from_double(seg.features.mel[[t, k]]);
                x[[0, 1, t, k]] = T::from_double(seg.features.cepstrum[[t, k]]);
            }
        }
        inputs.push(x);
        label_bpf.push(Array2::from_shape_fn((frames, 2), |(t, m)| {
            T::from_double(seg.bpf[t][m])
        }));
        label_act.push(Array2::from_shape_fn((frames, 1), |(t, _)| {
            T::from_double(seg.activity[t] as f64)
        }));
    }
    Prepared {
        inputs,
        label_bpf,
        label_act,
    }
}

/// Stack segment tensors into one batch `[b, 2, frames, bins]`.
fn stack_batch<T: Scalar>(prep: &Prepared<T>, idxs: &[usize]) -> (Array4<T>, Array3<T>, Array2<T>) {
    let (_, c, frames, bins) = prep.inputs[idxs[0]].dim();
    let b = idxs.len();
    let mut x = Array4::zeros((b, c, frames, bins));
    let mut bpf = Array3::zeros((b, frames, 2));
    let mut act = Array2::zeros((b, frames));
    for (bi, &i) in idxs.iter().enumerate() {
        x.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&prep.inputs[i].index_axis(ndarray::Axis(0), 0));
        for t in 0..frames {
            bpf[[bi, t, 0]] = prep.label_bpf[i][[t, 0]];
            bpf[[bi, t, 1]] = prep.label_bpf[i][[t, 1]];
            act[[bi, t]] = prep.label_act[i][[t, 0]];
        }
    }
    (x, bpf, act)
}

/// Eval-mode metrics over a segment set: (loss, MAE over label-active
/// frames, activity accuracy at 0.5, masked MAE).
fn eval_metrics<T: Scalar>(
    model: &mut BpfEstimator<T>,
    prep: &Prepared<T>,
    segments: &[LabeledSegment],
    loss_cfg: &LossConfig,
    batch_size: usize,
) -> Result<(f64, Option<f64>, Option<f64>, Option<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let (mut err_sum, mut err_n) = (0.0, 0usize);
    let (mut merr_sum, mut merr_n) = (0.0, 0usize);
    let (mut correct, mut total) = (0usize, 0usize);
    let n = segments.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idxs: Vec<usize> = (start..end).collect();
        let (x, label_bpf, label_act) = stack_batch(prep, &idxs);
        let out = model.forward(&x, false, &mut rng)?;
        loss_sum += batch_loss(&out, &label_bpf, &label_act, loss_cfg) * idxs.len() as f64;
        loss_n += idxs.len();
        for (bi, &i) in idxs.iter().enumerate() {
            let seg = &segments[i];
            for t in 0..seg.activity.len() {
                let act_pred = out.activity[[bi, t]].to_double();
                let active_label = seg.activity[t] == 1;
                if (act_pred >= 0.5) == active_label {
                    correct += 1;
                }
                total += 1;
                if active_label {
                    for m in 0..2 {
                        let e = (out.bpf[[bi, t, m]].to_double() - seg.bpf[t][m]).abs();
                        err_sum += e;
                        err_n += 1;
                        if act_pred >= 0.5 {
                            merr_sum += e;
                            merr_n += 1;
                        }
                    }
                }
            }
        }
        start = end;
    }
    Ok((
        loss_sum / loss_n.max(1) as f64,
        (err_n > 0).then(|| err_sum / err_n as f64),
        (total > 0).then(|| correct as f64 / total as f64),
        (merr_n > 0).then(|| merr_sum / merr_n as f64),
    ))
}

/// Train a model on labeled segments; deterministic given the seed.
pub fn train<T: Scalar>(
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    train_cfg: &TrainConfig,
    train_segments: &[LabeledSegment],
    valid_segments: &[LabeledSegment],
) -> Result<TrainOutcome<T>> {
    if train_segments.is_empty() {
        return Err(Error::EmptyDataset("no training segments".into()));
    }
    let frames0 = train_segments[0].features.frames;
    if train_segments.iter().any(|s| s.features.frames != frames0) {
        return Err(Error::ShapeMismatch(
            "training segments must share a frame count".into(),
        ));
    }

    let mut model = BpfEstimator::<T>::new(model_cfg, train_cfg.seed)?;
    let mut adam = Adam::new(train_cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x5eed);

    let prep = prepare::<T>(train_segments);
    let val_prep = prepare::<T>(valid_segments);

    let mut log = Vec::new();
    let mut log_file = match &train_cfg.log_path {
        Some(path) => Some(
            std::fs::File::create(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?,
        ),
        None => None,
    };

    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train_segments.len()).collect();
    let batch_size = train_cfg.batch_size.max(1);

    for epoch in 0..train_cfg.epochs {
        let t0 = std::time::Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch_size) {
            let (x, label_bpf, label_act) = stack_batch(&prep, chunk);
            let out = model.forward(&x, true, &mut rng)?;
            let loss = batch_loss(&out, &label_bpf, &label_act, &loss_cfg);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss diverged at epoch {epoch} (loss {loss})"
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
            let (d_bpf, d_act) = loss_gradients(&out, &label_bpf, &label_act, &loss_cfg);
            model.zero_grads();
            model.backward(&d_bpf, &d_act);
            adam.step(&mut model);
        }
        let train_loss = epoch_loss / seen as f64;

        // Check capacity targets in eval mode only when the cheap
        // train-mode loss makes success plausible.
        let mut train_mae = None;
        let mut train_acc = None;
        let targets_set =
            train_cfg.target_train_mae_hz.is_some() || train_cfg.target_train_accuracy.is_some();
        let mut stop_on_target = false;
        if targets_set {
            let target_loss_hint = train_cfg
                .target_train_mae_hz
                .map(|m| m * m * 4.0)
                .unwrap_or(f64::INFINITY);
            if train_loss < target_loss_hint {
                let (_, mae, acc, _) =
                    eval_metrics(&mut model, &prep, train_segments, &loss_cfg, batch_size)?;
                train_mae = mae;
                train_acc = acc;
                let mae_ok = match (train_cfg.target_train_mae_hz, mae) {
                    (Some(target), Some(v)) => v < target,
                    (Some(_), None) => false,
                    (None, _) => true,
                };
                let acc_ok = match (train_cfg.target_train_accuracy, acc) {
                    (Some(target), Some(v)) => v >= target,
                    (Some(_), None) => false,
                    (None, _) => true,
                };
                stop_on_target = mae_ok && acc_ok;
            }
        }

        let mut val_loss = None;
        let mut val_mmae = None;
        if !valid_segments.is_empty() {
            let (vl, _, _, mmae) =
                eval_metrics(&mut model, &val_prep, valid_segments, &loss_cfg, batch_size)?;
            val_loss = Some(vl);
            val_mmae = mmae;
            if let Some(patience) = train_cfg.patience {
                let score = mmae.unwrap_or(vl);
                if score < best_val {
                    best_val = score;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best > patience {
                        log::info!("early stop at epoch {epoch}: no improvement for {patience}");
                    }
                }
            }
        }

        let entry = EpochLog {
            epoch,
            train_loss,
            train_mae_hz: train_mae,
            train_accuracy: train_acc,
            val_loss,
            val_mmae_hz: val_mmae,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(file) = log_file.as_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(file, "{line}").map_err(|e| Error::io("train log", e))?;
        }
        log::info!(
            "epoch {epoch}: loss {train_loss:.4}{}",
            train_mae
                .map(|m| format!(", train MAE {m:.2} Hz"))
                .unwrap_or_default()
        );
        log.push(entry);

        if stop_on_target {
            break;
        }
        if let (Some(patience), false) = (train_cfg.patience, valid_segments.is_empty()) {
            if since_best > patience {
                break;
            }
        }
    }

    Ok(TrainOutcome { model, log })
}
