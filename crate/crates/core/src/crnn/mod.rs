//! Trainable multitask estimator: per-frame BPF pair regression plus
//! drone-activity detection, with training, checkpointing, and
//! long-audio inference.

mod checkpoint;
mod gru;
mod layers;
mod model;
mod scalar;
mod train;

pub use checkpoint::{load, save, CheckpointMeta};
pub use model::{
    batch_loss, loss_gradients, multitask_loss, BpfEstimator, LossConfig, ModelConfig, Outputs,
    BCE_EPS,
};
pub use scalar::Scalar;
pub use train::{train, Adam, EpochLog, TrainConfig, TrainOutcome};

use crate::audio::AudioSegment;
use crate::error::Result;
use crate::features::{feature_block, NormStats};
use crate::track::BpfTrack;

/// Frames per inference window.
pub const PREDICT_WINDOW_FRAMES: usize = 93;
/// Stride between inference windows (about 50% overlap).
pub const PREDICT_STRIDE_FRAMES: usize = 46;

/// Run the estimator over audio of any length.
///
/// Long inputs are windowed into 93-frame blocks with 50% overlap plus a
/// final tail window; per-frame predictions from overlapping windows are
/// averaged. BPF pairs are sorted ascending and zeroed on frames whose
/// activity falls below the threshold.
pub fn predict<T: Scalar>(
    model: &mut BpfEstimator<T>,
    norm: &NormStats,
    audio: &AudioSegment,
    activity_threshold: f64,
) -> Result<BpfTrack> {
    let block = feature_block(audio, norm)?;
    let frames = block.frames;

    let mut starts: Vec<usize> = Vec::new();
    if frames <= PREDICT_WINDOW_FRAMES {
        starts.push(0);
    } else {
        let mut s = 0;
        while s + PREDICT_WINDOW_FRAMES < frames {
            starts.push(s);
            s += PREDICT_STRIDE_FRAMES;
        }
        let tail = frames - PREDICT_WINDOW_FRAMES;
        if starts.last() != Some(&tail) {
            starts.push(tail);
        }
    }

    let mut bpf_sum = vec![[0.0f64; 2]; frames];
    let mut act_sum = vec![0.0f64; frames];
    let mut hits = vec![0u32; frames];
    for &s in &starts {
        let len = PREDICT_WINDOW_FRAMES.min(frames);
        let mel = block.mel.slice(ndarray::s![s..s + len, ..]).to_owned();
        let cep = block.cepstrum.slice(ndarray::s![s..s + len, ..]).to_owned();
        let (bpf, act) = model.infer(&mel, &cep)?;
        for t in 0..len {
            bpf_sum[s + t][0] += bpf[[t, 0]];
            bpf_sum[s + t][1] += bpf[[t, 1]];
            act_sum[s + t] += act[t];
            hits[s + t] += 1;
        }
    }

    let mut bpf = Vec::with_capacity(frames);
    let mut activity = Vec::with_capacity(frames);
    for t in 0..frames {
        let n = hits[t].max(1) as f64;
        let mut pair = [bpf_sum[t][0] / n, bpf_sum[t][1] / n];
        if pair[0] > pair[1] {
            pair.swap(0, 1);
        }
        let act = act_sum[t] / n;
        if act < activity_threshold {
            pair = [0.0, 0.0];
        }
        bpf.push(pair);
        activity.push(act);
    }
    BpfTrack::new(bpf, activity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            dropout_p: 0.0,
            ..ModelConfig::default()
        }
    }

    fn random_input<T: Scalar>(batch: usize, frames: usize, seed: u64) -> Array4<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((batch, 2, frames, 128), || {
            T::from_double(rng.gen_range(-1.0..1.0))
        })
    }

    #[test]
    fn output_shapes_for_various_frame_counts() {
        let mut model = BpfEstimator::<f32>::new(tiny_cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for frames in [31usize, 93, 187] {
            let x = random_input::<f32>(1, frames, frames as u64);
            let out = model.forward(&x, false, &mut rng).unwrap();
            assert_eq!(out.bpf.dim(), (1, frames, 2));
            assert_eq!(out.activity.dim(), (1, frames));
        }
    }

    #[test]
    fn architecture_bookkeeping_matches_table() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.concat_channels(), 128);
        assert_eq!(cfg.flattened_width(), 16384);
    }

    #[test]
    fn outputs_respect_activation_ranges() {
        let mut model = BpfEstimator::<f32>::new(tiny_cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_input::<f32>(2, 31, 9);
        let out = model.forward(&x, false, &mut rng).unwrap();
        for &v in out.bpf.iter() {
            assert!(v >= 0.0);
        }
        for &a in out.activity.iter() {
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let mut model = BpfEstimator::<f32>::new(tiny_cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array4::<f32>::zeros((1, 3, 31, 128));
        let err = model.forward(&x, false, &mut rng).err().unwrap();
        assert!(err.to_string().contains("channels"));
        let x = Array4::<f32>::zeros((1, 2, 31, 64));
        let err = model.forward(&x, false, &mut rng).err().unwrap();
        assert!(err.to_string().contains("bins"));
    }

    #[test]
    fn loss_hand_computed_case() {
        let pred_bpf = Array2::from_shape_vec((1, 2), vec![210.0, 290.0]).unwrap();
        let label_bpf = Array2::from_shape_vec((1, 2), vec![200.0, 300.0]).unwrap();
        let pred_act = Array1::from_vec(vec![0.5]);
        let label_act = Array1::from_vec(vec![1.0]);
        let loss = multitask_loss(
            &pred_bpf,
            &pred_act,
            &label_bpf,
            &label_act,
            &LossConfig::default(),
        )
        .unwrap();
        assert!((loss - (100.0 + 2.0f64.ln())).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn loss_weight_zero_cases() {
        let pred_bpf = Array2::from_shape_vec((1, 2), vec![210.0, 290.0]).unwrap();
        let label_bpf = Array2::from_shape_vec((1, 2), vec![200.0, 300.0]).unwrap();
        let pred_act = Array1::from_vec(vec![0.5]);
        let label_act = Array1::from_vec(vec![1.0]);
        let alpha_only = multitask_loss(
            &pred_bpf,
            &pred_act,
            &label_bpf,
            &label_act,
            &LossConfig {
                alpha: 0.0,
                beta: 1.0,
            },
        )
        .unwrap();
        assert!((alpha_only - 2.0f64.ln()).abs() < 1e-9);

        // Perfect predictions: loss bounded by the clipping epsilon.
        let loss = multitask_loss(
            &label_bpf,
            &Array1::from_vec(vec![1.0]),
            &label_bpf,
            &label_act,
            &LossConfig::default(),
        )
        .unwrap();
        assert!(loss <= -(1.0 - BCE_EPS).ln() + 1e-12);
    }

    #[test]
    fn loss_shape_mismatch_is_error() {
        let a = Array2::<f64>::zeros((2, 2));
        let b = Array2::<f64>::zeros((3, 2));
        let act2 = Array1::<f64>::zeros(2);
        let act3 = Array1::<f64>::zeros(3);
        assert!(multitask_loss(&a, &act2, &b, &act3, &LossConfig::default()).is_err());
    }

    #[test]
    fn same_seed_same_outputs() {
        let x = random_input::<f32>(1, 31, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = BpfEstimator::<f32>::new(tiny_cfg(), 7).unwrap();
        let out_a = a.forward(&x, false, &mut rng).unwrap();
        let mut b = BpfEstimator::<f32>::new(tiny_cfg(), 7).unwrap();
        let out_b = b.forward(&x, false, &mut rng).unwrap();
        assert_eq!(out_a.bpf, out_b.bpf);
        assert_eq!(out_a.activity, out_b.activity);
    }

    /// Finite-difference check of the full loss gradient against the
    /// analytic backward pass, in double precision.
    #[test]
    fn finite_difference_gradients_agree() {
        let cfg = tiny_cfg();
        let mut model = BpfEstimator::<f64>::new(cfg, 11).unwrap();
        let loss_cfg = LossConfig::default();
        let frames = 5;
        let x = random_input::<f64>(1, frames, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut label_rng = ChaCha8Rng::seed_from_u64(4);
        // Labels near the initial predictions keep the loss O(1), which
        // keeps the finite differences well conditioned; a huge MSE would
        // bury small gradients in subtraction noise.
        let out0 = model.forward(&x, false, &mut rng).unwrap();
        let label_bpf = ndarray::Array3::from_shape_fn((1, frames, 2), |(b, t, m)| {
            out0.bpf[[b, t, m]] + label_rng.gen_range(-2.0..2.0)
        });
        let label_act =
            Array2::from_shape_simple_fn((1, frames), || f64::from(label_rng.gen_bool(0.5)));

        // Analytic gradients.
        let out = model.forward(&x, true, &mut rng).unwrap();
        let (d_bpf, d_act) = loss_gradients(&out, &label_bpf, &label_act, &loss_cfg);
        model.zero_grads();
        model.backward(&d_bpf, &d_act);

        // Collect every (name, index, analytic) triple we will probe:
        // a few entries from each parameter tensor.
        let mut probes: Vec<(String, usize, f64)> = Vec::new();
        let mut pick_rng = ChaCha8Rng::seed_from_u64(99);
        model.visit_params(&mut |name, param, grad| {
            let idx = pick_rng.gen_range(0..param.len());
            probes.push((name.to_string(), idx, grad[idx]));
        });
        // Keep a random subset of at least 10 probes.
        while probes.len() > 12 {
            let drop = pick_rng.gen_range(0..probes.len());
            probes.remove(drop);
        }
        assert!(probes.len() >= 10);

        let eval_loss = |model: &mut BpfEstimator<f64>| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = model.forward(&x, true, &mut rng).unwrap();
            batch_loss(&out, &label_bpf, &label_act, &loss_cfg)
        };

        for (name, idx, analytic) in probes {
            let h = 1e-5;
            let mut originals = Vec::new();
            model.visit_params(&mut |n, param, _| {
                if n == name {
                    originals.push(param[idx]);
                    param[idx] += h;
                }
            });
            let up = eval_loss(&mut model);
            model.visit_params(&mut |n, param, _| {
                if n == name {
                    param[idx] = originals[0] - h;
                }
            });
            let down = eval_loss(&mut model);
            model.visit_params(&mut |n, param, _| {
                if n == name {
                    param[idx] = originals[0];
                }
            });
            let fd = (up - down) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            let rel = (analytic - fd).abs() / denom;
            assert!(
                rel < 1e-3,
                "{name}[{idx}]: analytic {analytic:.6e} vs fd {fd:.6e} (rel {rel:.2e})"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bpfw");
        let mut model = BpfEstimator::<f32>::new(tiny_cfg(), 13).unwrap();
        let meta = CheckpointMeta {
            model: tiny_cfg(),
            loss: LossConfig::default(),
            norm: NormStats::identity(),
            activity_threshold: 0.5,
            trained_as: "f32".into(),
        };
        save(&mut model, &meta, &path).unwrap();
        let (mut back, meta2) = load::<f32>(&path).unwrap();
        assert_eq!(meta2.model, tiny_cfg());

        let x = random_input::<f32>(1, 31, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = model.forward(&x, false, &mut rng).unwrap();
        let b = back.forward(&x, false, &mut rng).unwrap();
        assert_eq!(a.bpf, b.bpf);
        assert_eq!(a.activity, b.activity);
    }

    #[test]
    fn checkpoint_missing_file_is_error() {
        let err = load::<f32>("/nonexistent/weights.bpfw").err().unwrap();
        assert!(err.to_string().contains("checkpoint"));
    }
}
