//! Overfit experiment: 10 synthetic segments, watch convergence rate.
use dropdetect_core::audio::AudioSegment;
use dropdetect_core::crnn::*;
use dropdetect_core::dataset::LabeledSegment;
use dropdetect_core::features::{feature_block, NormStats};
use dropdetect_core::synth::*;

fn scene_segment(f1: f64, f2: f64, seed: u64) -> (AudioSegment, Vec<[f64; 2]>, Vec<u8>) {
    let spec = SceneSpec {
        rotors: vec![
            RotorTraj { base_bpf: f1, jitter_sigma: 2.0, harmonics: 8, mode2_freq: 5000.0, mode2_gain: 0.3, gain: 1.0, step_events: vec![] },
            RotorTraj { base_bpf: f2, jitter_sigma: 2.0, harmonics: 8, mode2_freq: 5000.0, mode2_gain: 0.3, gain: 1.0, step_events: vec![] },
        ],
        duration_s: 3.0,
        distance_traj: vec![(0.0, 15.0)],
        noise: Some(NoiseSpec { kind: NoiseKind::White, snr_db: 20.0 }),
        delivery: vec![],
        seed,
    };
    let scene = render_scene(&spec).unwrap();
    let n = 93 * 512;
    let audio = scene.audio.slice(0, n).unwrap();
    (audio, scene.labels.bpf[..93].to_vec(), scene.labels.activity[..93].to_vec())
}

fn main() {
    let mut raw: Vec<(AudioSegment, Vec<[f64; 2]>, Vec<u8>)> = Vec::new();
    let pairs = [(150.0, 210.0), (220.0, 260.0), (180.0, 330.0), (240.0, 300.0),
                 (130.0, 400.0), (350.0, 420.0), (200.0, 240.0), (280.0, 460.0)];
    for (i, (a, b)) in pairs.into_iter().enumerate() {
        raw.push(scene_segment(a, b, i as u64 + 1));
    }
    for i in 0..2 {
        let noise = render_noise(&NoiseKind::White, 93 * 512, 100 + i).unwrap();
        let quiet = AudioSegment::new(noise.samples().iter().map(|s| s * 0.05).collect(), 0.0).unwrap();
        raw.push((quiet, vec![[0.0, 0.0]; 93], vec![0; 93]));
    }
    // features + train-corpus stats
    let identity = NormStats::identity();
    let blocks: Vec<_> = raw.iter().map(|(a, _, _)| feature_block(a, &identity).unwrap()).collect();
    let norm = NormStats::from_blocks(blocks.iter()).unwrap();
    let segs: Vec<LabeledSegment> = raw.iter().map(|(a, bpf, act)| {
        LabeledSegment {
            source_id: "overfit".into(),
            features: feature_block(a, &norm).unwrap(),
            bpf: bpf.clone(),
            activity: act.clone(),
            augmented: false,
            distance_mean_m: None,
            distance_max_m: None,
        }
    }).collect();

    let cfg = ModelConfig { dropout_p: 0.0, ..ModelConfig::default() };
    let tc = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 2,
        epochs: 300,
        seed: 7,
        patience: None,
        target_train_mae_hz: Some(10.0),
        target_train_accuracy: Some(1.0),
        log_path: None,
    };
    let t0 = std::time::Instant::now();
    let out = train::<f32>(cfg, LossConfig::default(), &tc, &segs, &[]).unwrap();
    let last = out.log.last().unwrap();
    println!("epochs run: {} in {:.1} s", out.log.len(), t0.elapsed().as_secs_f64());
    println!("final: loss {:.3} mae {:?} acc {:?}", last.train_loss, last.train_mae_hz, last.train_accuracy);
    for e in out.log.iter().step_by(10) {
        println!("  epoch {:3}: loss {:10.3}  mae {:?}", e.epoch, e.train_loss, e.train_mae_hz);
    }
}
