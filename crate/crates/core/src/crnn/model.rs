//! The multitask convolutional-recurrent BPF estimator.
//!
//! Four parallel convolution blocks with kernel widths (33, 21, 11, 3)
//! read the `2 x 128` feature image per frame; their outputs concatenate
//! to 128 channels and flatten to 16384 features per frame. Two branches
//! (BPF regression, drone activity) each run three stacked bidirectional
//! GRUs and a two-layer fully connected head. The BPF head ends in ReLU
//! scaled by a fixed output gain; the activity head ends in a sigmoid.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gru::BiGru;
use super::layers::{BatchNorm2d, Conv2d, Dense, Dropout, ParamFn, Relu4};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Architecture constants; the defaults reproduce the reference network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub kernel_widths: [usize; 4],
    pub conv_channels: (usize, usize),
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub dropout_p: f64,
    pub fc_hidden: usize,
    pub input_channels: usize,
    pub input_bins: usize,
    /// The ReLU head's output is multiplied by this gain so weights stay
    /// O(1) while predictions span hundreds of Hz.
    pub bpf_output_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kernel_widths: [33, 21, 11, 3],
            conv_channels: (16, 32),
            gru_hidden: 128,
            gru_layers: 3,
            dropout_p: 0.4,
            fc_hidden: 128,
            input_channels: 2,
            input_bins: 128,
            bpf_output_scale: 500.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            self.conv_channels.0,
            self.conv_channels.1,
            self.gru_hidden,
            self.gru_layers,
            self.fc_hidden,
            self.input_channels,
            self.input_bins,
        ];
        if positives.iter().any(|&v| v == 0) || self.kernel_widths.iter().any(|&k| k == 0) {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig("dropout_p must be in [0, 1)".into()));
        }
        if self.bpf_output_scale <= 0.0 {
            return Err(Error::InvalidConfig("bpf_output_scale must be positive".into()));
        }
        Ok(())
    }

    /// Channels after concatenating the conv blocks.
    pub fn concat_channels(&self) -> usize {
        4 * self.conv_channels.1
    }

    /// Per-frame feature width after flattening channels and bins.
    pub fn flattened_width(&self) -> usize {
        self.concat_channels() * self.input_bins
    }
}

/// Loss term weights.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the BPF mean-squared-error term.
    pub alpha: f64,
    /// Weight of the activity binary-cross-entropy term.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

/// Probability clip inside the BCE term.
pub const BCE_EPS: f64 = 1e-7;

/// Combined multitask loss: `alpha * mean((bpf_pred - bpf)^2) +
/// beta * mean(bce(act_pred, act))`, means over frames and outputs.
pub fn multitask_loss(
    pred_bpf: &Array2<f64>,
    pred_act: &Array1<f64>,
    label_bpf: &Array2<f64>,
    label_act: &Array1<f64>,
    cfg: &LossConfig,
) -> Result<f64> {
    if pred_bpf.dim() != label_bpf.dim() {
        return Err(Error::ShapeMismatch(format!(
            "bpf {:?} vs {:?}",
            pred_bpf.dim(),
            label_bpf.dim()
        )));
    }
    if pred_act.len() != label_act.len() || pred_act.len() != pred_bpf.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "activity {} vs {} (frames {})",
            pred_act.len(),
            label_act.len(),
            pred_bpf.nrows()
        )));
    }
    if pred_bpf.is_empty() {
        return Err(Error::InvalidInput("empty loss input".into()));
    }
    let mse = pred_bpf
        .iter()
        .zip(label_bpf.iter())
        .map(|(&p, &y)| (p - y) * (p - y))
        .sum::<f64>()
        / pred_bpf.len() as f64;
    let bce = pred_act
        .iter()
        .zip(label_act.iter())
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / pred_act.len() as f64;
    Ok(cfg.alpha * mse + cfg.beta * bce)
}

/// One convolution block: conv(3, k) + BN + ReLU, conv(3, 3) + BN + ReLU.
struct ConvBlockLayer<T: Scalar> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu4<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    relu2: Relu4<T>,
}

impl<T: Scalar> ConvBlockLayer<T> {
    fn new(cfg: &ModelConfig, kernel_w: usize, rng: &mut ChaCha8Rng) -> Self {
        let (c1, c2) = cfg.conv_channels;
        ConvBlockLayer {
            conv1: Conv2d::new(cfg.input_channels, c1, 3, kernel_w, rng),
            bn1: BatchNorm2d::new(c1),
            relu1: Relu4::new(),
            conv2: Conv2d::new(c1, c2, 3, 3, rng),
            bn2: BatchNorm2d::new(c2),
            relu2: Relu4::new(),
        }
    }

    fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let a = self.conv1.forward(x, train);
        let a = self.bn1.forward(&a, train);
        let a = self.relu1.forward(a, train);
        let b = self.conv2.forward(&a, train);
        let b = self.bn2.forward(&b, train);
        self.relu2.forward(b, train)
    }

    fn backward(&mut self, dy: Array4<T>) -> Array4<T> {
        let d = self.relu2.backward(dy);
        let d = self.bn2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = self.relu1.backward(d);
        let d = self.bn1.backward(&d);
        self.conv1.backward(&d)
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
    }
}

/// Which nonlinearity ends a branch head.
#[derive(Clone, Copy, PartialEq)]
enum HeadKind {
    /// ReLU times the output gain; 2 outputs.
    Bpf,
    /// Sigmoid; 1 output.
    Activity,
}

/// One task branch: stacked bidirectional GRUs plus the FC head.
struct Branch<T: Scalar> {
    grus: Vec<BiGru<T>>,
    inter_drops: Vec<Dropout<T>>,
    fc1: Dense<T>,
    fc_drop: Dropout<T>,
    fc2: Dense<T>,
    head: HeadKind,
    scale: T,
    // Caches for backward.
    gru_inputs: Vec<Array2<T>>, // inputs to GRU layers 2..N
    fc1_relu_mask: Option<Array2<T>>,
    head_pre: Option<Array2<T>>, // pre-scale ReLU output (bpf head only)
}

impl<T: Scalar> Branch<T> {
    fn new(cfg: &ModelConfig, head: HeadKind, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.gru_hidden;
        let mut grus = Vec::with_capacity(cfg.gru_layers);
        let mut inter_drops = Vec::new();
        for layer in 0..cfg.gru_layers {
            let input = if layer == 0 { cfg.flattened_width() } else { 2 * h };
            grus.push(BiGru::new(input, h, rng));
            if layer + 1 < cfg.gru_layers {
                inter_drops.push(Dropout::new(cfg.dropout_p));
            }
        }
        let out_dim = match head {
            HeadKind::Bpf => 2,
            HeadKind::Activity => 1,
        };
        Branch {
            grus,
            inter_drops,
            fc1: Dense::new(2 * h, cfg.fc_hidden, rng),
            fc_drop: Dropout::new(cfg.dropout_p),
            fc2: Dense::new(cfg.fc_hidden, out_dim, rng),
            head,
            scale: T::from_double(cfg.bpf_output_scale),
            gru_inputs: Vec::new(),
            fc1_relu_mask: None,
            head_pre: None,
        }
    }

    /// `x` is the shared flattened conv output `[t*b, width]`.
    fn forward(
        &mut self,
        x: &Array2<T>,
        batch: usize,
        time: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Array2<T> {
        self.gru_inputs.clear();
        let mut h = self.grus[0].forward(x, batch, time, train);
        for layer in 1..self.grus.len() {
            h = self.inter_drops[layer - 1].forward(h, train, rng);
            if train {
                self.gru_inputs.push(h.clone());
            }
            h = self.grus[layer].forward(&h, batch, time, train);
        }
        let mut h = self.fc1.forward(&h, train);
        h.mapv_inplace(|v| v.max(T::zero()));
        self.fc1_relu_mask = train.then(|| h.clone());
        let h = self.fc_drop.forward(h, train, rng);
        let mut y = self.fc2.forward(&h, train);
        match self.head {
            HeadKind::Bpf => {
                y.mapv_inplace(|v| v.max(T::zero()));
                self.head_pre = train.then(|| y.clone());
                y.mapv_inplace(|v| v * self.scale);
            }
            HeadKind::Activity => {
                y.mapv_inplace(|v| T::one() / (T::one() + (-v).exp()));
            }
        }
        y
    }

    /// `dy` is the gradient w.r.t. the branch output; for the activity
    /// head pass the gradient w.r.t. the LOGIT (the sigmoid is folded
    /// into the loss gradient for stability).
    fn backward(&mut self, dy: &Array2<T>, x: &Array2<T>) -> Array2<T> {
        let d_out = match self.head {
            HeadKind::Bpf => {
                let pre = self.head_pre.take().expect("bpf head cache");
                let mut d = dy.clone();
                ndarray::Zip::from(&mut d).and(&pre).for_each(|g, &p| {
                    *g = if p > T::zero() { *g * self.scale } else { T::zero() };
                });
                d
            }
            HeadKind::Activity => dy.clone(),
        };
        let d = self.fc2.backward(&d_out);
        let mut d = self.fc_drop.backward(d);
        let mask = self.fc1_relu_mask.take().expect("fc relu cache");
        ndarray::Zip::from(&mut d).and(&mask).for_each(|g, &m| {
            if m <= T::zero() {
                *g = T::zero();
            }
        });
        let mut d = self.fc1.backward(&d);
        for layer in (1..self.grus.len()).rev() {
            let input = &self.gru_inputs[layer - 1];
            let d_in = self.grus[layer].backward(input, &d);
            d = self.inter_drops[layer - 1].backward(d_in);
        }
        self.gru_inputs.clear();
        self.grus[0].backward(x, &d)
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        for (i, gru) in self.grus.iter_mut().enumerate() {
            gru.visit(&format!("{prefix}.gru{i}"), f);
        }
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
}

/// The full two-branch estimator network.
pub struct BpfEstimator<T: Scalar> {
    pub cfg: ModelConfig,
    blocks: Vec<ConvBlockLayer<T>>,
    bpf_branch: Branch<T>,
    act_branch: Branch<T>,
    // Shared caches for backward.
    input: Option<Array4<T>>,
    flat: Option<Array2<T>>,
    block_channels: usize,
}

/// Network outputs for a batch, time-major inside, exposed batch-major.
pub struct Outputs<T: Scalar> {
    /// `[batch, time, 2]` BPF in Hz (unsorted heads).
    pub bpf: Array3<T>,
    /// `[batch, time]` activity in [0, 1].
    pub activity: Array2<T>,
}

impl<T: Scalar> BpfEstimator<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = cfg
            .kernel_widths
            .iter()
            .map(|&k| ConvBlockLayer::new(&cfg, k, &mut rng))
            .collect();
        let bpf_branch = Branch::new(&cfg, HeadKind::Bpf, &mut rng);
        let act_branch = Branch::new(&cfg, HeadKind::Activity, &mut rng);
        let block_channels = cfg.conv_channels.1;
        Ok(BpfEstimator {
            cfg,
            blocks,
            bpf_branch,
            act_branch,
            input: None,
            flat: None,
            block_channels,
        })
    }

    /// Number of trainable parameters.
    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p, _| n += p.len());
        n
    }

    /// Forward pass over `[batch, channels, time, bins]`.
    pub fn forward(
        &mut self,
        x: &Array4<T>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Outputs<T>> {
        let (batch, channels, time, bins) = x.dim();
        if channels != self.cfg.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {channels} channels, expected {}",
                self.cfg.input_channels
            )));
        }
        if bins != self.cfg.input_bins {
            return Err(Error::ShapeMismatch(format!(
                "input has {bins} bins, expected {}",
                self.cfg.input_bins
            )));
        }
        if time == 0 || batch == 0 {
            return Err(Error::ShapeMismatch("empty input".into()));
        }

        // Conv blocks, concatenated channel-wise and flattened per frame
        // into time-major [t*b, channels * bins].
        let width = self.cfg.flattened_width();
        let mut flat = Array2::zeros((time * batch, width));
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            let y = block.forward(x, train); // [b, c2, t, k]
            let c2 = self.block_channels;
            let y_slice = y.as_slice().unwrap();
            let flat_slice = flat.as_slice_mut().unwrap();
            let col0 = bi * c2 * bins;
            for b in 0..batch {
                for c in 0..c2 {
                    for t in 0..time {
                        let src = ((b * c2 + c) * time + t) * bins;
                        let dst = (t * batch + b) * width + col0 + c * bins;
                        flat_slice[dst..dst + bins]
                            .copy_from_slice(&y_slice[src..src + bins]);
                    }
                }
            }
        }

        let bpf_tm = self.bpf_branch.forward(&flat, batch, time, train, rng);
        let act_tm = self.act_branch.forward(&flat, batch, time, train, rng);

        if train {
            self.input = Some(x.clone());
            self.flat = Some(flat);
        }

        // Re-arrange to batch-major.
        let mut bpf = Array3::zeros((batch, time, 2));
        let mut activity = Array2::zeros((batch, time));
        for t in 0..time {
            for b in 0..batch {
                let row = t * batch + b;
                bpf[[b, t, 0]] = bpf_tm[[row, 0]];
                bpf[[b, t, 1]] = bpf_tm[[row, 1]];
                activity[[b, t]] = act_tm[[row, 0]];
            }
        }
        Ok(Outputs { bpf, activity })
    }

    /// Backward pass; gradients are batch-major, matching [`Outputs`].
    /// `d_act_logit` is the gradient w.r.t. the activity logit.
    pub fn backward(&mut self, d_bpf: &Array3<T>, d_act_logit: &Array2<T>) {
        let (batch, time, _) = d_bpf.dim();
        let flat = self.flat.take().expect("backward without forward");
        let x = self.input.take().expect("backward without forward");
        let (_, _, _, bins) = x.dim();
        let width = self.cfg.flattened_width();

        let mut d_bpf_tm = Array2::zeros((time * batch, 2));
        let mut d_act_tm = Array2::zeros((time * batch, 1));
        for t in 0..time {
            for b in 0..batch {
                let row = t * batch + b;
                d_bpf_tm[[row, 0]] = d_bpf[[b, t, 0]];
                d_bpf_tm[[row, 1]] = d_bpf[[b, t, 1]];
                d_act_tm[[row, 0]] = d_act_logit[[b, t]];
            }
        }

        let mut d_flat = self.bpf_branch.backward(&d_bpf_tm, &flat);
        d_flat += &self.act_branch.backward(&d_act_tm, &flat);

        // Un-flatten back to per-block gradients and push through convs.
        let c2 = self.block_channels;
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            let mut dy = Array4::zeros((batch, c2, time, bins));
            {
                let dy_slice = dy.as_slice_mut().unwrap();
                let d_flat_slice = d_flat.as_slice().unwrap();
                let col0 = bi * c2 * bins;
                for b in 0..batch {
                    for c in 0..c2 {
                        for t in 0..time {
                            let dst = ((b * c2 + c) * time + t) * bins;
                            let src = (t * batch + b) * width + col0 + c * bins;
                            dy_slice[dst..dst + bins]
                                .copy_from_slice(&d_flat_slice[src..src + bins]);
                        }
                    }
                }
            }
            block.backward(dy);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, _, g| g.fill(T::zero()));
    }

    /// Visit every `(name, param, grad)` in a fixed deterministic order.
    pub fn visit_params(&mut self, f: &mut ParamFn<T>) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit(&format!("block{i}"), f);
        }
        self.bpf_branch.visit("bpf", f);
        self.act_branch.visit("act", f);
    }

    /// Visit non-trainable buffers (batch-norm running statistics).
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_buffers(&format!("block{i}"), f);
        }
    }
}

/// Gradient of the multitask loss w.r.t. the BPF output and the activity
/// logit, mean-reduced to match [`multitask_loss`].
pub fn loss_gradients<T: Scalar>(
    out: &Outputs<T>,
    label_bpf: &Array3<T>,
    label_act: &Array2<T>,
    cfg: &LossConfig,
) -> (Array3<T>, Array2<T>) {
    let (batch, time, _) = out.bpf.dim();
    let n_bpf = T::from_double((batch * time * 2) as f64);
    let n_act = T::from_double((batch * time) as f64);
    let alpha = T::from_double(cfg.alpha);
    let beta = T::from_double(cfg.beta);
    let two = T::from_double(2.0);

    let mut d_bpf = Array3::zeros(out.bpf.raw_dim());
    ndarray::Zip::from(&mut d_bpf)
        .and(&out.bpf)
        .and(label_bpf)
        .for_each(|d, &p, &y| {
            *d = alpha * two * (p - y) / n_bpf;
        });
    // d / d logit of BCE(sigmoid(logit)) = (p - y), scaled by beta / n.
    let mut d_act = Array2::zeros(out.activity.raw_dim());
    ndarray::Zip::from(&mut d_act)
        .and(&out.activity)
        .and(label_act)
        .for_each(|d, &p, &y| {
            *d = beta * (p - y) / n_act;
        });
    (d_bpf, d_act)
}

/// Batch loss on network outputs (f64 accumulation regardless of T).
pub fn batch_loss<T: Scalar>(
    out: &Outputs<T>,
    label_bpf: &Array3<T>,
    label_act: &Array2<T>,
    cfg: &LossConfig,
) -> f64 {
    let mse = out
        .bpf
        .iter()
        .zip(label_bpf.iter())
        .map(|(&p, &y)| {
            let d = p.to_double() - y.to_double();
            d * d
        })
        .sum::<f64>()
        / out.bpf.len() as f64;
    let bce = out
        .activity
        .iter()
        .zip(label_act.iter())
        .map(|(&p, &y)| {
            let p = p.to_double().clamp(BCE_EPS, 1.0 - BCE_EPS);
            let y = y.to_double();
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / out.activity.len() as f64;
    cfg.alpha * mse + cfg.beta * bce
}

impl<T: Scalar> BpfEstimator<T> {
    /// Convenience single-segment inference: `frames x 2` BPF and
    /// `frames` activity.
    pub fn infer(&mut self, mel: &Array2<f64>, cepstrum: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let frames = mel.nrows();
        let bins = mel.ncols();
        let mut x = Array4::zeros((1, 2, frames, bins));
        for t in 0..frames {
            for k in 0..bins {
                x[[0, 0, t, k]] = T::from_double(mel[[t, k]]);
                x[[0, 1, t, k]] = T::from_double(cepstrum[[t, k]]);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&x, false, &mut rng)?;
        let bpf = Array2::from_shape_fn((frames, 2), |(t, m)| out.bpf[[0, t, m]].to_double());
        let act = Array1::from_shape_fn(frames, |t| out.activity[[0, t]].to_double());
        Ok((bpf, act))
    }
}
