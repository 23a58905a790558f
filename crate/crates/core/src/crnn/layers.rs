//! Network building blocks with explicit forward/backward passes.
//!
//! Layers own their parameters and gradient buffers. Heavyweight
//! activations that a layer must see again in its backward pass are
//! either cached inside the layer (when no other layer needs them) or
//! passed back in by the model to avoid duplicate copies.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;

/// Visitor over `(name, param, grad)` flat slices, in a fixed order.
pub(crate) type ParamFn<'a, T> = dyn FnMut(&str, &mut [T], &mut [T]) + 'a;

/// Uniform init in (-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default
/// for conv/linear/recurrent weights.
pub(crate) fn uniform_init<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len)
        .map(|_| T::from_double(rng.gen_range(-bound..bound)))
        .collect()
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution over `[batch, channels, time, bins]`, stride 1, with
/// padding that preserves the time and bin dimensions.
///
/// Bias-free: every convolution here feeds a batch norm, which would
/// cancel a channel-constant bias anyway (and leave its gradient
/// identically zero).
pub(crate) struct Conv2d<T: Scalar> {
    pub w: Array4<T>, // [c_out, c_in, kh, kw]
    pub gw: Array4<T>,
    pad: (usize, usize),
    cache_x: Option<Array4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(c_in: usize, c_out: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = c_in * kh * kw;
        let w = Array4::from_shape_vec(
            (c_out, c_in, kh, kw),
            uniform_init(rng, fan_in, c_out * fan_in),
        )
        .unwrap();
        Conv2d {
            gw: Array4::zeros(w.raw_dim()),
            w,
            pad: (kh / 2, kw / 2),
            cache_x: None,
        }
    }

    /// Patch matrix `[b*t*k, c_in*kh*kw]` with zero padding.
    ///
    /// The innermost kernel-width span maps to a contiguous run of the
    /// input row, so each (channel, kernel-row) pair is one slice copy
    /// clipped at the bin edges.
    fn im2col(&self, x: &Array4<T>) -> Array2<T> {
        let (batch, c_in, time, bins) = x.dim();
        let (_, _, kh, kw) = self.w.dim();
        let (ph, pw) = self.pad;
        let mut cols = Array2::zeros((batch * time * bins, c_in * kh * kw));
        let x_slice = x.as_slice().unwrap();
        let cols_slice = cols.as_slice_mut().unwrap();
        let row_w = c_in * kh * kw;
        for b in 0..batch {
            for t in 0..time {
                for k in 0..bins {
                    let row = ((b * time + t) * bins + k) * row_w;
                    // dk range whose source bin k + dk - pw stays in range
                    let dk_lo = pw.saturating_sub(k);
                    let dk_hi = (bins + pw - k).min(kw);
                    if dk_lo >= dk_hi {
                        continue;
                    }
                    let src_lo = k + dk_lo - pw;
                    for c in 0..c_in {
                        for dt in 0..kh {
                            let ts = t as isize + dt as isize - ph as isize;
                            if ts < 0 || ts >= time as isize {
                                continue;
                            }
                            let src = ((b * c_in + c) * time + ts as usize) * bins + src_lo;
                            let dst = row + (c * kh + dt) * kw + dk_lo;
                            cols_slice[dst..dst + dk_hi - dk_lo]
                                .copy_from_slice(&x_slice[src..src + dk_hi - dk_lo]);
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter column gradients back onto the input.
    fn col2im(&self, dcols: &Array2<T>, shape: (usize, usize, usize, usize)) -> Array4<T> {
        let (batch, c_in, time, bins) = shape;
        let (_, _, kh, kw) = self.w.dim();
        let (ph, pw) = self.pad;
        let mut dx = Array4::zeros((batch, c_in, time, bins));
        let dx_slice = dx.as_slice_mut().unwrap();
        let dcols_slice = dcols.as_slice().unwrap();
        let row_w = c_in * kh * kw;
        for b in 0..batch {
            for t in 0..time {
                for k in 0..bins {
                    let row = ((b * time + t) * bins + k) * row_w;
                    let dk_lo = pw.saturating_sub(k);
                    let dk_hi = (bins + pw - k).min(kw);
                    if dk_lo >= dk_hi {
                        continue;
                    }
                    let src_lo = k + dk_lo - pw;
                    for c in 0..c_in {
                        for dt in 0..kh {
                            let ts = t as isize + dt as isize - ph as isize;
                            if ts < 0 || ts >= time as isize {
                                continue;
                            }
                            let dst = ((b * c_in + c) * time + ts as usize) * bins + src_lo;
                            let col = row + (c * kh + dt) * kw + dk_lo;
                            let span = dk_hi - dk_lo;
                            for (acc, &g) in dx_slice[dst..dst + span]
                                .iter_mut()
                                .zip(&dcols_slice[col..col + span])
                            {
                                *acc = *acc + g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let (batch, _, time, bins) = x.dim();
        let c_out = self.w.dim().0;
        let cols = self.im2col(x);
        let w_flat = self
            .w
            .view()
            .into_shape_with_order((c_out, self.w.len() / c_out))
            .unwrap();
        let y2 = cols.dot(&w_flat.t()); // [b*t*k, c_out]
        if train {
            self.cache_x = Some(x.clone());
        }
        // [b*t*k, c_out] rows ordered (b, t, k) -> [b, c_out, t, k]
        let mut y = Array4::zeros((batch, c_out, time, bins));
        {
            let y_slice = y.as_slice_mut().unwrap();
            let y2_slice = y2.as_slice().unwrap();
            for b in 0..batch {
                for t in 0..time {
                    for k in 0..bins {
                        let src = ((b * time + t) * bins + k) * c_out;
                        for c in 0..c_out {
                            y_slice[((b * c_out + c) * time + t) * bins + k] = y2_slice[src + c];
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let x = self.cache_x.take().expect("conv backward without forward");
        let (batch, c_out, time, bins) = dy.dim();
        // [b, c_out, t, k] -> rows (b, t, k)
        let mut dy2 = Array2::zeros((batch * time * bins, c_out));
        {
            let dy_slice = dy.as_slice().unwrap();
            let dy2_slice = dy2.as_slice_mut().unwrap();
            for b in 0..batch {
                for c in 0..c_out {
                    for t in 0..time {
                        for k in 0..bins {
                            dy2_slice[((b * time + t) * bins + k) * c_out + c] =
                                dy_slice[((b * c_out + c) * time + t) * bins + k];
                        }
                    }
                }
            }
        }
        let cols = self.im2col(&x);
        let gw_update = dy2.t().dot(&cols); // [c_out, c_in*kh*kw]
        let mut gw_flat = self
            .gw
            .view_mut()
            .into_shape_with_order((c_out, self.w.len() / c_out))
            .unwrap();
        gw_flat += &gw_update;
        let w_flat = self
            .w
            .view()
            .into_shape_with_order((c_out, self.w.len() / c_out))
            .unwrap();
        let dcols = dy2.dot(&w_flat);
        self.col2im(&dcols, x.dim())
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        f(
            &format!("{prefix}.w"),
            self.w.as_slice_mut().unwrap(),
            self.gw.as_slice_mut().unwrap(),
        );
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

/// Per-channel batch normalization over `[batch, channel, time, bins]`.
pub(crate) struct BatchNorm2d<T: Scalar> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub g_gamma: Array1<T>,
    pub g_beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    momentum: f64,
    eps: f64,
    cache: Option<(Array4<T>, Array1<T>)>, // (x_hat, inv_std)
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::from_elem(channels, T::one()),
            beta: Array1::zeros(channels),
            g_gamma: Array1::zeros(channels),
            g_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, T::one()),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let (batch, channels, time, bins) = x.dim();
        let n = (batch * time * bins) as f64;
        let mut y = Array4::zeros(x.raw_dim());
        if train {
            let mut x_hat = Array4::zeros(x.raw_dim());
            let mut inv_std = Array1::zeros(channels);
            for c in 0..channels {
                let xc = x.index_axis(Axis(1), c);
                let mean = xc.sum().to_double() / n;
                let var = xc
                    .iter()
                    .map(|v| {
                        let d = v.to_double() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[c] = T::from_double(istd);
                let mean_t = T::from_double(mean);
                let istd_t = inv_std[c];
                let gamma = self.gamma[c];
                let beta = self.beta[c];
                let mut xh = x_hat.index_axis_mut(Axis(1), c);
                let mut yc = y.index_axis_mut(Axis(1), c);
                ndarray::Zip::from(&mut xh).and(&mut yc).and(&xc).for_each(
                    |xh_v, y_v, &x_v| {
                        let h = (x_v - mean_t) * istd_t;
                        *xh_v = h;
                        *y_v = gamma * h + beta;
                    },
                );
                // Running stats use the unbiased variance.
                let unbiased = var * n / (n - 1.0).max(1.0);
                let m = self.momentum;
                self.running_mean[c] =
                    T::from_double((1.0 - m) * self.running_mean[c].to_double() + m * mean);
                self.running_var[c] =
                    T::from_double((1.0 - m) * self.running_var[c].to_double() + m * unbiased);
            }
            self.cache = Some((x_hat, inv_std));
        } else {
            for c in 0..channels {
                let mean = self.running_mean[c].to_double();
                let istd = 1.0 / (self.running_var[c].to_double() + self.eps).sqrt();
                let gamma = self.gamma[c].to_double();
                let beta = self.beta[c].to_double();
                let xc = x.index_axis(Axis(1), c);
                let mut yc = y.index_axis_mut(Axis(1), c);
                ndarray::Zip::from(&mut yc).and(&xc).for_each(|y_v, x_v| {
                    *y_v = T::from_double(gamma * (x_v.to_double() - mean) * istd + beta);
                });
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (x_hat, inv_std) = self.cache.take().expect("bn backward without forward");
        let (batch, channels, time, bins) = dy.dim();
        let n = T::from_double((batch * time * bins) as f64);
        let mut dx = Array4::zeros(dy.raw_dim());
        for c in 0..channels {
            let dyc = dy.index_axis(Axis(1), c);
            let xhc = x_hat.index_axis(Axis(1), c);
            let sum_dy = dyc.sum();
            let sum_dy_xhat = ndarray::Zip::from(&dyc)
                .and(&xhc)
                .fold(T::zero(), |acc, &a, &b| acc + a * b);
            self.g_beta[c] = self.g_beta[c] + sum_dy;
            self.g_gamma[c] = self.g_gamma[c] + sum_dy_xhat;
            let scale = self.gamma[c] * inv_std[c];
            let mean_dy = sum_dy / n;
            let mean_dy_xhat = sum_dy_xhat / n;
            let mut dxc = dx.index_axis_mut(Axis(1), c);
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xhc)
                .for_each(|dx_v, &dy_v, &xh_v| {
                    *dx_v = scale * (dy_v - mean_dy - xh_v * mean_dy_xhat);
                });
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        f(
            &format!("{prefix}.gamma"),
            self.gamma.as_slice_mut().unwrap(),
            self.g_gamma.as_slice_mut().unwrap(),
        );
        f(
            &format!("{prefix}.beta"),
            self.beta.as_slice_mut().unwrap(),
            self.g_beta.as_slice_mut().unwrap(),
        );
    }

    /// Running statistics, exposed for checkpointing (not trained).
    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(
            &format!("{prefix}.running_mean"),
            self.running_mean.as_slice_mut().unwrap(),
        );
        f(
            &format!("{prefix}.running_var"),
            self.running_var.as_slice_mut().unwrap(),
        );
    }
}

// ---------------------------------------------------------------------------
// ReLU over 4-D maps
// ---------------------------------------------------------------------------

/// ReLU that caches its output; the mask is recovered from `y > 0`.
pub(crate) struct Relu4<T: Scalar> {
    cache_y: Option<Array4<T>>,
}

impl<T: Scalar> Relu4<T> {
    pub fn new() -> Self {
        Relu4 { cache_y: None }
    }

    pub fn forward(&mut self, mut x: Array4<T>, train: bool) -> Array4<T> {
        x.mapv_inplace(|v| v.max(T::zero()));
        if train {
            self.cache_y = Some(x.clone());
        }
        x
    }

    pub fn backward(&mut self, mut dy: Array4<T>) -> Array4<T> {
        let y = self.cache_y.take().expect("relu backward without forward");
        ndarray::Zip::from(&mut dy).and(&y).for_each(|d, &yv| {
            if yv <= T::zero() {
                *d = T::zero();
            }
        });
        dy
    }
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Fully connected layer on `[rows, features]`.
pub(crate) struct Dense<T: Scalar> {
    pub w: Array2<T>, // [out, in]
    pub b: Array1<T>,
    pub gw: Array2<T>,
    pub gb: Array1<T>,
    cache_x: Option<Array2<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = Array2::from_shape_vec((output, input), uniform_init(rng, input, output * input))
            .unwrap();
        let b = Array1::from_vec(uniform_init(rng, input, output));
        Dense {
            gw: Array2::zeros(w.raw_dim()),
            gb: Array1::zeros(b.raw_dim()),
            w,
            b,
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<T>, train: bool) -> Array2<T> {
        let mut y = x.dot(&self.w.t());
        for mut row in y.rows_mut() {
            row += &self.b;
        }
        if train {
            self.cache_x = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let x = self.cache_x.take().expect("dense backward without forward");
        self.gw += &dy.t().dot(&x);
        self.gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        f(
            &format!("{prefix}.w"),
            self.w.as_slice_mut().unwrap(),
            self.gw.as_slice_mut().unwrap(),
        );
        f(
            &format!("{prefix}.b"),
            self.b.as_slice_mut().unwrap(),
            self.gb.as_slice_mut().unwrap(),
        );
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout on `[rows, features]`.
pub(crate) struct Dropout<T: Scalar> {
    p: f64,
    mask: Option<Array2<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64) -> Self {
        Dropout { p, mask: None }
    }

    pub fn forward(&mut self, mut x: Array2<T>, train: bool, rng: &mut ChaCha8Rng) -> Array2<T> {
        if !train || self.p <= 0.0 {
            self.mask = None;
            return x;
        }
        let keep = 1.0 - self.p;
        let scale = T::from_double(1.0 / keep);
        let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
            if rng.gen_bool(keep) {
                scale
            } else {
                T::zero()
            }
        });
        x *= &mask;
        self.mask = Some(mask);
        x
    }

    pub fn backward(&mut self, mut dy: Array2<T>) -> Array2<T> {
        if let Some(mask) = self.mask.take() {
            dy *= &mask;
        }
        dy
    }
}
