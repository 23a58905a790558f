//! Bidirectional gated recurrent layer with explicit backpropagation
//! through time.
//!
//! Sequences are laid out time-major: `[time * batch, features]` with row
//! `t * batch + b`, so each step reads a contiguous `[batch, features]`
//! block. Gate order is (reset, update, candidate), with the candidate's
//! recurrent projection gated by reset before the tanh.

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::layers::{uniform_init, ParamFn};
use super::scalar::Scalar;

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// One direction of a GRU layer.
pub(crate) struct GruDirection<T: Scalar> {
    w_ih: Array2<T>, // [3h, in]
    w_hh: Array2<T>, // [3h, h]
    b_ih: Array1<T>,
    b_hh: Array1<T>,
    g_w_ih: Array2<T>,
    g_w_hh: Array2<T>,
    g_b_ih: Array1<T>,
    g_b_hh: Array1<T>,
    hidden: usize,
    reverse: bool,
    cache: Option<DirCache<T>>,
}

struct DirCache<T> {
    batch: usize,
    time: usize,
    r: Vec<T>,      // [t*b*h]
    z: Vec<T>,      // [t*b*h]
    n: Vec<T>,      // [t*b*h]
    gh_n: Vec<T>,   // [t*b*h] recurrent candidate pre-gate
    h_prev: Vec<T>, // [t*b*h] hidden state entering each step
}

impl<T: Scalar> GruDirection<T> {
    pub fn new(input: usize, hidden: usize, reverse: bool, rng: &mut ChaCha8Rng) -> Self {
        // Both weight matrices use the conventional 1/sqrt(hidden) bound.
        let w_ih = Array2::from_shape_vec(
            (3 * hidden, input),
            uniform_init(rng, hidden, 3 * hidden * input),
        )
        .unwrap();
        let w_hh = Array2::from_shape_vec(
            (3 * hidden, hidden),
            uniform_init(rng, hidden, 3 * hidden * hidden),
        )
        .unwrap();
        let b_ih = Array1::from_vec(uniform_init(rng, hidden, 3 * hidden));
        let b_hh = Array1::from_vec(uniform_init(rng, hidden, 3 * hidden));
        GruDirection {
            g_w_ih: Array2::zeros(w_ih.raw_dim()),
            g_w_hh: Array2::zeros(w_hh.raw_dim()),
            g_b_ih: Array1::zeros(b_ih.raw_dim()),
            g_b_hh: Array1::zeros(b_hh.raw_dim()),
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            hidden,
            reverse,
            cache: None,
        }
    }

    /// Run the direction over a time-major sequence, returning `[t*b, h]`.
    pub fn forward(&mut self, x: &Array2<T>, batch: usize, time: usize, train: bool) -> Array2<T> {
        let h = self.hidden;
        // Input projection for every step at once.
        let mut g_in = x.dot(&self.w_ih.t());
        for mut row in g_in.rows_mut() {
            row += &self.b_ih;
        }
        let gi_all = g_in.as_slice().unwrap();

        let mut out = Array2::zeros((time * batch, h));
        let out_all = out.as_slice_mut().unwrap();
        let len = time * batch * h;
        let mut cache = train.then(|| DirCache {
            batch,
            time,
            r: vec![T::zero(); len],
            z: vec![T::zero(); len],
            n: vec![T::zero(); len],
            gh_n: vec![T::zero(); len],
            h_prev: vec![T::zero(); len],
        });

        let mut state: Array2<T> = Array2::zeros((batch, h));
        for step in 0..time {
            let t = if self.reverse { time - 1 - step } else { step };
            let mut gh = state.dot(&self.w_hh.t());
            for mut row in gh.rows_mut() {
                row += &self.b_hh;
            }
            let gh_all = gh.as_slice().unwrap();
            let state_all = state.as_slice_mut().unwrap();
            for b in 0..batch {
                let row = t * batch + b;
                let gi = &gi_all[row * 3 * h..(row + 1) * 3 * h];
                let ghr = &gh_all[b * 3 * h..(b + 1) * 3 * h];
                let st = &mut state_all[b * h..(b + 1) * h];
                let out_row = &mut out_all[row * h..(row + 1) * h];
                if let Some(c) = cache.as_mut() {
                    let cr = row * h;
                    for j in 0..h {
                        let r = sigmoid(gi[j] + ghr[j]);
                        let z = sigmoid(gi[h + j] + ghr[h + j]);
                        let gh_n = ghr[2 * h + j];
                        let n = (gi[2 * h + j] + r * gh_n).tanh();
                        let prev = st[j];
                        let new = (T::one() - z) * n + z * prev;
                        c.r[cr + j] = r;
                        c.z[cr + j] = z;
                        c.n[cr + j] = n;
                        c.gh_n[cr + j] = gh_n;
                        c.h_prev[cr + j] = prev;
                        out_row[j] = new;
                        st[j] = new;
                    }
                } else {
                    for j in 0..h {
                        let r = sigmoid(gi[j] + ghr[j]);
                        let z = sigmoid(gi[h + j] + ghr[h + j]);
                        let n = (gi[2 * h + j] + r * ghr[2 * h + j]).tanh();
                        let new = (T::one() - z) * n + z * st[j];
                        out_row[j] = new;
                        st[j] = new;
                    }
                }
            }
        }
        self.cache = cache;
        out
    }

    /// Backward through time; returns the input gradient `[t*b, in]`.
    pub fn backward(&mut self, x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
        let cache = self.cache.take().expect("gru backward without forward");
        let (batch, time) = (cache.batch, cache.time);
        let h = self.hidden;
        let mut d_gin = Array2::zeros((time * batch, 3 * h));
        let dy_all = dy.as_slice().unwrap();
        let mut dh: Array2<T> = Array2::zeros((batch, h));
        let mut d_gh = Array2::zeros((batch, 3 * h));
        // Reusable view of h_prev rows for the weight-gradient GEMM.
        let h_prev_arr =
            Array2::from_shape_vec((time * batch, h), cache.h_prev).expect("cache shape");

        for step in (0..time).rev() {
            let t = if self.reverse { time - 1 - step } else { step };
            {
                let d_gin_all = d_gin.as_slice_mut().unwrap();
                let d_gh_all = d_gh.as_slice_mut().unwrap();
                let dh_all = dh.as_slice_mut().unwrap();
                for b in 0..batch {
                    let row = t * batch + b;
                    let cr = row * h;
                    let dgi = &mut d_gin_all[row * 3 * h..(row + 1) * 3 * h];
                    let dgh = &mut d_gh_all[b * 3 * h..(b + 1) * 3 * h];
                    let dhb = &mut dh_all[b * h..(b + 1) * h];
                    for j in 0..h {
                        let dh_total = dhb[j] + dy_all[cr + j];
                        let r = cache.r[cr + j];
                        let z = cache.z[cr + j];
                        let n = cache.n[cr + j];
                        let gh_n = cache.gh_n[cr + j];
                        let h_prev = h_prev_arr[[row, j]];
                        let dn = dh_total * (T::one() - z);
                        let dz = dh_total * (h_prev - n);
                        let da_n = dn * (T::one() - n * n);
                        let dr = da_n * gh_n;
                        let da_r = dr * r * (T::one() - r);
                        let da_z = dz * z * (T::one() - z);
                        dgi[j] = da_r;
                        dgi[h + j] = da_z;
                        dgi[2 * h + j] = da_n;
                        dgh[j] = da_r;
                        dgh[h + j] = da_z;
                        dgh[2 * h + j] = da_n * r;
                        dhb[j] = dh_total * z;
                    }
                }
            }
            let h_prev_t = h_prev_arr.slice(s![t * batch..(t + 1) * batch, ..]);
            self.g_w_hh += &d_gh.t().dot(&h_prev_t);
            self.g_b_hh += &d_gh.sum_axis(Axis(0));
            dh += &d_gh.dot(&self.w_hh);
        }

        self.g_w_ih += &d_gin.t().dot(x);
        self.g_b_ih += &d_gin.sum_axis(Axis(0));
        d_gin.dot(&self.w_ih)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        f(
            &format!("{prefix}.w_ih"),
            self.w_ih.as_slice_mut().unwrap(),
            self.g_w_ih.as_slice_mut().unwrap(),
        );
        f(
            &format!("{prefix}.w_hh"),
            self.w_hh.as_slice_mut().unwrap(),
            self.g_w_hh.as_slice_mut().unwrap(),
        );
        f(
            &format!("{prefix}.b_ih"),
            self.b_ih.as_slice_mut().unwrap(),
            self.g_b_ih.as_slice_mut().unwrap(),
        );
        f(
            &format!("{prefix}.b_hh"),
            self.b_hh.as_slice_mut().unwrap(),
            self.g_b_hh.as_slice_mut().unwrap(),
        );
    }
}

/// Bidirectional GRU: forward and reverse directions, outputs
/// concatenated as `[t*b, 2h]`.
pub(crate) struct BiGru<T: Scalar> {
    fwd: GruDirection<T>,
    rev: GruDirection<T>,
    hidden: usize,
}

impl<T: Scalar> BiGru<T> {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        BiGru {
            fwd: GruDirection::new(input, hidden, false, rng),
            rev: GruDirection::new(input, hidden, true, rng),
            hidden,
        }
    }

    pub fn forward(&mut self, x: &Array2<T>, batch: usize, time: usize, train: bool) -> Array2<T> {
        let yf = self.fwd.forward(x, batch, time, train);
        let yr = self.rev.forward(x, batch, time, train);
        let mut out = Array2::zeros((time * batch, 2 * self.hidden));
        out.slice_mut(s![.., ..self.hidden]).assign(&yf);
        out.slice_mut(s![.., self.hidden..]).assign(&yr);
        out
    }

    pub fn backward(&mut self, x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
        let dyf = dy.slice(s![.., ..self.hidden]).to_owned();
        let dyr = dy.slice(s![.., self.hidden..]).to_owned();
        let mut dx = self.fwd.backward(x, &dyf);
        dx += &self.rev.backward(x, &dyr);
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        self.fwd.visit(&format!("{prefix}.fwd"), f);
        self.rev.visit(&format!("{prefix}.rev"), f);
    }
}
