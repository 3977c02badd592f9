//! Minimal layers with hand-written backward passes.
//!
//! Activations are channels-last. Weight matrices are stored `in x out` so a
//! forward pass is `x.dot(w) + b`. Every `backward` accumulates parameter
//! gradients into a struct of the same type and returns the input gradient
//! when one is needed.

use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, ArrayViewD, ArrayViewMutD, Axis, Dimension, Zip};
use rand::Rng;

/// Named views over every trainable array, in a fixed order.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)>;
    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)>;

    fn zero_(&mut self) {
        for (_, mut p) in self.params_mut() {
            p.fill(T::zero());
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn nest<V>(prefix: &str, items: Vec<(String, V)>) -> Vec<(String, V)> {
    items.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)).collect()
}

/// Fills `a` with draws from `U(-bound, bound)`.
pub fn init_uniform<T: Scalar>(a: &mut ArrayViewMutD<'_, T>, bound: f64, rng: &mut impl Rng) {
    for v in a.iter_mut() {
        *v = T::of(rng.gen_range(-bound..=bound));
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn relu_<T: Scalar, D: Dimension>(a: &mut Array<T, D>) {
    a.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Zeroes `grad` wherever the rectified output `out` is not positive.
pub fn relu_backward_<T: Scalar, D: Dimension>(grad: &mut Array<T, D>, out: &Array<T, D>) {
    Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Accumulator width for the direct convolution inner loops.
const LANES: usize = 8;

/// `out += patch . rows`, where `rows` is `patch.len() x out.len()` row-major.
fn patch_forward<T: Scalar>(out: &mut [T], patch: &[T], rows: &[T]) {
    let co = out.len();
    let mut o0 = 0;
    while o0 + LANES <= co {
        let mut acc: [T; LANES] = out[o0..o0 + LANES].try_into().expect("lane width");
        for (&v, wr) in patch.iter().zip(rows.chunks_exact(co)) {
            let wr = &wr[o0..o0 + LANES];
            for k in 0..LANES {
                acc[k] += v * wr[k];
            }
        }
        out[o0..o0 + LANES].copy_from_slice(&acc);
        o0 += LANES;
    }
    for (&v, wr) in patch.iter().zip(rows.chunks_exact(co)) {
        out[o0..].iter_mut().zip(&wr[o0..]).for_each(|(a, &b)| *a += v * b);
    }
}

/// Weight gradient of one output line: `rows[e] += sum_j line[j * step + e] * dys[j]`,
/// with `dys` holding one `co`-wide gradient row per output column.
fn line_weight_grad<T: Scalar>(rows: &mut [T], line: &[T], dys: &[T], step: usize, co: usize) {
    for (e, gr) in rows.chunks_exact_mut(co).enumerate() {
        let mut o0 = 0;
        while o0 + LANES <= co {
            let mut acc: [T; LANES] = gr[o0..o0 + LANES].try_into().expect("lane width");
            for (j, d) in dys.chunks_exact(co).enumerate() {
                let v = line[j * step + e];
                let d = &d[o0..o0 + LANES];
                for k in 0..LANES {
                    acc[k] += v * d[k];
                }
            }
            gr[o0..o0 + LANES].copy_from_slice(&acc);
            o0 += LANES;
        }
        for (j, d) in dys.chunks_exact(co).enumerate() {
            let v = line[j * step + e];
            gr[o0..].iter_mut().zip(&d[o0..]).for_each(|(a, &b)| *a += v * b);
        }
    }
}

fn contiguous<'a, T: Scalar, D: Dimension>(a: &'a ndarray::ArrayView<'_, T, D>) -> std::borrow::Cow<'a, [T]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { w: Array2::zeros((input, output)), b: Array1::zeros(output) }
    }

    pub fn forward(&self, x: &ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients; returns `dL/dx`.
    pub fn backward(&self, x: &ArrayView2<T>, dy: &ArrayView2<T>, g: &mut Linear<T>) -> Array2<T> {
        self.backward_params(x, dy, g);
        dy.dot(&self.w.t())
    }

    pub fn backward_params(&self, x: &ArrayView2<T>, dy: &ArrayView2<T>, g: &mut Linear<T>) {
        general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut g.w);
        g.b += &dy.sum_axis(Axis(0));
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![("w".into(), self.w.view().into_dyn()), ("b".into(), self.b.view().into_dyn())]
    }
    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![("w".into(), self.w.view_mut().into_dyn()), ("b".into(), self.b.view_mut().into_dyn())]
    }
}

/// LSTM with gate order (input, forget, cell, output) and zero initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<T> {
    pub wx: Array2<T>,
    pub wh: Array2<T>,
    pub b: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    x: Array3<T>,
    /// Post-activation gates per step, `N x 4H`.
    gates: Vec<Array2<T>>,
    /// Cell and hidden states, index 0 is the zero initial state.
    c: Vec<Array2<T>>,
    h: Vec<Array2<T>>,
}

impl<T: Scalar> Lstm<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Lstm { wx: Array2::zeros((input, 4 * hidden)), wh: Array2::zeros((hidden, 4 * hidden)), b: Array1::zeros(4 * hidden) }
    }

    pub fn hidden(&self) -> usize {
        self.wh.nrows()
    }

    /// Runs over `x` (`N x L x in`) and returns every hidden state (`N x L x H`).
    pub fn forward(&self, x: &Array3<T>) -> (Array3<T>, LstmCache<T>) {
        let (n, l, _) = x.dim();
        let hd = self.hidden();
        let mut cache = LstmCache { x: x.clone(), gates: Vec::with_capacity(l), c: vec![Array2::zeros((n, hd))], h: vec![Array2::zeros((n, hd))] };
        let mut out = Array3::zeros((n, l, hd));
        for t in 0..l {
            let mut a = x.index_axis(Axis(1), t).dot(&self.wx);
            general_mat_mul(T::one(), &cache.h[t], &self.wh, T::one(), &mut a);
            a += &self.b;
            for mut row in a.rows_mut() {
                for (k, v) in row.iter_mut().enumerate() {
                    *v = if (2 * hd..3 * hd).contains(&k) { v.tanh() } else { sigmoid(*v) };
                }
            }
            let mut c = Array2::zeros((n, hd));
            let mut h = Array2::zeros((n, hd));
            let c_prev = &cache.c[t];
            for s in 0..n {
                let g = a.row(s);
                for j in 0..hd {
                    let cv = g[hd + j] * c_prev[[s, j]] + g[j] * g[2 * hd + j];
                    c[[s, j]] = cv;
                    h[[s, j]] = g[3 * hd + j] * cv.tanh();
                }
            }
            out.index_axis_mut(Axis(1), t).assign(&h);
            cache.gates.push(a);
            cache.c.push(c);
            cache.h.push(h);
        }
        (out, cache)
    }

    /// `dh` holds the loss gradient w.r.t. every output hidden state.
    pub fn backward(&self, cache: &LstmCache<T>, dh: &Array3<T>, g: &mut Lstm<T>) -> Array3<T> {
        let (n, l, input) = cache.x.dim();
        let hd = self.hidden();
        let mut dx = Array3::zeros((n, l, input));
        let mut dh_next = Array2::<T>::zeros((n, hd));
        let mut dc_next = Array2::<T>::zeros((n, hd));
        let one = T::one();
        for t in (0..l).rev() {
            let gates = &cache.gates[t];
            let (c, c_prev) = (&cache.c[t + 1], &cache.c[t]);
            let mut da = Array2::zeros((n, 4 * hd));
            for s in 0..n {
                for j in 0..hd {
                    let (i, f, gg, o) = (gates[[s, j]], gates[[s, hd + j]], gates[[s, 2 * hd + j]], gates[[s, 3 * hd + j]]);
                    let dhv = dh[[s, t, j]] + dh_next[[s, j]];
                    let tc = c[[s, j]].tanh();
                    let dc = dc_next[[s, j]] + dhv * o * (one - tc * tc);
                    da[[s, j]] = dc * gg * i * (one - i);
                    da[[s, hd + j]] = dc * c_prev[[s, j]] * f * (one - f);
                    da[[s, 2 * hd + j]] = dc * i * (one - gg * gg);
                    da[[s, 3 * hd + j]] = dhv * tc * o * (one - o);
                    dc_next[[s, j]] = dc * f;
                }
            }
            general_mat_mul(one, &cache.x.index_axis(Axis(1), t).t(), &da, one, &mut g.wx);
            general_mat_mul(one, &cache.h[t].t(), &da, one, &mut g.wh);
            g.b += &da.sum_axis(Axis(0));
            dx.index_axis_mut(Axis(1), t).assign(&da.dot(&self.wx.t()));
            dh_next = da.dot(&self.wh.t());
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for Lstm<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            ("wx".into(), self.wx.view().into_dyn()),
            ("wh".into(), self.wh.view().into_dyn()),
            ("b".into(), self.b.view().into_dyn()),
        ]
    }
    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            ("wx".into(), self.wx.view_mut().into_dyn()),
            ("wh".into(), self.wh.view_mut().into_dyn()),
            ("b".into(), self.b.view_mut().into_dyn()),
        ]
    }
}

/// GRU with gate order (reset, update, candidate) and separate input and
/// hidden biases; the candidate applies the reset gate after the hidden
/// projection. Zero initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru<T> {
    pub wx: Array2<T>,
    pub wh: Array2<T>,
    pub bx: Array1<T>,
    pub bh: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct GruCache<T> {
    x: Array3<T>,
    h: Vec<Array2<T>>,
    /// Post-activation (r, z, n) per step.
    gates: Vec<Array2<T>>,
    /// Hidden projection of the candidate block, `h W_hn + b_hn`.
    hn: Vec<Array2<T>>,
}

impl<T: Scalar> Gru<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Gru {
            wx: Array2::zeros((input, 3 * hidden)),
            wh: Array2::zeros((hidden, 3 * hidden)),
            bx: Array1::zeros(3 * hidden),
            bh: Array1::zeros(3 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.nrows()
    }

    /// Runs over `x` (`N x L x in`) and returns the final hidden state.
    pub fn forward(&self, x: &Array3<T>) -> (Array2<T>, GruCache<T>) {
        let (n, l, _) = x.dim();
        let hd = self.hidden();
        let mut cache = GruCache { x: x.clone(), h: vec![Array2::zeros((n, hd))], gates: Vec::with_capacity(l), hn: Vec::with_capacity(l) };
        for t in 0..l {
            let mut ax = x.index_axis(Axis(1), t).dot(&self.wx);
            ax += &self.bx;
            let h_prev = &cache.h[t];
            let mut ah = h_prev.dot(&self.wh);
            ah += &self.bh;
            let mut gates = Array2::zeros((n, 3 * hd));
            let mut h = Array2::zeros((n, hd));
            for s in 0..n {
                for j in 0..hd {
                    let r = sigmoid(ax[[s, j]] + ah[[s, j]]);
                    let z = sigmoid(ax[[s, hd + j]] + ah[[s, hd + j]]);
                    let nn = (ax[[s, 2 * hd + j]] + r * ah[[s, 2 * hd + j]]).tanh();
                    gates[[s, j]] = r;
                    gates[[s, hd + j]] = z;
                    gates[[s, 2 * hd + j]] = nn;
                    h[[s, j]] = (T::one() - z) * nn + z * h_prev[[s, j]];
                }
            }
            cache.hn.push(ah.slice(ndarray::s![.., 2 * hd..]).to_owned());
            cache.gates.push(gates);
            cache.h.push(h);
        }
        (cache.h[l].clone(), cache)
    }

    pub fn backward(&self, cache: &GruCache<T>, dh_final: &Array2<T>, g: &mut Gru<T>) -> Array3<T> {
        let (n, l, input) = cache.x.dim();
        let hd = self.hidden();
        let one = T::one();
        let mut dx = Array3::zeros((n, l, input));
        let mut dh = dh_final.clone();
        for t in (0..l).rev() {
            let (gates, hn, h_prev) = (&cache.gates[t], &cache.hn[t], &cache.h[t]);
            let mut dax = Array2::zeros((n, 3 * hd));
            let mut dah = Array2::zeros((n, 3 * hd));
            let mut dh_prev = Array2::zeros((n, hd));
            for s in 0..n {
                for j in 0..hd {
                    let (r, z, nn) = (gates[[s, j]], gates[[s, hd + j]], gates[[s, 2 * hd + j]]);
                    let d = dh[[s, j]];
                    let dan = d * (one - z) * (one - nn * nn);
                    let daz = d * (h_prev[[s, j]] - nn) * z * (one - z);
                    let dar = dan * hn[[s, j]] * r * (one - r);
                    dax[[s, j]] = dar;
                    dax[[s, hd + j]] = daz;
                    dax[[s, 2 * hd + j]] = dan;
                    dah[[s, j]] = dar;
                    dah[[s, hd + j]] = daz;
                    dah[[s, 2 * hd + j]] = dan * r;
                    dh_prev[[s, j]] = d * z;
                }
            }
            general_mat_mul(one, &cache.x.index_axis(Axis(1), t).t(), &dax, one, &mut g.wx);
            general_mat_mul(one, &h_prev.t(), &dah, one, &mut g.wh);
            g.bx += &dax.sum_axis(Axis(0));
            g.bh += &dah.sum_axis(Axis(0));
            dx.index_axis_mut(Axis(1), t).assign(&dax.dot(&self.wx.t()));
            general_mat_mul(one, &dah, &self.wh.t(), one, &mut dh_prev);
            dh = dh_prev;
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for Gru<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            ("wx".into(), self.wx.view().into_dyn()),
            ("wh".into(), self.wh.view().into_dyn()),
            ("bx".into(), self.bx.view().into_dyn()),
            ("bh".into(), self.bh.view().into_dyn()),
        ]
    }
    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            ("wx".into(), self.wx.view_mut().into_dyn()),
            ("wh".into(), self.wh.view_mut().into_dyn()),
            ("bx".into(), self.bx.view_mut().into_dyn()),
            ("bh".into(), self.bh.view_mut().into_dyn()),
        ]
    }
}

/// 1-D convolution over `N x L x C` with odd kernel, stride 1 and zero "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    /// `(kernel * cin) x cout`, rows ordered (tap, channel).
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub kernel: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn zeros(cin: usize, cout: usize, kernel: usize) -> Self {
        Conv1d { w: Array2::zeros((kernel * cin, cout)), b: Array1::zeros(cout), kernel }
    }

    fn cin(&self) -> usize {
        self.w.nrows() / self.kernel
    }

    fn im2col(&self, x: &ArrayView3<T>) -> Array2<T> {
        let (n, l, c) = x.dim();
        let (k, p) = (self.kernel, self.kernel / 2);
        let mut col = Array2::zeros((n * l, k * c));
        for s in 0..n {
            for t in 0..l {
                for kk in 0..k {
                    let src = t + kk;
                    if src < p || src - p >= l {
                        continue;
                    }
                    col.slice_mut(ndarray::s![s * l + t, kk * c..(kk + 1) * c]).assign(&x.slice(ndarray::s![s, src - p, ..]));
                }
            }
        }
        col
    }

    pub fn forward(&self, x: &ArrayView3<T>) -> Array3<T> {
        let (n, l, _) = x.dim();
        let mut y = self.im2col(x).dot(&self.w);
        y += &self.b;
        y.into_shape_with_order((n, l, self.w.ncols())).expect("contiguous")
    }

    pub fn backward(&self, x: &ArrayView3<T>, dy: &ArrayView3<T>, g: &mut Conv1d<T>) -> Array3<T> {
        let (n, l, c) = x.dim();
        assert_eq!(c, self.cin());
        let (k, p) = (self.kernel, self.kernel / 2);
        let dy2 = dy.to_shape((n * l, self.w.ncols())).expect("reshape");
        let col = self.im2col(x);
        general_mat_mul(T::one(), &col.t(), &dy2, T::one(), &mut g.w);
        g.b += &dy2.sum_axis(Axis(0));
        let dcol = dy2.dot(&self.w.t());
        let mut dx = Array3::zeros((n, l, c));
        for s in 0..n {
            for t in 0..l {
                for kk in 0..k {
                    let src = t + kk;
                    if src < p || src - p >= l {
                        continue;
                    }
                    let mut dst = dx.slice_mut(ndarray::s![s, src - p, ..]);
                    dst += &dcol.slice(ndarray::s![s * l + t, kk * c..(kk + 1) * c]);
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for Conv1d<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![("w".into(), self.w.view().into_dyn()), ("b".into(), self.b.view().into_dyn())]
    }
    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![("w".into(), self.w.view_mut().into_dyn()), ("b".into(), self.b.view_mut().into_dyn())]
    }
}

/// Non-overlapping max pooling along the time axis of `N x L x C`; the tail
/// that does not fill a window is dropped. Ties go to the earliest element.
pub fn maxpool1d_forward<T: Scalar>(x: &Array3<T>, window: usize) -> (Array3<T>, Array3<usize>) {
    let (n, l, c) = x.dim();
    let lo = l / window;
    let mut y = Array3::zeros((n, lo, c));
    let mut arg = Array3::zeros((n, lo, c));
    for s in 0..n {
        for t in 0..lo {
            for ch in 0..c {
                let mut best = (t * window, x[[s, t * window, ch]]);
                for u in t * window + 1..(t + 1) * window {
                    if x[[s, u, ch]] > best.1 {
                        best = (u, x[[s, u, ch]]);
                    }
                }
                y[[s, t, ch]] = best.1;
                arg[[s, t, ch]] = best.0;
            }
        }
    }
    (y, arg)
}

pub fn maxpool1d_backward<T: Scalar>(dy: &Array3<T>, arg: &Array3<usize>, input_len: usize) -> Array3<T> {
    let (n, lo, c) = dy.dim();
    let mut dx = Array3::zeros((n, input_len, c));
    for s in 0..n {
        for t in 0..lo {
            for ch in 0..c {
                dx[[s, arg[[s, t, ch]], ch]] += dy[[s, t, ch]];
            }
        }
    }
    dx
}

/// 2-D convolution over `B x H x W x C` with odd square kernel, stride 1 and zero "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `(k * k * cin) x cout`, rows ordered (ky, kx, channel).
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub kernel: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(cin: usize, cout: usize, kernel: usize) -> Self {
        Conv2d { w: Array2::zeros((kernel * kernel * cin, cout)), b: Array1::zeros(cout), kernel }
    }

    fn cin(&self) -> usize {
        self.w.nrows() / (self.kernel * self.kernel)
    }

    /// Input with `kernel / 2` zero rows and columns on every side, row-major.
    fn padded(&self, x: &ArrayView4<T>) -> Vec<T> {
        let (bn, h, w, c) = x.dim();
        let p = self.kernel / 2;
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let xs = contiguous(x);
        let mut out = vec![T::zero(); bn * hp * wp * c];
        for b in 0..bn {
            for i in 0..h {
                let src = ((b * h + i) * w) * c;
                let dst = ((b * hp + i + p) * wp + p) * c;
                out[dst..dst + w * c].copy_from_slice(&xs[src..src + w * c]);
            }
        }
        out
    }

    /// Calls `f(row0, wrow, line_start)` for every output line `(b, i)` and
    /// kernel row `ky`. Output column `j` reads the `kernel * cin` padded
    /// values at `line_start + j * cin`, which meet weight rows `wrow..`.
    fn for_each_line(&self, dims: (usize, usize, usize, usize), mut f: impl FnMut(usize, usize, usize)) {
        let (bn, h, w, c) = dims;
        let k = self.kernel;
        let wp = w + 2 * (k / 2);
        let hp = h + 2 * (k / 2);
        for b in 0..bn {
            for i in 0..h {
                for ky in 0..k {
                    f((b * h + i) * w, ky * k * c, ((b * hp + i + ky) * wp) * c);
                }
            }
        }
    }

    /// Pre-activation output as a `(B * H * W) x cout` matrix.
    pub fn forward(&self, x: &ArrayView4<T>) -> Array2<T> {
        let (bn, h, w, c) = x.dim();
        assert_eq!(c, self.cin(), "input channels");
        let (co, len) = (self.w.ncols(), self.kernel * c);
        let xp = self.padded(x);
        let wt = self.w.as_standard_layout();
        let ws = wt.as_slice().expect("standard layout");
        let mut y = Array2::from_shape_fn((bn * h * w, co), |(_, o)| self.b[o]);
        let ys = y.as_slice_mut().expect("fresh array");
        self.for_each_line(x.dim(), |row0, wrow, at| {
            let rows = &ws[wrow * co..(wrow + len) * co];
            for j in 0..w {
                patch_forward(&mut ys[(row0 + j) * co..(row0 + j + 1) * co], &xp[at + j * c..at + j * c + len], rows);
            }
        });
        y
    }

    /// `dy` is the gradient of the pre-activation output matrix.
    pub fn backward(&self, x: &ArrayView4<T>, dy: &ArrayView2<T>, g: &mut Conv2d<T>) -> Array4<T> {
        let (bn, h, w, c) = x.dim();
        let (k, p) = (self.kernel, self.kernel / 2);
        let (co, len) = (self.w.ncols(), k * c);
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let xp = self.padded(x);
        let dys = contiguous(dy);
        let mut gw = g.w.as_standard_layout().into_owned();
        let gs = gw.as_slice_mut().expect("standard layout");
        // Transposed weights make the input gradient a run of contiguous axpys.
        let wt = self.w.t().as_standard_layout().into_owned();
        let wts = wt.as_slice().expect("standard layout");
        let kc = wt.ncols();
        let mut dxp = vec![T::zero(); bn * hp * wp * c];
        self.for_each_line(x.dim(), |row0, wrow, at| {
            let line = &xp[at..at + (w - 1) * c + len];
            let ds = &dys[row0 * co..(row0 + w) * co];
            line_weight_grad(&mut gs[wrow * co..(wrow + len) * co], line, ds, c, co);
            for (j, d) in ds.chunks_exact(co).enumerate() {
                let dst = &mut dxp[at + j * c..at + j * c + len];
                for (o, &dv) in d.iter().enumerate() {
                    let wr = &wts[o * kc + wrow..o * kc + wrow + len];
                    dst.iter_mut().zip(wr).for_each(|(a, &b)| *a += dv * b);
                }
            }
        });
        g.w = gw;
        g.b += &dy.sum_axis(Axis(0));
        let mut dx = vec![T::zero(); bn * h * w * c];
        for b in 0..bn {
            for i in 0..h {
                let src = ((b * hp + i + p) * wp + p) * c;
                let dst = ((b * h + i) * w) * c;
                dx[dst..dst + w * c].copy_from_slice(&dxp[src..src + w * c]);
            }
        }
        Array4::from_shape_vec((bn, h, w, c), dx).expect("sized above")
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![("w".into(), self.w.view().into_dyn()), ("b".into(), self.b.view().into_dyn())]
    }
    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![("w".into(), self.w.view_mut().into_dyn()), ("b".into(), self.b.view_mut().into_dyn())]
    }
}

/// 3-D convolution (odd kernel, stride 1, zero "same" padding) followed by
/// non-overlapping spatial average pooling, over `T x H x W x C` input.
///
/// Both stages are linear, so the pooled output equals a strided convolution
/// over `pool x pool` box means of the input. Only that form is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledConv3d<T> {
    /// `(kt * kh * kw * cin) x cout`, rows ordered (dt, ky, kx, channel).
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub kernel: [usize; 3],
    pub pool: usize,
}

/// Box means of one input volume, as consumed by [`PooledConv3d`].
#[derive(Debug, Clone)]
pub struct BoxMeans<T> {
    data: Array4<T>,
    out_h: usize,
    out_w: usize,
}

impl<T: Scalar> PooledConv3d<T> {
    pub fn zeros(cin: usize, cout: usize, kernel: [usize; 3], pool: usize) -> Self {
        PooledConv3d { w: Array2::zeros((kernel.iter().product::<usize>() * cin, cout)), b: Array1::zeros(cout), kernel, pool }
    }

    fn cin(&self) -> usize {
        self.w.nrows() / self.kernel.iter().product::<usize>()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.pool, w / self.pool)
    }

    /// Means of every `pool x pool` window whose top-left corner lies on the
    /// grid the pooled convolution reads, zero padding outside the input.
    pub fn box_means(&self, x: &ArrayView4<T>) -> BoxMeans<T> {
        let (m, h, w, c) = x.dim();
        assert_eq!(c, self.cin(), "input channels");
        let [_, kh, kw] = self.kernel;
        let (ph, pw, p) = (kh / 2, kw / 2, self.pool);
        let (out_h, out_w) = self.output_hw(h, w);
        let hb = p * (out_h.max(1) - 1) + kh;
        let wb = p * (out_w.max(1) - 1) + kw;
        let xs = contiguous(x);
        let inv = T::one() / T::of((p * p) as f64);
        let mut data = vec![T::zero(); m * hb * wb * c];
        let mut rows = vec![T::zero(); h * wb * c];
        let add = |dst: &mut [T], src: &[T]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
        for t in 0..m {
            rows.iter_mut().for_each(|v| *v = T::zero());
            // Horizontal sums: padded column xx reads input columns xx - pw .. xx - pw + p.
            for y in 0..h {
                let src = &xs[(t * h + y) * w * c..(t * h + y + 1) * w * c];
                let dst = &mut rows[y * wb * c..(y + 1) * wb * c];
                for dx in 0..p {
                    let lo = pw.saturating_sub(dx);
                    let hi = wb.min((w + pw).saturating_sub(dx));
                    if lo < hi {
                        let s0 = lo + dx - pw;
                        add(&mut dst[lo * c..hi * c], &src[s0 * c..(s0 + hi - lo) * c]);
                    }
                }
            }
            for yy in 0..hb {
                let dst = &mut data[(t * hb + yy) * wb * c..(t * hb + yy + 1) * wb * c];
                for dy in 0..p {
                    let yi = yy + dy;
                    if yi < ph || yi - ph >= h {
                        continue;
                    }
                    add(dst, &rows[(yi - ph) * wb * c..(yi - ph + 1) * wb * c]);
                }
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        BoxMeans { data: Array4::from_shape_vec((m, hb, wb, c), data).expect("sized above"), out_h, out_w }
    }

    /// Calls `f(row0, wrow, line)` for every output line `(t, i)` and every
    /// in-range `(dt, ky)` slice of its receptive field. Output column `j`
    /// (row `row0 + j`) reads the `kw * cin` values at `line[j * pool * cin..]`,
    /// which meet weight rows `wrow..wrow + kw * cin`.
    fn for_each_line(&self, bm: &BoxMeans<T>, mut f: impl FnMut(usize, usize, &[T])) {
        let (m, hb, wb, c) = bm.data.dim();
        let [kt, kh, kw] = self.kernel;
        let (pt, p) = (kt / 2, self.pool);
        let (oh, ow) = (bm.out_h, bm.out_w);
        if ow == 0 {
            return;
        }
        let src = bm.data.as_slice().expect("owned");
        let len = kw * c;
        let span = p * (ow - 1) * c + len;
        for t in 0..m {
            for dt in 0..kt {
                let tt = t + dt;
                if tt < pt || tt - pt >= m {
                    continue;
                }
                let tt = tt - pt;
                for i in 0..oh {
                    for ky in 0..kh {
                        let base = (tt * hb + p * i + ky) * wb * c;
                        f((t * oh + i) * ow, (dt * kh + ky) * len, &src[base..base + span]);
                    }
                }
            }
        }
    }

    /// Pre-activation pooled output as a `(T * H' * W') x cout` matrix.
    pub fn forward(&self, bm: &BoxMeans<T>) -> Array2<T> {
        let (m, oh, ow) = (bm.data.dim().0, bm.out_h, bm.out_w);
        let (c, co) = (self.cin(), self.w.ncols());
        let (len, step) = (self.kernel[2] * c, self.pool * c);
        let w = self.w.as_standard_layout();
        let ws = w.as_slice().expect("standard layout");
        let mut y = Array2::from_shape_fn((m * oh * ow, co), |(_, o)| self.b[o]);
        let ys = y.as_slice_mut().expect("fresh array");
        self.for_each_line(bm, |row0, wrow, line| {
            let rows = &ws[wrow * co..(wrow + len) * co];
            for j in 0..ow {
                patch_forward(&mut ys[(row0 + j) * co..(row0 + j + 1) * co], &line[j * step..j * step + len], rows);
            }
        });
        y
    }

    /// Parameter gradients only; the input is data.
    pub fn backward(&self, bm: &BoxMeans<T>, dy: &ArrayView2<T>, g: &mut PooledConv3d<T>) {
        let (c, co) = (self.cin(), self.w.ncols());
        let (len, step, ow) = (self.kernel[2] * c, self.pool * c, bm.out_w);
        let dys = contiguous(dy);
        let mut gw = g.w.as_standard_layout().into_owned();
        let gs = gw.as_slice_mut().expect("standard layout");
        self.for_each_line(bm, |row0, wrow, line| {
            line_weight_grad(&mut gs[wrow * co..(wrow + len) * co], line, &dys[row0 * co..(row0 + ow) * co], step, co);
        });
        g.w = gw;
        g.b += &dy.sum_axis(Axis(0));
    }
}

impl<T: Scalar> Parameterized<T> for PooledConv3d<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![("w".into(), self.w.view().into_dyn()), ("b".into(), self.b.view().into_dyn())]
    }
    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![("w".into(), self.w.view_mut().into_dyn()), ("b".into(), self.b.view_mut().into_dyn())]
    }
}
