//! Layer kernels. Every routine is single-threaded with a fixed reduction
//! order so training is bitwise reproducible.

use crate::graph::Padding;
use crate::tensor::Scalar;

/// Upper bound on im2col buffer elements; larger batches are processed in
/// sample chunks.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Debug)]
pub(crate) struct ConvOp<T> {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: Padding,
    pub cin: usize,
    pub cout: usize,
    /// `(kh·kw·cin) × cout`, row-major
    pub w: Vec<T>,
    pub b: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl<T: Scalar> ConvOp<T> {
    pub fn geometry(&self, shape: [usize; 4]) -> ConvGeometry {
        let [n, h, w, _] = shape;
        let (oh, ow, pad_top, pad_left) = match self.padding {
            Padding::Same => {
                let oh = h.div_ceil(self.stride);
                let ow = w.div_ceil(self.stride);
                let pad_h = ((oh - 1) * self.stride + self.kh).saturating_sub(h);
                let pad_w = ((ow - 1) * self.stride + self.kw).saturating_sub(w);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => ((h - self.kh) / self.stride + 1, (w - self.kw) / self.stride + 1, 0, 0),
        };
        ConvGeometry {
            n,
            h,
            w,
            oh,
            ow,
            pad_top,
            pad_left,
        }
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self, g: &ConvGeometry) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && g.oh == g.h && g.ow == g.w
    }

    fn chunk(&self, g: &ConvGeometry) -> usize {
        (COLS_BUDGET / (g.oh * g.ow * self.patch_len()).max(1)).clamp(1, g.n.max(1))
    }

    /// Fills `cols` with one row of `kh·kw·cin` patch values per output pixel
    /// of samples `n0..n1`.
    fn im2col(&self, input: &[T], g: &ConvGeometry, n0: usize, n1: usize, cols: &mut Vec<T>) {
        let k = self.patch_len();
        cols.clear();
        cols.resize((n1 - n0) * g.oh * g.ow * k, T::zero());
        let cin = self.cin;
        let mut row = 0;
        for n in n0..n1 {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let dst = &mut cols[row * k..(row + 1) * k];
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let src = ((n * g.h + iy as usize) * g.w + ix as usize) * cin;
                            let off = (ky * self.kw + kx) * cin;
                            dst[off..off + cin].copy_from_slice(&input[src..src + cin]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds patch gradients back onto the input gradient.
    fn col2im(&self, dcols: &[T], g: &ConvGeometry, n0: usize, n1: usize, dx: &mut [T]) {
        let k = self.patch_len();
        let cin = self.cin;
        let mut row = 0;
        for n in n0..n1 {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let src = &dcols[row * k..(row + 1) * k];
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * cin;
                            let off = (ky * self.kw + kx) * cin;
                            for (d, s) in dx[dst..dst + cin].iter_mut().zip(&src[off..off + cin]) {
                                *d = *d + *s;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn forward(&self, input: &[T], shape: [usize; 4]) -> (Vec<T>, [usize; 4]) {
        let g = self.geometry(shape);
        let k = self.patch_len();
        let per_sample = g.oh * g.ow;
        let mut out = vec![T::zero(); g.n * per_sample * self.cout];
        let pointwise = self.is_pointwise(&g);
        let chunk = self.chunk(&g);
        let mut cols = Vec::new();
        let mut n0 = 0;
        while n0 < g.n {
            let n1 = (n0 + chunk).min(g.n);
            let m = (n1 - n0) * per_sample;
            let lhs: &[T] = if pointwise {
                &input[n0 * per_sample * k..n1 * per_sample * k]
            } else {
                self.im2col(input, &g, n0, n1, &mut cols);
                &cols
            };
            let dst = &mut out[n0 * per_sample * self.cout..n1 * per_sample * self.cout];
            T::gemm(m, k, self.cout, T::one(), lhs, false, &self.w, false, T::zero(), dst);
            n0 = n1;
        }
        for px in out.chunks_exact_mut(self.cout) {
            for (o, b) in px.iter_mut().zip(&self.b) {
                *o = *o + *b;
            }
        }
        (out, [g.n, g.oh, g.ow, self.cout])
    }

    /// Returns `(dw, db, dx)`; `dx` is skipped for the first layer.
    pub fn backward(&self, input: &[T], shape: [usize; 4], dout: &[T], need_dx: bool) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
        let g = self.geometry(shape);
        let k = self.patch_len();
        let per_sample = g.oh * g.ow;
        let mut dw = vec![T::zero(); k * self.cout];
        let mut db = vec![T::zero(); self.cout];
        for px in dout.chunks_exact(self.cout) {
            for (d, v) in db.iter_mut().zip(px) {
                *d = *d + *v;
            }
        }
        let mut dx = need_dx.then(|| vec![T::zero(); input.len()]);
        let pointwise = self.is_pointwise(&g);
        let chunk = self.chunk(&g);
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        let mut n0 = 0;
        while n0 < g.n {
            let n1 = (n0 + chunk).min(g.n);
            let m = (n1 - n0) * per_sample;
            let dy = &dout[n0 * per_sample * self.cout..n1 * per_sample * self.cout];
            let lhs: &[T] = if pointwise {
                &input[n0 * per_sample * k..n1 * per_sample * k]
            } else {
                self.im2col(input, &g, n0, n1, &mut cols);
                &cols
            };
            // dw += colsᵀ · dy
            T::gemm(k, m, self.cout, T::one(), lhs, true, dy, false, T::one(), &mut dw);
            if let Some(dx) = dx.as_mut() {
                if pointwise {
                    let dst = &mut dx[n0 * per_sample * k..n1 * per_sample * k];
                    T::gemm(m, self.cout, k, T::one(), dy, false, &self.w, true, T::zero(), dst);
                } else {
                    dcols.clear();
                    dcols.resize(m * k, T::zero());
                    T::gemm(m, self.cout, k, T::one(), dy, false, &self.w, true, T::zero(), &mut dcols);
                    self.col2im(&dcols, &g, n0, n1, dx);
                }
            }
            n0 = n1;
        }
        (dw, db, dx)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BnOp<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: T,
}

pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub invstd: Vec<T>,
}

impl<T: Scalar> BnOp<T> {
    pub fn forward_infer(&self, x: &mut [T]) {
        let scale: Vec<T> = (0..self.channels)
            .map(|c| self.gamma[c] / (self.var[c] + self.eps).sqrt())
            .collect();
        for px in x.chunks_exact_mut(self.channels) {
            for c in 0..self.channels {
                px[c] = (px[c] - self.mean[c]) * scale[c] + self.beta[c];
            }
        }
    }

    /// Normalizes with batch statistics. Returns the batch mean and biased
    /// variance alongside the cache.
    pub fn forward_train(&self, x: &mut [T]) -> (BnCache<T>, Vec<T>, Vec<T>) {
        let c_n = self.channels;
        let rows = x.len() / c_n;
        let inv_rows = T::one() / T::from_f64(rows as f64);
        let mut mean = vec![T::zero(); c_n];
        for px in x.chunks_exact(c_n) {
            for c in 0..c_n {
                mean[c] = mean[c] + px[c];
            }
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_rows);
        let mut var = vec![T::zero(); c_n];
        for px in x.chunks_exact(c_n) {
            for c in 0..c_n {
                let d = px[c] - mean[c];
                var[c] = var[c] + d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v * inv_rows);
        let invstd: Vec<T> = var.iter().map(|v| T::one() / (*v + self.eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        for (px, hx) in x.chunks_exact_mut(c_n).zip(xhat.chunks_exact_mut(c_n)) {
            for c in 0..c_n {
                let h = (px[c] - mean[c]) * invstd[c];
                hx[c] = h;
                px[c] = self.gamma[c] * h + self.beta[c];
            }
        }
        (BnCache { xhat, invstd }, mean, var)
    }

    /// Returns `(dgamma, dbeta)` and rewrites `dy` into `dx` in place.
    pub fn backward(&self, cache: &BnCache<T>, dy: &mut [T]) -> (Vec<T>, Vec<T>) {
        let c_n = self.channels;
        let rows = T::from_f64((dy.len() / c_n) as f64);
        let mut dgamma = vec![T::zero(); c_n];
        let mut dbeta = vec![T::zero(); c_n];
        for (g, h) in dy.chunks_exact(c_n).zip(cache.xhat.chunks_exact(c_n)) {
            for c in 0..c_n {
                dgamma[c] = dgamma[c] + g[c] * h[c];
                dbeta[c] = dbeta[c] + g[c];
            }
        }
        let coef: Vec<T> = (0..c_n).map(|c| self.gamma[c] * cache.invstd[c] / rows).collect();
        for (g, h) in dy.chunks_exact_mut(c_n).zip(cache.xhat.chunks_exact(c_n)) {
            for c in 0..c_n {
                g[c] = coef[c] * (rows * g[c] - dbeta[c] - h[c] * dgamma[c]);
            }
        }
        (dgamma, dbeta)
    }
}

/// 2-D max pooling without padding. Returns the output and, per output
/// element, the flat input index that won (first maximum in scan order).
pub(crate) fn max_pool_forward<T: Scalar>(
    x: &[T],
    shape: [usize; 4],
    pool: usize,
    stride: usize,
    record: bool,
) -> (Vec<T>, Vec<u32>, [usize; 4]) {
    let [n, h, w, c] = shape;
    let oh = (h - pool) / stride + 1;
    let ow = (w - pool) / stride + 1;
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(if record { out.capacity() } else { 0 });
    let mut best = vec![T::zero(); c];
    let mut best_at = vec![0u32; c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut first = true;
                for ky in 0..pool {
                    for kx in 0..pool {
                        let base = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c;
                        for ch in 0..c {
                            let v = x[base + ch];
                            if first || v > best[ch] {
                                best[ch] = v;
                                best_at[ch] = (base + ch) as u32;
                            }
                        }
                        first = false;
                    }
                }
                out.extend_from_slice(&best);
                if record {
                    arg.extend_from_slice(&best_at);
                }
            }
        }
    }
    (out, arg, [n, oh, ow, c])
}

#[derive(Clone, Debug)]
pub(crate) struct DenseOp<T> {
    pub fin: usize,
    pub fout: usize,
    /// `fin × fout`, row-major
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> DenseOp<T> {
    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); n * self.fout];
        T::gemm(n, self.fin, self.fout, T::one(), x, false, &self.w, false, T::zero(), &mut out);
        for row in out.chunks_exact_mut(self.fout) {
            for (o, b) in row.iter_mut().zip(&self.b) {
                *o = *o + *b;
            }
        }
        out
    }

    pub fn backward(&self, x: &[T], n: usize, dy: &[T], need_dx: bool) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
        let mut dw = vec![T::zero(); self.fin * self.fout];
        T::gemm(self.fin, n, self.fout, T::one(), x, true, dy, false, T::zero(), &mut dw);
        let mut db = vec![T::zero(); self.fout];
        for row in dy.chunks_exact(self.fout) {
            for (d, v) in db.iter_mut().zip(row) {
                *d = *d + *v;
            }
        }
        let dx = need_dx.then(|| {
            let mut dx = vec![T::zero(); n * self.fin];
            T::gemm(n, self.fout, self.fin, T::one(), dy, false, &self.w, true, T::zero(), &mut dx);
            dx
        });
        (dw, db, dx)
    }
}

/// Mean softmax cross-entropy over the batch, its gradient with respect to
/// the logits, and the number of rows whose argmax equals the label.
pub(crate) fn softmax_cross_entropy<T: Scalar>(logits: &[T], labels: &[u32], classes: usize) -> (T, Vec<T>, usize) {
    let n = labels.len();
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    let mut correct = 0;
    for (i, (row, &label)) in logits.chunks_exact(classes).zip(labels).enumerate() {
        let label = label as usize;
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        loss = loss + (log_sum - (row[label] - max));
        if argmax(row) == label {
            correct += 1;
        }
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - max - log_sum).exp() * inv_n;
        }
        g[label] = g[label] - inv_n;
    }
    (loss * inv_n, grad, correct)
}

/// Index of the first maximum.
pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
