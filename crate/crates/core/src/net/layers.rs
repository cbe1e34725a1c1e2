//! Forward and backward kernels for the network's building blocks.
//!
//! Maps are `Grid<T>` in row-major H×W×C; conv kernels are HWIO
//! (`[kh][kw][din][dout]`) so the innermost loops run over contiguous
//! output channels.

use crate::maps::Grid;
use crate::real::Real;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub kh: usize,
    pub kw: usize,
    pub din: usize,
    pub dout: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvShape {
    pub fn square(k: usize, din: usize, dout: usize) -> Self {
        Self { kh: k, kw: k, din, dout, stride: 1, dilation: 1 }
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn kernel_len(&self) -> usize {
        self.kh * self.kw * self.din * self.dout
    }

    fn pad(&self) -> (usize, usize) {
        (self.dilation * (self.kh - 1) / 2, self.dilation * (self.kw - 1) / 2)
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (ph, pw) = self.pad();
        let span_h = self.dilation * (self.kh - 1);
        let span_w = self.dilation * (self.kw - 1);
        ((h + 2 * ph - span_h - 1) / self.stride + 1, (w + 2 * pw - span_w - 1) / self.stride + 1)
    }

    /// Input coordinate read by output index `o` at tap `k`, if inside the map.
    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let s = (o * self.stride + k * self.dilation) as isize - pad as isize;
        (s >= 0 && (s as usize) < limit).then_some(s as usize)
    }
}

/// Zero-padded "same" convolution (output shrinks only by the stride).
pub fn conv2d<T: Real>(x: &Grid<T>, shape: &ConvShape, kernel: &[T], bias: Option<&[T]>) -> Grid<T> {
    debug_assert_eq!(x.channels(), shape.din);
    debug_assert_eq!(kernel.len(), shape.kernel_len());
    let (h, w) = (x.height(), x.width());
    let (ho, wo) = shape.output_dims(h, w);
    let (ph, pw) = shape.pad();
    let (din, dout) = (shape.din, shape.dout);
    let mut out = Grid::zeros(ho, wo, dout);
    let xd = x.data();
    for oi in 0..ho {
        for oj in 0..wo {
            let o = out.pixel_mut(oi, oj);
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ki in 0..shape.kh {
                let Some(ii) = shape.source(oi, ki, ph, h) else { continue };
                for kj in 0..shape.kw {
                    let Some(jj) = shape.source(oj, kj, pw, w) else { continue };
                    let xs = &xd[(ii * w + jj) * din..][..din];
                    let kbase = (ki * shape.kw + kj) * din * dout;
                    for (ci, &xv) in xs.iter().enumerate() {
                        let krow = &kernel[kbase + ci * dout..][..dout];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel and bias gradients; returns the input gradient when asked.
pub fn conv2d_backward<T: Real>(
    x: &Grid<T>,
    shape: &ConvShape,
    kernel: &[T],
    dy: &Grid<T>,
    dkernel: &mut [T],
    dbias: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Grid<T>> {
    let (h, w) = (x.height(), x.width());
    let (ho, wo) = (dy.height(), dy.width());
    let (ph, pw) = shape.pad();
    let (din, dout) = (shape.din, shape.dout);
    let xd = x.data();
    let mut dx = want_dx.then(|| Grid::<T>::zeros(h, w, din));
    if let Some(db) = dbias {
        for g in dy.data().chunks_exact(dout) {
            for (a, &b) in db.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    for oi in 0..ho {
        for oj in 0..wo {
            let g = dy.pixel(oi, oj);
            for ki in 0..shape.kh {
                let Some(ii) = shape.source(oi, ki, ph, h) else { continue };
                for kj in 0..shape.kw {
                    let Some(jj) = shape.source(oj, kj, pw, w) else { continue };
                    let base = (ii * w + jj) * din;
                    let kbase = (ki * shape.kw + kj) * din * dout;
                    for ci in 0..din {
                        let xv = xd[base + ci];
                        let off = kbase + ci * dout;
                        for (dk, &gv) in dkernel[off..off + dout].iter_mut().zip(g) {
                            *dk += xv * gv;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxs = &mut dx.data_mut()[base..base + din];
                        for (ci, d) in dxs.iter_mut().enumerate() {
                            let krow = &kernel[kbase + ci * dout..][..dout];
                            let mut acc = T::zero();
                            for (&kv, &gv) in krow.iter().zip(g) {
                                acc += kv * gv;
                            }
                            *d += acc;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Values a layer norm must keep for its backward pass.
#[derive(Debug, Clone)]
pub struct LnCache<T> {
    pub xhat: Grid<T>,
    pub inv_std: Vec<T>,
}

/// Per-pixel normalization over channels followed by a per-channel affine map.
pub fn layer_norm<T: Real>(x: &Grid<T>, scale: &[T], shift: &[T]) -> (Grid<T>, LnCache<T>) {
    let d = x.channels();
    let eps = T::of(LN_EPS);
    let n = T::of(d as f64);
    let mut xhat = Grid::zeros(x.height(), x.width(), d);
    let mut y = Grid::zeros(x.height(), x.width(), d);
    let mut inv_std = Vec::with_capacity(x.pixels());
    for ((xs, hs), ys) in x
        .data()
        .chunks_exact(d)
        .zip(xhat.data_mut().chunks_exact_mut(d))
        .zip(y.data_mut().chunks_exact_mut(d))
    {
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for k in 0..d {
            hs[k] = (xs[k] - mean) * inv;
            ys[k] = hs[k] * scale[k] + shift[k];
        }
    }
    (y, LnCache { xhat, inv_std })
}

pub fn layer_norm_backward<T: Real>(cache: &LnCache<T>, scale: &[T], dy: &Grid<T>, dscale: &mut [T], dshift: &mut [T]) -> Grid<T> {
    let d = dy.channels();
    let n = T::of(d as f64);
    let mut dx = Grid::zeros(dy.height(), dy.width(), d);
    let mut dxhat = vec![T::zero(); d];
    for (((gs, hs), out), &inv) in dy
        .data()
        .chunks_exact(d)
        .zip(cache.xhat.data().chunks_exact(d))
        .zip(dx.data_mut().chunks_exact_mut(d))
        .zip(&cache.inv_std)
    {
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for k in 0..d {
            dscale[k] += gs[k] * hs[k];
            dshift[k] += gs[k];
            dxhat[k] = gs[k] * scale[k];
            m1 += dxhat[k];
            m2 += dxhat[k] * hs[k];
        }
        m1 /= n;
        m2 /= n;
        for k in 0..d {
            out[k] = inv * (dxhat[k] - m1 - hs[k] * m2);
        }
    }
    dx
}

/// Softmax over all pixels, independently per channel.
pub fn spatial_softmax<T: Real>(m: &Grid<T>) -> Grid<T> {
    let c = m.channels();
    let mut max = vec![T::neg_infinity(); c];
    for px in m.data().chunks_exact(c) {
        for (a, &v) in max.iter_mut().zip(px) {
            if v > *a {
                *a = v;
            }
        }
    }
    let mut out = m.map(|v| v);
    let mut norm = vec![0.0f64; c];
    for px in out.data_mut().chunks_exact_mut(c) {
        for k in 0..c {
            px[k] = (px[k] - max[k]).exp();
            norm[k] += px[k].f64();
        }
    }
    let inv: Vec<T> = norm.iter().map(|&s| T::of(1.0 / s)).collect();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (v, &s) in px.iter_mut().zip(&inv) {
            *v *= s;
        }
    }
    out
}

pub fn spatial_softmax_backward<T: Real>(a: &Grid<T>, da: &Grid<T>) -> Grid<T> {
    let c = a.channels();
    let mut dot = vec![T::zero(); c];
    for (ap, gp) in a.data().chunks_exact(c).zip(da.data().chunks_exact(c)) {
        for k in 0..c {
            dot[k] += ap[k] * gp[k];
        }
    }
    let mut out = Grid::zeros(a.height(), a.width(), c);
    for ((ap, gp), op) in a
        .data()
        .chunks_exact(c)
        .zip(da.data().chunks_exact(c))
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        for k in 0..c {
            op[k] = ap[k] * (gp[k] - dot[k]);
        }
    }
    out
}

/// Softmax across channels at every pixel.
pub fn channel_softmax<T: Real>(z: &Grid<T>) -> Grid<T> {
    let c = z.channels();
    let mut out = z.map(|v| v);
    for px in out.data_mut().chunks_exact_mut(c) {
        let max = px.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in px.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in px.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub fn channel_softmax_backward<T: Real>(s: &Grid<T>, ds: &Grid<T>) -> Grid<T> {
    let c = s.channels();
    let mut out = Grid::zeros(s.height(), s.width(), c);
    for ((sp, gp), op) in s
        .data()
        .chunks_exact(c)
        .zip(ds.data().chunks_exact(c))
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        let dot: T = sp.iter().zip(gp).map(|(&a, &b)| a * b).sum();
        for k in 0..c {
            op[k] = sp[k] * (gp[k] - dot);
        }
    }
    out
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn relu_in_place<T: Real>(x: &mut Grid<T>) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Zeroes gradient entries wherever the ReLU output was not positive.
pub fn relu_backward_in_place<T: Real>(out: &Grid<T>, dy: &mut Grid<T>) {
    for (g, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn hadamard<T: Real>(a: &Grid<T>, b: &Grid<T>) -> Grid<T> {
    let mut out = a.map(|v| v);
    out.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x *= y);
    out
}

/// Concatenates maps of equal spatial size along channels.
pub fn concat<T: Real>(parts: &[&Grid<T>]) -> Grid<T> {
    let (h, w) = (parts[0].height(), parts[0].width());
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = Grid::zeros(h, w, total);
    for p in 0..h * w {
        let mut at = 0;
        for part in parts {
            let c = part.channels();
            out.data_mut()[p * total + at..p * total + at + c].copy_from_slice(&part.data()[p * c..(p + 1) * c]);
            at += c;
        }
    }
    out
}

pub fn split<T: Real>(g: &Grid<T>, widths: &[usize]) -> Vec<Grid<T>> {
    let total = g.channels();
    let mut at = 0;
    widths
        .iter()
        .map(|&c| {
            let mut part = Grid::zeros(g.height(), g.width(), c);
            for p in 0..g.pixels() {
                part.data_mut()[p * c..(p + 1) * c].copy_from_slice(&g.data()[p * total + at..p * total + at + c]);
            }
            at += c;
            part
        })
        .collect()
}

/// Bilinear taps along one axis, half-pixel aligned: `(lo, hi, weight of hi)`.
fn bilinear_taps(n_out: usize, n_in: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub fn upsample_bilinear<T: Real>(x: &Grid<T>, h: usize, w: usize) -> Grid<T> {
    let c = x.channels();
    let rows = bilinear_taps(h, x.height());
    let cols = bilinear_taps(w, x.width());
    let mut out = Grid::zeros(h, w, c);
    for (i, &(r0, r1, ry)) in rows.iter().enumerate() {
        for (j, &(c0, c1, rx)) in cols.iter().enumerate() {
            let taps = [
                (r0, c0, (1.0 - ry) * (1.0 - rx)),
                (r0, c1, (1.0 - ry) * rx),
                (r1, c0, ry * (1.0 - rx)),
                (r1, c1, ry * rx),
            ];
            let o = out.pixel_mut(i, j);
            for (si, sj, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let wt = T::of(wt);
                for (ov, &xv) in o.iter_mut().zip(x.pixel(si, sj)) {
                    *ov += wt * xv;
                }
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Real>(dy: &Grid<T>, h_in: usize, w_in: usize) -> Grid<T> {
    let c = dy.channels();
    let rows = bilinear_taps(dy.height(), h_in);
    let cols = bilinear_taps(dy.width(), w_in);
    let mut dx = Grid::zeros(h_in, w_in, c);
    for (i, &(r0, r1, ry)) in rows.iter().enumerate() {
        for (j, &(c0, c1, rx)) in cols.iter().enumerate() {
            let taps = [
                (r0, c0, (1.0 - ry) * (1.0 - rx)),
                (r0, c1, (1.0 - ry) * rx),
                (r1, c0, ry * (1.0 - rx)),
                (r1, c1, ry * rx),
            ];
            let g = dy.pixel(i, j);
            for (si, sj, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let wt = T::of(wt);
                for (d, &gv) in dx.pixel_mut(si, sj).iter_mut().zip(g) {
                    *d += wt * gv;
                }
            }
        }
    }
    dx
}
