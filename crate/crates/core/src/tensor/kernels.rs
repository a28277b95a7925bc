//! Slice-level numeric kernels behind the graph ops. All buffers are row-major.

use super::{numel, strides, Scalar};

/// Output extent of a sliding window: floor((n - k + 2p) / s) + 1.
pub fn window_out(n: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if k == 0 || stride == 0 || k > padded {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// For each element of `shape`, the flat index of the element it collapses onto when
/// the axes in `reduced` are summed away (kept as size-1 axes).
pub fn reduce_map(shape: &[usize], reduced: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(reduced)
        .map(|(&n, &r)| if r { 1 } else { n })
        .collect();
    let out_strides = strides(&out_shape);
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        let flat = idx
            .iter()
            .zip(&out_strides)
            .zip(reduced)
            .map(|((&i, &s), &r)| if r { 0 } else { i * s })
            .sum();
        map.push(flat);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeom {
    /// Input row/column touched by output position `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
        let pos = (o * stride + t) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    }
}

/// `a·bᵀ` for row-major `a: m×k`, `b: n×k`.
fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `aᵀ·b` for row-major `a: k×m`, `b: k×n`.
fn matmul_at<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// Dot product with eight independent accumulators so the loop vectorises.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    let half = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (half[0] + half[2]) + (half[1] + half[3]) + tail
}

impl Conv2dGeom {
    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Patch matrix `(c_in·kh·kw) × (batch·oh·ow)`; out-of-image taps are zero.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (p, bp) = (self.out_plane(), self.batch * self.out_plane());
        let mut cols = vec![T::zero(); self.c_in * self.kh * self.kw * bp];
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * bp;
                    for b in 0..self.batch {
                        let xin = &x[(b * self.c_in + ci) * self.h * self.w..];
                        for oy in 0..self.oh {
                            let Some(iy) = Self::src(oy, ky, self.stride, self.pad, self.h) else {
                                continue;
                            };
                            let dst = row + b * p + oy * self.ow;
                            for ox in 0..self.ow {
                                if let Some(ix) = Self::src(ox, kx, self.stride, self.pad, self.w) {
                                    cols[dst + ox] = xin[iy * self.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let (p, bp) = (self.out_plane(), self.batch * self.out_plane());
        let mut gx = vec![T::zero(); self.batch * self.c_in * self.h * self.w];
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * bp;
                    for b in 0..self.batch {
                        let off = (b * self.c_in + ci) * self.h * self.w;
                        for oy in 0..self.oh {
                            let Some(iy) = Self::src(oy, ky, self.stride, self.pad, self.h) else {
                                continue;
                            };
                            let src = row + b * p + oy * self.ow;
                            for ox in 0..self.ow {
                                if let Some(ix) = Self::src(ox, kx, self.stride, self.pad, self.w) {
                                    let gi = off + iy * self.w + ix;
                                    gx[gi] = gx[gi] + cols[src + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

pub fn conv2d_forward<T: Scalar>(g: &Conv2dGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (p, bp, kk) = (g.out_plane(), g.batch * g.out_plane(), g.c_in * g.kh * g.kw);
    let y = matmul(w, &g.im2col(x), g.c_out, kk, bp);
    let mut out = vec![T::zero(); g.batch * g.c_out * p];
    for co in 0..g.c_out {
        let bv = bias.map_or(T::zero(), |bs| bs[co]);
        for b in 0..g.batch {
            let src = &y[co * bp + b * p..co * bp + (b + 1) * p];
            let dst = &mut out[(b * g.c_out + co) * p..(b * g.c_out + co + 1) * p];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + bv;
            }
        }
    }
    out
}

/// Gradients of conv2d with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(g: &Conv2dGeom, x: &[T], w: &[T], gy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (p, bp, kk) = (g.out_plane(), g.batch * g.out_plane(), g.c_in * g.kh * g.kw);
    // upstream gradient as c_out × (batch·oh·ow)
    let mut gmat = vec![T::zero(); g.c_out * bp];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            gmat[co * bp + b * p..co * bp + (b + 1) * p]
                .copy_from_slice(&gy[(b * g.c_out + co) * p..(b * g.c_out + co + 1) * p]);
        }
    }
    let gb = (0..g.c_out)
        .map(|co| gmat[co * bp..(co + 1) * bp].iter().fold(T::zero(), |a, &v| a + v))
        .collect();
    let gw = matmul_bt(&gmat, &g.im2col(x), g.c_out, bp, kk);
    let gx = g.col2im(&matmul_at(w, &gmat, g.c_out, kk, bp));
    (gx, gw, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub depth: usize,
    /// H·W, untouched by the 1×1 spatial kernel.
    pub plane: usize,
    pub c_out: usize,
    pub taps: usize,
    pub out_depth: usize,
}

pub fn conv3d_pointwise_forward<T: Scalar>(g: &Conv3dGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let vol_in = g.depth * g.plane;
    let vol_out = g.out_depth * g.plane;
    let mut out = vec![T::zero(); g.batch * g.c_out * vol_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let obase = (b * g.c_out + co) * vol_out;
            let o = &mut out[obase..obase + vol_out];
            let bv = bias.map_or(T::zero(), |bs| bs[co]);
            o.iter_mut().for_each(|v| *v = bv);
            for ci in 0..g.c_in {
                let xin = &x[(b * g.c_in + ci) * vol_in..(b * g.c_in + ci + 1) * vol_in];
                for t in 0..g.taps {
                    let wv = w[(co * g.c_in + ci) * g.taps + t];
                    let src = &xin[t * g.plane..(t + g.out_depth) * g.plane];
                    for (ov, &xv) in o.iter_mut().zip(src) {
                        *ov = *ov + wv * xv;
                    }
                }
            }
        }
    }
    out
}

pub fn conv3d_pointwise_backward<T: Scalar>(g: &Conv3dGeom, x: &[T], w: &[T], gy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let vol_in = g.depth * g.plane;
    let vol_out = g.out_depth * g.plane;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g.c_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let gyo = &gy[(b * g.c_out + co) * vol_out..(b * g.c_out + co + 1) * vol_out];
            gb[co] = gyo.iter().fold(gb[co], |a, &v| a + v);
            for ci in 0..g.c_in {
                let xoff = (b * g.c_in + ci) * vol_in;
                for t in 0..g.taps {
                    let wi = (co * g.c_in + ci) * g.taps + t;
                    let wv = w[wi];
                    let start = xoff + t * g.plane;
                    let mut acc = T::zero();
                    for (j, &up) in gyo.iter().enumerate() {
                        acc = acc + up * x[start + j];
                        gx[start + j] = gx[start + j] + up * wv;
                    }
                    gw[wi] = gw[wi] + acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    /// Batch × channels, pooled independently.
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Average pooling; zero padding counts toward the k² divisor.
pub fn avg_pool2d_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let inv = T::one() / T::from_usize(g.k * g.k).unwrap();
    let mut out = vec![T::zero(); g.planes * g.oh * g.ow];
    for p in 0..g.planes {
        let xin = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for ky in 0..g.k {
                    let Some(iy) = Conv2dGeom::src(oy, ky, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        if let Some(ix) = Conv2dGeom::src(ox, kx, g.stride, g.pad, g.w) {
                            acc = acc + xin[iy * g.w + ix];
                        }
                    }
                }
                out[(p * g.oh + oy) * g.ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool2d_backward<T: Scalar>(g: &PoolGeom, gy: &[T]) -> Vec<T> {
    let inv = T::one() / T::from_usize(g.k * g.k).unwrap();
    let mut gx = vec![T::zero(); g.planes * g.h * g.w];
    for p in 0..g.planes {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let up = gy[(p * g.oh + oy) * g.ow + ox] * inv;
                for ky in 0..g.k {
                    let Some(iy) = Conv2dGeom::src(oy, ky, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        if let Some(ix) = Conv2dGeom::src(ox, kx, g.stride, g.pad, g.w) {
                            let i = p * g.h * g.w + iy * g.w + ix;
                            gx[i] = gx[i] + up;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Zero-pads the last two axes of a stack of `planes` h×w images by `pad` on every side.
pub fn pad2d_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); planes * ph * pw];
    for p in 0..planes {
        for r in 0..h {
            let src = &x[(p * h + r) * w..(p * h + r + 1) * w];
            let dst = (p * ph + r + pad) * pw + pad;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

pub fn pad2d_backward<T: Scalar>(gy: &[T], planes: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut gx = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for r in 0..h {
            let src = (p * ph + r + pad) * pw + pad;
            gx.extend_from_slice(&gy[src..src + w]);
        }
    }
    gx
}
