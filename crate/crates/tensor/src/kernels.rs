//! Raw NCHW compute kernels shared by the graph's forward and backward passes.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Output columns `ox` whose input column `ox * s + kj - p` lies inside `[0, w)`.
fn valid_span(ow: usize, w: usize, s: usize, kj: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(kj).div_ceil(s);
    // largest ox with ox * s + kj - p <= w - 1
    let hi = if w + p > kj { ((w + p - kj - 1) / s + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(geo: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (h, w, k, s, p) = (geo.height, geo.width, geo.kernel, geo.stride, geo.pad);
    let (oh, ow) = (geo.out_height(), geo.out_width());
    for c in 0..geo.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_span(ow, w, s, kj, p);
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if s == 1 {
                        let start = lo + kj - p;
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, v) in out_row[lo..hi].iter_mut().enumerate() {
                            *v = src[(ox + lo) * s + kj - p];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(geo: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (h, w, k, s, p) = (geo.height, geo.width, geo.kernel, geo.stride, geo.pad);
    let (oh, ow) = (geo.out_height(), geo.out_width());
    for c in 0..geo.in_channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_span(ow, w, s, kj, p);
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let start = lo + kj - p;
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&src_row[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * s + kj - p] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = W * im2col(x[n]) + b`.
pub fn conv2d_forward<T: Scalar>(
    geo: &ConvGeometry,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, cols) = (geo.col_rows(), geo.col_cols());
    let in_stride = geo.in_channels * geo.height * geo.width;
    let out_stride = geo.out_channels * cols;
    let mut out = vec![T::zero(); geo.batch * out_stride];
    let mut col = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for n in 0..geo.batch {
        let xn = &x[n * in_stride..(n + 1) * in_stride];
        let on = &mut out[n * out_stride..(n + 1) * out_stride];
        let src: &[T] = if geo.is_pointwise() {
            xn
        } else {
            im2col(geo, xn, &mut col);
            &col
        };
        T::gemm(geo.out_channels, rows, cols, weight, false, src, false, on, T::zero());
        if let Some(b) = bias {
            for (o, chunk) in on.chunks_exact_mut(cols).enumerate() {
                for v in chunk {
                    *v += b[o];
                }
            }
        }
    }
    out
}

/// Gradients of a convolution. `dx` is only computed when `want_dx` is set.
pub fn conv2d_backward<T: Scalar>(
    geo: &ConvGeometry,
    x: &[T],
    weight: &[T],
    dout: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let (rows, cols) = (geo.col_rows(), geo.col_cols());
    let in_stride = geo.in_channels * geo.height * geo.width;
    let out_stride = geo.out_channels * cols;
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); weight.len()]);
    let mut db = vec![T::zero(); geo.out_channels];
    let mut col = vec![T::zero(); rows * cols];
    let mut dcol = vec![T::zero(); rows * cols];
    for n in 0..geo.batch {
        let xn = &x[n * in_stride..(n + 1) * in_stride];
        let gn = &dout[n * out_stride..(n + 1) * out_stride];
        for (o, chunk) in gn.chunks_exact(cols).enumerate() {
            db[o] += chunk.iter().copied().sum::<T>();
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if geo.is_pointwise() {
                xn
            } else {
                im2col(geo, xn, &mut col);
                &col
            };
            // dW += dout_n * col^T
            T::gemm(geo.out_channels, cols, rows, gn, false, src, true, dw, T::one());
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_stride..(n + 1) * in_stride];
            if geo.is_pointwise() {
                T::gemm(rows, geo.out_channels, cols, weight, true, gn, false, dxn, T::zero());
            } else {
                T::gemm(rows, geo.out_channels, cols, weight, true, gn, false, &mut dcol, T::zero());
                col2im(geo, &dcol, dxn);
            }
        }
    }
    (dx, dw, db)
}

pub fn upsample2_forward<T: Scalar>(x: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); nc * oh * ow];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(g: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    dx
}

/// 2x2 average pooling; `h` and `w` must be even.
pub fn avgpool2_forward<T: Scalar>(x: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); nc * oh * ow];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[2 * y * w + 2 * xx];
                let b = src[2 * y * w + 2 * xx + 1];
                let c = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = (a + b + c + d) * quarter;
            }
        }
    }
    out
}

pub fn avgpool2_backward<T: Scalar>(g: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * ow + xx / 2] * quarter;
            }
        }
    }
    dx
}

/// Normalization statistics for a set of index groups.
///
/// `members(group)` yields the flat indices normalized together. A group
/// whose values are all identical gets its mean set to that exact value, so
/// the normalized output is exactly zero there.
pub fn normalize_groups<T: Scalar>(
    x: &[T],
    groups: usize,
    members: impl Fn(usize) -> Vec<std::ops::Range<usize>>,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(groups);
    let mut inv_stds = Vec::with_capacity(groups);
    for g in 0..groups {
        let ranges = members(g);
        let count: usize = ranges.iter().map(|r| r.len()).sum();
        let count_t = T::lit(count as f64);
        let mut sum = T::zero();
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for r in &ranges {
            for &v in &x[r.clone()] {
                sum += v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let mean = if lo == hi { lo } else { sum / count_t };
        let mut var = T::zero();
        for r in &ranges {
            for &v in &x[r.clone()] {
                var += (v - mean) * (v - mean);
            }
        }
        var /= count_t;
        let inv_std = T::one() / (var + eps).sqrt();
        for r in &ranges {
            for i in r.clone() {
                y[i] = (x[i] - mean) * inv_std;
            }
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    (y, means, inv_stds)
}

/// Backward of [`normalize_groups`] given the normalized output `y`.
pub fn normalize_groups_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    inv_stds: &[T],
    members: impl Fn(usize) -> Vec<std::ops::Range<usize>>,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for (g, &inv_std) in inv_stds.iter().enumerate() {
        let ranges = members(g);
        let count: usize = ranges.iter().map(|r| r.len()).sum();
        let count_t = T::lit(count as f64);
        let mut sum_dy = T::zero();
        let mut sum_dy_y = T::zero();
        for r in &ranges {
            for i in r.clone() {
                sum_dy += dy[i];
                sum_dy_y += dy[i] * y[i];
            }
        }
        let mean_dy = sum_dy / count_t;
        let mean_dy_y = sum_dy_y / count_t;
        for r in &ranges {
            for i in r.clone() {
                dx[i] = inv_std * (dy[i] - mean_dy - y[i] * mean_dy_y);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(geo: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (geo.out_height(), geo.out_width());
        let mut out = vec![0.0; geo.batch * geo.out_channels * oh * ow];
        for n in 0..geo.batch {
            for o in 0..geo.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..geo.in_channels {
                            for ki in 0..geo.kernel {
                                for kj in 0..geo.kernel {
                                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                                    let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= geo.height as isize
                                        || ix >= geo.width as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((n * geo.in_channels + c) * geo.height + iy as usize)
                                        * geo.width
                                        + ix as usize;
                                    let wi = ((o * geo.in_channels + c) * geo.kernel + ki)
                                        * geo.kernel
                                        + kj;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((n * geo.out_channels + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        for (kernel, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let geo = ConvGeometry {
                batch: 2,
                in_channels: 3,
                out_channels: 4,
                height: 6,
                width: 6,
                kernel,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * 3 * 36).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..4 * 3 * kernel * kernel)
                .map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3)
                .collect();
            let got = conv2d_forward(&geo, &x, &w, None);
            let want = direct_conv(&geo, &x, &w);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "k{kernel} s{stride} p{pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_group_normalizes_to_exact_zero() {
        let x = vec![0.1f32; 9];
        let (y, _, _) = normalize_groups(&x, 1, |_| vec![0..9], 1e-5);
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
