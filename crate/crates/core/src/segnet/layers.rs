//! Convolution and resampling primitives with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, NdFloat};

use crate::map::SpatialMap;

/// Output spatial size of a 3x3, padding-1 convolution.
pub fn conv3x3_out(size: usize, stride: usize) -> usize {
    (size + 2 - 3) / stride + 1
}

/// Unfolds 3x3 neighbourhoods (zero padded) into rows of `9·cin` values,
/// ordered `(ky, kx, channel)`.
pub fn im2col3x3<T: NdFloat>(input: &SpatialMap<T>, stride: usize) -> (Array2<T>, usize, usize) {
    let (h, w, cin) = (input.height(), input.width(), input.channels());
    let ho = conv3x3_out(h, stride);
    let wo = conv3x3_out(w, stride);
    let mut col = Array2::<T>::zeros((ho * wo, 9 * cin));
    let src = input.matrix();
    for oy in 0..ho {
        for ox in 0..wo {
            let mut row = col.row_mut(oy * wo + ox);
            let row = row.as_slice_mut().expect("contiguous row");
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let p = iy as usize * w + ix as usize;
                    let off = (ky * 3 + kx) * cin;
                    row[off..off + cin].copy_from_slice(
                        src.row(p).as_slice().expect("contiguous input row"),
                    );
                }
            }
        }
    }
    (col, ho, wo)
}

/// Scatter-adds unfolded gradients back onto the input grid (adjoint of [`im2col3x3`]).
pub fn col2im3x3<T: NdFloat>(
    dcol: &Array2<T>,
    h: usize,
    w: usize,
    cin: usize,
    stride: usize,
) -> SpatialMap<T> {
    let ho = conv3x3_out(h, stride);
    let wo = conv3x3_out(w, stride);
    let mut out = SpatialMap::<T>::zeros(h, w, cin);
    let dst = out.matrix_mut();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = dcol.row(oy * wo + ox);
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let p = iy as usize * w + ix as usize;
                    let off = (ky * 3 + kx) * cin;
                    let mut target = dst.row_mut(p);
                    for c in 0..cin {
                        target[c] += row[off + c];
                    }
                }
            }
        }
    }
    out
}

/// `x·W + b` applied to every row.
pub fn affine<T: NdFloat>(x: &ArrayView2<T>, weight: &ArrayView2<T>, bias: &ArrayView1<T>) -> Array2<T> {
    let mut out = x.dot(weight);
    out += bias;
    out
}

/// Gradients of `affine`: returns `(d_input, d_weight, d_bias)`; `d_input` is
/// skipped when `need_input` is false.
pub fn affine_backward<T: NdFloat>(
    x: &ArrayView2<T>,
    weight: &ArrayView2<T>,
    d_out: &Array2<T>,
    need_input: bool,
) -> (Option<Array2<T>>, Array2<T>, Array1<T>) {
    let d_weight = x.t().dot(d_out);
    let d_bias = d_out.sum_axis(Axis(0));
    let d_input = need_input.then(|| d_out.dot(&weight.t()));
    (d_input, d_weight, d_bias)
}

pub fn relu_inplace<T: NdFloat>(x: &mut Array2<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Masks `grad` by the positivity of the ReLU output.
pub fn relu_backward_inplace<T: NdFloat>(grad: &mut Array2<T>, output: &Array2<T>) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

/// One axis of a bilinear resampling plan (half-pixel centres, corners not aligned).
#[derive(Debug, Clone)]
struct AxisPlan {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisPlan {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (pos.floor() as usize).min(src - 1);
            let h = (l + 1).min(src - 1);
            lo.push(l);
            hi.push(h);
            frac.push(pos - l as f64);
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize between two fixed grid sizes; the backward pass is the exact transpose.
#[derive(Debug, Clone)]
pub struct Bilinear {
    src: (usize, usize),
    dst: (usize, usize),
    rows: AxisPlan,
    cols: AxisPlan,
}

impl Bilinear {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self {
            src,
            dst,
            rows: AxisPlan::new(src.0, dst.0),
            cols: AxisPlan::new(src.1, dst.1),
        }
    }

    pub fn forward<T: NdFloat>(&self, input: &SpatialMap<T>) -> SpatialMap<T> {
        debug_assert_eq!((input.height(), input.width()), self.src);
        let (dh, dw) = self.dst;
        let c = input.channels();
        let sw = self.src.1;
        let src = input.matrix();
        let mut out = SpatialMap::<T>::zeros(dh, dw, c);
        let dst = out.matrix_mut();
        for y in 0..dh {
            let (y0, y1) = (self.rows.lo[y], self.rows.hi[y]);
            let fy = T::from(self.rows.frac[y]).unwrap();
            for x in 0..dw {
                let (x0, x1) = (self.cols.lo[x], self.cols.hi[x]);
                let fx = T::from(self.cols.frac[x]).unwrap();
                let w00 = (T::one() - fy) * (T::one() - fx);
                let w01 = (T::one() - fy) * fx;
                let w10 = fy * (T::one() - fx);
                let w11 = fy * fx;
                let r00 = src.row(y0 * sw + x0);
                let r01 = src.row(y0 * sw + x1);
                let r10 = src.row(y1 * sw + x0);
                let r11 = src.row(y1 * sw + x1);
                let mut o = dst.row_mut(y * dw + x);
                for k in 0..c {
                    o[k] = w00 * r00[k] + w01 * r01[k] + w10 * r10[k] + w11 * r11[k];
                }
            }
        }
        out
    }

    pub fn backward<T: NdFloat>(&self, d_out: &SpatialMap<T>) -> SpatialMap<T> {
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        let c = d_out.channels();
        let g = d_out.matrix();
        let mut out = SpatialMap::<T>::zeros(sh, sw, c);
        let dst = out.matrix_mut();
        for y in 0..dh {
            let (y0, y1) = (self.rows.lo[y], self.rows.hi[y]);
            let fy = T::from(self.rows.frac[y]).unwrap();
            for x in 0..dw {
                let (x0, x1) = (self.cols.lo[x], self.cols.hi[x]);
                let fx = T::from(self.cols.frac[x]).unwrap();
                let weights = [
                    (y0 * sw + x0, (T::one() - fy) * (T::one() - fx)),
                    (y0 * sw + x1, (T::one() - fy) * fx),
                    (y1 * sw + x0, fy * (T::one() - fx)),
                    (y1 * sw + x1, fy * fx),
                ];
                let gr = g.row(y * dw + x);
                for (p, wt) in weights {
                    if wt == T::zero() {
                        continue;
                    }
                    let mut t = dst.row_mut(p);
                    for k in 0..c {
                        t[k] += wt * gr[k];
                    }
                }
            }
        }
        out
    }
}

/// Convenience wrapper for one-off resizes.
pub fn resize_bilinear<T: NdFloat>(input: &SpatialMap<T>, height: usize, width: usize) -> SpatialMap<T> {
    if input.height() == height && input.width() == width {
        return input.clone();
    }
    Bilinear::new((input.height(), input.width()), (height, width)).forward(input)
}
