//! Strided 2-D convolution kernels (im2col + GEMM) and their adjoints.
//!
//! All three maps of the convolution triple are exposed as plain functions on
//! raw tensors:
//!
//! * [`conv_fwd`]        `x [n,ci,ih,iw] * w [co,ci,kh,kw] -> y [n,co,oh,ow]`
//! * [`conv_input_grad`] adjoint w.r.t. `x` (this is also the transposed
//!   convolution used by generator upsampling blocks)
//! * [`conv_wgrad`]      adjoint w.r.t. `w`
//!
//! The geometry always describes the downsampling direction: `in_*` is the
//! large spatial side, `out_*` the small one, regardless of which map runs.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Shape bookkeeping for one convolution. `out = (in + 2*pad - k) / stride + 1`
/// must be exact; the constructor rejects geometries that lose pixels.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ConvGeom {
    pub ci: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(ci: usize, co: usize, kh: usize, kw: usize, stride: usize, pad: usize, in_h: usize, in_w: usize) -> Self {
        assert!(stride >= 1 && kh >= 1 && kw >= 1);
        assert!(in_h + 2 * pad >= kh && in_w + 2 * pad >= kw, "kernel larger than padded input");
        assert_eq!((in_h + 2 * pad - kh) % stride, 0, "conv geometry drops rows");
        assert_eq!((in_w + 2 * pad - kw) % stride, 0, "conv geometry drops columns");
        let out_h = (in_h + 2 * pad - kh) / stride + 1;
        let out_w = (in_w + 2 * pad - kw) / stride + 1;
        ConvGeom { ci, co, kh, kw, stride, pad, in_h, in_w, out_h, out_w }
    }

    fn patch_len(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn check_x(&self, x: &Tensor) -> usize {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv input must be [n,ci,h,w]");
        assert_eq!((s[1], s[2], s[3]), (self.ci, self.in_h, self.in_w), "conv input shape mismatch");
        s[0]
    }

    fn check_y(&self, y: &Tensor) -> usize {
        let s = y.shape();
        assert_eq!(s.len(), 4, "conv output must be [n,co,h,w]");
        assert_eq!((s[1], s[2], s[3]), (self.co, self.out_h, self.out_w), "conv output shape mismatch");
        s[0]
    }

    fn check_w(&self, w: &Tensor) {
        assert_eq!(w.shape(), [self.co, self.ci, self.kh, self.kw], "conv weight shape mismatch");
    }
}

/// `c = a . b` via matrixmultiply's dgemm. Transposed inputs are handled by
/// passing a transposed view; strides carry the information, nothing is copied.
pub fn matmul_view(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul inner dimensions disagree");
    let mut c = Array2::<f64>::zeros((m, n));
    if m == 0 || n == 0 {
        return c;
    }
    if k == 0 {
        return c;
    }
    let (rsa, csa) = (a.strides()[0], a.strides()[1]);
    let (rsb, csb) = (b.strides()[0], b.strides()[1]);
    let (rsc, csc) = (c.strides()[0], c.strides()[1]);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), rsc, csc,
        );
    }
    c
}

/// Unfold `x` into patch rows: `[n*oh*ow, ci*kh*kw]`, zero-filled where the
/// kernel window hangs over the padding border.
fn im2col(x: &Tensor, g: &ConvGeom) -> Array2<f64> {
    let n = g.check_x(x);
    let xs = x.as_slice().expect("conv input must be contiguous");
    let k = g.patch_len();
    let mut cols = Array2::<f64>::zeros((n * g.out_h * g.out_w, k));
    let cs = cols.as_slice_mut().unwrap();
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    for i in 0..n {
        for oy in 0..g.out_h {
            let iy0 = (oy * g.stride) as isize - g.pad as isize;
            for ox in 0..g.out_w {
                let ix0 = (ox * g.stride) as isize - g.pad as isize;
                let row = ((i * g.out_h + oy) * g.out_w + ox) * k;
                for c in 0..g.ci {
                    let xc = (i * g.ci + c) * g.in_h;
                    for u in 0..g.kh {
                        let iy = iy0 + u as isize;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        let xrow = (xc + iy as usize) * g.in_w;
                        let dst = row + (c * g.kh + u) * g.kw;
                        for v in 0..g.kw {
                            let ix = ix0 + v as isize;
                            if ix < 0 || ix >= iw {
                                continue;
                            }
                            cs[dst + v] = xs[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch rows back onto the input plane, accumulating where windows
/// overlap. Exact adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, g: &ConvGeom, n: usize) -> Tensor {
    let k = g.patch_len();
    assert_eq!(cols.dim(), (n * g.out_h * g.out_w, k));
    let cs = cols.as_slice().expect("col2im input must be contiguous");
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[n, g.ci, g.in_h, g.in_w]));
    let xs = x.as_slice_mut().unwrap();
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    for i in 0..n {
        for oy in 0..g.out_h {
            let iy0 = (oy * g.stride) as isize - g.pad as isize;
            for ox in 0..g.out_w {
                let ix0 = (ox * g.stride) as isize - g.pad as isize;
                let row = ((i * g.out_h + oy) * g.out_w + ox) * k;
                for c in 0..g.ci {
                    let xc = (i * g.ci + c) * g.in_h;
                    for u in 0..g.kh {
                        let iy = iy0 + u as isize;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        let xrow = (xc + iy as usize) * g.in_w;
                        let src = row + (c * g.kh + u) * g.kw;
                        for v in 0..g.kw {
                            let ix = ix0 + v as isize;
                            if ix < 0 || ix >= iw {
                                continue;
                            }
                            xs[xrow + ix as usize] += cs[src + v];
                        }
                    }
                }
            }
        }
    }
    x
}

fn wmat<'a>(w: &'a Tensor, g: &ConvGeom) -> ArrayView2<'a, f64> {
    g.check_w(w);
    ArrayView2::from_shape((g.co, g.patch_len()), w.as_slice().expect("weights must be contiguous")).unwrap()
}

/// Flatten `[n,co,oh,ow]` into `[n*oh*ow, co]` rows matching im2col order.
fn ymat(y: &Tensor, g: &ConvGeom) -> Array2<f64> {
    let n = g.check_y(y);
    let ys = y.as_slice().expect("conv output must be contiguous");
    let mut m = Array2::<f64>::zeros((n * g.out_h * g.out_w, g.co));
    let ms = m.as_slice_mut().unwrap();
    let plane = g.out_h * g.out_w;
    for i in 0..n {
        for o in 0..g.co {
            let src = (i * g.co + o) * plane;
            for p in 0..plane {
                ms[(i * plane + p) * g.co + o] = ys[src + p];
            }
        }
    }
    m
}

/// Inverse of [`ymat`]: rows `[n*oh*ow, co]` back to `[n,co,oh,ow]`.
fn unymat(m: Array2<f64>, g: &ConvGeom, n: usize) -> Tensor {
    let ms = m.as_slice().unwrap();
    let plane = g.out_h * g.out_w;
    let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, g.co, g.out_h, g.out_w]));
    let ys = y.as_slice_mut().unwrap();
    for i in 0..n {
        for o in 0..g.co {
            let dst = (i * g.co + o) * plane;
            for p in 0..plane {
                ys[dst + p] = ms[(i * plane + p) * g.co + o];
            }
        }
    }
    y
}

pub fn conv_fwd(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let n = g.check_x(x);
    let cols = im2col(x, g);
    let y = matmul_view(cols.view(), wmat(w, g).t());
    unymat(y, g, n)
}

/// Adjoint of [`conv_fwd`] w.r.t. the input; equivalently a fractionally
/// strided (transposed) convolution taking `gy` from the small side back to
/// the large side.
pub fn conv_input_grad(gy: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let n = g.check_y(gy);
    let gm = ymat(gy, g);
    let cols = matmul_view(gm.view(), wmat(w, g));
    col2im(&cols, g, n)
}

/// Adjoint of [`conv_fwd`] w.r.t. the weights.
pub fn conv_wgrad(x: &Tensor, gy: &Tensor, g: &ConvGeom) -> Tensor {
    let nx = g.check_x(x);
    let ny = g.check_y(gy);
    assert_eq!(nx, ny, "conv_wgrad batch sizes disagree");
    let cols = im2col(x, g);
    let gm = ymat(gy, g);
    let gw = matmul_view(gm.t(), cols.view());
    let (co, k) = gw.dim();
    debug_assert_eq!((co, k), (g.co, g.patch_len()));
    let v = gw.into_raw_vec_and_offset().0;
    ArrayD::from_shape_vec(IxDyn(&[g.co, g.ci, g.kh, g.kw]), v).unwrap()
}

/// Concatenate along an axis, guaranteeing a contiguous result.
pub fn concat_std(parts: &[&Tensor], axis: usize) -> Tensor {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
    if out.is_standard_layout() {
        out
    } else {
        out.as_standard_layout().into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Direct quadruple-loop convolution, kept deliberately naive as an oracle.
    fn conv_naive(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
        let n = x.shape()[0];
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, g.co, g.out_h, g.out_w]));
        for i in 0..n {
            for o in 0..g.co {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for c in 0..g.ci {
                            for u in 0..g.kh {
                                for v in 0..g.kw {
                                    let iy = (oy * g.stride + u) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + v) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    acc += x[[i, c, iy as usize, ix as usize]] * w[[o, c, u, v]];
                                }
                            }
                        }
                        y[[i, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(ih, kh, s, p) in &[(8usize, 4usize, 2usize, 1usize), (6, 3, 1, 1), (5, 5, 1, 2), (8, 2, 2, 0)] {
            let g = ConvGeom::new(3, 5, kh, kh, s, p, ih, ih);
            let x = randt(&mut rng, &[2, 3, ih, ih]);
            let w = randt(&mut rng, &[5, 3, kh, kh]);
            let fast = conv_fwd(&x, &w, &g);
            let slow = conv_naive(&x, &w, &g);
            let err = (&fast - &slow).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "conv mismatch {err} at geom {g:?}");
        }
    }

    #[test]
    fn input_grad_is_adjoint_of_forward() {
        // <conv(x), gy> == <x, conv_input_grad(gy)> for all x, gy: the dot-product
        // test pins the adjoint without any reference implementation.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeom::new(2, 3, 4, 4, 2, 1, 8, 8);
        let x = randt(&mut rng, &[2, 2, 8, 8]);
        let w = randt(&mut rng, &[3, 2, 4, 4]);
        let gy = randt(&mut rng, &[2, 3, 4, 4]);
        let lhs: f64 = (&conv_fwd(&x, &w, &g) * &gy).sum();
        let rhs: f64 = (&x * &conv_input_grad(&gy, &w, &g)).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn weight_grad_is_adjoint_in_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeom::new(2, 3, 4, 4, 2, 1, 8, 8);
        let x = randt(&mut rng, &[2, 2, 8, 8]);
        let w = randt(&mut rng, &[3, 2, 4, 4]);
        let gy = randt(&mut rng, &[2, 3, 4, 4]);
        let lhs: f64 = (&conv_fwd(&x, &w, &g) * &gy).sum();
        let rhs: f64 = (&w * &conv_wgrad(&x, &gy, &g)).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn matmul_transposed_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((3, 5), |_| rng.random::<f64>());
        let c = matmul_view(a.view(), b.view());
        let c2 = matmul_view(b.t(), a.t());
        let err = (&c - &c2.t()).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }
}
