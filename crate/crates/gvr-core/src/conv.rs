//! Strided 2-d convolution kernels via im2col + GEMM.
//!
//! Three primitives — forward convolution, transposed convolution, and the
//! kernel gradient — are closed under differentiation: each one's
//! vector-Jacobian products are expressed with the other two. That is what
//! lets the tape differentiate through gradients of convolutional nets.
//!
//! Layouts: activations are NCHW, kernels are OIHW, everything f32 and
//! standard (row-major contiguous) layout.

use ndarray::{Array2, Array4, ArrayD, Ix4};

fn as4(x: &ArrayD<f32>) -> ndarray::ArrayView4<'_, f32> {
    x.view()
        .into_dimensionality::<Ix4>()
        .expect("expected a 4-d NCHW array")
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "kernel {kernel} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold [n, c, h, w] into [n*oh*ow, c*kh*kw] with implicit zero padding.
fn im2col(x: &ndarray::ArrayView4<'_, f32>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let oh = out_extent(h, kh, stride, pad);
    let ow = out_extent(w, kw, stride, pad);
    let xs = x.as_slice().expect("im2col input must be contiguous");
    let ckk = c * kh * kw;
    let mut cols = Array2::<f32>::zeros((n * oh * ow, ckk));
    {
        let cs = cols.as_slice_mut().unwrap();
        let (sn, sc, sh) = (c * h * w, h * w, w);
        let mut row = 0usize;
        for b in 0..n {
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let base = row * ckk;
                    let mut col = 0usize;
                    for ch in 0..c {
                        for ky in 0..kh {
                            let y = iy0 + ky as isize;
                            if y < 0 || y >= h as isize {
                                col += kw;
                                continue;
                            }
                            let src = b * sn + ch * sc + y as usize * sh;
                            for kx in 0..kw {
                                let xq = ix0 + kx as isize;
                                if xq >= 0 && xq < w as isize {
                                    cs[base + col] = xs[src + xq as usize];
                                }
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Fold [n*oh*ow, c*kh*kw] back onto [n, c, h, w], accumulating overlaps.
fn col2im_add(
    cols: &Array2<f32>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f32> {
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    {
        let os = out.as_slice_mut().unwrap();
        let cs = cols.as_slice().unwrap();
        let ckk = c * kh * kw;
        let (sn, sc, sh) = (c * h * w, h * w, w);
        let mut row = 0usize;
        for b in 0..n {
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let base = row * ckk;
                    let mut col = 0usize;
                    for ch in 0..c {
                        for ky in 0..kh {
                            let y = iy0 + ky as isize;
                            if y < 0 || y >= h as isize {
                                col += kw;
                                continue;
                            }
                            let dst = b * sn + ch * sc + y as usize * sh;
                            for kx in 0..kw {
                                let xq = ix0 + kx as isize;
                                if xq >= 0 && xq < w as isize {
                                    os[dst + xq as usize] += cs[base + col];
                                }
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    out
}

/// [n, o, oh, ow] -> rows [n*oh*ow, o] matching im2col row order.
fn nchw_to_rows(y: &ndarray::ArrayView4<'_, f32>) -> Array2<f32> {
    let (n, o, oh, ow) = y.dim();
    let perm = y.permuted_axes([0, 2, 3, 1]);
    let flat: Vec<f32> = perm.iter().copied().collect();
    Array2::from_shape_vec((n * oh * ow, o), flat).unwrap()
}

/// rows [n*oh*ow, o] -> [n, o, oh, ow].
fn rows_to_nchw(rows: Array2<f32>, n: usize, o: usize, oh: usize, ow: usize) -> Array4<f32> {
    let y = rows.to_shape((n, oh, ow, o)).unwrap().to_owned();
    y.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned()
}

/// y[n,o] = sum_{i,kh,kw} x[n, i, oy*s+kh-p, ox*s+kw-p] * k[o, i, kh, kw]
pub fn conv2d(x: &ArrayD<f32>, kernel: &ArrayD<f32>, stride: usize, pad: usize) -> ArrayD<f32> {
    let x4 = as4(x);
    let k4 = as4(kernel);
    let (n, c, h, w) = x4.dim();
    let (o, ci, kh, kw) = k4.dim();
    assert_eq!(c, ci, "conv2d channel mismatch: input {c}, kernel {ci}");
    let oh = out_extent(h, kh, stride, pad);
    let ow = out_extent(w, kw, stride, pad);
    let cols = im2col(&x4, kh, kw, stride, pad);
    let k2 = k4.to_shape((o, ci * kh * kw)).expect("kernel reshape failed");
    let rows = cols.dot(&k2.t());
    rows_to_nchw(rows, n, o, oh, ow).into_dyn()
}

/// Adjoint of `conv2d` with respect to its input; also the generator's
/// upsampling primitive. `out_hw` disambiguates the floor in the forward
/// shape arithmetic.
pub fn conv2d_transpose(
    y: &ArrayD<f32>,
    kernel: &ArrayD<f32>,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> ArrayD<f32> {
    let y4 = as4(y);
    let k4 = as4(kernel);
    let (n, o, oh, ow) = y4.dim();
    let (ko, ci, kh, kw) = k4.dim();
    assert_eq!(o, ko, "conv2d_transpose channel mismatch: input {o}, kernel {ko}");
    let (h, w) = out_hw;
    assert_eq!(out_extent(h, kh, stride, pad), oh, "conv2d_transpose height mismatch");
    assert_eq!(out_extent(w, kw, stride, pad), ow, "conv2d_transpose width mismatch");
    let rows = nchw_to_rows(&y4);
    let k2 = k4.to_shape((o, ci * kh * kw)).expect("kernel reshape failed");
    let cols = rows.dot(&k2);
    col2im_add(&cols, n, ci, h, w, kh, kw, stride, pad, oh, ow).into_dyn()
}

/// Adjoint of `conv2d` with respect to its kernel:
/// dk[o,i,kh,kw] = sum_{n,oy,ox} dy[n,o,oy,ox] * x[n, i, oy*s+kh-p, ox*s+kw-p]
pub fn conv2d_kernel_grad(
    x: &ArrayD<f32>,
    dy: &ArrayD<f32>,
    stride: usize,
    pad: usize,
    khw: (usize, usize),
) -> ArrayD<f32> {
    let x4 = as4(x);
    let dy4 = as4(dy);
    let (xn, c, h, w) = x4.dim();
    let (yn, o, oh, ow) = dy4.dim();
    assert_eq!(xn, yn, "conv2d_kernel_grad batch mismatch");
    let (kh, kw) = khw;
    assert_eq!(out_extent(h, kh, stride, pad), oh, "conv2d_kernel_grad height mismatch");
    assert_eq!(out_extent(w, kw, stride, pad), ow, "conv2d_kernel_grad width mismatch");
    let cols = im2col(&x4, kh, kw, stride, pad);
    let rows = nchw_to_rows(&dy4);
    let dk2 = rows.t().dot(&cols);
    dk2.to_shape((o, c, kh, kw)).unwrap().to_owned().into_dyn()
}
