//! Convolution kernels against straight-line f64 reference loops, plus the
//! adjoint identities that tie the three primitives together.

use gvr_core::conv::{conv2d, conv2d_kernel_grad, conv2d_transpose};
use gvr_core::rng::{seeded_stream, standard_normal};
use ndarray::{Array4, ArrayD};
use proptest::prelude::*;

fn to4(x: &ArrayD<f32>) -> Array4<f64> {
    x.mapv(|v| v as f64)
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Direct-loop convolution in f64.
fn conv2d_oracle(x: &Array4<f64>, k: &Array4<f64>, stride: usize, pad: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (o, _, kh, kw) = k.dim();
    let (oh, ow) = (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad));
    let mut y = Array4::<f64>::zeros((n, o, oh, ow));
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += x[[b, ic, iy as usize, ix as usize]]
                                        * k[[oc, ic, ky as usize, kx as usize]];
                                }
                            }
                        }
                    }
                    y[[b, oc, oy, ox]] = acc;
                }
            }
        }
    }
    y
}

/// Direct-loop transposed convolution (scatter) in f64.
fn conv2d_transpose_oracle(
    y: &Array4<f64>,
    k: &Array4<f64>,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> Array4<f64> {
    let (n, o, oh, ow) = y.dim();
    let (_, c, kh, kw) = k.dim();
    let (h, w) = out_hw;
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    x[[b, ic, iy as usize, ix as usize]] +=
                                        y[[b, oc, oy, ox]] * k[[oc, ic, ky, kx]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Direct-loop kernel gradient in f64.
fn kernel_grad_oracle(
    x: &Array4<f64>,
    dy: &Array4<f64>,
    stride: usize,
    pad: usize,
    khw: (usize, usize),
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (_, o, oh, ow) = dy.dim();
    let (kh, kw) = khw;
    let mut dk = Array4::<f64>::zeros((o, c, kh, kw));
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    dk[[oc, ic, ky, kx]] += dy[[b, oc, oy, ox]]
                                        * x[[b, ic, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

fn assert_close(got: &ArrayD<f32>, want: &Array4<f64>, tol: f64, what: &str) {
    assert_eq!(got.shape(), want.shape(), "{what}: shape mismatch");
    for (g, w) in got.iter().zip(want.iter()) {
        assert!(
            ((*g as f64) - w).abs() <= tol * (1.0 + w.abs()),
            "{what}: got {g}, want {w}"
        );
    }
}

/// Configurations covering stride 1/2, no/with padding, odd sizes where the
/// output arithmetic floors, and the 4x4 stride-2 shapes the networks use.
const CASES: &[(usize, usize, usize, usize, usize, usize, usize, usize)] = &[
    // (n, c, h, w, o, k, stride, pad)
    (1, 1, 5, 5, 1, 3, 1, 0),
    (2, 3, 6, 6, 4, 3, 1, 1),
    (2, 2, 8, 8, 3, 4, 2, 1),
    (1, 2, 5, 7, 2, 3, 2, 1),
    (2, 1, 7, 7, 2, 5, 2, 2),
    (1, 4, 4, 4, 8, 4, 2, 1),
    (1, 1, 1, 1, 1, 1, 1, 0),
];

#[test]
fn conv2d_matches_oracle() {
    let mut rng = seeded_stream(41, 0);
    for &(n, c, h, w, o, k, s, p) in CASES {
        let x = standard_normal(&mut rng, &[n, c, h, w]);
        let kk = standard_normal(&mut rng, &[o, c, k, k]);
        let got = conv2d(&x, &kk, s, p);
        let want = conv2d_oracle(&to4(&x), &to4(&kk), s, p);
        assert_close(&got, &want, 1e-4, &format!("conv2d {n}x{c}x{h}x{w} k{k} s{s} p{p}"));
    }
}

#[test]
fn conv2d_transpose_matches_oracle() {
    let mut rng = seeded_stream(42, 0);
    for &(n, c, h, w, o, k, s, p) in CASES {
        let (oh, ow) = (out_extent(h, k, s, p), out_extent(w, k, s, p));
        let y = standard_normal(&mut rng, &[n, o, oh, ow]);
        let kk = standard_normal(&mut rng, &[o, c, k, k]);
        let got = conv2d_transpose(&y, &kk, s, p, (h, w));
        let want = conv2d_transpose_oracle(&to4(&y), &to4(&kk), s, p, (h, w));
        assert_close(&got, &want, 1e-4, &format!("tconv {n}x{o}x{oh}x{ow} k{k} s{s} p{p}"));
    }
}

#[test]
fn kernel_grad_matches_oracle() {
    let mut rng = seeded_stream(43, 0);
    for &(n, c, h, w, o, k, s, p) in CASES {
        let (oh, ow) = (out_extent(h, k, s, p), out_extent(w, k, s, p));
        let x = standard_normal(&mut rng, &[n, c, h, w]);
        let dy = standard_normal(&mut rng, &[n, o, oh, ow]);
        let got = conv2d_kernel_grad(&x, &dy, s, p, (k, k));
        let want = kernel_grad_oracle(&to4(&x), &to4(&dy), s, p, (k, k));
        assert_close(&got, &want, 1e-4, &format!("kgrad {n}x{c}x{h}x{w} k{k} s{s} p{p}"));
    }
}

#[test]
fn transpose_resolves_ambiguous_output_size() {
    // With stride 2 both 7 and 8 produce a 4-long output; out_hw picks one.
    let mut rng = seeded_stream(44, 0);
    let kk = standard_normal(&mut rng, &[1, 1, 3, 3]);
    for h in [7usize, 8] {
        let oh = out_extent(h, 3, 2, 1);
        assert_eq!(oh, 4);
        let y = standard_normal(&mut rng, &[1, 1, oh, oh]);
        let got = conv2d_transpose(&y, &kk, 2, 1, (h, h));
        assert_eq!(got.shape(), &[1, 1, h, h]);
        let want = conv2d_transpose_oracle(&to4(&y), &to4(&kk), 2, 1, (h, h));
        assert_close(&got, &want, 1e-4, &format!("ambiguous tconv h={h}"));
    }
}

fn dot(a: &ArrayD<f32>, b: &ArrayD<f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// <conv(x, k), y> == <x, conv_transpose(y, k)>: the transpose really is
    /// the adjoint, for any geometry.
    #[test]
    fn transpose_is_adjoint_of_conv(
        n in 1usize..3, c in 1usize..3, o in 1usize..3,
        h in 3usize..9, w in 3usize..9,
        k in 1usize..4, s in 1usize..3, p in 0usize..2,
        seed in 0u64..1000,
    ) {
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let mut rng = seeded_stream(seed, 1);
        let x = standard_normal(&mut rng, &[n, c, h, w]);
        let kk = standard_normal(&mut rng, &[o, c, k, k]);
        let (oh, ow) = (out_extent(h, k, s, p), out_extent(w, k, s, p));
        let y = standard_normal(&mut rng, &[n, o, oh, ow]);

        let lhs = dot(&conv2d(&x, &kk, s, p), &y);
        let rhs = dot(&x, &conv2d_transpose(&y, &kk, s, p, (h, w)));
        prop_assert!((lhs - rhs).abs() <= 1e-3 * (1.0 + lhs.abs()),
            "adjoint identity violated: {lhs} vs {rhs}");
    }

    /// <conv(x, k), dy> == <k, kernel_grad(x, dy)>: the kernel gradient is
    /// the adjoint in the kernel argument.
    #[test]
    fn kernel_grad_is_adjoint_in_kernel(
        n in 1usize..3, c in 1usize..3, o in 1usize..3,
        h in 3usize..9, w in 3usize..9,
        k in 1usize..4, s in 1usize..3, p in 0usize..2,
        seed in 0u64..1000,
    ) {
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let mut rng = seeded_stream(seed, 2);
        let x = standard_normal(&mut rng, &[n, c, h, w]);
        let kk = standard_normal(&mut rng, &[o, c, k, k]);
        let (oh, ow) = (out_extent(h, k, s, p), out_extent(w, k, s, p));
        let dy = standard_normal(&mut rng, &[n, o, oh, ow]);

        let lhs = dot(&conv2d(&x, &kk, s, p), &dy);
        let rhs = dot(&kk, &conv2d_kernel_grad(&x, &dy, s, p, (k, k)));
        prop_assert!((lhs - rhs).abs() <= 1e-3 * (1.0 + lhs.abs()),
            "kernel adjoint identity violated: {lhs} vs {rhs}");
    }

    /// Output shape follows the strided-convolution arithmetic.
    #[test]
    fn conv_output_shape_law(
        n in 1usize..3, c in 1usize..3, o in 1usize..4,
        h in 4usize..10, w in 4usize..10,
        k in 1usize..5, s in 1usize..4, p in 0usize..3,
    ) {
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let mut rng = seeded_stream(7, 3);
        let x = standard_normal(&mut rng, &[n, c, h, w]);
        let kk = standard_normal(&mut rng, &[o, c, k, k]);
        let y = conv2d(&x, &kk, s, p);
        prop_assert_eq!(y.shape(), &[n, o, out_extent(h, k, s, p), out_extent(w, k, s, p)]);
    }
}

#[test]
#[should_panic(expected = "channel mismatch")]
fn conv_rejects_channel_mismatch() {
    let mut rng = seeded_stream(45, 0);
    let x = standard_normal(&mut rng, &[1, 2, 5, 5]);
    let k = standard_normal(&mut rng, &[1, 3, 3, 3]);
    conv2d(&x, &k, 1, 1);
}

#[test]
#[should_panic(expected = "height mismatch")]
fn transpose_rejects_inconsistent_output_size() {
    let mut rng = seeded_stream(46, 0);
    let y = standard_normal(&mut rng, &[1, 1, 4, 4]);
    let k = standard_normal(&mut rng, &[1, 1, 3, 3]);
    conv2d_transpose(&y, &k, 2, 1, (12, 12));
}
