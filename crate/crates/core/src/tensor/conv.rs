//! Spatial operations on `[C, H, W]` maps: convolution, transposed
//! convolution, 2x2 average pooling, bilinear resampling.

use super::Tensor;
use ndarray::{ArrayD, Ix3, Ix4, IxDyn};

/// 2-D convolution, `x: [Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let xa = x.array().into_dimensionality::<Ix3>().expect("conv2d input rank");
    let wa = w.array().into_dimensionality::<Ix4>().expect("conv2d weight rank");
    let (cin, h, wdt) = (xa.shape()[0], xa.shape()[1], xa.shape()[2]);
    let (cout, wcin, kh, kw) = (wa.shape()[0], wa.shape()[1], wa.shape()[2], wa.shape()[3]);
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    assert!(h + 2 * pad >= kh && wdt + 2 * pad >= kw, "conv2d kernel larger than input");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wdt + 2 * pad - kw) / stride + 1;

    let ba = b.map(|t| t.array());
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[cout, ho, wo]));
    {
        let mut ov = out.view_mut().into_dimensionality::<Ix3>().unwrap();
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = ba.as_ref().map_or(0.0, |bv| bv[IxDyn(&[co])]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oh * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ow * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wdt as isize {
                                    continue;
                                }
                                acc += xa[[ci, iy as usize, ix as usize]] * wa[[co, ci, ky, kx]];
                            }
                        }
                    }
                    ov[[co, oh, ow]] = acc;
                }
            }
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bias) = b {
        parents.push(bias.clone());
    }
    let has_bias = b.is_some();
    Tensor::from_op(
        out,
        parents,
        Box::new(move |g, parents| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut dx = ndarray::Array3::<f64>::zeros((cin, h, wdt));
            let mut dw = ndarray::Array4::<f64>::zeros((cout, cin, kh, kw));
            let mut db = vec![0.0f64; cout];
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let gv = g3[[co, oh, ow]];
                        if gv == 0.0 {
                            continue;
                        }
                        db[co] += gv;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oh * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ow * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wdt as isize {
                                        continue;
                                    }
                                    dx[[ci, iy as usize, ix as usize]] += gv * wa[[co, ci, ky, kx]];
                                    dw[[co, ci, ky, kx]] += gv * xa[[ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                }
            }
            parents[0].accumulate(dx.into_dyn());
            parents[1].accumulate(dw.into_dyn());
            if has_bias {
                parents[2].accumulate(ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap());
            }
        }),
    )
}

/// Transposed 2-D convolution, `x: [Cin, H, W]`, `w: [Cin, Cout, kh, kw]`,
/// output `[Cout, (H-1)*stride + kh, (W-1)*stride + kw]`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Tensor {
    let xa = x.array().into_dimensionality::<Ix3>().expect("convT input rank");
    let wa = w.array().into_dimensionality::<Ix4>().expect("convT weight rank");
    let (cin, h, wdt) = (xa.shape()[0], xa.shape()[1], xa.shape()[2]);
    let (wcin, cout, kh, kw) = (wa.shape()[0], wa.shape()[1], wa.shape()[2], wa.shape()[3]);
    assert_eq!(cin, wcin, "convT channel mismatch");
    let ho = (h - 1) * stride + kh;
    let wo = (wdt - 1) * stride + kw;

    let ba = b.map(|t| t.array());
    let mut out = ndarray::Array3::<f64>::zeros((cout, ho, wo));
    if let Some(bv) = &ba {
        for co in 0..cout {
            out.index_axis_mut(ndarray::Axis(0), co).fill(bv[IxDyn(&[co])]);
        }
    }
    for ci in 0..cin {
        for ih in 0..h {
            for iw in 0..wdt {
                let xv = xa[[ci, ih, iw]];
                if xv == 0.0 {
                    continue;
                }
                for co in 0..cout {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            out[[co, ih * stride + ky, iw * stride + kx]] +=
                                xv * wa[[ci, co, ky, kx]];
                        }
                    }
                }
            }
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bias) = b {
        parents.push(bias.clone());
    }
    let has_bias = b.is_some();
    Tensor::from_op(
        out.into_dyn(),
        parents,
        Box::new(move |g, parents| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut dx = ndarray::Array3::<f64>::zeros((cin, h, wdt));
            let mut dw = ndarray::Array4::<f64>::zeros((cin, cout, kh, kw));
            let mut db = vec![0.0f64; cout];
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        db[co] += g3[[co, oh, ow]];
                    }
                }
            }
            for ci in 0..cin {
                for ih in 0..h {
                    for iw in 0..wdt {
                        let xv = xa[[ci, ih, iw]];
                        for co in 0..cout {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let gv = g3[[co, ih * stride + ky, iw * stride + kx]];
                                    dx[[ci, ih, iw]] += gv * wa[[ci, co, ky, kx]];
                                    dw[[ci, co, ky, kx]] += gv * xv;
                                }
                            }
                        }
                    }
                }
            }
            parents[0].accumulate(dx.into_dyn());
            parents[1].accumulate(dw.into_dyn());
            if has_bias {
                parents[2].accumulate(ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap());
            }
        }),
    )
}

/// 2x2 average pooling with stride 2. Odd trailing rows/cols average over
/// the valid window only, so output dims are `ceil(n/2)`.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let xa = x.array().into_dimensionality::<Ix3>().expect("pool input rank");
    let (c, h, w) = (xa.shape()[0], xa.shape()[1], xa.shape()[2]);
    let ho = h.div_ceil(2);
    let wo = w.div_ceil(2);
    let mut out = ndarray::Array3::<f64>::zeros((c, ho, wo));
    for ci in 0..c {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0;
                let mut count = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (iy, ix) = (oh * 2 + dy, ow * 2 + dx);
                        if iy < h && ix < w {
                            acc += xa[[ci, iy, ix]];
                            count += 1.0;
                        }
                    }
                }
                out[[ci, oh, ow]] = acc / count;
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g, parents| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut count = 0.0;
                        for dy in 0..2 {
                            for dx_ in 0..2 {
                                if oh * 2 + dy < h && ow * 2 + dx_ < w {
                                    count += 1.0;
                                }
                            }
                        }
                        let share = g3[[ci, oh, ow]] / count;
                        for dy in 0..2 {
                            for dx_ in 0..2 {
                                let (iy, ix) = (oh * 2 + dy, ow * 2 + dx_);
                                if iy < h && ix < w {
                                    dx[[ci, iy, ix]] += share;
                                }
                            }
                        }
                    }
                }
            }
            parents[0].accumulate(dx.into_dyn());
        }),
    )
}

struct Interp {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn interp_table(src: usize, dst: usize) -> Interp {
    let scale = src as f64 / dst as f64;
    let mut lo = Vec::with_capacity(dst);
    let mut hi = Vec::with_capacity(dst);
    let mut frac = Vec::with_capacity(dst);
    for d in 0..dst {
        // half-pixel centers
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let l = s.floor() as usize;
        let h = (l + 1).min(src - 1);
        lo.push(l);
        hi.push(h);
        frac.push(s - l as f64);
    }
    Interp { lo, hi, frac }
}

/// Bilinear resampling of `[C, H, W]` to `[C, h2, w2]` (half-pixel
/// convention). Linear in the input, so the backward pass is the exact
/// adjoint scatter.
pub fn resize_bilinear(x: &Tensor, h2: usize, w2: usize) -> Tensor {
    let xa = x.array().into_dimensionality::<Ix3>().expect("resize input rank");
    let (c, h, w) = (xa.shape()[0], xa.shape()[1], xa.shape()[2]);
    if h == h2 && w == w2 {
        // still a tape node: identity
        return x.scale(1.0);
    }
    let ry = interp_table(h, h2);
    let rx = interp_table(w, w2);
    let mut out = ndarray::Array3::<f64>::zeros((c, h2, w2));
    for ci in 0..c {
        for y in 0..h2 {
            let (y0, y1, fy) = (ry.lo[y], ry.hi[y], ry.frac[y]);
            for xo in 0..w2 {
                let (x0, x1, fx) = (rx.lo[xo], rx.hi[xo], rx.frac[xo]);
                out[[ci, y, xo]] = (1.0 - fy) * (1.0 - fx) * xa[[ci, y0, x0]]
                    + (1.0 - fy) * fx * xa[[ci, y0, x1]]
                    + fy * (1.0 - fx) * xa[[ci, y1, x0]]
                    + fy * fx * xa[[ci, y1, x1]];
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g, parents| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..h2 {
                    let (y0, y1, fy) = (ry.lo[y], ry.hi[y], ry.frac[y]);
                    for xo in 0..w2 {
                        let (x0, x1, fx) = (rx.lo[xo], rx.hi[xo], rx.frac[xo]);
                        let gv = g3[[ci, y, xo]];
                        dx[[ci, y0, x0]] += gv * (1.0 - fy) * (1.0 - fx);
                        dx[[ci, y0, x1]] += gv * (1.0 - fy) * fx;
                        dx[[ci, y1, x0]] += gv * fy * (1.0 - fx);
                        dx[[ci, y1, x1]] += gv * fy * fx;
                    }
                }
            }
            parents[0].accumulate(dx.into_dyn());
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn fd_scalar(
        x0: &ArrayD<f64>,
        f: impl Fn(&Tensor) -> Tensor,
        n_checks: usize,
        tol: f64,
    ) {
        let x = Tensor::param(x0.clone());
        let y = f(&x);
        y.backward();
        let analytic = x.grad().unwrap();
        let h = 1e-6;
        let step = (x0.len() / n_checks).max(1);
        for idx in (0..x0.len()).step_by(step) {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            *plus.iter_mut().nth(idx).unwrap() += h;
            *minus.iter_mut().nth(idx).unwrap() -= h;
            let fp = f(&Tensor::constant(plus)).item();
            let fm = f(&Tensor::constant(minus)).item();
            let numeric = (fp - fm) / (2.0 * h);
            let a = *analytic.iter().nth(idx).unwrap();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (a - numeric).abs() / denom < tol,
                "fd mismatch at {idx}: analytic {a}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn conv2d_shapes_and_gradients() {
        let w = Tensor::param(rand_array(&[4, 3, 3, 3], 2));
        let b = Tensor::param(rand_array(&[4], 3));
        let x0 = rand_array(&[3, 6, 6], 1);
        let y = conv2d(&Tensor::constant(x0.clone()), &w, Some(&b), 1, 1);
        assert_eq!(y.shape(), vec![4, 6, 6]);
        // input gradient
        fd_scalar(&x0, |x| conv2d(x, &w, Some(&b), 1, 1).mul(&conv2d(x, &w, Some(&b), 1, 1)).sum(), 9, 1e-5);
        // weight gradient
        let w0 = rand_array(&[2, 3, 2, 2], 5);
        let xc = Tensor::constant(rand_array(&[3, 5, 5], 6));
        fd_scalar(&w0, |w| conv2d(&xc, w, None, 2, 0).sum(), 8, 1e-6);
    }

    #[test]
    fn conv_transpose_doubles_resolution() {
        let x0 = rand_array(&[3, 4, 4], 10);
        let w = Tensor::param(rand_array(&[3, 2, 2, 2], 11));
        let b = Tensor::param(rand_array(&[2], 12));
        let y = conv_transpose2d(&Tensor::constant(x0.clone()), &w, Some(&b), 2);
        assert_eq!(y.shape(), vec![2, 8, 8]);
        fd_scalar(&x0, |x| conv_transpose2d(x, &w, Some(&b), 2).mul(&conv_transpose2d(x, &w, Some(&b), 2)).sum(), 9, 1e-5);
        let w0 = rand_array(&[3, 2, 2, 2], 13);
        let xc = Tensor::constant(x0);
        fd_scalar(&w0, |w| conv_transpose2d(&xc, w, None, 2).sum(), 8, 1e-6);
    }

    #[test]
    fn pool_and_resize_gradients() {
        let x0 = rand_array(&[2, 5, 5], 20);
        fd_scalar(&x0, |x| avg_pool2(x).mul(&avg_pool2(x)).sum(), 9, 1e-5);
        fd_scalar(&x0, |x| resize_bilinear(x, 9, 7).mul(&resize_bilinear(x, 9, 7)).sum(), 9, 1e-5);
    }

    #[test]
    fn bilinear_preserves_constant_maps() {
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[2, 4, 4]), 0.37));
        let y = resize_bilinear(&x, 8, 8).array();
        for v in y.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
        let z = resize_bilinear(&Tensor::constant(y), 3, 5).array();
        for v in z.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_handles_odd_dims() {
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 5, 7]), 1.0));
        let y = avg_pool2(&x);
        assert_eq!(y.shape(), vec![1, 3, 4]);
        for v in y.array().iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
