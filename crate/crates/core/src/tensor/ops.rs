//! Primitive differentiable operations.
//!
//! Binary ops broadcast numpy-style; backward passes sum gradients back
//! down to each parent's shape. Saved forward values are moved into the
//! backward closures, so a tape node owns everything its backward needs.

use super::{broadcast_shape, reduce_to_shape, Tensor};
use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn, Slice, Zip};

fn broadcast_apply(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), other.shape());
        let out = broadcast_apply(&self.array(), &other.array(), |x, y| x + y);
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate(reduce_to_shape(g, &sa));
                parents[1].accumulate(reduce_to_shape(g, &sb));
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), other.shape());
        let out = broadcast_apply(&self.array(), &other.array(), |x, y| x - y);
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate(reduce_to_shape(g, &sa));
                parents[1].accumulate(reduce_to_shape(&g.mapv(|v| -v), &sb));
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (a, b) = (self.array(), other.array());
        let (sa, sb) = (self.shape(), other.shape());
        let out = broadcast_apply(&a, &b, |x, y| x * y);
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let ga = broadcast_apply(g, &b, |gv, bv| gv * bv);
                let gb = broadcast_apply(g, &a, |gv, av| gv * av);
                parents[0].accumulate(reduce_to_shape(&ga, &sa));
                parents[1].accumulate(reduce_to_shape(&gb, &sb));
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (a, b) = (self.array(), other.array());
        let (sa, sb) = (self.shape(), other.shape());
        let out = broadcast_apply(&a, &b, |x, y| x / y);
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let ga = broadcast_apply(g, &b, |gv, bv| gv / bv);
                let num = broadcast_apply(&a, &b, |av, bv| -av / (bv * bv));
                let gb = broadcast_apply(g, &num, |gv, nv| gv * nv);
                parents[0].accumulate(reduce_to_shape(&ga, &sa));
                parents[1].accumulate(reduce_to_shape(&gb, &sb));
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.array().mapv(|v| v * c);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| parents[0].accumulate(g.mapv(|v| v * c))),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.array().mapv(|v| v + c);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| parents[0].accumulate(g.clone())),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let s = self.array().mapv(stable_sigmoid);
        let saved = s.clone();
        Tensor::from_op(
            s,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let dx = Zip::from(g).and(&saved).map_collect(|&gv, &sv| gv * sv * (1.0 - sv));
                parents[0].accumulate(dx);
            }),
        )
    }

    /// GELU, tanh approximation. Forward and backward are derived from the
    /// same expression so finite-difference checks agree to machine order.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let x = self.array();
        let out = x.mapv(|v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let dx = Zip::from(g).and(&x).map_collect(|&gv, &v| {
                    let u = C * (v + A * v * v * v);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * A * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                });
                parents[0].accumulate(dx);
            }),
        )
    }

    pub fn abs(&self) -> Tensor {
        let x = self.array();
        let out = x.mapv(f64::abs);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let dx = Zip::from(g)
                    .and(&x)
                    .map_collect(|&gv, &v| gv * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                parents[0].accumulate(dx);
            }),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        let out = self.array().mapv(f64::sqrt);
        let saved = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let dx = Zip::from(g).and(&saved).map_collect(|&gv, &sv| gv * 0.5 / sv);
                parents[0].accumulate(dx);
            }),
        )
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self
            .array()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be rank 2");
        let b = other
            .array()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be rank 2");
        assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dim mismatch");
        let out = a.dot(&b).into_dyn();
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                parents[0].accumulate(g2.dot(&b.t()).into_dyn());
                parents[1].accumulate(a.t().dot(&g2).into_dyn());
            }),
        )
    }

    /// Batched matrix product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&self, other: &Tensor) -> Tensor {
        let a = self.array();
        let b = other.array();
        assert_eq!(a.ndim(), 3, "batch_matmul lhs must be rank 3");
        assert_eq!(b.ndim(), 3, "batch_matmul rhs must be rank 3");
        assert_eq!(a.shape()[0], b.shape()[0], "batch dim mismatch");
        assert_eq!(a.shape()[2], b.shape()[1], "inner dim mismatch");
        let (bs, m, n) = (a.shape()[0], a.shape()[1], b.shape()[2]);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[bs, m, n]));
        for i in 0..bs {
            let ai = a.index_axis(Axis(0), i);
            let bi = b.index_axis(Axis(0), i);
            let prod = ai
                .into_dimensionality::<Ix2>()
                .unwrap()
                .dot(&bi.into_dimensionality::<Ix2>().unwrap());
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let mut ga = ArrayD::<f64>::zeros(a.raw_dim());
                let mut gb = ArrayD::<f64>::zeros(b.raw_dim());
                for i in 0..bs {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    let ai = a
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    let bi = b
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                parents[0].accumulate(ga);
                parents[1].accumulate(gb);
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let old_shape = self.shape();
        let out = self
            .array()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let back = g
                    .clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .unwrap();
                parents[0].accumulate(back);
            }),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let axes_owned = axes.to_vec();
        let out = self
            .array()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut inverse = vec![0usize; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = g
                    .clone()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                parents[0].accumulate(back);
            }),
        )
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "t() on non-matrix");
        self.permute(&[1, 0])
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let parent_shape = self.shape();
        let out = self
            .array()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut back = ArrayD::<f64>::zeros(IxDyn(&parent_shape));
                back.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                parents[0].accumulate(back);
            }),
        )
    }

    pub fn sum(&self) -> Tensor {
        let shape = self.shape();
        let total: f64 = self.array().sum();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), total),
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gv = *g.iter().next().unwrap();
                parents[0].accumulate(ArrayD::from_elem(IxDyn(&shape), gv));
            }),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along one axis, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor {
        let parent_shape = self.shape();
        let out = self
            .array()
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let back = g
                    .broadcast(IxDyn(&parent_shape))
                    .expect("broadcast grad")
                    .to_owned();
                parents[0].accumulate(back);
            }),
        )
    }

    pub fn mean_axis_keep(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis_keep(axis).scale(1.0 / n)
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let x = self.array();
        let last = x.ndim() - 1;
        let mut out = x.clone();
        for mut lane in out.lanes_mut(Axis(last)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                denom += *v;
            }
            for v in lane.iter_mut() {
                *v /= denom;
            }
        }
        let saved = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = g.clone();
                let last = saved.ndim() - 1;
                for (mut dlane, slane) in dx
                    .lanes_mut(Axis(last))
                    .into_iter()
                    .zip(saved.lanes(Axis(last)))
                {
                    let dot: f64 = dlane.iter().zip(slane.iter()).map(|(d, s)| d * s).sum();
                    for (d, s) in dlane.iter_mut().zip(slane.iter()) {
                        *d = s * (*d - dot);
                    }
                }
                parents[0].accumulate(dx);
            }),
        )
    }

    /// Mean binary cross-entropy against a constant target, evaluated in
    /// the numerically stable logit form
    /// `max(x, 0) - x*y + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits_mean(&self, target: &ArrayD<f64>) -> Tensor {
        let x = self.array();
        assert_eq!(x.shape(), target.shape(), "bce target shape mismatch");
        let n = x.len() as f64;
        let total: f64 = Zip::from(&x)
            .and(target)
            .fold(0.0, |acc, &xv, &yv| {
                acc + xv.max(0.0) - xv * yv + (-xv.abs()).exp().ln_1p()
            });
        let y = target.clone();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), total / n),
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gv = *g.iter().next().unwrap();
                let dx = Zip::from(&x)
                    .and(&y)
                    .map_collect(|&xv, &yv| gv * (stable_sigmoid(xv) - yv) / n);
                parents[0].accumulate(dx);
            }),
        )
    }
}

/// Concatenate tensors along an axis.
pub fn concat(axis: usize, parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let arrays: Vec<ArrayD<f64>> = parts.iter().map(|t| t.array()).collect();
    let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
    let out = concatenate(Axis(axis), &views).expect("concat shape mismatch");
    let lens: Vec<usize> = arrays.iter().map(|a| a.shape()[axis]).collect();
    let parents: Vec<Tensor> = parts.iter().map(|t| (*t).clone()).collect();
    Tensor::from_op(
        out,
        parents,
        Box::new(move |g, parents| {
            let mut offset = 0usize;
            for (p, &len) in parents.iter().zip(lens.iter()) {
                let piece = g
                    .slice_axis(Axis(axis), Slice::from(offset..offset + len))
                    .to_owned();
                p.accumulate(piece);
                offset += len;
            }
        }),
    )
}
