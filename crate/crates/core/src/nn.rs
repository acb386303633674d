//! Building blocks: seeded initialization, named parameter registry,
//! linear / conv / norm layers, multi-head attention, MLPs, and the fixed
//! 2-D sinusoidal positional encoding.
//!
//! Every parameter is created through [`Init`], which derives a dedicated
//! RNG stream from `(master seed, parameter name)`. Initialization is
//! therefore independent of construction order and stable across runs.

use crate::tensor::{conv2d, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// FNV-1a over the parameter name; mixed with the master seed to derive
/// per-parameter RNG streams.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Seeded parameter factory plus the registry of `(name, tensor)` pairs it
/// has produced.
pub struct Init {
    seed: u64,
    params: Vec<(String, Tensor)>,
}

impl Init {
    pub fn new(seed: u64) -> Init {
        Init {
            seed,
            params: Vec::new(),
        }
    }

    fn rng_for(&self, name: &str) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(self.seed ^ fnv1a(name))
    }

    fn register(&mut self, name: &str, data: ArrayD<f64>) -> Tensor {
        let t = Tensor::param(data);
        self.params.push((name.to_string(), t.clone()));
        t
    }

    /// Truncated normal (resampled beyond two standard deviations).
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let mut rng = self.rng_for(name);
        let data = ArrayD::from_shape_fn(IxDyn(shape), |_| loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        });
        self.register(name, data)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let mut rng = self.rng_for(name);
        let data = ArrayD::from_shape_fn(IxDyn(shape), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        });
        self.register(name, data)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Tensor {
        self.register(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Tensor {
        self.register(name, ArrayD::from_elem(IxDyn(shape), 1.0))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let mut rng = self.rng_for(name);
        let data = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * (hi - lo) + lo);
        self.register(name, data)
    }

    /// All parameters registered so far, in registration order.
    pub fn into_params(self) -> Vec<(String, Tensor)> {
        self.params
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }
}

/// Init std used by the (frozen) backbone projections.
pub const BACKBONE_STD: f64 = 0.02;

/// Affine map `y = x W^T + b` with `w: [out, in]`. Weights default to
/// fan-in-scaled truncated normals, which keeps activations at unit order
/// for the small widths used here.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear::with_std(init, name, d_in, d_out, (1.0 / d_in as f64).sqrt())
    }

    pub fn with_std(init: &mut Init, name: &str, d_in: usize, d_out: usize, std: f64) -> Linear {
        Linear {
            w: init.trunc_normal(&format!("{name}.w"), &[d_out, d_in], std),
            b: init.zeros(&format!("{name}.b"), &[d_out]),
        }
    }

    /// `x: [N, d_in] -> [N, d_out]`
    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w.t()).add(&self.b)
    }
}

/// 2-D convolution layer over `[C, H, W]` maps.
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Conv2d {
        let std = (1.0 / (c_in * k * k) as f64).sqrt();
        Conv2d::with_std(init, name, c_in, c_out, k, stride, pad, std)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std(
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f64,
    ) -> Conv2d {
        Conv2d {
            w: init.trunc_normal(&format!("{name}.w"), &[c_out, c_in, k, k], std),
            b: init.zeros(&format!("{name}.b"), &[c_out]),
            stride,
            pad,
        }
    }

    /// Weight and bias pinned to zero at creation.
    pub fn new_zeroed(
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Conv2d {
        Conv2d {
            w: init.zeros(&format!("{name}.w"), &[c_out, c_in, k, k]),
            b: init.zeros(&format!("{name}.b"), &[c_out]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv2d(x, &self.w, Some(&self.b), self.stride, self.pad)
    }
}

/// Transposed 2-D convolution layer (upsampling).
pub struct ConvTranspose2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> ConvTranspose2d {
        ConvTranspose2d {
            w: init.trunc_normal(
                &format!("{name}.w"),
                &[c_in, c_out, k, k],
                (1.0 / c_in as f64).sqrt(),
            ),
            b: init.zeros(&format!("{name}.b"), &[c_out]),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        crate::tensor::conv_transpose2d(x, &self.w, Some(&self.b), self.stride)
    }
}

/// LayerNorm over the last axis of `[N, C]` token stacks.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: init.ones(&format!("{name}.gamma"), &[dim]),
            beta: init.zeros(&format!("{name}.beta"), &[dim]),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let last = x.shape().len() - 1;
        let mu = x.mean_axis_keep(last);
        let centered = x.sub(&mu);
        let var = centered.mul(&centered).mean_axis_keep(last);
        let inv_std = var.add_scalar(self.eps).sqrt();
        centered.div(&inv_std).mul(&self.gamma).add(&self.beta)
    }
}

/// LayerNorm across the channel axis of `[C, H, W]` maps, per pixel.
pub struct LayerNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm2d {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> LayerNorm2d {
        LayerNorm2d {
            gamma: init.ones(&format!("{name}.gamma"), &[channels, 1, 1]),
            beta: init.zeros(&format!("{name}.beta"), &[channels, 1, 1]),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mu = x.mean_axis_keep(0);
        let centered = x.sub(&mu);
        let var = centered.mul(&centered).mean_axis_keep(0);
        let inv_std = var.add_scalar(self.eps).sqrt();
        centered.div(&inv_std).mul(&self.gamma).add(&self.beta)
    }
}

/// Two-layer MLP with GELU.
pub struct Mlp {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, dim: usize, hidden: usize) -> Mlp {
        Mlp {
            lin1: Linear::new(init, &format!("{name}.lin1"), dim, hidden),
            lin2: Linear::new(init, &format!("{name}.lin2"), hidden, dim),
        }
    }

    pub fn with_std(init: &mut Init, name: &str, dim: usize, hidden: usize, std: f64) -> Mlp {
        Mlp {
            lin1: Linear::with_std(init, &format!("{name}.lin1"), dim, hidden, std),
            lin2: Linear::with_std(init, &format!("{name}.lin2"), hidden, dim, std),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.lin2.forward(&self.lin1.forward(x).gelu())
    }
}

/// Three-layer MLP (hypernetwork heads, IoU head) with configurable output.
pub struct Mlp3 {
    pub lin1: Linear,
    pub lin2: Linear,
    pub lin3: Linear,
}

impl Mlp3 {
    pub fn new(init: &mut Init, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Mlp3 {
        Mlp3 {
            lin1: Linear::new(init, &format!("{name}.lin1"), d_in, hidden),
            lin2: Linear::new(init, &format!("{name}.lin2"), hidden, hidden),
            lin3: Linear::new(init, &format!("{name}.lin3"), hidden, d_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.lin1.forward(x).gelu();
        let h = self.lin2.forward(&h).gelu();
        self.lin3.forward(&h)
    }
}

/// Multi-head attention with separate q/k/v/out projections (decoder-style
/// attention between token stacks).
pub struct Attention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Attention {
        assert!(dim % heads == 0, "attention dim not divisible by heads");
        Attention {
            q_proj: Linear::new(init, &format!("{name}.q"), dim, dim),
            k_proj: Linear::new(init, &format!("{name}.k"), dim, dim),
            v_proj: Linear::new(init, &format!("{name}.v"), dim, dim),
            out_proj: Linear::new(init, &format!("{name}.out"), dim, dim),
            heads,
            dim,
        }
    }

    /// `q: [Nq, C]`, `k, v: [Nk, C]` -> `[Nq, C]`.
    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        self.forward_with_weights(q, k, v).0
    }

    /// Also returns the post-softmax attention weights `[heads, Nq, Nk]`.
    pub fn forward_with_weights(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
        let (nq, nk) = (q.shape()[0], k.shape()[0]);
        let qh = split_heads(&self.q_proj.forward(q), self.heads); // [h, Nq, dh]
        let kh = split_heads(&self.k_proj.forward(k), self.heads);
        let vh = split_heads(&self.v_proj.forward(v), self.heads);
        let dh = self.dim / self.heads;
        let scores = qh
            .batch_matmul(&kh.permute(&[0, 2, 1]))
            .scale(1.0 / (dh as f64).sqrt());
        let weights = scores.softmax_last(); // [h, Nq, Nk]
        debug_assert_eq!(weights.shape(), vec![self.heads, nq, nk]);
        let ctx = weights.batch_matmul(&vh); // [h, Nq, dh]
        let merged = merge_heads(&ctx, self.dim);
        (self.out_proj.forward(&merged), weights)
    }
}

/// `[N, C] -> [heads, N, C/heads]`
pub fn split_heads(x: &Tensor, heads: usize) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    x.reshape(&[n, heads, c / heads]).permute(&[1, 0, 2])
}

/// `[heads, N, dh] -> [N, heads*dh]`
pub fn merge_heads(x: &Tensor, dim: usize) -> Tensor {
    let n = x.shape()[1];
    x.permute(&[1, 0, 2]).reshape(&[n, dim])
}

/// Fixed 2-D sinusoidal positional encoding as a `[H*W, C]` constant.
/// Half the channels encode the y coordinate, half the x coordinate, each
/// as interleaved sine/cosine pairs over geometric frequencies.
pub fn sinusoidal_pe_2d(channels: usize, h: usize, w: usize) -> ArrayD<f64> {
    assert!(channels % 4 == 0, "positional encoding needs channels % 4 == 0");
    let quarter = channels / 4;
    let mut pe = ArrayD::<f64>::zeros(IxDyn(&[h * w, channels]));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                let (ys, yc) = ((y as f64 * freq).sin(), (y as f64 * freq).cos());
                let (xs, xc) = ((x as f64 * freq).sin(), (x as f64 * freq).cos());
                pe[IxDyn(&[row, 2 * i])] = ys;
                pe[IxDyn(&[row, 2 * i + 1])] = yc;
                pe[IxDyn(&[row, 2 * quarter + 2 * i])] = xs;
                pe[IxDyn(&[row, 2 * quarter + 2 * i + 1])] = xc;
            }
        }
    }
    pe
}
