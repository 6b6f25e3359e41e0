//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The tape is generic over [`Scalar`]: with `f64` a backward pass yields
//! ordinary gradients; with [`crate::tensor::Dual`] the identical backward code
//! carries a forward-mode directional derivative through every intermediate,
//! so the dual part of a gradient is an exact Hessian-vector product. That is
//! how the second-order path of the meta attack is computed without a
//! higher-order graph.
//!
//! Usage pattern: push leaves, compose ops, call [`Tape::backward`] on a
//! scalar root, read adjoints back per leaf.

use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<S> = Box<dyn Fn(&[Tensor<S>], &Tensor<S>, &mut Gradients<S>)>;

/// Adjoint storage produced by [`Tape::backward`].
pub struct Gradients<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    fn new(n: usize) -> Self {
        Gradients { slots: (0..n).map(|_| None).collect() }
    }

    /// Accumulate into the adjoint of `var`, creating zeros of `shape` on first touch.
    pub fn accumulate(&mut self, var: Var, shape: &[usize], f: impl FnOnce(&mut Tensor<S>)) {
        let slot = &mut self.slots[var.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        f(slot.as_mut().unwrap());
    }

    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.slots[var.0].as_ref()
    }

    /// Adjoint of `var`, or zeros of the given shape if nothing flowed there.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<S> {
        self.slots[var.0].clone().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Convolution geometry shared by `conv2d` and `conv_transpose2d`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn transpose_out_size(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel - 2 * self.pad
    }
}

pub struct Tape<S: Scalar> {
    values: Vec<Tensor<S>>,
    backs: Vec<Option<BackFn<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), backs: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor<S>, back: Option<BackFn<S>>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    /// A differentiable input node.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, None)
    }

    /// Lift an `f64` tensor onto the tape as a constant leaf.
    pub fn constant(&mut self, value: &Tensor<f64>) -> Var {
        self.push(value.lift(), None)
    }

    /// Copy the value of `v` into a fresh leaf, severing the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let val = self.values[v.0].clone();
        self.push(val, None)
    }

    pub fn backward(&self, root: Var) -> Gradients<S> {
        assert!(
            self.values[root.0].shape().is_empty(),
            "backward root must be a scalar node"
        );
        let mut grads = Gradients::new(self.values.len());
        grads.slots[root.0] = Some(Tensor::scalar(S::ONE));
        for i in (0..=root.0).rev() {
            if let Some(back) = &self.backs[i] {
                // Take the node's adjoint out so the closure can mutate others.
                let Some(out_adj) = grads.slots[i].take() else { continue };
                back(&self.values, &out_adj, &mut grads);
                grads.slots[i] = Some(out_adj);
            }
        }
        grads
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y);
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let sa = vals[a.0].shape().to_vec();
                gr.accumulate(a, &sa, |t| {
                    for (d, &gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                });
                let sb = vals[b.0].shape().to_vec();
                gr.accumulate(b, &sb, |t| {
                    for (d, &gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                });
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| x - y);
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let sa = vals[a.0].shape().to_vec();
                gr.accumulate(a, &sa, |t| {
                    for (d, &gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                });
                let sb = vals[b.0].shape().to_vec();
                gr.accumulate(b, &sb, |t| {
                    for (d, &gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *d += -gi;
                    }
                });
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y);
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let sa = av.shape().to_vec();
                gr.accumulate(a, &sa, |t| {
                    for ((d, &gi), &bi) in t.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gi * bi;
                    }
                });
                let sb = bv.shape().to_vec();
                gr.accumulate(b, &sb, |t| {
                    for ((d, &gi), &ai) in t.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gi * ai;
                    }
                });
            })),
        )
    }

    /// `y = mul * x + add` with `f64` constants.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let (m, c) = (S::from_f64(mul), S::from_f64(add));
        let v = self.values[x.0].map(|xi| m * xi + c);
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let s = vals[x.0].shape().to_vec();
                let m = S::from_f64(mul);
                gr.accumulate(x, &s, |t| {
                    for (d, &gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *d += m * gi;
                    }
                });
            })),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    /// Per-layer convex blend `beta * a + (1 - beta) * b`. At `beta` 0 or 1 the
    /// arithmetic degenerates to `1.0 * kept + 0.0 * other`, which is exact.
    pub fn blend(&mut self, a: Var, b: Var, beta: f64) -> Var {
        let (wa, wb) = (S::from_f64(beta), S::from_f64(1.0 - beta));
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| wa * x + wb * y);
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let sa = vals[a.0].shape().to_vec();
                let (wa, wb) = (S::from_f64(beta), S::from_f64(1.0 - beta));
                gr.accumulate(a, &sa, |t| {
                    for (d, &gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *d += wa * gi;
                    }
                });
                let sb = vals[b.0].shape().to_vec();
                gr.accumulate(b, &sb, |t| {
                    for (d, &gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *d += wb * gi;
                    }
                });
            })),
        )
    }

    /// Elementwise multiply by a constant map (e.g. a tiled quantization table).
    pub fn mul_map(&mut self, x: Var, map: &Tensor<f64>) -> Var {
        assert_eq!(self.values[x.0].shape(), map.shape(), "mul_map shape mismatch");
        let m: Tensor<S> = map.lift();
        let v = self.values[x.0].zip_map(&m, |a, b| a * b);
        let m2 = map.clone();
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let s = vals[x.0].shape().to_vec();
                gr.accumulate(x, &s, |t| {
                    for ((d, &gi), &mi) in t.data_mut().iter_mut().zip(g.data()).zip(m2.data()) {
                        *d += gi * S::from_f64(mi);
                    }
                });
            })),
        )
    }

    /// Add a constant tensor (e.g. a pre-sampled noise field).
    pub fn add_map(&mut self, x: Var, map: &Tensor<f64>) -> Var {
        assert_eq!(self.values[x.0].shape(), map.shape(), "add_map shape mismatch");
        let m: Tensor<S> = map.lift();
        let v = self.values[x.0].zip_map(&m, |a, b| a + b);
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let s = vals[x.0].shape().to_vec();
                gr.accumulate(x, &s, |t| {
                    for (d, &gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                });
            })),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let sl = S::from_f64(slope);
        let v = self.values[x.0].map(|xi| if xi.re() > 0.0 { xi } else { sl * xi });
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let xv = &vals[x.0];
                let s = xv.shape().to_vec();
                let sl = S::from_f64(slope);
                gr.accumulate(x, &s, |t| {
                    for ((d, &gi), &xi) in t.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *d += if xi.re() > 0.0 { gi } else { sl * gi };
                    }
                });
            })),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.values[x.0].map(|xi| xi.tanh());
        let out_pre = self.values.len();
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let yv = &vals[out_pre];
                let s = vals[x.0].shape().to_vec();
                gr.accumulate(x, &s, |t| {
                    for ((d, &gi), &yi) in t.data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                        *d += gi * (S::ONE - yi * yi);
                    }
                });
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.values[x.0].map(|xi| S::ONE / (S::ONE + (-xi).exp()));
        let out_pre = self.values.len();
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let yv = &vals[out_pre];
                let s = vals[x.0].shape().to_vec();
                gr.accumulate(x, &s, |t| {
                    for ((d, &gi), &yi) in t.data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                        *d += gi * yi * (S::ONE - yi);
                    }
                });
            })),
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.values[x.0].map(|xi| xi.abs());
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let xv = &vals[x.0];
                let s = xv.shape().to_vec();
                gr.accumulate(x, &s, |t| {
                    for ((d, &gi), &xi) in t.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        let r = xi.re();
                        if r > 0.0 {
                            *d += gi;
                        } else if r < 0.0 {
                            *d += -gi;
                        }
                    }
                });
            })),
        )
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.values[x.0].map(|xi| xi.ln());
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let xv = &vals[x.0];
                let s = xv.shape().to_vec();
                gr.accumulate(x, &s, |t| {
                    for ((d, &gi), &xi) in t.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *d += gi / xi;
                    }
                });
            })),
        )
    }

    /// Clamp with pass-through gradient strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        let v = self.values[x.0].map(|xi| {
            if xi.re() < lo {
                l
            } else if xi.re() > hi {
                h
            } else {
                xi
            }
        });
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let xv = &vals[x.0];
                let s = xv.shape().to_vec();
                gr.accumulate(x, &s, |t| {
                    for ((d, &gi), &xi) in t.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        let r = xi.re();
                        if r > lo && r < hi {
                            *d += gi;
                        }
                    }
                });
            })),
        )
    }

    /// Round to nearest integer; gradient is straight-through (identity).
    pub fn round_st(&mut self, x: Var) -> Var {
        let v = self.values[x.0].map(|xi| xi.round_st());
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let s = vals[x.0].shape().to_vec();
                gr.accumulate(x, &s, |t| {
                    for (d, &gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                });
            })),
        )
    }

    /// `max(x, floor)` on a scalar node. The gradient passes only when
    /// `x > floor` strictly; a tie selects the constant branch.
    pub fn max_with_const(&mut self, x: Var, floor: f64) -> Var {
        assert!(self.values[x.0].shape().is_empty(), "max_with_const expects a scalar");
        let xi = self.values[x.0].item();
        let v = if xi.re() > floor { xi } else { S::from_f64(floor) };
        self.push(
            Tensor::scalar(v),
            Some(Box::new(move |vals, g, gr| {
                let xv = vals[x.0].item();
                if xv.re() > floor {
                    let gi = g.item();
                    gr.accumulate(x, &[], |t| t.data_mut()[0] += gi);
                }
            })),
        )
    }

    // ---- reductions and vector ops ---------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = S::ZERO;
        for &v in self.values[x.0].data() {
            acc += v;
        }
        self.push(
            Tensor::scalar(acc),
            Some(Box::new(move |vals, g, gr| {
                let s = vals[x.0].shape().to_vec();
                let gi = g.item();
                gr.accumulate(x, &s, |t| {
                    for d in t.data_mut() {
                        *d += gi;
                    }
                });
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.values[x.0].len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Weighted sum of scalar nodes with `f64` weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)], bias: f64) -> Var {
        let mut acc = S::from_f64(bias);
        for &(v, w) in terms {
            assert!(self.values[v.0].shape().is_empty(), "weighted_sum expects scalars");
            acc += S::from_f64(w) * self.values[v.0].item();
        }
        let terms: Vec<(Var, f64)> = terms.to_vec();
        self.push(
            Tensor::scalar(acc),
            Some(Box::new(move |_vals, g, gr| {
                let gi = g.item();
                for &(v, w) in &terms {
                    gr.accumulate(v, &[], |t| t.data_mut()[0] += S::from_f64(w) * gi);
                }
            })),
        )
    }

    /// Mean of scalar nodes.
    pub fn mean_of(&mut self, vars: &[Var]) -> Var {
        let w = 1.0 / vars.len() as f64;
        let terms: Vec<(Var, f64)> = vars.iter().map(|&v| (v, w)).collect();
        self.weighted_sum(&terms, 0.0)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(av.shape(), bv.shape(), "dot shape mismatch");
        let mut acc = S::ZERO;
        for (&x, &y) in av.data().iter().zip(bv.data()) {
            acc += x * y;
        }
        self.push(
            Tensor::scalar(acc),
            Some(Box::new(move |vals, g, gr| {
                let gi = g.item();
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let s = av.shape().to_vec();
                gr.accumulate(a, &s, |t| {
                    for (d, &y) in t.data_mut().iter_mut().zip(bv.data()) {
                        *d += gi * y;
                    }
                });
                gr.accumulate(b, &s, |t| {
                    for (d, &x) in t.data_mut().iter_mut().zip(av.data()) {
                        *d += gi * x;
                    }
                });
            })),
        )
    }

    /// Euclidean norm over all elements. Gradient is zero at the origin.
    pub fn norm2(&mut self, x: Var) -> Var {
        let mut acc = S::ZERO;
        for &v in self.values[x.0].data() {
            acc += v * v;
        }
        let norm = acc.sqrt();
        let out_pre = self.values.len();
        self.push(
            Tensor::scalar(norm),
            Some(Box::new(move |vals, g, gr| {
                let n = vals[out_pre].item();
                if n.re() == 0.0 {
                    return;
                }
                let gi = g.item();
                let xv = &vals[x.0];
                let s = xv.shape().to_vec();
                gr.accumulate(x, &s, |t| {
                    for (d, &xi) in t.data_mut().iter_mut().zip(xv.data()) {
                        *d += gi * xi / n;
                    }
                });
            })),
        )
    }

    /// `x / sqrt(sum(x^2) + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = &self.values[x.0];
        let mut ss = S::from_f64(eps);
        for &v in xv.data() {
            ss += v * v;
        }
        let inv = S::ONE / ss.sqrt();
        let v = xv.map(|xi| xi * inv);
        self.push(
            v,
            Some(Box::new(move |vals, g, gr| {
                let xv = &vals[x.0];
                let mut ss = S::from_f64(eps);
                for &v in xv.data() {
                    ss += v * v;
                }
                let inv = S::ONE / ss.sqrt();
                let inv3 = inv * inv * inv;
                let mut gx = S::ZERO;
                for (&gi, &xi) in g.data().iter().zip(xv.data()) {
                    gx += gi * xi;
                }
                let s = xv.shape().to_vec();
                gr.accumulate(x, &s, |t| {
                    for ((d, &gi), &xi) in t.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *d += gi * inv - xi * gx * inv3;
                    }
                });
            })),
        )
    }

    // ---- shape ops --------------------------------------------------------

    /// Concatenate rank-3 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (_, h, w) = self.values[parts[0].0].dims3();
        let mut chans = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.values[p.0].dims3();
            assert_eq!((ph, pw), (h, w), "concat_channels spatial mismatch");
            chans.push(c);
            data.extend_from_slice(self.values[p.0].data());
        }
        let total: usize = chans.iter().sum();
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            Tensor::new(vec![total, h, w], data),
            Some(Box::new(move |vals, g, gr| {
                let mut off = 0usize;
                for &p in &parts {
                    let s = vals[p.0].shape().to_vec();
                    let n: usize = s.iter().product();
                    let gslice = &g.data()[off..off + n];
                    gr.accumulate(p, &s, |t| {
                        for (d, &gi) in t.data_mut().iter_mut().zip(gslice) {
                            *d += gi;
                        }
                    });
                    off += n;
                }
            })),
        )
    }

    /// Tile a length-`n` vector into an `[n, h, w]` map.
    pub fn tile_vector(&mut self, v: Var, h: usize, w: usize) -> Var {
        let vv = &self.values[v.0];
        assert_eq!(vv.shape().len(), 1, "tile_vector expects rank-1");
        let n = vv.len();
        let mut data = Vec::with_capacity(n * h * w);
        for i in 0..n {
            let x = vv.data()[i];
            data.extend(std::iter::repeat_n(x, h * w));
        }
        self.push(
            Tensor::new(vec![n, h, w], data),
            Some(Box::new(move |vals, g, gr| {
                let n = vals[v.0].len();
                let hw = g.len() / n;
                gr.accumulate(v, &[n], |t| {
                    for i in 0..n {
                        let mut acc = S::ZERO;
                        for j in 0..hw {
                            acc += g.data()[i * hw + j];
                        }
                        t.data_mut()[i] += acc;
                    }
                });
            })),
        )
    }

    /// Global average pool `[c,h,w] -> [c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.values[x.0].dims3();
        let hw = (h * w) as f64;
        let mut data = Vec::with_capacity(c);
        for ci in 0..c {
            let mut acc = S::ZERO;
            for i in 0..h * w {
                acc += self.values[x.0].data()[ci * h * w + i];
            }
            data.push(acc * S::from_f64(1.0 / hw));
        }
        self.push(
            Tensor::new(vec![c], data),
            Some(Box::new(move |vals, g, gr| {
                let (c, h, w) = vals[x.0].dims3();
                let inv = S::from_f64(1.0 / (h * w) as f64);
                gr.accumulate(x, &[c, h, w], |t| {
                    for ci in 0..c {
                        let gi = g.data()[ci] * inv;
                        for i in 0..h * w {
                            t.data_mut()[ci * h * w + i] += gi;
                        }
                    }
                });
            })),
        )
    }

    // ---- dense / conv layers ----------------------------------------------

    /// `y = W x + b` with `W: [out, in]`, `x: [in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        let bv = &self.values[b.0];
        let din = xv.len();
        let dout = bv.len();
        assert_eq!(wv.shape(), &[dout, din], "linear weight shape");
        let mut data = Vec::with_capacity(dout);
        for o in 0..dout {
            let mut acc = bv.data()[o];
            for i in 0..din {
                acc += wv.data()[o * din + i] * xv.data()[i];
            }
            data.push(acc);
        }
        self.push(
            Tensor::new(vec![dout], data),
            Some(Box::new(move |vals, g, gr| {
                let xv = &vals[x.0];
                let wv = &vals[w.0];
                let din = xv.len();
                let dout = g.len();
                gr.accumulate(b, &[dout], |t| {
                    for (d, &gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                });
                gr.accumulate(w, &[dout, din], |t| {
                    for o in 0..dout {
                        let gi = g.data()[o];
                        for i in 0..din {
                            t.data_mut()[o * din + i] += gi * xv.data()[i];
                        }
                    }
                });
                gr.accumulate(x, &[din], |t| {
                    for o in 0..dout {
                        let gi = g.data()[o];
                        for i in 0..din {
                            t.data_mut()[i] += gi * wv.data()[o * din + i];
                        }
                    }
                });
            })),
        )
    }

    /// 2-D convolution, zero padding. `x: [ci,h,w]`, `w: [co,ci,k,k]`, `b: [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let (ci, h, win) = self.values[x.0].dims3();
        let ws = self.values[w.0].shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], ci, "conv2d input channel mismatch");
        assert_eq!(ws[2], spec.kernel);
        let co = ws[0];
        let k = spec.kernel;
        let (oh, ow) = (spec.out_size(h), spec.out_size(win));
        let mut out = vec![S::ZERO; co * oh * ow];
        {
            let xv = self.values[x.0].data();
            let wv = self.values[w.0].data();
            let bv = self.values[b.0].data();
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bv[o];
                        for i in 0..ci {
                            for ky in 0..k {
                                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if ix < 0 || ix >= win as isize {
                                        continue;
                                    }
                                    acc += xv[(i * h + iy as usize) * win + ix as usize]
                                        * wv[((o * ci + i) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![co, oh, ow], out),
            Some(Box::new(move |vals, g, gr| {
                let (ci, h, win) = vals[x.0].dims3();
                let (co, oh, ow) = (g.dims3().0, g.dims3().1, g.dims3().2);
                let k = spec.kernel;
                let xv = vals[x.0].data();
                let wv = vals[w.0].data();
                gr.accumulate(b, &[co], |t| {
                    for o in 0..co {
                        let mut acc = S::ZERO;
                        for i in 0..oh * ow {
                            acc += g.data()[o * oh * ow + i];
                        }
                        t.data_mut()[o] += acc;
                    }
                });
                gr.accumulate(w, &[co, ci, k, k], |t| {
                    for o in 0..co {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gi = g.data()[(o * oh + oy) * ow + ox];
                                for i in 0..ci {
                                    for ky in 0..k {
                                        let iy =
                                            (oy * spec.stride + ky) as isize - spec.pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * spec.stride + kx) as isize
                                                - spec.pad as isize;
                                            if ix < 0 || ix >= win as isize {
                                                continue;
                                            }
                                            t.data_mut()[((o * ci + i) * k + ky) * k + kx] += gi
                                                * xv[(i * h + iy as usize) * win + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                gr.accumulate(x, &[ci, h, win], |t| {
                    for o in 0..co {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gi = g.data()[(o * oh + oy) * ow + ox];
                                for i in 0..ci {
                                    for ky in 0..k {
                                        let iy =
                                            (oy * spec.stride + ky) as isize - spec.pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * spec.stride + kx) as isize
                                                - spec.pad as isize;
                                            if ix < 0 || ix >= win as isize {
                                                continue;
                                            }
                                            t.data_mut()
                                                [(i * h + iy as usize) * win + ix as usize] += gi
                                                * wv[((o * ci + i) * k + ky) * k + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            })),
        )
    }

    /// Transposed 2-D convolution. `x: [ci,h,w]`, `w: [ci,co,k,k]`, `b: [co]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let (ci, h, win) = self.values[x.0].dims3();
        let ws = self.values[w.0].shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[0], ci, "conv_transpose2d input channel mismatch");
        let co = ws[1];
        let k = spec.kernel;
        let (oh, ow) = (spec.transpose_out_size(h), spec.transpose_out_size(win));
        let mut out = vec![S::ZERO; co * oh * ow];
        {
            let xv = self.values[x.0].data();
            let wv = self.values[w.0].data();
            let bv = self.values[b.0].data();
            for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
                chunk.fill(bv[o]);
            }
            for i in 0..ci {
                for iy in 0..h {
                    for ix in 0..win {
                        let xi = xv[(i * h + iy) * win + ix];
                        for o in 0..co {
                            for ky in 0..k {
                                let ty = (iy * spec.stride + ky) as isize - spec.pad as isize;
                                if ty < 0 || ty >= oh as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let tx = (ix * spec.stride + kx) as isize - spec.pad as isize;
                                    if tx < 0 || tx >= ow as isize {
                                        continue;
                                    }
                                    out[(o * oh + ty as usize) * ow + tx as usize] +=
                                        xi * wv[((i * co + o) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![co, oh, ow], out),
            Some(Box::new(move |vals, g, gr| {
                let (ci, h, win) = vals[x.0].dims3();
                let (co, oh, ow) = g.dims3();
                let k = spec.kernel;
                let xv = vals[x.0].data();
                let wv = vals[w.0].data();
                gr.accumulate(b, &[co], |t| {
                    for o in 0..co {
                        let mut acc = S::ZERO;
                        for i in 0..oh * ow {
                            acc += g.data()[o * oh * ow + i];
                        }
                        t.data_mut()[o] += acc;
                    }
                });
                gr.accumulate(w, &[ci, co, k, k], |t| {
                    for i in 0..ci {
                        for iy in 0..h {
                            for ix in 0..win {
                                let xi = xv[(i * h + iy) * win + ix];
                                for o in 0..co {
                                    for ky in 0..k {
                                        let ty =
                                            (iy * spec.stride + ky) as isize - spec.pad as isize;
                                        if ty < 0 || ty >= oh as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let tx = (ix * spec.stride + kx) as isize
                                                - spec.pad as isize;
                                            if tx < 0 || tx >= ow as isize {
                                                continue;
                                            }
                                            t.data_mut()[((i * co + o) * k + ky) * k + kx] += xi
                                                * g.data()
                                                    [(o * oh + ty as usize) * ow + tx as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                gr.accumulate(x, &[ci, h, win], |t| {
                    for i in 0..ci {
                        for iy in 0..h {
                            for ix in 0..win {
                                let mut acc = S::ZERO;
                                for o in 0..co {
                                    for ky in 0..k {
                                        let ty =
                                            (iy * spec.stride + ky) as isize - spec.pad as isize;
                                        if ty < 0 || ty >= oh as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let tx = (ix * spec.stride + kx) as isize
                                                - spec.pad as isize;
                                            if tx < 0 || tx >= ow as isize {
                                                continue;
                                            }
                                            acc += wv[((i * co + o) * k + ky) * k + kx]
                                                * g.data()
                                                    [(o * oh + ty as usize) * ow + tx as usize];
                                        }
                                    }
                                }
                                t.data_mut()[(i * h + iy) * win + ix] += acc;
                            }
                        }
                    }
                });
            })),
        )
    }

    // ---- resampling -------------------------------------------------------

    /// Bilinear resize to `(h2, w2)`, half-pixel-center convention. Resizing to
    /// the source size is the identity.
    pub fn bilinear_resize(&mut self, x: Var, h2: usize, w2: usize) -> Var {
        let (c, h, w) = self.values[x.0].dims3();
        let plan_y = resize_plan(h, h2);
        let plan_x = resize_plan(w, w2);
        let mut out = vec![S::ZERO; c * h2 * w2];
        {
            let xv = self.values[x.0].data();
            for ci in 0..c {
                for (oy, &(y0, y1, fy)) in plan_y.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in plan_x.iter().enumerate() {
                        let p00 = xv[(ci * h + y0) * w + x0];
                        let p01 = xv[(ci * h + y0) * w + x1];
                        let p10 = xv[(ci * h + y1) * w + x0];
                        let p11 = xv[(ci * h + y1) * w + x1];
                        let wy = S::from_f64(fy);
                        let wx = S::from_f64(fx);
                        let top = p00 + (p01 - p00) * wx;
                        let bot = p10 + (p11 - p10) * wx;
                        out[(ci * h2 + oy) * w2 + ox] = top + (bot - top) * wy;
                    }
                }
            }
        }
        let (py, px) = (plan_y.clone(), plan_x.clone());
        self.push(
            Tensor::new(vec![c, h2, w2], out),
            Some(Box::new(move |vals, g, gr| {
                let (c, h, w) = vals[x.0].dims3();
                gr.accumulate(x, &[c, h, w], |t| {
                    for ci in 0..c {
                        for (oy, &(y0, y1, fy)) in py.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in px.iter().enumerate() {
                                let gi = g.data()[(ci * py.len() + oy) * px.len() + ox];
                                let w00 = S::from_f64((1.0 - fy) * (1.0 - fx));
                                let w01 = S::from_f64((1.0 - fy) * fx);
                                let w10 = S::from_f64(fy * (1.0 - fx));
                                let w11 = S::from_f64(fy * fx);
                                t.data_mut()[(ci * h + y0) * w + x0] += gi * w00;
                                t.data_mut()[(ci * h + y0) * w + x1] += gi * w01;
                                t.data_mut()[(ci * h + y1) * w + x0] += gi * w10;
                                t.data_mut()[(ci * h + y1) * w + x1] += gi * w11;
                            }
                        }
                    }
                });
            })),
        )
    }

    /// Replicate-pad on the bottom/right edges up to `(h2, w2)`.
    pub fn pad_replicate(&mut self, x: Var, h2: usize, w2: usize) -> Var {
        let (c, h, w) = self.values[x.0].dims3();
        assert!(h2 >= h && w2 >= w);
        let mut out = vec![S::ZERO; c * h2 * w2];
        {
            let xv = self.values[x.0].data();
            for ci in 0..c {
                for y in 0..h2 {
                    let sy = y.min(h - 1);
                    for xx in 0..w2 {
                        let sx = xx.min(w - 1);
                        out[(ci * h2 + y) * w2 + xx] = xv[(ci * h + sy) * w + sx];
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![c, h2, w2], out),
            Some(Box::new(move |vals, g, gr| {
                let (c, h, w) = vals[x.0].dims3();
                gr.accumulate(x, &[c, h, w], |t| {
                    for ci in 0..c {
                        for y in 0..h2 {
                            let sy = y.min(h - 1);
                            for xx in 0..w2 {
                                let sx = xx.min(w - 1);
                                t.data_mut()[(ci * h + sy) * w + sx] +=
                                    g.data()[(ci * h2 + y) * w2 + xx];
                            }
                        }
                    }
                });
            })),
        )
    }

    /// Crop the top-left `(h2, w2)` window.
    pub fn crop(&mut self, x: Var, h2: usize, w2: usize) -> Var {
        let (c, h, w) = self.values[x.0].dims3();
        assert!(h2 <= h && w2 <= w);
        let mut out = vec![S::ZERO; c * h2 * w2];
        {
            let xv = self.values[x.0].data();
            for ci in 0..c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        out[(ci * h2 + y) * w2 + xx] = xv[(ci * h + y) * w + xx];
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![c, h2, w2], out),
            Some(Box::new(move |vals, g, gr| {
                let (c, h, w) = vals[x.0].dims3();
                gr.accumulate(x, &[c, h, w], |t| {
                    for ci in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                t.data_mut()[(ci * h + y) * w + xx] +=
                                    g.data()[(ci * h2 + y) * w2 + xx];
                            }
                        }
                    }
                });
            })),
        )
    }

    /// Orthonormal 8x8 block DCT-II over each channel. Spatial dims must be
    /// multiples of 8.
    pub fn block_dct8(&mut self, x: Var) -> Var {
        self.block_transform8(x, false)
    }

    /// Inverse of [`Tape::block_dct8`].
    pub fn block_idct8(&mut self, x: Var) -> Var {
        self.block_transform8(x, true)
    }

    fn block_transform8(&mut self, x: Var, inverse: bool) -> Var {
        let (_c, h, w) = self.values[x.0].dims3();
        assert!(h % 8 == 0 && w % 8 == 0, "block_dct8 needs multiples of 8");
        let out = block_dct_apply(&self.values[x.0], inverse);
        self.push(
            out,
            Some(Box::new(move |vals, g, gr| {
                // The transform is orthonormal, so the adjoint is the inverse map.
                let gx = block_dct_apply(g, !inverse);
                let s = vals[x.0].shape().to_vec();
                gr.accumulate(x, &s, |t| {
                    for (d, &gi) in t.data_mut().iter_mut().zip(gx.data()) {
                        *d += gi;
                    }
                });
            })),
        )
    }
}

/// For each output index: (idx0, idx1, frac) under the half-pixel convention.
fn resize_plan(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let f = (s - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, f)
        })
        .collect()
}

fn dct8_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (i, v) in row.iter_mut().enumerate() {
            *v = alpha
                * ((2.0 * i as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    m
}

fn block_dct_apply<S: Scalar>(x: &Tensor<S>, inverse: bool) -> Tensor<S> {
    let (c, h, w) = x.dims3();
    let m = dct8_matrix();
    let mut out = vec![S::ZERO; c * h * w];
    let mut tmp = [[S::ZERO; 8]; 8];
    let mut blk = [[S::ZERO; 8]; 8];
    for ci in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (yy, row) in blk.iter_mut().enumerate() {
                    for (xx, v) in row.iter_mut().enumerate() {
                        *v = x.data()[(ci * h + by + yy) * w + bx + xx];
                    }
                }
                // rows: tmp = M * blk (or M^T * blk for inverse)
                for u in 0..8 {
                    for j in 0..8 {
                        let mut acc = S::ZERO;
                        for i in 0..8 {
                            let coef = if inverse { m[i][u] } else { m[u][i] };
                            acc += S::from_f64(coef) * blk[i][j];
                        }
                        tmp[u][j] = acc;
                    }
                }
                // cols: out = tmp * M^T (or tmp * M for inverse)
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = S::ZERO;
                        for j in 0..8 {
                            let coef = if inverse { m[j][v] } else { m[v][j] };
                            acc += tmp[u][j] * S::from_f64(coef);
                        }
                        out[(ci * h + by + u) * w + bx + v] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}
