//! Network building blocks: named parameter sets, conv stacks, the
//! encoder/decoder pair, discriminator and embedder trunks, and Adam.
//!
//! Parameters live outside any tape as `f64` master copies. A forward pass
//! mounts them onto a [`Tape`] as leaves (optionally seeding dual directions
//! for Hessian-vector products) and reads gradients back out by position.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{ConvSpec, Gradients, Tape, Var};
use crate::tensor::{Dual, Scalar, Tensor};

/// Standard normal via Box-Muller, deterministic under a seeded rng.
pub fn sample_normal(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Ordered, named collection of parameter tensors for one component.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<f64>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }
    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn tensors(&self) -> &[Tensor<f64>] {
        &self.tensors
    }
    pub fn tensors_mut(&mut self) -> &mut [Tensor<f64>] {
        &mut self.tensors
    }
    pub fn tensor(&self, i: usize) -> &Tensor<f64> {
        &self.tensors[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn snapshot(&self) -> ParamSet {
        self.clone()
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bitwise_eq(b))
    }

    /// Flatten all scalars in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// `theta' = theta - lr * g`, as a fresh set (used by the inner update).
    pub fn minus_scaled(&self, g: &ParamVec, lr: f64) -> ParamSet {
        assert_eq!(g.tensors.len(), self.tensors.len());
        let tensors = self
            .tensors
            .iter()
            .zip(&g.tensors)
            .map(|(t, gt)| t.zip_map(gt, |a, b| a - lr * b))
            .collect();
        ParamSet { names: self.names.clone(), tensors }
    }

    /// Mount every tensor as a leaf on the tape, in declaration order.
    pub fn mount<S: Scalar>(&self, tape: &mut Tape<S>) -> Mounted {
        Mounted { vars: self.tensors.iter().map(|t| tape.leaf(t.lift())).collect() }
    }

    /// Mount on a dual tape with the directional seed `dir` (forward-over-reverse).
    pub fn mount_seeded(&self, tape: &mut Tape<Dual>, dir: &ParamVec) -> Mounted {
        assert_eq!(dir.tensors.len(), self.tensors.len());
        let vars = self
            .tensors
            .iter()
            .zip(&dir.tensors)
            .map(|(t, d)| {
                let data: Vec<Dual> = t
                    .data()
                    .iter()
                    .zip(d.data())
                    .map(|(&re, &du)| Dual::new(re, du))
                    .collect();
                tape.leaf(Tensor::new(t.shape().to_vec(), data))
            })
            .collect();
        Mounted { vars }
    }

    /// Read gradients (real parts) for mounted parameters.
    pub fn extract_grads<S: Scalar>(&self, m: &Mounted, g: &Gradients<S>) -> ParamVec {
        let tensors = self
            .tensors
            .iter()
            .zip(&m.vars)
            .map(|(t, &v)| g.get_or_zeros(v, t.shape()).to_f64())
            .collect();
        ParamVec { tensors }
    }

    /// Read the dual parts of a dual-tape gradient: the Hessian-vector product.
    pub fn extract_dual_grads(&self, m: &Mounted, g: &Gradients<Dual>) -> ParamVec {
        let tensors = self
            .tensors
            .iter()
            .zip(&m.vars)
            .map(|(t, &v)| {
                let gt = g.get_or_zeros(v, t.shape());
                Tensor::new(
                    gt.shape().to_vec(),
                    gt.data().iter().map(|d| d.du).collect::<Vec<f64>>(),
                )
            })
            .collect();
        ParamVec { tensors }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for one mounted [`ParamSet`], aligned by position.
pub struct Mounted {
    pub vars: Vec<Var>,
}

/// Gradient (or direction/update) structurally aligned with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ParamVec {
    tensors: Vec<Tensor<f64>>,
}

impl ParamVec {
    pub fn zeros_like(p: &ParamSet) -> Self {
        ParamVec { tensors: p.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn tensors(&self) -> &[Tensor<f64>] {
        &self.tensors
    }

    pub fn add_scaled(&mut self, other: &ParamVec, c: f64) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            for (d, &v) in t.data_mut().iter_mut().zip(o.data()) {
                *d += c * v;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            for d in t.data_mut() {
                *d *= c;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn from_flat(p: &ParamSet, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), p.num_scalars());
        let mut tensors = Vec::with_capacity(p.len());
        let mut off = 0;
        for t in &p.tensors {
            let n = t.len();
            tensors.push(Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec()));
            off += n;
        }
        ParamVec { tensors }
    }
}

fn init_tensor(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize) -> Tensor<f64> {
    let std = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| sample_normal(rng) * std).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Geometry + widths of a strided conv stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStackCfg {
    pub in_ch: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub leak: f64,
}

impl ConvStackCfg {
    pub fn spec(&self) -> ConvSpec {
        ConvSpec { kernel: self.kernel, stride: self.stride, pad: self.pad }
    }

    pub fn init_params(&self, prefix: &str, rng: &mut ChaCha20Rng) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut cin = self.in_ch;
        for (j, &cout) in self.widths.iter().enumerate() {
            let fan_in = cin * self.kernel * self.kernel;
            ps.add(
                format!("{prefix}.l{j}.w"),
                init_tensor(rng, &[cout, cin, self.kernel, self.kernel], fan_in),
            );
            ps.add(format!("{prefix}.l{j}.b"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        ps
    }

    /// Run the stack, returning each layer's post-activation output.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, m: &Mounted, x: Var) -> Vec<Var> {
        let spec = self.spec();
        let mut outs = Vec::with_capacity(self.widths.len());
        let mut cur = x;
        for j in 0..self.widths.len() {
            let y = tape.conv2d(cur, m.vars[2 * j], m.vars[2 * j + 1], spec);
            cur = tape.leaky_relu(y, self.leak);
            outs.push(cur);
        }
        outs
    }
}

/// Image encoder: a strided conv stack whose per-layer outputs form the
/// feature pyramid consumed by the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderNet {
    pub cfg: ConvStackCfg,
}

impl EncoderNet {
    pub fn depth(&self) -> usize {
        self.cfg.widths.len()
    }

    pub fn init_params(&self, rng: &mut ChaCha20Rng) -> ParamSet {
        self.cfg.init_params("enc", rng)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, m: &Mounted, x: Var) -> Vec<Var> {
        self.cfg.forward(tape, m, x)
    }
}

/// Mirrored transposed-conv decoder. The attribute vector is tiled and
/// concatenated onto every layer input; the deepest pyramid level seeds the
/// first layer and the shallower levels enter as skips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderNet {
    pub enc_widths: Vec<usize>,
    pub out_ch: usize,
    pub n_att: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl DecoderNet {
    pub fn depth(&self) -> usize {
        self.enc_widths.len()
    }

    fn spec(&self) -> ConvSpec {
        ConvSpec { kernel: self.kernel, stride: self.stride, pad: self.pad }
    }

    /// (in_ch, out_ch) of decoder layer `j`.
    fn layer_io(&self, j: usize) -> (usize, usize) {
        let depth = self.depth();
        let enc_out = |i: usize| self.enc_widths[i];
        let prev_out = if j == 0 { 0 } else { self.layer_io(j - 1).1 };
        let skip = if j == 0 { enc_out(depth - 1) } else { enc_out(depth - 1 - j) };
        let in_ch = prev_out + skip + self.n_att;
        let out_ch = if j == depth - 1 { self.out_ch } else { enc_out(depth - 2 - j) };
        (in_ch, out_ch)
    }

    pub fn init_params(&self, rng: &mut ChaCha20Rng) -> ParamSet {
        let mut ps = ParamSet::new();
        for j in 0..self.depth() {
            let (cin, cout) = self.layer_io(j);
            let fan_in = cin * self.kernel * self.kernel;
            ps.add(
                format!("dec.l{j}.w"),
                init_tensor(rng, &[cin, cout, self.kernel, self.kernel], fan_in),
            );
            ps.add(format!("dec.l{j}.b"), Tensor::zeros(&[cout]));
        }
        ps
    }

    /// Concatenate (previous output, pyramid skip, tiled attributes) for layer `j`.
    pub fn layer_input<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        j: usize,
        prev: Option<Var>,
        pyramid: &[Var],
        att: Var,
    ) -> Var {
        let depth = self.depth();
        let skip = if j == 0 { pyramid[depth - 1] } else { pyramid[depth - 1 - j] };
        let (_, h, w) = tape.value(skip).dims3();
        let att_map = tape.tile_vector(att, h, w);
        match prev {
            None => tape.concat_channels(&[skip, att_map]),
            Some(p) => tape.concat_channels(&[p, skip, att_map]),
        }
    }

    /// One decoder layer on an already-concatenated input: deconv + activation
    /// (ReLU inside, tanh on the final layer).
    pub fn layer_apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        m: &Mounted,
        j: usize,
        input: Var,
    ) -> Var {
        let y = tape.conv_transpose2d(input, m.vars[2 * j], m.vars[2 * j + 1], self.spec());
        if j == self.depth() - 1 {
            tape.tanh(y)
        } else {
            tape.relu(y)
        }
    }

    /// Full decode; returns every layer's post-activation output (the last one
    /// is the image).
    pub fn forward_layers<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        m: &Mounted,
        pyramid: &[Var],
        att: Var,
    ) -> Vec<Var> {
        let mut outs = Vec::with_capacity(self.depth());
        let mut prev: Option<Var> = None;
        for j in 0..self.depth() {
            let input = self.layer_input(tape, j, prev, pyramid, att);
            let out = self.layer_apply(tape, m, j, input);
            outs.push(out);
            prev = Some(out);
        }
        outs
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        m: &Mounted,
        pyramid: &[Var],
        att: Var,
    ) -> Var {
        *self.forward_layers(tape, m, pyramid, att).last().unwrap()
    }
}

/// Shared-trunk discriminator with a real/fake head and an n-bit attribute head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorNet {
    pub trunk: ConvStackCfg,
    pub n_att: usize,
}

impl DiscriminatorNet {
    pub fn init_params(&self, rng: &mut ChaCha20Rng) -> ParamSet {
        let mut ps = self.trunk.init_params("disc.trunk", rng);
        let feat = *self.trunk.widths.last().unwrap();
        ps.add("disc.head_gan.w", init_tensor(rng, &[1, feat], feat));
        ps.add("disc.head_gan.b", Tensor::zeros(&[1]));
        ps.add("disc.head_att.w", init_tensor(rng, &[self.n_att, feat], feat));
        ps.add("disc.head_att.b", Tensor::zeros(&[self.n_att]));
        ps
    }

    /// Returns `(real/fake probability [1], attribute probabilities [n])`,
    /// both sigmoid-squashed into (0,1).
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, m: &Mounted, x: Var) -> (Var, Var) {
        let n_trunk = 2 * self.trunk.widths.len();
        let trunk_m = Mounted { vars: m.vars[..n_trunk].to_vec() };
        let feats = self.trunk.forward(tape, &trunk_m, x);
        let pooled = tape.global_avg_pool(*feats.last().unwrap());
        let gan_logit = tape.linear(pooled, m.vars[n_trunk], m.vars[n_trunk + 1]);
        let att_logit = tape.linear(pooled, m.vars[n_trunk + 2], m.vars[n_trunk + 3]);
        (tape.sigmoid(gan_logit), tape.sigmoid(att_logit))
    }
}

/// Face-embedding trunk: conv stack, pooled, projected, unit-normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderNet {
    pub trunk: ConvStackCfg,
    pub embed_dim: usize,
}

impl EmbedderNet {
    pub fn init_params(&self, rng: &mut ChaCha20Rng) -> ParamSet {
        let mut ps = self.trunk.init_params("emb.trunk", rng);
        let feat = *self.trunk.widths.last().unwrap();
        ps.add("emb.proj.w", init_tensor(rng, &[self.embed_dim, feat], feat));
        ps.add("emb.proj.b", Tensor::zeros(&[self.embed_dim]));
        ps
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, m: &Mounted, x: Var) -> Var {
        let n_trunk = 2 * self.trunk.widths.len();
        let trunk_m = Mounted { vars: m.vars[..n_trunk].to_vec() };
        let feats = self.trunk.forward(tape, &trunk_m, x);
        let pooled = tape.global_avg_pool(*feats.last().unwrap());
        let proj = tape.linear(pooled, m.vars[n_trunk], m.vars[n_trunk + 1]);
        tape.l2_normalize(proj, 1e-24)
    }
}

/// Adam with bias correction; moments are part of checkpoint state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamVec) {
        self.step_count += 1;
        let b1t = 1.0 - self.beta1.powi(self.step_count as i32);
        let b2t = 1.0 - self.beta2.powi(self.step_count as i32);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / b1t;
                let vhat = vi / b2t;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moment tensors for checkpointing, in (m, v) order per parameter.
    pub fn state(&self) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
        (self.m.clone(), self.v.clone())
    }

    pub fn restore_state(&mut self, step_count: u64, m: Vec<Tensor<f64>>, v: Vec<Tensor<f64>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.step_count = step_count;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn encoder_pyramid_shapes() {
        let enc = EncoderNet {
            cfg: ConvStackCfg {
                in_ch: 3,
                widths: vec![4, 6, 8, 10],
                kernel: 4,
                stride: 2,
                pad: 1,
                leak: 0.2,
            },
        };
        let params = enc.init_params(&mut rng(1));
        let mut tape = Tape::<f64>::new();
        let m = params.mount(&mut tape);
        let x = tape.leaf(Tensor::zeros(&[3, 16, 16]));
        let pyr = enc.forward(&mut tape, &m, x);
        assert_eq!(pyr.len(), 4);
        let shapes: Vec<Vec<usize>> =
            pyr.iter().map(|&v| tape.value(v).shape().to_vec()).collect();
        assert_eq!(shapes[0], vec![4, 8, 8]);
        assert_eq!(shapes[3], vec![10, 1, 1]);
    }

    #[test]
    fn decoder_mirrors_encoder() {
        let enc = EncoderNet {
            cfg: ConvStackCfg {
                in_ch: 3,
                widths: vec![4, 6, 8, 10],
                kernel: 4,
                stride: 2,
                pad: 1,
                leak: 0.2,
            },
        };
        let dec = DecoderNet {
            enc_widths: vec![4, 6, 8, 10],
            out_ch: 3,
            n_att: 5,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let ep = enc.init_params(&mut rng(1));
        let dp = dec.init_params(&mut rng(2));
        let mut tape = Tape::<f64>::new();
        let em = ep.mount(&mut tape);
        let dm = dp.mount(&mut tape);
        let x = tape.leaf(Tensor::from_f64_slice(
            &[3, 16, 16],
            &(0..768).map(|i| (i % 17) as f64 * 0.05 - 0.4).collect::<Vec<_>>(),
        ));
        let att = tape.leaf(Tensor::from_f64_slice(&[5], &[1.0, 0.0, 1.0, 1.0, 0.0]));
        let pyr = enc.forward(&mut tape, &em, x);
        let out = dec.forward(&mut tape, &dm, &pyr, att);
        assert_eq!(tape.value(out).shape(), &[3, 16, 16]);
        // tanh output range
        for &v in tape.value(out).data() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let enc = EncoderNet {
            cfg: ConvStackCfg {
                in_ch: 3,
                widths: vec![4, 4],
                kernel: 3,
                stride: 2,
                pad: 1,
                leak: 0.2,
            },
        };
        let a = enc.init_params(&mut rng(7));
        let b = enc.init_params(&mut rng(7));
        assert!(a.bitwise_eq(&b));
        let c = enc.init_params(&mut rng(8));
        assert!(!c.bitwise_eq(&a));
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_f64_slice(&[2], &[3.0, -2.0]));
        let mut opt = Adam::new(0.1, &ps);
        for _ in 0..200 {
            let g = ParamVec {
                tensors: vec![Tensor::new(
                    vec![2],
                    ps.tensor(0).data().iter().map(|&w| 2.0 * w).collect::<Vec<f64>>(),
                )],
            };
            opt.step(&mut ps, &g);
        }
        assert!(ps.tensor(0).data().iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn paramset_flat_roundtrip_and_minus_scaled() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::from_f64_slice(&[2], &[1.0, 2.0]));
        ps.add("b", Tensor::from_f64_slice(&[1], &[-0.5]));
        let flat = ps.flatten();
        let mut ps2 = ps.clone();
        ps2.assign_flat(&flat);
        assert!(ps.bitwise_eq(&ps2));

        let mut g = ParamVec::zeros_like(&ps);
        g.tensors[0].data_mut()[0] = 10.0;
        let stepped = ps.minus_scaled(&g, 0.1);
        assert_eq!(stepped.tensor(0).data()[0], 0.0);
        assert_eq!(stepped.tensor(0).data()[1], 2.0);
    }
}
