//! The restorer maps protected images back to the clean domain. It reuses the
//! generator architecture and starts from the generator's parameters; since no
//! attribute label is available at restore time, its decoder conditions on a
//! learned constant attribute embedding.

use crate::error::{Error, Result};
use crate::gan::{AttributeVector, Generator, GeneratorParams};
use crate::nn::{Mounted, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{ImageTensor, Scalar, Tensor};

/// Restorer parameters: encoder + decoder structurally identical to the
/// generator, plus the learned attribute constant.
#[derive(Clone, Debug)]
pub struct RestorerParams {
    pub params: ParamSet,
    /// Identifier of the generator snapshot this was copied from.
    pub init_source: String,
    enc_len: usize,
    dec_len: usize,
}

impl RestorerParams {
    /// Copy the generator's parameters bitwise; the attribute constant starts
    /// at zero.
    pub fn from_generator(g: &GeneratorParams, n_att: usize, source: impl Into<String>) -> Self {
        let mut params = ParamSet::new();
        for (name, t) in g.enc.names().iter().zip(g.enc.tensors()) {
            params.add(name.clone(), t.clone());
        }
        for (name, t) in g.dec.names().iter().zip(g.dec.tensors()) {
            params.add(name.clone(), t.clone());
        }
        params.add("att.const", Tensor::zeros(&[n_att]));
        RestorerParams {
            params,
            init_source: source.into(),
            enc_len: g.enc.len(),
            dec_len: g.dec.len(),
        }
    }

    /// Rebind loaded parameters onto this structural template.
    pub fn with_params(&self, params: ParamSet, init_source: impl Into<String>) -> RestorerParams {
        RestorerParams {
            params,
            init_source: init_source.into(),
            enc_len: self.enc_len,
            dec_len: self.dec_len,
        }
    }

    /// Do the encoder/decoder portions still equal a generator snapshot?
    pub fn matches_generator(&self, g: &GeneratorParams) -> bool {
        let enc = &self.params.tensors()[..self.enc_len];
        let dec = &self.params.tensors()[self.enc_len..self.enc_len + self.dec_len];
        enc.len() == g.enc.len()
            && dec.len() == g.dec.len()
            && enc.iter().zip(g.enc.tensors()).all(|(a, b)| a.bitwise_eq(b))
            && dec.iter().zip(g.dec.tensors()).all(|(a, b)| a.bitwise_eq(b))
    }

    pub fn mount<S: Scalar>(&self, tape: &mut Tape<S>) -> Mounted {
        self.params.mount(tape)
    }

    fn split(&self, m: &Mounted) -> (Mounted, Mounted, Var) {
        let enc = Mounted { vars: m.vars[..self.enc_len].to_vec() };
        let dec = Mounted { vars: m.vars[self.enc_len..self.enc_len + self.dec_len].to_vec() };
        let att = m.vars[self.enc_len + self.dec_len];
        (enc, dec, att)
    }
}

/// Restoration forward on a tape. `att_override` substitutes an explicit
/// attribute condition for the learned constant (diagnostics only).
pub fn restore_node<S: Scalar>(
    tape: &mut Tape<S>,
    arch: &Generator,
    rp: &RestorerParams,
    m: &Mounted,
    x_adv: Var,
    att_override: Option<Var>,
) -> Var {
    let (enc_m, dec_m, att_var) = rp.split(m);
    let att = att_override.unwrap_or(att_var);
    let pyr = arch.enc.forward(tape, &enc_m, x_adv);
    arch.dec.forward(tape, &dec_m, &pyr, att)
}

/// Blind restoration: maps a protected image toward the clean domain using
/// only the image itself.
pub fn restore(arch: &Generator, rp: &RestorerParams, x_adv: &ImageTensor) -> Result<ImageTensor> {
    arch.check_image(x_adv)?;
    let mut tape = Tape::<f64>::new();
    let m = rp.mount(&mut tape);
    let xv = tape.constant(x_adv);
    let out = restore_node(&mut tape, arch, rp, &m, xv, None);
    Ok(tape.value(out).clone())
}

/// Restoration under an explicit attribute condition (diagnostics only).
pub fn restore_with_att(
    arch: &Generator,
    rp: &RestorerParams,
    x_adv: &ImageTensor,
    att: &AttributeVector,
) -> Result<ImageTensor> {
    arch.check_image(x_adv)?;
    arch.check_att(att)?;
    let mut tape = Tape::<f64>::new();
    let m = rp.mount(&mut tape);
    let xv = tape.constant(x_adv);
    let attv = tape.constant(&att.to_tensor());
    let out = restore_node(&mut tape, arch, rp, &m, xv, Some(attv));
    Ok(tape.value(out).clone())
}

/// Erasion loss: sum over the batch of per-pair Euclidean norms.
pub fn erasion_loss(x_recs: &[ImageTensor], x_covs: &[ImageTensor]) -> Result<f64> {
    if x_recs.len() != x_covs.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} cover images", x_recs.len()),
            got: format!("{}", x_covs.len()),
        });
    }
    let mut total = 0.0;
    for (r, c) in x_recs.iter().zip(x_covs) {
        if r.shape() != c.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", r.shape()),
                got: format!("{:?}", c.shape()),
            });
        }
        total += r
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total)
}

/// On-tape erasion loss over (restored, cover-constant) node pairs.
pub fn erasion_loss_node<S: Scalar>(tape: &mut Tape<S>, pairs: &[(Var, Var)]) -> Var {
    let norms: Vec<(Var, f64)> = pairs
        .iter()
        .map(|&(r, c)| {
            let d = tape.sub(r, c);
            (tape.norm2(d), 1.0)
        })
        .collect();
    tape.weighted_sum(&norms, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::GeneratorCfg;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn setup() -> (Generator, GeneratorParams, RestorerParams) {
        let cfg = GeneratorCfg {
            image_hw: (16, 16),
            in_ch: 3,
            widths: vec![3, 4, 5, 6],
            n_att: 3,
            kernel: 4,
            leak: 0.2,
        };
        let gen = cfg.build();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let gp = gen.init_params(&mut rng);
        let rp = RestorerParams::from_generator(&gp, 3, "stage1");
        (gen, gp, rp)
    }

    fn rand_image(seed: u64) -> ImageTensor {
        let mut r = ChaCha20Rng::seed_from_u64(seed);
        Tensor::new(vec![3, 16, 16], (0..768).map(|_| r.gen_range(-0.9..0.9)).collect())
    }

    #[test]
    fn initialization_copies_generator_bitwise() {
        let (_, gp, rp) = setup();
        assert!(rp.matches_generator(&gp));
        assert_eq!(rp.init_source, "stage1");
    }

    #[test]
    fn blind_restore_output_in_range() {
        let (gen, _, rp) = setup();
        let x = rand_image(1);
        // interface audit: the image alone is sufficient input
        let y = restore(&gen, &rp, &x).unwrap();
        assert_eq!(y.shape(), &[3, 16, 16]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn g_initialized_restorer_reproduces_reconstruction_path() {
        let (gen, gp, rp) = setup();
        let x = rand_image(2);
        let att = AttributeVector::new(vec![1, 0, 1]).unwrap();
        let via_restorer = restore_with_att(&gen, &rp, &x, &att).unwrap();
        let via_generator = gen.edit(&gp, &x, &att).unwrap();
        assert!(via_restorer.bitwise_eq(&via_generator));
    }

    #[test]
    fn erasion_loss_examples() {
        let base = Tensor::new(vec![3, 4, 4], vec![0.3; 48]);
        assert_eq!(erasion_loss(std::slice::from_ref(&base), std::slice::from_ref(&base)).unwrap(), 0.0);

        // constant diff 0.1 over 48 elements: norm = 0.1 * sqrt(48)
        let shifted = base.map(|v| v + 0.1);
        let single = erasion_loss(std::slice::from_ref(&shifted), std::slice::from_ref(&base)).unwrap();
        assert!((single - 0.1 * 48f64.sqrt()).abs() < 1e-12);

        // additivity over the batch
        let double = erasion_loss(
            &[shifted.clone(), shifted.clone()],
            &[base.clone(), base.clone()],
        )
        .unwrap();
        assert!((double - 2.0 * single).abs() < 1e-12);

        // unpaired batch
        assert!(erasion_loss(&[shifted], &[]).is_err());
    }

    #[test]
    fn erasion_loss_node_matches_value_form() {
        let a = rand_image(3);
        let b = rand_image(4);
        let c = rand_image(5);
        let d = rand_image(6);
        let expect = erasion_loss(&[a.clone(), c.clone()], &[b.clone(), d.clone()]).unwrap();
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(&a);
        let bv = tape.constant(&b);
        let cv = tape.constant(&c);
        let dv = tape.constant(&d);
        let l = erasion_loss_node(&mut tape, &[(av, bv), (cv, dv)]);
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
    }
}
