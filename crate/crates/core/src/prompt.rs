//! Input-dependent prompt generator: one transformer encoder layer over
//! the tapped hidden state of the clean forward pass, followed by a linear
//! projection into the backbone's embedding space. The first `prompt_len`
//! output positions become the prompt; inputs shorter than that are
//! zero-padded first so the prompt shape never varies.

use crate::checkpoint::{FingerprintHasher, ParamBag, ParamRestorer};
use crate::error::Result;
use crate::nn::{Binding, BoundEncoderLayer, BoundLinear, EncoderLayer, Linear, VisitFn, VisitMutFn};
use crate::rng::rng_for;
use crate::scalar::{sc, Scalar};
use crate::tape::{BufId, Tape};
use crate::tensor::Mat;

#[derive(Clone)]
pub struct PromptGenerator<F> {
    pub d_model: usize,
    pub prompt_len: usize,
    layer: EncoderLayer<F>,
    proj: Linear<F>,
}

pub struct BoundPromptGenerator {
    layer: BoundEncoderLayer,
    proj: BoundLinear,
    prompt_len: usize,
}

/// Shrinks the output projection at init so a fresh generator emits a
/// near-zero prompt: the frozen backbone reads that the same way as the
/// zero-content prefixes it saw in pretraining, so tuning starts from an
/// unperturbed model instead of digging out of a random prompt.
const PROJ_INIT_SCALE: f64 = 0.05;

impl<F: Scalar> PromptGenerator<F> {
    pub fn new(d_model: usize, n_heads: usize, d_ff: usize, prompt_len: usize, seed: u64) -> Self {
        assert!(prompt_len > 0, "prompt length must be positive");
        let mut rng = rng_for("pg-init", seed, 0);
        let layer = EncoderLayer::new(&mut rng, d_model, n_heads, d_ff);
        let mut proj = Linear::new(&mut rng, d_model, d_model);
        proj.visit_mut("proj", &mut |_, m: &mut crate::tensor::Mat<F>| {
            for v in m.as_mut_slice() {
                *v *= sc::<F>(PROJ_INIT_SCALE);
            }
        });
        PromptGenerator { d_model, prompt_len, layer, proj }
    }

    pub fn bind(&self, t: &mut Tape<F>, trainable: bool, reg: &mut Binding) -> BoundPromptGenerator {
        BoundPromptGenerator {
            layer: self.layer.bind(t, "pg.enc", trainable, reg),
            proj: self.proj.bind(t, "pg.proj", trainable, reg),
            prompt_len: self.prompt_len,
        }
    }

    pub fn visit(&self, f: VisitFn<F>) {
        self.layer.visit("pg.enc", f);
        self.proj.visit("pg.proj", f);
    }

    pub fn visit_mut(&mut self, f: VisitMutFn<F>) {
        self.layer.visit_mut("pg.enc", f);
        self.proj.visit_mut("pg.proj", f);
    }

    pub fn param_count(&self) -> usize {
        self.layer.param_count() + self.proj.param_count()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = FingerprintHasher::new();
        self.visit(&mut |name, m| h.add(name, m));
        h.finish()
    }

    pub fn params(&self) -> ParamBag<F> {
        let mut bag = ParamBag::new();
        self.visit(&mut |name, m| bag.collect(name, m));
        bag
    }

    pub fn set_params(&mut self, bag: &ParamBag<F>) -> Result<()> {
        let mut r = ParamRestorer::new(bag);
        self.visit_mut(&mut |name, m| r.assign(name, m));
        r.finish()
    }

    /// Prompt for one tapped hidden state; always prompt_len × d_model.
    pub fn generate(&self, h: &Mat<F>) -> Mat<F> {
        let mut t = Tape::new();
        let mut reg = Binding::new();
        let bound = self.bind(&mut t, false, &mut reg);
        let x = t.input(h);
        let p = bound.generate(&mut t, x);
        t.mat(p)
    }
}

impl BoundPromptGenerator {
    pub fn generate<F: Scalar>(&self, t: &mut Tape<F>, h: BufId) -> BufId {
        let (l, d) = t.shape(h);
        assert!(l >= 1, "empty hidden sequence");
        let x = if l < self.prompt_len {
            let pad = t.input(&Mat::<F>::zeros(self.prompt_len - l, d));
            t.concat_rows(&[h, pad])
        } else {
            h
        };
        let y = self.layer.apply(t, x);
        let first = t.slice_rows(y, 0, self.prompt_len);
        self.proj.apply(t, first)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hidden(rows: usize, cols: usize, salt: usize) -> Mat<f64> {
        Mat::from_fn(rows, cols, |i, j| ((i * cols + j + salt) as f64 * 0.37).sin())
    }

    #[test]
    fn prompt_shape_is_fixed_for_long_and_short_inputs() {
        let pg = PromptGenerator::<f64>::new(16, 4, 32, 6, 9);
        for l in [1, 3, 6, 20] {
            let p = pg.generate(&hidden(l, 16, l));
            assert_eq!((p.rows(), p.cols()), (6, 16), "input length {l}");
            assert!(p.as_slice().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn generation_is_deterministic_and_input_dependent() {
        let pg = PromptGenerator::<f64>::new(16, 4, 32, 6, 9);
        let a = pg.generate(&hidden(10, 16, 0));
        let b = pg.generate(&hidden(10, 16, 0));
        let c = pg.generate(&hidden(10, 16, 5));
        assert_eq!(a, b);
        let dist: f64 = a
            .as_slice()
            .iter()
            .zip(c.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 1e-6, "different inputs produced the same prompt");
    }

    #[test]
    fn gradients_reach_every_generator_parameter() {
        let pg = PromptGenerator::<f64>::new(8, 2, 16, 4, 9);
        let mut t = Tape::new();
        let mut reg = Binding::new();
        let bound = pg.bind(&mut t, true, &mut reg);
        let h = t.input(&hidden(3, 8, 1)); // shorter than prompt_len: pad path
        let p = bound.generate(&mut t, h);
        let loss = t.mean_all(p);
        t.backward(loss);
        for (name, id) in reg.pairs() {
            let g = t.grad(*id).unwrap_or_else(|| panic!("{name} missing grad"));
            assert!(g.iter().any(|&v| v != 0.0), "{name} gradient identically zero");
        }
    }
}
