//! Neural mutual-information estimation between paired accent features,
//! in the Donsker–Varadhan form
//!
//!   I ≥ E_joint[T(z′, z)] − ln E_marg[exp T(z′, z̃)]
//!
//! where T is a small MLP over the concatenated pair with outputs clipped
//! to [−20, 20], and the marginal expectation pairs each z′ with a rotated
//! z so no joint pair leaks into it. Critic ascent uses the standard
//! moving-average correction for the log-denominator gradient; the value
//! reported (and the term the prompt generator differentiates) is the
//! plain estimate.

use crate::checkpoint::{FingerprintHasher, ParamBag, ParamRestorer};
use crate::error::{Error, Result};
use crate::nn::{Binding, BoundMlp, Mlp, VisitFn, VisitMutFn};
use crate::optim::{AdamW, Grads};
use crate::rng::rng_for;
use crate::scalar::{sc, Scalar};
use crate::tape::{BufId, Tape};
use crate::tensor::Mat;

pub const T_CLIP: f64 = 20.0;
/// Decay of the moving average tracking E[exp T] for the critic gradient.
pub const EMA_RATE: f64 = 0.99;

#[derive(Clone)]
pub struct Mine<F> {
    pub d_acc: usize,
    net: Mlp<F>,
    ema_exp: Option<f64>,
}

pub struct BoundMine {
    net: BoundMlp,
}

/// Tape ids for the two Donsker–Varadhan expectations of one batch.
pub struct DvTerms {
    /// 1×1 mean of T over joint pairs.
    pub joint_mean: BufId,
    /// 1×1 mean of exp T over marginal (rotated) pairs.
    pub marg_exp_mean: BufId,
}

impl<F: Scalar> Mine<F> {
    pub fn new(d_acc: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng_for("mine-init", seed, 0);
        Mine {
            d_acc,
            net: Mlp::new(&mut rng, &[2 * d_acc, hidden, hidden, 1]),
            ema_exp: None,
        }
    }

    pub fn bind(&self, t: &mut Tape<F>, trainable: bool, reg: &mut Binding) -> BoundMine {
        BoundMine { net: self.net.bind(t, "mine", trainable, reg) }
    }

    pub fn visit(&self, f: VisitFn<F>) {
        self.net.visit("mine", f);
    }

    pub fn visit_mut(&mut self, f: VisitMutFn<F>) {
        self.net.visit_mut("mine", f);
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
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

    /// Plain estimate on a frozen critic. `rotation` selects the marginal
    /// pairing, 1 ≤ rotation < batch.
    pub fn estimate(&self, z_prime: &Mat<F>, z: &Mat<F>, rotation: usize) -> Result<F> {
        let mut t = Tape::new();
        let mut reg = Binding::new();
        let bound = self.bind(&mut t, false, &mut reg);
        let zp = t.input(z_prime);
        let zb = t.input(z);
        let terms = bound.dv_terms(&mut t, zp, zb, rotation)?;
        let est = bound.dv_estimate(&mut t, &terms);
        Ok(t.scalar_value(est))
    }

    /// One ascent step on the estimate; z′ and z are constants here.
    /// Returns the pre-update estimate.
    pub fn critic_step(
        &mut self,
        opt: &mut AdamW<F>,
        z_prime: &Mat<F>,
        z: &Mat<F>,
        rotation: usize,
        grad_clip: f64,
    ) -> Result<f64> {
        let mut t = Tape::new();
        let mut reg = Binding::new();
        let bound = self.bind(&mut t, true, &mut reg);
        let zp = t.input(z_prime);
        let zb = t.input(z);
        let terms = bound.dv_terms(&mut t, zp, zb, rotation)?;

        let batch_exp = t.scalar_value(terms.marg_exp_mean).to_f64_lossy();
        let est = t.scalar_value(terms.joint_mean).to_f64_lossy() - batch_exp.ln();
        if !est.is_finite() {
            return Err(Error::StageFailed {
                stage: "mine".to_string(),
                reason: "non-finite estimate".to_string(),
            });
        }
        let ema = match self.ema_exp {
            Some(prev) => EMA_RATE * prev + (1.0 - EMA_RATE) * batch_exp,
            None => batch_exp,
        };
        self.ema_exp = Some(ema);

        // d/dφ [mean T − mean(exp T)/ema] equals the DV gradient with the
        // biased log-denominator replaced by the moving average.
        let corrected = t.scale(terms.marg_exp_mean, sc::<F>(1.0 / ema));
        let surrogate = t.sub(terms.joint_mean, corrected);
        let loss = t.scale(surrogate, sc::<F>(-1.0));
        t.backward(loss);

        let mut grads = Grads::extract(&t, &reg);
        grads.clip_global_norm(sc::<F>(grad_clip));
        opt.begin_step();
        self.visit_mut(&mut |name, p| {
            if let Some(g) = grads.get(name) {
                opt.update(name, p, g);
            }
        });
        Ok(est)
    }
}

impl BoundMine {
    /// Clipped critic outputs for a batch of concatenated pairs.
    pub fn t_values<F: Scalar>(&self, t: &mut Tape<F>, pairs: BufId) -> BufId {
        let raw = self.net.apply(t, pairs);
        t.clip(raw, sc::<F>(-T_CLIP), sc::<F>(T_CLIP))
    }

    /// Both expectation terms. The marginal pairing is z′ᵢ with z_{(i+rotation) mod B},
    /// a derangement for any rotation in 1..B.
    pub fn dv_terms<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        z_prime: BufId,
        z: BufId,
        rotation: usize,
    ) -> Result<DvTerms> {
        let (b, _) = t.shape(z_prime);
        let (bz, _) = t.shape(z);
        assert_eq!(b, bz, "batches must align");
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        assert!(rotation >= 1 && rotation < b, "rotation must stay a derangement");

        let joint = t.concat_cols(&[z_prime, z]);
        let perm: Vec<usize> = (0..b).map(|i| (i + rotation) % b).collect();
        debug_assert!(perm.iter().enumerate().all(|(i, &p)| p != i));
        let shuffled = t.permute_rows(z, &perm);
        let marg = t.concat_cols(&[z_prime, shuffled]);

        let t_joint = self.t_values(t, joint);
        let t_marg = self.t_values(t, marg);
        let joint_mean = t.mean_all(t_joint);
        let exp_marg = t.exp(t_marg);
        let marg_exp_mean = t.mean_all(exp_marg);
        Ok(DvTerms { joint_mean, marg_exp_mean })
    }

    /// joint_mean − ln(marg_exp_mean), differentiable; what the prompt
    /// generator minimizes.
    pub fn dv_estimate<F: Scalar>(&self, t: &mut Tape<F>, terms: &DvTerms) -> BufId {
        let log_denom = t.ln(terms.marg_exp_mean);
        t.sub(terms.joint_mean, log_denom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_critic_estimates_zero() {
        let mut mine = Mine::<f64>::new(3, 8, 1);
        // zero every weight, then pin the output bias to a constant
        mine.visit_mut(&mut |_, m| *m = Mat::zeros(m.rows(), m.cols()));
        mine.visit_mut(&mut |name, m| {
            if name == "mine.l2.b" {
                m[(0, 0)] = 4.2;
            }
        });
        let zp = Mat::from_fn(5, 3, |i, j| (i + j) as f64);
        let z = Mat::from_fn(5, 3, |i, j| (i * j) as f64);
        let est = mine.estimate(&zp, &z, 2).unwrap();
        assert!(est.abs() < 1e-12, "constant critic gave {est}");
    }

    #[test]
    fn single_pair_batches_are_rejected() {
        let mine = Mine::<f64>::new(3, 8, 1);
        let zp = Mat::from_fn(1, 3, |_, j| j as f64);
        let z = zp.clone();
        assert!(matches!(mine.estimate(&zp, &z, 1), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn huge_critic_outputs_are_clipped() {
        let mut mine = Mine::<f64>::new(2, 4, 1);
        mine.visit_mut(&mut |_, m| *m = Mat::from_fn(m.rows(), m.cols(), |_, _| 50.0));
        let zp = Mat::from_fn(4, 2, |i, j| (i + j) as f64 + 1.0);
        let z = zp.clone();
        let est = mine.estimate(&zp, &z, 1).unwrap();
        assert!(est.is_finite());
        // both terms live in [−20, 20], so the estimate cannot leave ±40
        assert!(est.abs() <= 40.0 + 1e-9);
    }
}
