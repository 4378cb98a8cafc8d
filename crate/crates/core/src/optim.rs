//! Gradient collection and the AdamW update with decoupled weight decay.

use std::collections::HashMap;

use crate::nn::Binding;
use crate::scalar::{sc, Scalar};
use crate::tape::Tape;
use crate::tensor::Mat;

/// Named gradients extracted from a tape after `backward`.
pub struct Grads<F> {
    entries: Vec<(String, Vec<F>)>,
}

impl<F: Scalar> Grads<F> {
    /// Pulls the gradient for every parameter recorded in `binding`.
    /// Parameters the loss never touched get zeros.
    pub fn extract(tape: &Tape<F>, binding: &Binding) -> Self {
        let entries = binding
            .pairs()
            .iter()
            .map(|&(ref name, id)| {
                let (r, c) = tape.shape(id);
                let g = tape.grad(id).map_or_else(|| vec![F::zero(); r * c], <[F]>::to_vec);
                (name.clone(), g)
            })
            .collect();
        Grads { entries }
    }

    pub fn get(&self, name: &str) -> Option<&[F]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g.as_slice())
    }

    pub fn global_norm(&self) -> F {
        self.entries
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|&x| x * x)
            .sum::<F>()
            .sqrt()
    }

    /// Scales all gradients down so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: F) {
        let norm = self.global_norm();
        if norm > max_norm {
            let scale = max_norm / norm;
            for (_, g) in &mut self.entries {
                for v in g {
                    *v *= scale;
                }
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[F])> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g.as_slice()))
    }
}

/// AdamW: Adam moments with weight decay applied directly to parameters.
pub struct AdamW<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
    step: u64,
    m: HashMap<String, Vec<F>>,
    v: HashMap<String, Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(lr: F, weight_decay: F) -> Self {
        AdamW {
            lr,
            beta1: sc(0.9),
            beta2: sc(0.999),
            eps: sc(1e-8),
            weight_decay,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Advances the shared step counter; call once before each batch of
    /// `update` calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Mat<F>, grad: &[F]) {
        assert!(self.step > 0, "begin_step before update");
        assert_eq!(param.len(), grad.len(), "gradient shape mismatch for {name}");
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![F::zero(); grad.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![F::zero(); grad.len()]);
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = F::one() - b1.powi(self.step as i32);
        let bc2 = F::one() - b2.powi(self.step as i32);
        let data = param.as_mut_slice();
        for i in 0..grad.len() {
            m[i] = b1 * m[i] + (F::one() - b1) * grad[i];
            v[i] = b2 * v[i] + (F::one() - b2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_moves_by_about_lr() {
        let mut opt = AdamW::<f64>::new(0.1, 0.0);
        let mut p = Mat::from_vec(1, 2, vec![1.0, -2.0]);
        opt.begin_step();
        opt.update("p", &mut p, &[0.5, -0.3]);
        // with bias correction the first update is ≈ lr·sign(grad)
        assert!((p[(0, 0)] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p[(0, 1)] - (-2.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_shrinks_params_without_gradient() {
        let mut opt = AdamW::<f64>::new(0.1, 0.5);
        let mut p = Mat::from_vec(1, 1, vec![2.0]);
        opt.begin_step();
        opt.update("p", &mut p, &[0.0]);
        // pure decay: p − lr·wd·p = 2 − 0.1·0.5·2
        assert!((p[(0, 0)] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = Grads {
            entries: vec![("a".into(), vec![3.0f64, 0.0]), ("b".into(), vec![0.0, 4.0])],
        };
        assert!((g.global_norm() - 5.0).abs() < 1e-12);
        g.clip_global_norm(1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        // direction preserved
        assert!((g.get("a").unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((g.get("b").unwrap()[1] - 0.8).abs() < 1e-12);
    }
}
