//! Parameter fingerprints and checkpoint serialization.
//!
//! A fingerprint hashes every parameter's name, shape, and exact bytes in
//! visit order, so a single-ulp change to any weight changes the hash. The
//! frozen-backbone contract is enforced by comparing fingerprints before
//! and after downstream training.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub struct FingerprintHasher {
    h: Sha256,
}

impl Default for FingerprintHasher {
    fn default() -> Self {
        Self::new()
    }
}

impl FingerprintHasher {
    pub fn new() -> Self {
        FingerprintHasher { h: Sha256::new() }
    }

    pub fn add<F: Scalar>(&mut self, name: &str, m: &Mat<F>) {
        self.h.update(name.as_bytes());
        self.h.update((m.rows() as u64).to_le_bytes());
        self.h.update((m.cols() as u64).to_le_bytes());
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for &v in m.as_slice() {
            v.push_le_bytes(&mut bytes);
        }
        self.h.update(&bytes);
    }

    pub fn finish(self) -> String {
        hex(&self.h.finalize())
    }
}

/// All parameters of one model, keyed by visit name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBag<F> {
    pub entries: Vec<(String, Mat<F>)>,
}

impl<F: Scalar> ParamBag<F> {
    pub fn new() -> Self {
        ParamBag { entries: Vec::new() }
    }

    pub fn collect(&mut self, name: &str, m: &Mat<F>) {
        self.entries.push((name.to_string(), m.clone()));
    }
}

impl<F: Scalar> Default for ParamBag<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Writes a [`ParamBag`] back into a model during `visit_mut`; collects
/// name and shape mismatches instead of panicking inside the visitor.
pub struct ParamRestorer<'a, F> {
    map: HashMap<&'a str, &'a Mat<F>>,
    used: HashSet<&'a str>,
    errors: Vec<String>,
}

impl<'a, F: Scalar> ParamRestorer<'a, F> {
    pub fn new(bag: &'a ParamBag<F>) -> Self {
        ParamRestorer {
            map: bag.entries.iter().map(|(n, m)| (n.as_str(), m)).collect(),
            used: HashSet::new(),
            errors: Vec::new(),
        }
    }

    pub fn assign(&mut self, name: &str, target: &mut Mat<F>) {
        match self.map.get_key_value(name) {
            Some((&key, &src)) => {
                if src.rows() != target.rows() || src.cols() != target.cols() {
                    self.errors.push(format!(
                        "{name}: stored {}×{}, expected {}×{}",
                        src.rows(),
                        src.cols(),
                        target.rows(),
                        target.cols()
                    ));
                } else {
                    *target = src.clone();
                    self.used.insert(key);
                }
            }
            None => self.errors.push(format!("{name}: missing from checkpoint")),
        }
    }

    pub fn finish(self) -> Result<()> {
        let mut errors = self.errors;
        for name in self.map.keys() {
            if !self.used.contains(name) {
                errors.push(format!("{name}: present in checkpoint but unused"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::BadCheckpoint(errors.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_changes_on_tiny_perturbation() {
        let m = Mat::<f64>::from_fn(3, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let mut h1 = FingerprintHasher::new();
        h1.add("w", &m);
        let a = h1.finish();

        let mut h2 = FingerprintHasher::new();
        h2.add("w", &m);
        assert_eq!(a, h2.finish());

        let mut perturbed = m.clone();
        perturbed[(1, 1)] += 1e-6;
        let mut h3 = FingerprintHasher::new();
        h3.add("w", &perturbed);
        assert_ne!(a, h3.finish());

        // the name participates in the hash
        let mut h4 = FingerprintHasher::new();
        h4.add("v", &m);
        assert_ne!(a, h4.finish());
    }

    #[test]
    fn restorer_reports_missing_and_unused() {
        let mut bag = ParamBag::<f64>::new();
        bag.collect("a", &Mat::zeros(2, 2));
        bag.collect("ghost", &Mat::zeros(1, 1));

        let mut a = Mat::<f64>::from_fn(2, 2, |_, _| 7.0);
        let mut b = Mat::<f64>::zeros(3, 3);
        let mut r = ParamRestorer::new(&bag);
        r.assign("a", &mut a);
        r.assign("b", &mut b);
        let err = r.finish().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("b: missing"), "{msg}");
        assert!(msg.contains("ghost"), "{msg}");
        assert_eq!(a.as_slice(), &[0.0; 4]); // the matching entry was applied
    }
}
