//! CTC loss (log-space forward-backward, analytic gradient), a brute-force
//! path-enumeration oracle, greedy decoding, and token error rate.
//!
//! Blank index is fixed at 0 everywhere; real labels are 1..=V against a
//! T×(V+1) matrix of log-probabilities.

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::Mat;

pub const BLANK: usize = 0;

/// Largest frame count the path oracle will enumerate: (V+1)^T paths.
pub const ORACLE_MAX_FRAMES: usize = 8;

fn validate_labels<F: Scalar>(log_probs: &Mat<F>, target: &[usize]) -> Result<()> {
    let vocab = log_probs.cols();
    for &t in target {
        if t == BLANK || t >= vocab {
            return Err(Error::LabelOutOfRange { label: t, vocab });
        }
    }
    Ok(())
}

/// Frames required to emit `target`: one per token plus a separating blank
/// between equal neighbours.
fn min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn check_feasible<F: Scalar>(log_probs: &Mat<F>, target: &[usize]) -> Result<()> {
    validate_labels(log_probs, target)?;
    let needed = min_frames(target);
    if log_probs.rows() < needed {
        return Err(Error::CtcInfeasible { frames: log_probs.rows(), min_frames: needed });
    }
    Ok(())
}

fn lse2<F: Scalar>(a: F, b: F) -> F {
    let m = a.max(b);
    if m == F::neg_infinity() {
        return F::neg_infinity();
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3<F: Scalar>(a: F, b: F, c: F) -> F {
    lse2(lse2(a, b), c)
}

/// Extended label sequence with blanks interleaved: [∅, t₁, ∅, …, t_U, ∅].
fn extended(target: &[usize]) -> Vec<usize> {
    let mut l = Vec::with_capacity(2 * target.len() + 1);
    l.push(BLANK);
    for &t in target {
        l.push(t);
        l.push(BLANK);
    }
    l
}

/// Negative log-likelihood of `target` under `log_probs`, together with the
/// gradient w.r.t. every log-probability entry.
pub fn ctc_loss_with_grad<F: Scalar>(log_probs: &Mat<F>, target: &[usize]) -> Result<(F, Mat<F>)> {
    check_feasible(log_probs, target)?;
    let t_len = log_probs.rows();
    let l = extended(target);
    let s_len = l.len();
    let ninf = F::neg_infinity();

    let skip_ok = |s: usize| s >= 2 && l[s] != BLANK && l[s] != l[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = log_probs[(0, l[0])];
    if s_len > 1 {
        alpha[1] = log_probs[(0, l[1])];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let stay = alpha[(t - 1) * s_len + s];
            let step = if s >= 1 { alpha[(t - 1) * s_len + s - 1] } else { ninf };
            let skip = if skip_ok(s) { alpha[(t - 1) * s_len + s - 2] } else { ninf };
            let acc = lse3(stay, step, skip);
            alpha[t * s_len + s] =
                if acc == ninf { ninf } else { acc + log_probs[(t, l[s])] };
        }
    }

    let log_p = if s_len > 1 {
        lse2(alpha[(t_len - 1) * s_len + s_len - 1], alpha[(t_len - 1) * s_len + s_len - 2])
    } else {
        alpha[(t_len - 1) * s_len]
    };
    if log_p == F::neg_infinity() {
        return Err(Error::CtcInfeasible { frames: t_len, min_frames: min_frames(target) });
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = F::zero();
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = F::zero();
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let stay = beta[(t + 1) * s_len + s] + log_probs[(t + 1, l[s])];
            let step = if s + 1 < s_len {
                beta[(t + 1) * s_len + s + 1] + log_probs[(t + 1, l[s + 1])]
            } else {
                ninf
            };
            let skip = if s + 2 < s_len && skip_ok(s + 2) {
                beta[(t + 1) * s_len + s + 2] + log_probs[(t + 1, l[s + 2])]
            } else {
                ninf
            };
            beta[t * s_len + s] = lse3(stay, step, skip);
        }
    }

    // dL/dy_t(k) = −exp(lse_{s: l[s]=k}(α_t(s)+β_t(s)) − logP)
    let mut grad = Mat::zeros(t_len, log_probs.cols());
    for t in 0..t_len {
        let mut acc = vec![ninf; log_probs.cols()];
        for s in 0..s_len {
            let g = alpha[t * s_len + s] + beta[t * s_len + s];
            if g != F::neg_infinity() {
                acc[l[s]] = lse2(acc[l[s]], g);
            }
        }
        for (k, &a) in acc.iter().enumerate() {
            if a != F::neg_infinity() {
                grad[(t, k)] = -(a - log_p).exp();
            }
        }
    }

    Ok((-log_p, grad))
}

pub fn ctc_loss<F: Scalar>(log_probs: &Mat<F>, target: &[usize]) -> Result<F> {
    ctc_loss_with_grad(log_probs, target).map(|(loss, _)| loss)
}

/// Mean loss over a batch plus the per-utterance values.
pub fn ctc_loss_mean<F: Scalar>(batch: &[(&Mat<F>, &[usize])]) -> Result<(F, Vec<F>)> {
    assert!(!batch.is_empty());
    let mut per = Vec::with_capacity(batch.len());
    for (lp, target) in batch {
        per.push(ctc_loss(lp, target)?);
    }
    let mean = per.iter().copied().sum::<F>() / sc::<F>(per.len() as f64);
    Ok((mean, per))
}

/// Exact loss by enumerating every (V+1)^T alignment path. Refuses long inputs.
pub fn ctc_loss_oracle<F: Scalar>(log_probs: &Mat<F>, target: &[usize]) -> Result<F> {
    let t_len = log_probs.rows();
    if t_len > ORACLE_MAX_FRAMES {
        return Err(Error::OracleTooLong { max: ORACLE_MAX_FRAMES, got: t_len });
    }
    validate_labels(log_probs, target)?;
    let vocab = log_probs.cols();
    let mut total = F::neg_infinity();
    let mut path = vec![0usize; t_len];
    loop {
        if collapse(&path) == target {
            let mut lp = F::zero();
            for (t, &sym) in path.iter().enumerate() {
                lp += log_probs[(t, sym)];
            }
            total = lse2(total, lp);
        }
        // odometer increment over base-(V+1) digits
        let mut pos = 0;
        loop {
            if pos == t_len {
                if total == F::neg_infinity() {
                    return Err(Error::CtcInfeasible {
                        frames: t_len,
                        min_frames: min_frames(target),
                    });
                }
                return Ok(-total);
            }
            path[pos] += 1;
            if path[pos] < vocab {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Removes consecutive repeats, then blanks.
fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &sym in path {
        if Some(sym) != prev {
            if sym != BLANK {
                out.push(sym);
            }
            prev = Some(sym);
        }
    }
    out
}

/// Per-frame argmax (lowest index wins ties), collapse repeats, strip blanks.
pub fn greedy_decode<F: Scalar>(log_probs: &Mat<F>) -> Vec<usize> {
    let mut path = Vec::with_capacity(log_probs.rows());
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        path.push(best);
    }
    collapse(&path)
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token error rate: edit distance normalized by reference length.
pub fn wer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}
