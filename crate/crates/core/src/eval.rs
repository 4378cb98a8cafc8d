//! Evaluation utilities: linear probes, variance-maximizing projection,
//! WER tables, cosine-similarity and isolation reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::accent::AccentModule;
use crate::backbone::Backbone;
use crate::ctc::{greedy_decode, wer};
use crate::error::{Error, Result};
use crate::prompt::PromptGenerator;
use crate::scalar::{sc, Scalar};
use crate::synthcorpus::{AccentGroup, Corpus, Utterance};
use crate::tensor::{cosine, Mat};

/// Multinomial logistic regression by full-batch gradient descent from a
/// zero initialization; deterministic. Returns the fitted weights
/// ((d+1) × classes, last row is the bias).
pub fn fit_linear_probe(
    xs: &Mat<f64>,
    labels: &[usize],
    n_classes: usize,
    steps: usize,
    lr: f64,
) -> Mat<f64> {
    let n = xs.rows();
    let d = xs.cols();
    assert_eq!(labels.len(), n);
    assert!(labels.iter().all(|&y| y < n_classes));
    let mut w = Mat::zeros(d + 1, n_classes);
    let mut grad = Mat::zeros(d + 1, n_classes);
    for _ in 0..steps {
        for g in grad.as_mut_slice() {
            *g = 0.0;
        }
        for i in 0..n {
            let probs = row_softmax(&scores(&w, xs.row(i)));
            for k in 0..n_classes {
                let err = probs[k] - f64::from(labels[i] == k);
                for j in 0..d {
                    grad[(j, k)] += err * xs.row(i)[j];
                }
                grad[(d, k)] += err;
            }
        }
        let scale = lr / n as f64;
        for (wv, gv) in w.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *wv -= scale * gv;
        }
    }
    w
}

fn scores(w: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    let n_classes = w.cols();
    let d = x.len();
    (0..n_classes)
        .map(|k| x.iter().enumerate().map(|(j, &xj)| xj * w[(j, k)]).sum::<f64>() + w[(d, k)])
        .collect()
}

fn row_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

pub fn probe_predict(w: &Mat<f64>, x: &[f64]) -> usize {
    let s = scores(w, x);
    let mut best = 0;
    for (k, &v) in s.iter().enumerate() {
        if v > s[best] {
            best = k;
        }
    }
    best
}

pub fn probe_accuracy(w: &Mat<f64>, xs: &Mat<f64>, labels: &[usize]) -> f64 {
    let hits = (0..xs.rows()).filter(|&i| probe_predict(w, xs.row(i)) == labels[i]).count();
    hits as f64 / xs.rows() as f64
}

/// Fits on the data it scores: measures linear separability.
pub fn linear_probe_self_accuracy(
    xs: &Mat<f64>,
    labels: &[usize],
    n_classes: usize,
    steps: usize,
    lr: f64,
) -> f64 {
    let w = fit_linear_probe(xs, labels, n_classes, steps, lr);
    probe_accuracy(&w, xs, labels)
}

/// Fits on one set, scores another.
pub fn linear_probe_transfer_accuracy(
    train_x: &Mat<f64>,
    train_y: &[usize],
    test_x: &Mat<f64>,
    test_y: &[usize],
    n_classes: usize,
    steps: usize,
    lr: f64,
) -> f64 {
    let w = fit_linear_probe(train_x, train_y, n_classes, steps, lr);
    probe_accuracy(&w, test_x, test_y)
}

/// Greedy transcript with an input-dependent prompt: the clean pass supplies
/// the tapped hidden state, the generator maps it to a prompt, and decoding
/// runs over the prompted output. When `strip_prompt_frames` is set the
/// prompt positions are dropped before decoding, matching the training-side
/// switch that excludes them from the loss.
pub fn prompted_transcribe<F: Scalar>(
    bb: &Backbone<F>,
    pg: &PromptGenerator<F>,
    features: &Mat<F>,
    strip_prompt_frames: bool,
) -> Result<Vec<usize>> {
    let clean = bb.run(features)?;
    let prompt = pg.generate(&clean.hidden[bb.cfg.tap_layer]);
    let out = bb.run_with_prompt(&prompt, features)?;
    let lp = &out.log_probs;
    if strip_prompt_frames {
        let l = lp.rows() - pg.prompt_len;
        let content = Mat::from_fn(l, lp.cols(), |i, j| lp[(i + pg.prompt_len, j)]);
        Ok(greedy_decode(&content))
    } else {
        Ok(greedy_decode(lp))
    }
}

/// Mean greedy-decode WER over `utts`, prepending a generated prompt to
/// every utterance when a generator is given.
pub fn model_wer<F: Scalar>(
    bb: &Backbone<F>,
    pg: Option<&PromptGenerator<F>>,
    strip_prompt_frames: bool,
    utts: &[&Utterance],
) -> Result<f64> {
    let mut total = 0.0;
    for u in utts {
        let feats = u.features_as::<F>();
        let hyp = match pg {
            Some(pg) => prompted_transcribe(bb, pg, &feats, strip_prompt_frames)?,
            None => bb.transcribe(&feats)?,
        };
        total += wer(&u.transcript, &hyp)?;
    }
    Ok(total / utts.len() as f64)
}

/// Per-accent mean WER over one split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccentWer {
    pub accent_id: usize,
    pub group: AccentGroup,
    pub n_utterances: usize,
    pub wer: f64,
}

/// WER table over one split: one row per accent plus group aggregates.
/// Group means and ALL are utterance-weighted.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WerTable {
    pub rows: Vec<AccentWer>,
    pub mfa: Option<f64>,
    pub lfa: Option<f64>,
    pub ua: Option<f64>,
    pub all: f64,
}

/// Greedy-decodes every utterance in `ids` (with a generated prompt when a
/// generator is given) and aggregates WER by accent and group.
pub fn eval_wer<F: Scalar>(
    bb: &Backbone<F>,
    pg: Option<&PromptGenerator<F>>,
    strip_prompt_frames: bool,
    corpus: &Corpus,
    ids: &[String],
) -> Result<WerTable> {
    if ids.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation split".to_string()));
    }
    let utts = corpus.resolve(ids);
    let mut by_accent: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for u in &utts {
        let feats = u.features_as::<F>();
        let hyp = match pg {
            Some(pg) => prompted_transcribe(bb, pg, &feats, strip_prompt_frames)?,
            None => bb.transcribe(&feats)?,
        };
        let e = by_accent.entry(u.accent_id).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += wer(&u.transcript, &hyp)?;
    }

    let mut rows = Vec::new();
    let mut sums: BTreeMap<AccentGroup, (usize, f64)> = BTreeMap::new();
    let mut total = (0usize, 0.0f64);
    for (accent_id, (n, sum)) in by_accent {
        let group = corpus.splits.group_map[&accent_id];
        rows.push(AccentWer { accent_id, group, n_utterances: n, wer: sum / n as f64 });
        let g = sums.entry(group).or_insert((0, 0.0));
        g.0 += n;
        g.1 += sum;
        total.0 += n;
        total.1 += sum;
    }
    let mean_of = |g: AccentGroup| sums.get(&g).map(|&(n, s)| s / n as f64);
    Ok(WerTable {
        rows,
        mfa: mean_of(AccentGroup::Mfa),
        lfa: mean_of(AccentGroup::Lfa),
        ua: mean_of(AccentGroup::Ua),
        all: total.1 / total.0 as f64,
    })
}

/// Accent feature of one utterance: tapped hidden state of the prompted
/// pass when a generator is given, of the clean pass otherwise.
pub fn accent_feature<F: Scalar>(
    bb: &Backbone<F>,
    am: &AccentModule<F>,
    pg: Option<&PromptGenerator<F>>,
    features: &Mat<F>,
) -> Result<Vec<F>> {
    let clean = bb.run(features)?;
    let tap = match pg {
        Some(pg) => {
            let prompt = pg.generate(&clean.hidden[bb.cfg.tap_layer]);
            let full = &bb.run_with_prompt(&prompt, features)?.hidden[bb.cfg.tap_layer];
            // Content rows only: the prompt steers the backbone but is not
            // speech, so it contributes nothing to the accent feature.
            let p = prompt.rows();
            Mat::from_fn(full.rows() - p, full.cols(), |i, j| full[(i + p, j)])
        }
        None => clean.hidden[bb.cfg.tap_layer].clone(),
    };
    Ok(am.extract(&tap).into_data())
}

/// Mean of the clean accent features over the native-accent test split:
/// the reference point accent-invariance is measured against.
pub fn l1_centroid<F: Scalar>(
    bb: &Backbone<F>,
    am: &AccentModule<F>,
    corpus: &Corpus,
) -> Result<Vec<f64>> {
    let utts = corpus.resolve(&corpus.splits.l1_test);
    if utts.is_empty() {
        return Err(Error::InvalidConfig("empty native test split".to_string()));
    }
    let mut acc = vec![0.0f64; am.d_acc];
    for u in &utts {
        let z = accent_feature(bb, am, None, &u.features_as::<F>())?;
        for (a, v) in acc.iter_mut().zip(&z) {
            *a += v.to_f64_lossy();
        }
    }
    for a in &mut acc {
        *a /= utts.len() as f64;
    }
    Ok(acc)
}

/// Mean cosine similarity to the L1 centroid of each accent's features over
/// `ids`, keyed by accent id. Errors on an accent with no utterances in the
/// split (empty buckets hide missing data).
pub fn accent_cosines<F: Scalar>(
    bb: &Backbone<F>,
    am: &AccentModule<F>,
    pg: Option<&PromptGenerator<F>>,
    centroid: &[f64],
    corpus: &Corpus,
    ids: &[String],
) -> Result<BTreeMap<usize, f64>> {
    if ids.is_empty() {
        return Err(Error::InvalidConfig("empty cosine split".to_string()));
    }
    let utts = corpus.resolve(ids);
    let mut sums: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for u in &utts {
        let z = accent_feature(bb, am, pg, &u.features_as::<F>())?;
        let zf: Vec<f64> = z.iter().map(|v| v.to_f64_lossy()).collect();
        let e = sums.entry(u.accent_id).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += cosine(&zf, centroid);
    }
    Ok(sums.into_iter().map(|(a, (n, s))| (a, s / n as f64)).collect())
}

/// Mean over the rows (time axis) of a feature sequence, as a 1-row matrix.
pub fn mean_pool<F: Scalar>(features: &Mat<F>) -> Mat<F> {
    let mut out = vec![F::zero(); features.cols()];
    for i in 0..features.rows() {
        for (o, &v) in out.iter_mut().zip(features.row(i)) {
            *o += v;
        }
    }
    let n = sc::<F>(features.rows() as f64);
    for o in &mut out {
        *o /= n;
    }
    Mat::from_vec(1, features.cols(), out)
}

/// Pearson correlation coefficient; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

/// Top-`k` principal directions of the row-centered data, by power
/// iteration with deflation; deterministic start vectors.
pub fn principal_directions(xs: &Mat<f64>, k: usize) -> Vec<Vec<f64>> {
    let n = xs.rows();
    let d = xs.cols();
    assert!(n >= 2, "need at least two points");
    let mean = mean_pool(xs);
    let centered = Mat::from_fn(n, d, |i, j| xs[(i, j)] - mean[(0, j)]);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for comp in 0..k {
        let mut v: Vec<f64> = (0..d)
            .map(|j| ((j + comp * 13 + 1) as f64 * 0.617).sin())
            .collect();
        normalize(&mut v);
        for _ in 0..200 {
            // w = Cv computed as Xᵀ(Xv) without forming the covariance
            let xv: Vec<f64> =
                (0..n).map(|i| centered.row(i).iter().zip(&v).map(|(&a, &b)| a * b).sum()).collect();
            let mut w = vec![0.0; d];
            for i in 0..n {
                for (wj, &cij) in w.iter_mut().zip(centered.row(i)) {
                    *wj += cij * xv[i];
                }
            }
            for prev in &dirs {
                let dot: f64 = w.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (wj, pj) in w.iter_mut().zip(prev) {
                    *wj -= dot * pj;
                }
            }
            if normalize(&mut w) < 1e-12 {
                break;
            }
            v = w;
        }
        dirs.push(v);
    }
    dirs
}

/// Projects each row onto the given directions.
pub fn project(xs: &Mat<f64>, dirs: &[Vec<f64>]) -> Mat<f64> {
    Mat::from_fn(xs.rows(), dirs.len(), |i, k| {
        xs.row(i).iter().zip(&dirs[k]).map(|(&a, &b)| a * b).sum()
    })
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}
