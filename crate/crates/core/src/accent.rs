//! Accent module: pools a tapped hidden state over time, extracts a
//! fixed-size accent feature z, and trains two heads on it — an accent
//! classifier and an intensity regressor whose target is the frozen
//! backbone's per-utterance CTC difficulty.
//!
//! Training touches only this module; backbone gradients stop at the tap.
//! Regression targets are per-frame CTC losses z-scored over the training
//! split, so they are length- and scale-free.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint::{FingerprintHasher, ParamBag, ParamRestorer};
use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::ctc::ctc_loss;
use crate::error::{Error, Result};
use crate::nn::{Binding, BoundLinear, BoundMlp, Linear, Mlp, VisitFn, VisitMutFn};
use crate::optim::{AdamW, Grads};
use crate::rng::rng_for;
use crate::scalar::{sc, Scalar};
use crate::synthcorpus::{Corpus, Utterance};
use crate::tape::{BufId, Tape};
use crate::tensor::Mat;

#[derive(Clone)]
pub struct AccentModule<F> {
    pub d_model: usize,
    pub d_acc: usize,
    /// Accent ids the classifier was trained on, in class-index order.
    pub classes: Vec<usize>,
    /// Mean and standard deviation used to z-score the regression targets.
    pub target_norm: (f64, f64),
    extractor: Mlp<F>,
    classifier: Linear<F>,
    intensity: Mlp<F>,
}

pub struct BoundAccentModule {
    extractor: BoundMlp,
    classifier: BoundLinear,
    intensity: BoundMlp,
}

impl<F: Scalar> AccentModule<F> {
    pub fn new(d_model: usize, d_acc: usize, classes: Vec<usize>, seed: u64) -> Self {
        let mut rng = rng_for("am-init", seed, 0);
        AccentModule {
            d_model,
            d_acc,
            extractor: Mlp::new(&mut rng, &[d_model, d_acc, d_acc, d_acc]),
            classifier: Linear::new(&mut rng, d_acc, classes.len()),
            intensity: Mlp::new(&mut rng, &[d_acc, d_acc, d_acc, 1]),
            classes,
            target_norm: (0.0, 1.0),
        }
    }

    pub fn class_index(&self, accent_id: usize) -> Option<usize> {
        self.classes.iter().position(|&a| a == accent_id)
    }

    pub fn bind(&self, t: &mut Tape<F>, trainable: bool, reg: &mut Binding) -> BoundAccentModule {
        BoundAccentModule {
            extractor: self.extractor.bind(t, "am.ext", trainable, reg),
            classifier: self.classifier.bind(t, "am.cls", trainable, reg),
            intensity: self.intensity.bind(t, "am.int", trainable, reg),
        }
    }

    pub fn visit(&self, f: VisitFn<F>) {
        self.extractor.visit("am.ext", f);
        self.classifier.visit("am.cls", f);
        self.intensity.visit("am.int", f);
    }

    pub fn visit_mut(&mut self, f: VisitMutFn<F>) {
        self.extractor.visit_mut("am.ext", f);
        self.classifier.visit_mut("am.cls", f);
        self.intensity.visit_mut("am.int", f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
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

    /// Accent feature of one tapped hidden state: mean over time, then the
    /// extractor MLP. Output is 1 × d_acc.
    pub fn extract(&self, tap: &Mat<F>) -> Mat<F> {
        assert!(tap.rows() > 0, "empty hidden sequence");
        self.run_eval(&crate::eval::mean_pool(tap), |t, b, x| b.extract_pooled(t, x))
    }

    /// Classifier logits for a batch of accent features (rows of z).
    pub fn classify(&self, z: &Mat<F>) -> Mat<F> {
        self.run_eval(z, |t, b, x| b.classify(t, x))
    }

    /// Predicted normalized CTC difficulty for a batch of accent features.
    pub fn predict_intensity(&self, z: &Mat<F>) -> Vec<F> {
        self.run_eval(z, |t, b, x| b.intensity(t, x)).into_data()
    }

    fn run_eval(&self, input: &Mat<F>, f: impl Fn(&mut Tape<F>, &BoundAccentModule, BufId) -> BufId) -> Mat<F> {
        let mut t = Tape::new();
        let mut reg = Binding::new();
        let bound = self.bind(&mut t, false, &mut reg);
        let x = t.input(input);
        let y = f(&mut t, &bound, x);
        t.mat(y)
    }

    pub fn save(&self, path: &Path, stats: &AmStats) -> Result<()> {
        let cp = AmCheckpoint {
            schema_version: SCHEMA_VERSION,
            d_model: self.d_model,
            d_acc: self.d_acc,
            classes: self.classes.clone(),
            target_norm: self.target_norm,
            params: self.params(),
            fingerprint: self.fingerprint(),
            stats: stats.clone(),
        };
        std::fs::write(path, serde_json::to_string(&cp)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, AmStats)> {
        let cp: AmCheckpoint<F> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if cp.schema_version != SCHEMA_VERSION {
            return Err(Error::BadCheckpoint(format!(
                "schema version {} (expected {})",
                cp.schema_version, SCHEMA_VERSION
            )));
        }
        let mut am = AccentModule::new(cp.d_model, cp.d_acc, cp.classes, 0);
        am.target_norm = cp.target_norm;
        am.set_params(&cp.params)?;
        let actual = am.fingerprint();
        if actual != cp.fingerprint {
            return Err(Error::BadCheckpoint(format!(
                "fingerprint mismatch: stored {}, recomputed {}",
                cp.fingerprint, actual
            )));
        }
        Ok((am, cp.stats))
    }
}

impl BoundAccentModule {
    /// z from a tapped hidden state already on the tape.
    pub fn extract<F: Scalar>(&self, t: &mut Tape<F>, tap: BufId) -> BufId {
        let pooled = t.mean_rows(tap);
        self.extract_pooled(t, pooled)
    }

    /// z from a pre-pooled 1 × d_model (or batch × d_model) input.
    pub fn extract_pooled<F: Scalar>(&self, t: &mut Tape<F>, pooled: BufId) -> BufId {
        self.extractor.apply(t, pooled)
    }

    pub fn classify<F: Scalar>(&self, t: &mut Tape<F>, z: BufId) -> BufId {
        self.classifier.apply(t, z)
    }

    pub fn intensity<F: Scalar>(&self, t: &mut Tape<F>, z: BufId) -> BufId {
        self.intensity.apply(t, z)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AmStats {
    /// (train loss, dev loss) per epoch.
    pub history: Vec<(f64, f64)>,
    pub chosen_epoch: usize,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
    /// Pearson correlation of predicted vs true normalized CTC on dev.
    pub intensity_correlation: f64,
}

#[derive(Serialize, Deserialize)]
struct AmCheckpoint<F> {
    schema_version: u32,
    d_model: usize,
    d_acc: usize,
    classes: Vec<usize>,
    target_norm: (f64, f64),
    params: ParamBag<F>,
    fingerprint: String,
    stats: AmStats,
}

/// Pooled tap and normalized CTC target for one utterance, precomputed
/// against the frozen backbone so training never re-runs it.
struct AmExample<F> {
    pooled: Vec<F>,
    class: usize,
    target: F,
}

fn pooled_tap<F: Scalar>(bb: &Backbone<F>, u: &Utterance) -> Result<Vec<F>> {
    let out = bb.run(&u.features_as::<F>())?;
    Ok(crate::eval::mean_pool(&out.hidden[bb.cfg.tap_layer]).into_data())
}

/// Per-frame CTC loss of the frozen backbone on one utterance.
fn raw_ctc_rate<F: Scalar>(bb: &Backbone<F>, u: &Utterance) -> Result<f64> {
    let out = bb.run(&u.features_as::<F>())?;
    let loss = ctc_loss(&out.log_probs, &u.transcript)?;
    Ok(loss.to_f64_lossy() / out.log_probs.rows() as f64)
}

fn build_examples<F: Scalar>(
    bb: &Backbone<F>,
    utts: &[&Utterance],
    classes: &[usize],
    norm: (f64, f64),
) -> Result<Vec<AmExample<F>>> {
    let mut out = Vec::with_capacity(utts.len());
    for u in utts {
        let class = classes
            .iter()
            .position(|&a| a == u.accent_id)
            .expect("utterance accent not in class set");
        let raw = raw_ctc_rate(bb, u)?;
        out.push(AmExample {
            pooled: pooled_tap(bb, u)?,
            class,
            target: sc::<F>((raw - norm.0) / norm.1),
        });
    }
    Ok(out)
}

fn batch_loss<F: Scalar>(
    t: &mut Tape<F>,
    bound: &BoundAccentModule,
    examples: &[&AmExample<F>],
    d_model: usize,
    lambda_am: f64,
) -> (BufId, f64, f64) {
    let rows: Vec<F> = examples.iter().flat_map(|e| e.pooled.iter().copied()).collect();
    let pooled = t.input(&Mat::from_vec(examples.len(), d_model, rows));
    let classes: Vec<usize> = examples.iter().map(|e| e.class).collect();
    let targets: Vec<F> = examples.iter().map(|e| e.target).collect();

    let z = bound.extract_pooled(t, pooled);
    let logits = bound.classify(t, z);
    let ce = t.cross_entropy(logits, &classes);
    let pred = bound.intensity(t, z);
    let mse = t.mse_vs_const(pred, &targets);
    let weighted = t.scale(mse, sc::<F>(lambda_am));
    let total = t.add(ce, weighted);

    let ce_v = t.scalar_value(ce).to_f64_lossy();
    let mse_v = t.scalar_value(mse).to_f64_lossy();
    let total_v = t.scalar_value(total).to_f64_lossy();
    debug_assert_eq!(total_v, ce_v + lambda_am * mse_v, "loss must decompose exactly");
    (total, ce_v, mse_v)
}

/// Accent ids that have at least one training utterance, ascending.
pub fn trainable_accents(corpus: &Corpus) -> Vec<usize> {
    let mut ids: Vec<usize> = corpus
        .resolve(&corpus.splits.l2_train)
        .iter()
        .map(|u| u.accent_id)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Trains the accent module against the frozen backbone on the accented
/// training split; selects the epoch with the lowest dev loss.
pub fn train_am<F: Scalar>(
    corpus: &Corpus,
    bb: &Backbone<F>,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(AccentModule<F>, AmStats)> {
    let classes = trainable_accents(corpus);
    if classes.is_empty() {
        return Err(Error::StageFailed {
            stage: "train-am".to_string(),
            reason: "no accented training utterances".to_string(),
        });
    }
    let mut am = AccentModule::<F>::new(bb.cfg.d_model, cfg.d_acc, classes.clone(), seed);

    let train_utts = corpus.resolve(&corpus.splits.l2_train);
    let dev_utts: Vec<&Utterance> = corpus
        .resolve(&corpus.splits.l2_dev)
        .into_iter()
        .filter(|u| classes.contains(&u.accent_id))
        .collect();

    let mut raw = Vec::with_capacity(train_utts.len());
    for u in &train_utts {
        raw.push(raw_ctc_rate(bb, u)?);
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let var = raw.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / raw.len() as f64;
    let std = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
    am.target_norm = (mean, std);

    let train = build_examples(bb, &train_utts, &classes, am.target_norm)?;
    let dev = build_examples(bb, &dev_utts, &classes, am.target_norm)?;
    let dev_refs: Vec<&AmExample<F>> = dev.iter().collect();

    let mut opt = AdamW::new(sc::<F>(cfg.lr_am), sc::<F>(cfg.weight_decay));
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamBag<F>)> = None;
    for epoch in 0..cfg.epochs_am {
        let mut order: Vec<usize> = (0..train.len()).collect();
        crate::backbone::shuffle_indices(&mut order, "am-order", seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&AmExample<F>> = chunk.iter().map(|&i| &train[i]).collect();
            let mut t = Tape::new();
            let mut reg = Binding::new();
            let bound = am.bind(&mut t, true, &mut reg);
            let (total, _, _) = batch_loss(&mut t, &bound, &batch, am.d_model, cfg.lambda_am);
            let total_v = t.scalar_value(total).to_f64_lossy();
            if !total_v.is_finite() {
                return Err(Error::StageFailed {
                    stage: "train-am".to_string(),
                    reason: format!("non-finite loss at epoch {epoch}"),
                });
            }
            t.backward(total);
            let mut grads = Grads::extract(&t, &reg);
            grads.clip_global_norm(sc::<F>(cfg.grad_clip));
            opt.begin_step();
            am.visit_mut(&mut |name, p| {
                if let Some(g) = grads.get(name) {
                    opt.update(name, p, g);
                }
            });
            loss_sum += total_v;
            n_batches += 1;
        }

        let mut t = Tape::new();
        let mut reg = Binding::new();
        let bound = am.bind(&mut t, false, &mut reg);
        let (dev_total, _, _) = batch_loss(&mut t, &bound, &dev_refs, am.d_model, cfg.lambda_am);
        let dev_v = t.scalar_value(dev_total).to_f64_lossy();
        history.push((loss_sum / n_batches as f64, dev_v));
        if best.as_ref().map_or(true, |(l, _, _)| dev_v < *l) {
            best = Some((dev_v, epoch, am.params()));
        }
    }

    let Some((dev_loss, chosen_epoch, bag)) = best else {
        return Err(Error::StageFailed {
            stage: "train-am".to_string(),
            reason: "no epochs ran".to_string(),
        });
    };
    am.set_params(&bag)?;

    let dev_z = stack_features(&am, &dev);
    let logits = am.classify(&dev_z);
    let mut correct = 0;
    for (i, e) in dev.iter().enumerate() {
        let row = logits.row(i);
        let argmax = (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        correct += usize::from(argmax == e.class);
    }
    let preds: Vec<f64> = am.predict_intensity(&dev_z).iter().map(|p| p.to_f64_lossy()).collect();
    let targets: Vec<f64> = dev.iter().map(|e| e.target.to_f64_lossy()).collect();
    let stats = AmStats {
        history,
        chosen_epoch,
        dev_loss,
        dev_accuracy: correct as f64 / dev.len() as f64,
        intensity_correlation: crate::eval::pearson(&preds, &targets),
    };
    Ok((am, stats))
}

fn stack_features<F: Scalar>(am: &AccentModule<F>, examples: &[AmExample<F>]) -> Mat<F> {
    let rows: Vec<F> = examples.iter().flat_map(|e| e.pooled.iter().copied()).collect();
    let pooled = Mat::from_vec(examples.len(), am.d_model, rows);
    let mut t = Tape::new();
    let mut reg = Binding::new();
    let bound = am.bind(&mut t, false, &mut reg);
    let x = t.input(&pooled);
    let z = bound.extract_pooled(&mut t, x);
    t.mat(z)
}
