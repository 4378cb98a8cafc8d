//! Speech-recognition backbone: input projection, learned positional
//! embeddings, a pre-norm transformer encoder stack, and a per-frame CTC
//! head emitting log-probabilities over the blank-extended vocabulary.
//!
//! A prompt is a block of rows injected at the embedding level, ahead of
//! the projected input frames; it never passes through the input
//! projection. Positions are numbered absolutely over the combined
//! sequence, and the CTC head scores every row, prompt rows included.
//! After pretraining the backbone is frozen and identified by a parameter
//! fingerprint; downstream stages verify the fingerprint to prove they
//! never touched it.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{FingerprintHasher, ParamBag, ParamRestorer};
use crate::config::{BackboneConfig, ExperimentConfig, SCHEMA_VERSION};
use crate::ctc::{ctc_loss_with_grad, greedy_decode, wer};
use crate::error::{Error, Result};
use crate::nn::{Binding, BoundEncoderLayer, BoundLayerNorm, BoundLinear, EncoderLayer, LayerNormP, Linear, VisitFn, VisitMutFn};
use crate::optim::{AdamW, Grads};
use crate::rng::{normal, rng_for};
use crate::scalar::{sc, Scalar};
use crate::synthcorpus::{Corpus, Utterance};
use crate::tape::{BufId, Tape};
use crate::tensor::Mat;

#[derive(Clone)]
pub struct Backbone<F> {
    pub cfg: BackboneConfig,
    in_proj: Linear<F>,
    /// max_len × d_model table of learned positional embeddings.
    pos: Mat<F>,
    layers: Vec<EncoderLayer<F>>,
    final_ln: LayerNormP<F>,
    head: Linear<F>,
}

pub struct BoundBackbone {
    in_proj: BoundLinear,
    pos: BufId,
    layers: Vec<BoundEncoderLayer>,
    final_ln: BoundLayerNorm,
    head: BoundLinear,
    d_feat: usize,
    d_model: usize,
    max_len: usize,
}

/// Tape ids produced by one forward pass.
pub struct ForwardOut {
    /// (L′+L) × (vocab+1) log-probabilities.
    pub log_probs: BufId,
    /// Output of every encoder layer over the full sequence, in order.
    pub hidden: Vec<BufId>,
}

/// Materialized forward pass for evaluation.
pub struct BackboneOutput<F> {
    pub log_probs: Mat<F>,
    pub hidden: Vec<Mat<F>>,
}

impl<F: Scalar> Backbone<F> {
    pub fn new(cfg: &BackboneConfig, seed: u64) -> Self {
        let mut rng = rng_for("backbone-init", seed, 0);
        let pos_scale = sc::<F>(0.02);
        Backbone {
            cfg: cfg.clone(),
            in_proj: Linear::new(&mut rng, cfg.d_feat, cfg.d_model),
            pos: Mat::from_fn(cfg.max_len, cfg.d_model, |_, _| normal::<F>(&mut rng) * pos_scale),
            layers: (0..cfg.n_layers)
                .map(|_| EncoderLayer::new(&mut rng, cfg.d_model, cfg.n_heads, cfg.d_ff))
                .collect(),
            final_ln: LayerNormP::new(cfg.d_model),
            head: Linear::new(&mut rng, cfg.d_model, cfg.vocab_size + 1),
        }
    }

    pub fn bind(&self, t: &mut Tape<F>, trainable: bool, reg: &mut Binding) -> BoundBackbone {
        let pos = t.leaf(&self.pos, trainable);
        reg.push("bb.pos".to_string(), pos);
        BoundBackbone {
            in_proj: self.in_proj.bind(t, "bb.in", trainable, reg),
            pos,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.bind(t, &format!("bb.l{i}"), trainable, reg))
                .collect(),
            final_ln: self.final_ln.bind(t, "bb.ln", trainable, reg),
            head: self.head.bind(t, "bb.head", trainable, reg),
            d_feat: self.cfg.d_feat,
            d_model: self.cfg.d_model,
            max_len: self.cfg.max_len,
        }
    }

    pub fn visit(&self, f: VisitFn<F>) {
        f("bb.pos", &self.pos);
        self.in_proj.visit("bb.in", f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("bb.l{i}"), f);
        }
        self.final_ln.visit("bb.ln", f);
        self.head.visit("bb.head", f);
    }

    pub fn visit_mut(&mut self, f: VisitMutFn<F>) {
        f("bb.pos", &mut self.pos);
        self.in_proj.visit_mut("bb.in", f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("bb.l{i}"), f);
        }
        self.final_ln.visit_mut("bb.ln", f);
        self.head.visit_mut("bb.head", f);
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

    /// Evaluation-only forward pass on a throwaway tape.
    pub fn run(&self, features: &Mat<F>) -> Result<BackboneOutput<F>> {
        self.run_inner(None, features)
    }

    /// Evaluation-only forward pass with a prompt block ahead of the input.
    pub fn run_with_prompt(&self, prompt: &Mat<F>, features: &Mat<F>) -> Result<BackboneOutput<F>> {
        self.run_inner(Some(prompt), features)
    }

    fn run_inner(&self, prompt: Option<&Mat<F>>, features: &Mat<F>) -> Result<BackboneOutput<F>> {
        let mut t = Tape::new();
        let mut reg = Binding::new();
        let bound = self.bind(&mut t, false, &mut reg);
        let feats = t.input(features);
        let prompt = prompt.map(|p| t.input(p));
        let out = bound.forward(&mut t, feats, prompt)?;
        Ok(BackboneOutput {
            log_probs: t.mat(out.log_probs),
            hidden: out.hidden.iter().map(|&h| t.mat(h)).collect(),
        })
    }

    /// Greedy-decoded transcript for one utterance.
    pub fn transcribe(&self, features: &Mat<F>) -> Result<Vec<usize>> {
        Ok(greedy_decode(&self.run(features)?.log_probs))
    }

    pub fn save(&self, path: &Path, stats: &PretrainStats) -> Result<()> {
        let cp = BackboneCheckpoint {
            schema_version: SCHEMA_VERSION,
            config: self.cfg.clone(),
            params: self.params(),
            fingerprint: self.fingerprint(),
            stats: stats.clone(),
        };
        std::fs::write(path, serde_json::to_string(&cp)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, PretrainStats)> {
        let cp: BackboneCheckpoint<F> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if cp.schema_version != SCHEMA_VERSION {
            return Err(Error::BadCheckpoint(format!(
                "schema version {} (expected {})",
                cp.schema_version, SCHEMA_VERSION
            )));
        }
        let mut model = Backbone::new(&cp.config, 0);
        model.set_params(&cp.params)?;
        let actual = model.fingerprint();
        if actual != cp.fingerprint {
            return Err(Error::BadCheckpoint(format!(
                "fingerprint mismatch: stored {}, recomputed {}",
                cp.fingerprint, actual
            )));
        }
        Ok((model, cp.stats))
    }
}

impl BoundBackbone {
    /// Runs the encoder over `prompt ++ in_proj(features)` with absolute
    /// positional embeddings. The prompt enters at the embedding level.
    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        features: BufId,
        prompt: Option<BufId>,
    ) -> Result<ForwardOut> {
        let (l_in, d_in) = t.shape(features);
        if d_in != self.d_feat {
            return Err(Error::DimMismatch {
                what: "input feature width".to_string(),
                got: d_in,
                want: self.d_feat,
            });
        }
        let prompt_len = match prompt {
            Some(p) => {
                let (lp, dp) = t.shape(p);
                if dp != self.d_model {
                    return Err(Error::DimMismatch {
                        what: "prompt width".to_string(),
                        got: dp,
                        want: self.d_model,
                    });
                }
                lp
            }
            None => 0,
        };
        let total = prompt_len + l_in;
        if total > self.max_len {
            return Err(Error::InputTooLong { len: total, max: self.max_len });
        }

        let emb = self.in_proj.apply(t, features);
        let seq = match prompt {
            Some(p) if prompt_len > 0 => t.concat_rows(&[p, emb]),
            _ => emb,
        };
        let pos = t.slice_rows(self.pos, 0, total);
        let mut x = t.add(seq, pos);
        let mut hidden = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.apply(t, x);
            hidden.push(x);
        }
        let normed = self.final_ln.apply(t, x);
        let logits = self.head.apply(t, normed);
        let log_probs = t.log_softmax_rows(logits);
        Ok(ForwardOut { log_probs, hidden })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainStats {
    /// (mean train CTC loss, selection score) per epoch, where the score is
    /// the worse of plain held-out WER and held-out WER behind a zero prompt
    /// of `prompt_len` rows.
    pub history: Vec<(f64, f64)>,
    pub chosen_epoch: usize,
    /// Plain held-out WER of the selected epoch.
    pub dev_wer: f64,
}

#[derive(Serialize, Deserialize)]
struct BackboneCheckpoint<F> {
    schema_version: u32,
    config: BackboneConfig,
    params: ParamBag<F>,
    fingerprint: String,
    stats: PretrainStats,
}

/// Held-out fraction of the pretraining split: every tenth utterance.
fn pretrain_partition(ids: &[String]) -> (Vec<String>, Vec<String>) {
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        if i % 10 == 9 {
            dev.push(id.clone());
        } else {
            train.push(id.clone());
        }
    }
    (train, dev)
}

/// Mean greedy-decode WER of `model` over `utts`, without prompts.
pub fn backbone_wer<F: Scalar>(model: &Backbone<F>, utts: &[&Utterance]) -> Result<f64> {
    let mut total = 0.0;
    for u in utts {
        let hyp = model.transcribe(&u.features_as::<F>())?;
        total += wer(&u.transcript, &hyp)?;
    }
    Ok(total / utts.len() as f64)
}

/// Mean greedy-decode WER with `pad` zero-content prompt rows prepended:
/// the backbone's competence at the exact offset deployed prompts use.
fn shifted_wer<F: Scalar>(model: &Backbone<F>, utts: &[&Utterance], pad: usize) -> Result<f64> {
    if pad == 0 {
        return backbone_wer(model, utts);
    }
    let zeros = Mat::zeros(pad, model.cfg.d_model);
    let mut total = 0.0;
    for u in utts {
        let out = model.run_with_prompt(&zeros, &u.features_as::<F>())?;
        total += wer(&u.transcript, &greedy_decode(&out.log_probs))?;
    }
    Ok(total / utts.len() as f64)
}

/// One optimizer step over a batch: mean per-utterance CTC loss, full
/// backward pass, global-norm clipping, AdamW update. Returns the loss.
/// `pads[i]` rows of zero-content prompt are prepended to utterance `i`,
/// teaching the model to read shifted content and emit blanks over the pad.
pub(crate) fn ctc_step<F: Scalar>(
    model: &mut Backbone<F>,
    opt: &mut AdamW<F>,
    batch: &[&Utterance],
    grad_clip: f64,
    pads: &[usize],
) -> Result<f64> {
    let d_model = model.cfg.d_model;
    let mut t = Tape::new();
    let mut reg = Binding::new();
    let bound = model.bind(&mut t, true, &mut reg);
    let mut per_utt = Vec::with_capacity(batch.len());
    for (i, u) in batch.iter().enumerate() {
        let feats = t.input(&u.features_as::<F>());
        let pad = pads.get(i).copied().unwrap_or(0);
        let prompt = (pad > 0).then(|| t.input(&Mat::zeros(pad, d_model)));
        let out = bound.forward(&mut t, feats, prompt)?;
        let lp = t.mat(out.log_probs);
        let (loss, grad) = ctc_loss_with_grad(&lp, &u.transcript)?;
        per_utt.push(t.scalar_with_grad(out.log_probs, loss, grad.into_data()));
    }
    let stacked = t.concat_cols(&per_utt);
    let loss = t.mean_all(stacked);
    let loss_value = t.scalar_value(loss).to_f64_lossy();
    t.backward(loss);

    let mut grads = Grads::extract(&t, &reg);
    grads.clip_global_norm(sc::<F>(grad_clip));
    opt.begin_step();
    model.visit_mut(&mut |name, p| {
        if let Some(g) = grads.get(name) {
            opt.update(name, p, g);
        }
    });
    Ok(loss_value)
}

/// Trains a fresh backbone on the native-accent pretraining split until its
/// held-out WER clears 0.10, keeping the best-scoring epoch. Fails with the
/// final WER if the threshold is never reached.
///
/// Half of each batch trains behind a zero-content prefix of `prompt_len`
/// rows, and epoch selection scores the worse of plain and prefixed held-out
/// WER, so the frozen model reads content identically with or without a
/// prompt in those positions.
pub fn pretrain<F: Scalar>(corpus: &Corpus, cfg: &ExperimentConfig, seed: u64) -> Result<(Backbone<F>, PretrainStats)> {
    const DEV_WER_THRESHOLD: f64 = 0.10;

    let mut model = Backbone::<F>::new(&cfg.backbone, seed);
    let mut opt = AdamW::new(sc::<F>(cfg.lr_pretrain), sc::<F>(cfg.weight_decay));
    let (train_ids, dev_ids) = pretrain_partition(&corpus.splits.l1_pretrain);
    let train = corpus.resolve(&train_ids);
    let dev = corpus.resolve(&dev_ids);

    let mut history = Vec::new();
    let mut best: Option<(f64, f64, f64, usize, ParamBag<F>)> = None;
    for epoch in 0..cfg.epochs_pretrain {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_indices(&mut order, "pretrain-order", seed, epoch as u64);
        let mut shift_rng = rng_for("pretrain-shift", seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| train[i]).collect();
            // Half the stream keeps the plain task; the rest trains behind the
            // exact offset deployed prompts occupy, so a prompted pass over
            // clean speech costs nothing.
            let pads: Vec<usize> = batch
                .iter()
                .map(|_| if shift_rng.gen_bool(0.5) { 0 } else { cfg.prompt_len })
                .collect();
            loss_sum += ctc_step(&mut model, &mut opt, &batch, cfg.grad_clip, &pads)?;
            n_batches += 1;
        }
        let loss = loss_sum / n_batches as f64;
        let plain = backbone_wer(&model, &dev)?;
        let score = plain.max(shifted_wer(&model, &dev, cfg.prompt_len)?);
        history.push((loss, score));
        // Ties on held-out score go to the lower train loss: a zero greedy
        // WER is reachable long before the model is confident, and the
        // sharper epoch is the better frozen foundation.
        if best.as_ref().map_or(true, |&(s, l, _, _, _)| score < s || (score == s && loss < l)) {
            best = Some((score, loss, plain, epoch, model.params()));
        }
    }

    let Some((_, _, dev_wer, chosen_epoch, bag)) = best else {
        return Err(Error::StageFailed {
            stage: "pretrain".to_string(),
            reason: "no epochs ran".to_string(),
        });
    };
    model.set_params(&bag)?;
    if dev_wer >= DEV_WER_THRESHOLD {
        return Err(Error::StageFailed {
            stage: "pretrain".to_string(),
            reason: format!("held-out WER {dev_wer:.4} never fell below {DEV_WER_THRESHOLD}"),
        });
    }
    Ok((model, PretrainStats { history, chosen_epoch, dev_wer }))
}

/// Fisher-Yates shuffle driven by a stage-derived stream.
pub fn shuffle_indices(order: &mut [usize], stage: &str, seed: u64, index: u64) {
    use rand::seq::SliceRandom;
    let mut rng = rng_for(stage, seed, index);
    order.shuffle(&mut rng);
}
