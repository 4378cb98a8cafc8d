//! The three adaptation regimes over a pretrained backbone: finetuning a
//! copy of its weights, tuning an input-dependent prompt on CTC alone, and
//! tuning the same prompt against an adversarial critic that estimates the
//! mutual information between the accent features of the clean and the
//! prompted input.
//!
//! Prompt regimes never touch the backbone or the accent module: their
//! fingerprints are taken at run start and re-checked at run end, and any
//! drift is a hard error, not a warning.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accent::AccentModule;
use crate::backbone::{ctc_step, shuffle_indices, Backbone};
use crate::checkpoint::ParamBag;
use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::ctc::{ctc_loss, ctc_loss_with_grad};
use crate::error::{Error, Result};
use crate::eval::model_wer;
use crate::mine::Mine;
use crate::nn::Binding;
use crate::optim::{AdamW, Grads};
use crate::prompt::PromptGenerator;
use crate::rng::rng_for;
use crate::scalar::{sc, Scalar};
use crate::synthcorpus::{Corpus, Utterance};
use crate::tape::Tape;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Finetune,
    PromptCtc,
    Intapt,
}

impl Regime {
    pub fn tag(self) -> &'static str {
        match self {
            Regime::Finetune => "finetune",
            Regime::PromptCtc => "prompt_ctc",
            Regime::Intapt => "intapt",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "finetune" => Some(Regime::Finetune),
            "prompt_ctc" => Some(Regime::PromptCtc),
            "intapt" => Some(Regime::Intapt),
            _ => None,
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// One held-out evaluation, recorded once per epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches.
    pub train_loss: f64,
    /// Mean critic estimate over the epoch's batches; absent outside the
    /// adversarial regime.
    pub mi_estimate: Option<f64>,
    pub dev_wer: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegimeStats {
    pub regime: Regime,
    pub history: Vec<EpochMetrics>,
    /// Training objective of every optimizer step, in order.
    pub loss_trace: Vec<f64>,
    /// Critic estimate of every batch, in order; empty outside the
    /// adversarial regime.
    pub mi_trace: Vec<f64>,
    pub chosen_epoch: usize,
    pub dev_wer: f64,
}

/// Everything a finished regime run leaves behind.
pub struct TrainedRegime<F> {
    pub regime: Regime,
    pub pg: Option<PromptGenerator<F>>,
    pub mine: Option<Mine<F>>,
    pub finetuned: Option<Backbone<F>>,
    /// Fingerprint of the frozen backbone the run was trained against.
    pub backbone_fingerprint: String,
    pub am_fingerprint: Option<String>,
    pub stats: RegimeStats,
}

/// CTC loss over the full prompted output. Prompt positions participate
/// like any other frames, so the model is free to emit blanks across them.
pub fn ctc_over_prompted_output<F: Scalar>(log_probs: &Mat<F>, target: &[usize]) -> Result<F> {
    ctc_loss(log_probs, target)
}

/// Per-utterance state precomputed once per run: the backbone and accent
/// module are frozen in the prompt regimes, so clean-pass taps and accent
/// features never change.
struct PromptItem<'a, F> {
    utt: &'a Utterance,
    feats: Mat<F>,
    /// Clean-pass hidden state at the tap layer, L × d_model.
    tap: Mat<F>,
    /// Frame count of the un-prompted input.
    rows: usize,
    /// Clean accent feature, present in the adversarial regime.
    z: Option<Vec<F>>,
}

fn prepare_items<'a, F: Scalar>(
    bb: &Backbone<F>,
    am: Option<&AccentModule<F>>,
    utts: &[&'a Utterance],
) -> Result<Vec<PromptItem<'a, F>>> {
    utts.iter()
        .map(|&u| {
            let feats = u.features_as::<F>();
            let out = bb.run(&feats)?;
            let tap = out.hidden[bb.cfg.tap_layer].clone();
            let z = am.map(|a| a.extract(&tap).into_data());
            Ok(PromptItem { utt: u, rows: feats.rows(), feats, tap, z })
        })
        .collect()
}

struct Adversary<'a, F> {
    am: &'a AccentModule<F>,
    mine: &'a mut Mine<F>,
    opt: &'a mut AdamW<F>,
}

struct BatchOutcome {
    loss: f64,
    mi: Option<f64>,
}

/// One generator step over a batch, with the critic's ascent steps folded
/// in when an adversary is present. The sub-step order within the batch is:
/// prompted forward, critic ascent on the detached accent features, then
/// generator descent on CTC plus the weighted estimate from the updated
/// critic.
fn prompt_batch_step<F: Scalar>(
    pg: &mut PromptGenerator<F>,
    opt_pg: &mut AdamW<F>,
    bb: &Backbone<F>,
    mut adversary: Option<Adversary<'_, F>>,
    batch: &[&PromptItem<'_, F>],
    cfg: &ExperimentConfig,
    seed: u64,
    step_index: u64,
    check_substeps: bool,
    regime: Regime,
) -> Result<BatchOutcome> {
    let tap_layer = cfg.backbone.tap_layer;
    let mut t = Tape::new();
    let mut reg = Binding::new();
    let mut frozen = Binding::new();
    let bpg = pg.bind(&mut t, true, &mut reg);
    let bbb = bb.bind(&mut t, false, &mut frozen);
    let bam = adversary.as_ref().map(|a| a.am.bind(&mut t, false, &mut frozen));

    let mut per_utt = Vec::with_capacity(batch.len());
    let mut zp_ids = Vec::with_capacity(batch.len());
    for item in batch {
        let h = t.input(&item.tap);
        let p = bpg.generate(&mut t, h);
        let f = t.input(&item.feats);
        let out = bbb.forward(&mut t, f, Some(p))?;
        let ctc_rows = if cfg.strip_prompt_frames {
            t.slice_rows(out.log_probs, cfg.prompt_len, item.rows)
        } else {
            out.log_probs
        };
        let lp = t.mat(ctc_rows);
        let (loss, grad) = ctc_loss_with_grad(&lp, &item.utt.transcript)?;
        per_utt.push(t.scalar_with_grad(ctc_rows, loss, grad.into_data()));
        if let Some(bam) = &bam {
            // Prompt rows steer the backbone but are not speech; the accent
            // feature of the prompted pass pools content rows only, matching
            // the clean-pass features it is compared against.
            let content = t.slice_rows(out.hidden[tap_layer], cfg.prompt_len, item.rows);
            zp_ids.push(bam.extract(&mut t, content));
        }
    }
    let stacked = t.concat_cols(&per_utt);
    let ctc_mean = t.mean_all(stacked);

    let mut mi = None;
    let loss_id = match adversary.as_mut() {
        None => ctc_mean,
        Some(adv) => {
            let b = batch.len();
            let d_acc = adv.am.d_acc;
            let zp_stack = t.concat_rows(&zp_ids);
            let zp_vals = t.mat(zp_stack);
            let z_mat = Mat::from_fn(b, d_acc, |i, j| {
                batch[i].z.as_ref().expect("accent features prepared for the adversarial regime")[j]
            });

            let pg_fp = check_substeps.then(|| pg.fingerprint());
            let mut rot_rng = rng_for("mi-rotation", seed, step_index);
            let mut last = 0.0;
            for _ in 0..cfg.alternation_ratio {
                let rot = rot_rng.gen_range(1..b);
                last = adv.mine.critic_step(adv.opt, &zp_vals, &z_mat, rot, cfg.grad_clip)?;
            }
            if let Some(fp) = pg_fp {
                assert_eq!(fp, pg.fingerprint(), "critic sub-step must not touch the generator");
            }
            mi = Some(last);

            let bmine = adv.mine.bind(&mut t, false, &mut frozen);
            let rot = rot_rng.gen_range(1..b);
            let z_in = t.input(&z_mat);
            let terms = bmine.dv_terms(&mut t, zp_stack, z_in, rot)?;
            let est = bmine.dv_estimate(&mut t, &terms);
            let weighted = t.scale(est, sc::<F>(cfg.lambda_mi));
            t.add(ctc_mean, weighted)
        }
    };

    let loss_value = t.scalar_value(loss_id).to_f64_lossy();
    if !loss_value.is_finite() {
        return Err(Error::StageFailed {
            stage: regime.tag().to_string(),
            reason: format!("non-finite loss at step {step_index}"),
        });
    }
    t.backward(loss_id);

    let mine_fp = match (&adversary, check_substeps) {
        (Some(adv), true) => Some(adv.mine.fingerprint()),
        _ => None,
    };
    let mut grads = Grads::extract(&t, &reg);
    grads.clip_global_norm(sc::<F>(cfg.grad_clip));
    opt_pg.begin_step();
    pg.visit_mut(&mut |name, p| {
        if let Some(g) = grads.get(name) {
            opt_pg.update(name, p, g);
        }
    });
    if let (Some(fp), Some(adv)) = (mine_fp, &adversary) {
        assert_eq!(fp, adv.mine.fingerprint(), "generator sub-step must not touch the critic");
    }
    Ok(BatchOutcome { loss: loss_value, mi })
}

/// Shared engine for the two prompt regimes; an accent module switches the
/// adversarial term on. With `lambda_mi` at zero the adversarial extras
/// contribute exact zeros to every generator gradient, so both regimes walk
/// identical trajectories under identical seeds.
fn run_prompt_regime<F: Scalar>(
    corpus: &Corpus,
    bb: &Backbone<F>,
    am: Option<&AccentModule<F>>,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<TrainedRegime<F>> {
    let regime = if am.is_some() { Regime::Intapt } else { Regime::PromptCtc };
    let mut pg = PromptGenerator::<F>::new(
        cfg.backbone.d_model,
        cfg.backbone.n_heads,
        cfg.prompt_d_ff,
        cfg.prompt_len,
        seed,
    );
    let ratio = pg.param_count() as f64 / bb.param_count() as f64;
    if ratio >= cfg.param_ratio_cap {
        return Err(Error::InvalidConfig(format!(
            "prompt generator holds {} parameters against the backbone's {} ({:.3}x, cap {})",
            pg.param_count(),
            bb.param_count(),
            ratio,
            cfg.param_ratio_cap
        )));
    }
    if let Some(a) = am {
        if a.d_model != cfg.backbone.d_model {
            return Err(Error::DimMismatch {
                what: "accent module input width".to_string(),
                got: a.d_model,
                want: cfg.backbone.d_model,
            });
        }
    }

    let bb_fp = bb.fingerprint();
    let am_fp = am.map(|a| a.fingerprint());

    let train = corpus.resolve(&corpus.splits.l2_train);
    let dev = corpus.resolve(&corpus.splits.l2_dev);
    let items = prepare_items(bb, am, &train)?;

    let mut opt_pg = AdamW::new(sc::<F>(cfg.lr_prompt), sc::<F>(cfg.weight_decay));
    let mut mine = am.map(|a| Mine::<F>::new(a.d_acc, cfg.mine_hidden, seed));
    let mut opt_mine = AdamW::new(sc::<F>(cfg.lr_mine), sc::<F>(cfg.weight_decay));

    let mut history = Vec::new();
    let mut loss_trace = Vec::new();
    let mut mi_trace = Vec::new();
    let mut best: Option<(f64, usize, ParamBag<F>, Option<ParamBag<F>>)> = None;
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs_regime {
        let mut order: Vec<usize> = (0..items.len()).collect();
        shuffle_indices(&mut order, "regime-order", seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut mi_sum = 0.0;
        let mut n_batches = 0usize;
        let mut n_mi = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // A pairing-based estimate needs at least two utterances; both
            // prompt regimes drop singleton tails so their batch sequences
            // stay identical.
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&PromptItem<F>> = chunk.iter().map(|&i| &items[i]).collect();
            let adversary = match (&mut mine, am) {
                (Some(m), Some(a)) => Some(Adversary { am: a, mine: m, opt: &mut opt_mine }),
                _ => None,
            };
            let check = cfg!(debug_assertions) && bi < 2;
            let out = prompt_batch_step(
                &mut pg, &mut opt_pg, bb, adversary, &batch, cfg, seed, step, check, regime,
            )?;
            loss_trace.push(out.loss);
            loss_sum += out.loss;
            n_batches += 1;
            if let Some(v) = out.mi {
                mi_trace.push(v);
                mi_sum += v;
                n_mi += 1;
            }
            step += 1;
        }
        let dev_wer = model_wer(bb, Some(&pg), cfg.strip_prompt_frames, &dev)?;
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            mi_estimate: (n_mi > 0).then(|| mi_sum / n_mi as f64),
            dev_wer,
        });
        if best.as_ref().map_or(true, |(w, _, _, _)| dev_wer < *w) {
            best = Some((dev_wer, epoch, pg.params(), mine.as_ref().map(|m| m.params())));
        }
    }

    let Some((dev_wer, chosen_epoch, pg_bag, mine_bag)) = best else {
        return Err(Error::StageFailed {
            stage: regime.tag().to_string(),
            reason: "no epochs ran".to_string(),
        });
    };
    pg.set_params(&pg_bag)?;
    if let (Some(m), Some(bag)) = (&mut mine, &mine_bag) {
        m.set_params(bag)?;
    }

    if bb.fingerprint() != bb_fp {
        return Err(Error::FrozenDrift(format!("backbone changed during {regime}")));
    }
    if let (Some(a), Some(fp)) = (am, &am_fp) {
        if a.fingerprint() != *fp {
            return Err(Error::FrozenDrift(format!("accent module changed during {regime}")));
        }
    }

    Ok(TrainedRegime {
        regime,
        pg: Some(pg),
        mine,
        finetuned: None,
        backbone_fingerprint: bb_fp,
        am_fingerprint: am_fp,
        stats: RegimeStats { regime, history, loss_trace, mi_trace, chosen_epoch, dev_wer },
    })
}

/// Prompt tuning on CTC alone; the backbone stays frozen.
pub fn train_prompt_ctc<F: Scalar>(
    corpus: &Corpus,
    bb: &Backbone<F>,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<TrainedRegime<F>> {
    run_prompt_regime(corpus, bb, None, cfg, seed)
}

/// Prompt tuning against the adversarial critic: each batch takes
/// `alternation_ratio` critic ascent steps on the mutual-information
/// estimate, then one generator descent step on CTC plus the weighted
/// estimate. Backbone and accent module stay frozen.
pub fn train_intapt<F: Scalar>(
    corpus: &Corpus,
    bb: &Backbone<F>,
    am: &AccentModule<F>,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<TrainedRegime<F>> {
    run_prompt_regime(corpus, bb, Some(am), cfg, seed)
}

/// Plain CTC finetuning of a copy of the backbone; the original is left
/// untouched.
pub fn train_finetune<F: Scalar>(
    corpus: &Corpus,
    bb: &Backbone<F>,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<TrainedRegime<F>> {
    let original_fp = bb.fingerprint();
    let mut model = bb.clone();
    let mut opt = AdamW::new(sc::<F>(cfg.lr_finetune), sc::<F>(cfg.weight_decay));
    let train = corpus.resolve(&corpus.splits.l2_train);
    let dev = corpus.resolve(&corpus.splits.l2_dev);

    let mut history = Vec::new();
    let mut loss_trace = Vec::new();
    let mut best: Option<(f64, usize, ParamBag<F>)> = None;
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs_regime {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_indices(&mut order, "regime-order", seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| train[i]).collect();
            let loss = ctc_step(&mut model, &mut opt, &batch, cfg.grad_clip, &[])?;
            if !loss.is_finite() {
                return Err(Error::StageFailed {
                    stage: "finetune".to_string(),
                    reason: format!("non-finite loss at step {step}"),
                });
            }
            loss_trace.push(loss);
            loss_sum += loss;
            n_batches += 1;
            step += 1;
        }
        let dev_wer = model_wer(&model, None, false, &dev)?;
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            mi_estimate: None,
            dev_wer,
        });
        if best.as_ref().map_or(true, |(w, _, _)| dev_wer < *w) {
            best = Some((dev_wer, epoch, model.params()));
        }
    }

    let Some((dev_wer, chosen_epoch, bag)) = best else {
        return Err(Error::StageFailed {
            stage: "finetune".to_string(),
            reason: "no epochs ran".to_string(),
        });
    };
    model.set_params(&bag)?;

    if bb.fingerprint() != original_fp {
        return Err(Error::FrozenDrift("original backbone changed during finetune".to_string()));
    }

    Ok(TrainedRegime {
        regime: Regime::Finetune,
        pg: None,
        mine: None,
        finetuned: Some(model),
        backbone_fingerprint: original_fp,
        am_fingerprint: None,
        stats: RegimeStats {
            regime: Regime::Finetune,
            history,
            loss_trace,
            mi_trace: Vec::new(),
            chosen_epoch,
            dev_wer,
        },
    })
}

#[derive(Serialize, Deserialize)]
struct WeightsFile<F> {
    schema_version: u32,
    regime: Regime,
    backbone_fingerprint: String,
    am_fingerprint: Option<String>,
    stats: RegimeStats,
    pg: Option<ParamBag<F>>,
    mine: Option<ParamBag<F>>,
    finetuned: Option<ParamBag<F>>,
}

#[derive(Serialize, Deserialize)]
struct FingerprintsFile {
    backbone: String,
    am: Option<String>,
    pg: Option<String>,
    mine: Option<String>,
    finetuned: Option<String>,
}

impl<F: Scalar> TrainedRegime<F> {
    /// Writes the run directory: config snapshot, weights, one metrics line
    /// per held-out evaluation, and the fingerprints of every participant.
    pub fn save(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
        let weights = WeightsFile {
            schema_version: SCHEMA_VERSION,
            regime: self.regime,
            backbone_fingerprint: self.backbone_fingerprint.clone(),
            am_fingerprint: self.am_fingerprint.clone(),
            stats: self.stats.clone(),
            pg: self.pg.as_ref().map(|p| p.params()),
            mine: self.mine.as_ref().map(|m| m.params()),
            finetuned: self.finetuned.as_ref().map(|b| b.params()),
        };
        std::fs::write(dir.join("weights.json"), serde_json::to_string(&weights)?)?;
        let mut lines = String::new();
        for m in &self.stats.history {
            lines.push_str(&serde_json::to_string(m)?);
            lines.push('\n');
        }
        std::fs::write(dir.join("metrics.jsonl"), lines)?;
        let fps = FingerprintsFile {
            backbone: self.backbone_fingerprint.clone(),
            am: self.am_fingerprint.clone(),
            pg: self.pg.as_ref().map(|p| p.fingerprint()),
            mine: self.mine.as_ref().map(|m| m.fingerprint()),
            finetuned: self.finetuned.as_ref().map(|b| b.fingerprint()),
        };
        std::fs::write(dir.join("fingerprints.json"), serde_json::to_string_pretty(&fps)?)?;
        Ok(())
    }

    /// Reads a run directory back, reconstructing models from the config
    /// snapshot and verifying every stored fingerprint.
    pub fn load(dir: &Path) -> Result<(Self, ExperimentConfig)> {
        let cfg: ExperimentConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
        let w: WeightsFile<F> =
            serde_json::from_str(&std::fs::read_to_string(dir.join("weights.json"))?)?;
        if w.schema_version != SCHEMA_VERSION {
            return Err(Error::BadCheckpoint(format!(
                "schema version {} (expected {})",
                w.schema_version, SCHEMA_VERSION
            )));
        }
        let fps: FingerprintsFile =
            serde_json::from_str(&std::fs::read_to_string(dir.join("fingerprints.json"))?)?;

        let pg = w
            .pg
            .as_ref()
            .map(|bag| -> Result<PromptGenerator<F>> {
                let mut p = PromptGenerator::<F>::new(
                    cfg.backbone.d_model,
                    cfg.backbone.n_heads,
                    cfg.prompt_d_ff,
                    cfg.prompt_len,
                    0,
                );
                p.set_params(bag)?;
                verify_fingerprint("prompt generator", &p.fingerprint(), fps.pg.as_deref())?;
                Ok(p)
            })
            .transpose()?;
        let mine = w
            .mine
            .as_ref()
            .map(|bag| -> Result<Mine<F>> {
                let mut m = Mine::<F>::new(cfg.d_acc, cfg.mine_hidden, 0);
                m.set_params(bag)?;
                verify_fingerprint("critic", &m.fingerprint(), fps.mine.as_deref())?;
                Ok(m)
            })
            .transpose()?;
        let finetuned = w
            .finetuned
            .as_ref()
            .map(|bag| -> Result<Backbone<F>> {
                let mut b = Backbone::<F>::new(&cfg.backbone, 0);
                b.set_params(bag)?;
                verify_fingerprint("finetuned backbone", &b.fingerprint(), fps.finetuned.as_deref())?;
                Ok(b)
            })
            .transpose()?;

        Ok((
            TrainedRegime {
                regime: w.regime,
                pg,
                mine,
                finetuned,
                backbone_fingerprint: w.backbone_fingerprint,
                am_fingerprint: w.am_fingerprint,
                stats: w.stats,
            },
            cfg,
        ))
    }
}

fn verify_fingerprint(what: &str, actual: &str, stored: Option<&str>) -> Result<()> {
    match stored {
        Some(fp) if fp == actual => Ok(()),
        Some(fp) => Err(Error::BadCheckpoint(format!(
            "{what} fingerprint mismatch: stored {fp}, recomputed {actual}"
        ))),
        None => Err(Error::BadCheckpoint(format!("{what} weights present but fingerprint missing"))),
    }
}
