mod common;

use std::sync::OnceLock;

use intapt_core::accent::{train_am, AccentModule};
use intapt_core::backbone::{pretrain, Backbone};
use intapt_core::config::ExperimentConfig;
use intapt_core::ctc::{ctc_loss_oracle, ORACLE_MAX_FRAMES};
use intapt_core::error::Error;
use intapt_core::synthcorpus::Corpus;
use intapt_core::tensor::Mat;
use intapt_core::trainer::{
    ctc_over_prompted_output, train_finetune, train_intapt, train_prompt_ctc, Regime,
    TrainedRegime,
};

use common::tiny_corpus;

struct Fixture {
    cfg: ExperimentConfig,
    corpus: Corpus,
    bb: Backbone<f64>,
    am: AccentModule<f64>,
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let (cfg, corpus) = tiny_corpus();
        let (bb, _) = pretrain::<f64>(&corpus, &cfg, cfg.seeds[0]).expect("pretraining converges");
        let (am, _) = train_am(&corpus, &bb, &cfg, cfg.seeds[0]).expect("accent module trains");
        Fixture { cfg, corpus, bb, am }
    })
}

/// Few epochs: regime mechanics, not model quality.
fn short_cfg(fix: &Fixture) -> ExperimentConfig {
    let mut cfg = fix.cfg.clone();
    cfg.epochs_regime = 3;
    cfg
}

#[test]
fn regime_tags_round_trip() {
    for r in [Regime::Finetune, Regime::PromptCtc, Regime::Intapt] {
        assert_eq!(Regime::from_tag(r.tag()), Some(r));
        assert_eq!(format!("{r}"), r.tag());
    }
    assert_eq!(Regime::from_tag("bogus"), None);
}

#[test]
fn zero_weight_adversary_matches_plain_prompt_training() {
    let fix = fixture();
    let mut cfg = short_cfg(fix);
    cfg.lambda_mi = 0.0;
    let seed = 21;

    let pc = train_prompt_ctc(&fix.corpus, &fix.bb, &cfg, seed).unwrap();
    let ia = train_intapt(&fix.corpus, &fix.bb, &fix.am, &cfg, seed).unwrap();

    assert_eq!(pc.stats.loss_trace.len(), ia.stats.loss_trace.len());
    for (a, b) in pc.stats.loss_trace.iter().zip(&ia.stats.loss_trace) {
        assert_eq!(a, b, "objective diverged: {a} vs {b}");
    }
    let pg_pc = pc.pg.as_ref().unwrap();
    let pg_ia = ia.pg.as_ref().unwrap();
    assert_eq!(pg_pc.fingerprint(), pg_ia.fingerprint());

    // the critic still trains in the adversarial run, it just has no say
    assert!(pc.mine.is_none());
    assert!(ia.mine.is_some());
}

#[test]
fn prompt_regimes_leave_backbone_and_accent_module_untouched() {
    let fix = fixture();
    let cfg = short_cfg(fix);
    let bb_fp = fix.bb.fingerprint();
    let am_fp = fix.am.fingerprint();

    let pc = train_prompt_ctc(&fix.corpus, &fix.bb, &cfg, 22).unwrap();
    assert_eq!(pc.backbone_fingerprint, bb_fp);
    assert_eq!(pc.am_fingerprint, None);
    assert_eq!(fix.bb.fingerprint(), bb_fp);

    let ia = train_intapt(&fix.corpus, &fix.bb, &fix.am, &cfg, 22).unwrap();
    assert_eq!(ia.backbone_fingerprint, bb_fp);
    assert_eq!(ia.am_fingerprint.as_deref(), Some(am_fp.as_str()));
    assert_eq!(fix.bb.fingerprint(), bb_fp);
    assert_eq!(fix.am.fingerprint(), am_fp);
}

#[test]
fn finetune_changes_a_copy_and_not_the_original() {
    let fix = fixture();
    let cfg = short_cfg(fix);
    let before = fix.bb.fingerprint();
    let ft = train_finetune(&fix.corpus, &fix.bb, &cfg, 23).unwrap();
    assert_eq!(fix.bb.fingerprint(), before);
    let tuned = ft.finetuned.as_ref().unwrap();
    assert_ne!(tuned.fingerprint(), before);
    assert!(ft.pg.is_none());
    assert!(ft.mine.is_none());
}

#[test]
fn identical_seeds_reproduce_loss_traces() {
    let fix = fixture();
    let cfg = short_cfg(fix);
    let a = train_intapt(&fix.corpus, &fix.bb, &fix.am, &cfg, 24).unwrap();
    let b = train_intapt(&fix.corpus, &fix.bb, &fix.am, &cfg, 24).unwrap();
    assert_eq!(a.stats.loss_trace.len(), b.stats.loss_trace.len());
    for (x, y) in a.stats.loss_trace.iter().zip(&b.stats.loss_trace).take(100) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
    assert_eq!(
        a.pg.as_ref().unwrap().fingerprint(),
        b.pg.as_ref().unwrap().fingerprint()
    );
}

#[test]
fn model_selection_picks_the_dev_minimum() {
    let fix = fixture();
    let cfg = short_cfg(fix);
    let pc = train_prompt_ctc(&fix.corpus, &fix.bb, &cfg, 25).unwrap();
    let best = pc
        .stats
        .history
        .iter()
        .map(|m| m.dev_wer)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(pc.stats.dev_wer, best);
    assert_eq!(pc.stats.history[pc.stats.chosen_epoch].dev_wer, best);
}

#[test]
fn epoch_metrics_track_the_adversary_only_when_present() {
    let fix = fixture();
    let cfg = short_cfg(fix);
    let pc = train_prompt_ctc(&fix.corpus, &fix.bb, &cfg, 26).unwrap();
    assert!(pc.stats.history.iter().all(|m| m.mi_estimate.is_none()));
    assert!(pc.stats.mi_trace.is_empty());

    let ia = train_intapt(&fix.corpus, &fix.bb, &fix.am, &cfg, 26).unwrap();
    assert!(ia.stats.history.iter().all(|m| m.mi_estimate.is_some()));
    assert!(!ia.stats.mi_trace.is_empty());
    assert_eq!(ia.stats.history.len(), cfg.epochs_regime);
}

#[test]
fn prompted_ctc_loss_agrees_with_the_oracle() {
    let fix = fixture();
    let prompt_rows = 3;
    let content = ORACLE_MAX_FRAMES - prompt_rows;
    let x = Mat::from_fn(content, fix.bb.cfg.d_feat, |i, j| ((i * 5 + j) as f64 * 0.61).sin());
    let prompt =
        Mat::from_fn(prompt_rows, fix.bb.cfg.d_model, |i, j| ((i + j) as f64 * 0.09).cos() * 0.1);
    let out = fix.bb.run_with_prompt(&prompt, &x).unwrap();
    for target in [vec![1], vec![2, 3], vec![1, 1]] {
        let fast = ctc_over_prompted_output(&out.log_probs, &target).unwrap();
        let exact = ctc_loss_oracle(&out.log_probs, &target).unwrap();
        assert!((fast - exact).abs() < 1e-9, "{fast} vs {exact}");
    }
}

#[test]
fn oversized_generator_is_rejected() {
    let fix = fixture();
    let mut cfg = short_cfg(fix);
    cfg.param_ratio_cap = 1e-6;
    match train_prompt_ctc(&fix.corpus, &fix.bb, &cfg, 27) {
        Err(Error::InvalidConfig(msg)) => assert!(msg.contains("cap"), "message: {msg}"),
        Err(other) => panic!("expected config error, got {other}"),
        Ok(_) => panic!("an oversized generator must be rejected"),
    }
}

#[test]
fn run_directory_round_trips_and_detects_tampering() {
    let fix = fixture();
    let cfg = short_cfg(fix);
    let ia = train_intapt(&fix.corpus, &fix.bb, &fix.am, &cfg, 28).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("intapt");
    ia.save(&run, &cfg).unwrap();

    let (loaded, loaded_cfg) = TrainedRegime::<f64>::load(&run).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(loaded.regime, Regime::Intapt);
    assert_eq!(loaded.backbone_fingerprint, ia.backbone_fingerprint);
    assert_eq!(
        loaded.pg.as_ref().unwrap().fingerprint(),
        ia.pg.as_ref().unwrap().fingerprint()
    );
    assert_eq!(
        loaded.mine.as_ref().unwrap().fingerprint(),
        ia.mine.as_ref().unwrap().fingerprint()
    );
    assert_eq!(loaded.stats.loss_trace, ia.stats.loss_trace);

    let fp_path = run.join("fingerprints.json");
    let tampered = std::fs::read_to_string(&fp_path)
        .unwrap()
        .replacen(&ia.pg.as_ref().unwrap().fingerprint()[..8], "deadbeef", 1);
    std::fs::write(&fp_path, tampered).unwrap();
    match TrainedRegime::<f64>::load(&run) {
        Err(Error::BadCheckpoint(msg)) => assert!(msg.contains("mismatch"), "message: {msg}"),
        Err(other) => panic!("expected checkpoint rejection, got {other}"),
        Ok(_) => panic!("a tampered checkpoint must not load"),
    }
}

#[test]
fn divergent_run_fails_loudly() {
    let fix = fixture();
    let mut cfg = short_cfg(fix);
    cfg.epochs_regime = 1;
    // blows past the layer norms' ability to renormalize; the saturated
    // log-probs then zero out every valid alignment path (or, on subtler
    // routes, trip the non-finite loss guard)
    cfg.lr_prompt = 1e300;
    match train_prompt_ctc(&fix.corpus, &fix.bb, &cfg, 29) {
        Ok(_) => panic!("a divergent run must not report success"),
        Err(Error::CtcInfeasible { .. }) => {}
        Err(Error::StageFailed { reason, .. }) => {
            assert!(reason.contains("non-finite"), "reason: {reason}")
        }
        Err(other) => panic!("expected a loud failure, got {other}"),
    }
}
