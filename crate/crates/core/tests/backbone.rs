mod common;

use intapt_core::backbone::{backbone_wer, pretrain, Backbone};
use intapt_core::error::Error;
use intapt_core::nn::Binding;
use intapt_core::tape::Tape;
use intapt_core::tensor::Mat;

use common::{tiny_cfg, tiny_corpus};

fn features(rows: usize, cols: usize, salt: u64) -> Mat<f64> {
    Mat::from_fn(rows, cols, |i, j| ((i * cols + j + salt as usize) as f64 * 0.7).sin())
}

fn fresh() -> Backbone<f64> {
    Backbone::new(&tiny_cfg().backbone, 3)
}

#[test]
fn empty_prompt_is_exactly_the_plain_forward() {
    let bb = fresh();
    let x = features(9, bb.cfg.d_feat, 0);
    let plain = bb.run(&x).unwrap();
    let prompted = bb.run_with_prompt(&Mat::zeros(0, bb.cfg.d_model), &x).unwrap();
    assert_eq!(plain.log_probs, prompted.log_probs);
    assert_eq!(plain.hidden, prompted.hidden);
}

#[test]
fn forward_shapes_and_normalization() {
    let bb = fresh();
    let x = features(9, bb.cfg.d_feat, 1);
    let out = bb.run(&x).unwrap();
    assert_eq!(out.log_probs.rows(), 9);
    assert_eq!(out.log_probs.cols(), bb.cfg.vocab_size + 1);
    assert_eq!(out.hidden.len(), bb.cfg.n_layers);
    for h in &out.hidden {
        assert_eq!((h.rows(), h.cols()), (9, bb.cfg.d_model));
    }
    for i in 0..out.log_probs.rows() {
        let total: f64 = out.log_probs.row(i).iter().map(|lp| lp.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12, "row {i} sums to {total}");
    }
}

#[test]
fn nonzero_prompt_changes_the_output() {
    let bb = fresh();
    let x = features(9, bb.cfg.d_feat, 2);
    let plain = bb.run(&x).unwrap();
    let prompt = features(4, bb.cfg.d_model, 3);
    let prompted = bb.run_with_prompt(&prompt, &x).unwrap();
    assert_eq!(prompted.log_probs.rows(), 4 + 9);
    // compare the content rows only; prompt rows are extra
    let mut max_diff = 0.0f64;
    for i in 0..9 {
        for j in 0..=bb.cfg.vocab_size {
            max_diff = max_diff.max((prompted.log_probs[(4 + i, j)] - plain.log_probs[(i, j)]).abs());
        }
    }
    assert!(max_diff > 1e-6, "prompt had no effect (max diff {max_diff})");
}

#[test]
fn overlong_input_is_rejected() {
    let bb = fresh();
    let too_long = features(bb.cfg.max_len + 1, bb.cfg.d_feat, 4);
    match bb.run(&too_long) {
        Err(Error::InputTooLong { len, max }) => {
            assert_eq!(len, bb.cfg.max_len + 1);
            assert_eq!(max, bb.cfg.max_len);
        }
        other => panic!("expected InputTooLong, got {:?}", other.map(|_| ())),
    }

    // a prompt that pushes the combined length past the table also fails
    let x = features(bb.cfg.max_len - 2, bb.cfg.d_feat, 5);
    let prompt = features(3, bb.cfg.d_model, 6);
    assert!(matches!(
        bb.run_with_prompt(&prompt, &x),
        Err(Error::InputTooLong { .. })
    ));
}

#[test]
fn width_mismatches_are_rejected() {
    let bb = fresh();
    let bad_feat = features(5, bb.cfg.d_feat + 1, 7);
    assert!(matches!(bb.run(&bad_feat), Err(Error::DimMismatch { .. })));

    let x = features(5, bb.cfg.d_feat, 8);
    let bad_prompt = features(2, bb.cfg.d_model - 1, 9);
    assert!(matches!(
        bb.run_with_prompt(&bad_prompt, &x),
        Err(Error::DimMismatch { .. })
    ));
}

#[test]
fn construction_is_deterministic_in_the_seed() {
    let cfg = tiny_cfg().backbone;
    let a = Backbone::<f64>::new(&cfg, 3);
    let b = Backbone::<f64>::new(&cfg, 3);
    let c = Backbone::<f64>::new(&cfg, 4);
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn fingerprint_flips_on_a_one_ulp_nudge() {
    let mut bb = fresh();
    let before = bb.fingerprint();
    let mut original = 0.0f64;
    bb.visit_mut(&mut |name, m| {
        if name == "bb.l0.ff1.w" {
            original = m[(0, 0)];
            m[(0, 0)] = f64::from_bits(original.to_bits() + 1);
        }
    });
    assert_ne!(before, bb.fingerprint());
    bb.visit_mut(&mut |name, m| {
        if name == "bb.l0.ff1.w" {
            m[(0, 0)] = original;
        }
    });
    assert_eq!(before, bb.fingerprint());
}

#[test]
fn checkpoint_round_trip_preserves_fingerprint_and_outputs() {
    let bb = fresh();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("backbone.json");
    let stats = intapt_core::backbone::PretrainStats {
        history: vec![(2.0, 0.5), (0.4, 0.05)],
        chosen_epoch: 1,
        dev_wer: 0.05,
    };
    bb.save(&path, &stats).unwrap();

    let (loaded, loaded_stats) = Backbone::<f64>::load(&path).unwrap();
    assert_eq!(bb.fingerprint(), loaded.fingerprint());
    assert_eq!(loaded_stats.chosen_epoch, 1);

    let x = features(7, bb.cfg.d_feat, 10);
    assert_eq!(bb.run(&x).unwrap().log_probs, loaded.run(&x).unwrap().log_probs);
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let bb = fresh();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("backbone.json");
    let stats = intapt_core::backbone::PretrainStats { history: vec![], chosen_epoch: 0, dev_wer: 0.0 };
    bb.save(&path, &stats).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    // flip one stored digit of some weight without touching the fingerprint
    let tampered = text.replacen("0.02", "0.03", 1);
    assert_ne!(text, tampered, "expected a substitution to happen");
    std::fs::write(&path, tampered).unwrap();
    match Backbone::<f64>::load(&path) {
        Err(Error::BadCheckpoint(msg)) => assert!(msg.contains("fingerprint"), "{msg}"),
        Err(Error::Json(_)) => {} // substitution may also break the JSON shape
        other => panic!("expected rejection, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn gradient_flows_into_the_prompt_but_not_frozen_weights() {
    let bb = fresh();
    let mut t = Tape::new();
    let mut reg = Binding::new();
    let bound = bb.bind(&mut t, false, &mut reg);
    let x = t.input(&features(6, bb.cfg.d_feat, 11));
    let prompt = t.leaf(&features(4, bb.cfg.d_model, 12), true);
    let out = bound.forward(&mut t, x, Some(prompt)).unwrap();
    let loss = t.mean_all(out.log_probs);
    t.backward(loss);

    let g = t.grad(prompt).expect("prompt is trainable");
    assert!(g.iter().any(|&v| v != 0.0), "prompt gradient is identically zero");
    for (name, id) in reg.pairs() {
        assert!(t.grad(*id).is_none(), "frozen parameter {name} accumulated a gradient");
    }
}

#[test]
fn pretraining_reaches_low_held_out_wer() {
    let (cfg, corpus) = tiny_corpus();
    let (bb, stats) = pretrain::<f64>(&corpus, &cfg, cfg.seeds[0]).unwrap();
    assert!(stats.dev_wer < 0.10, "dev WER {} too high", stats.dev_wer);
    assert!(!stats.history.is_empty());
    assert!(stats.chosen_epoch < stats.history.len());

    // the selected model also reads the untouched native-accent test column well
    let l1_test = corpus.resolve(&corpus.splits.l1_test);
    let test_wer = backbone_wer(&bb, &l1_test).unwrap();
    assert!(test_wer < 0.15, "L1 test WER {test_wer} too high");
}

#[test]
fn pretraining_is_reproducible() {
    let (cfg, corpus) = tiny_corpus();
    let (a, _) = pretrain::<f64>(&corpus, &cfg, cfg.seeds[0]).unwrap();
    let (b, _) = pretrain::<f64>(&corpus, &cfg, cfg.seeds[0]).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
}

#[test]
fn pretraining_that_cannot_converge_reports_the_failure() {
    let (mut cfg, corpus) = {
        let (cfg, corpus) = tiny_corpus();
        (cfg, corpus)
    };
    cfg.lr_pretrain = 1e-12;
    cfg.epochs_pretrain = 1;
    match pretrain::<f64>(&corpus, &cfg, cfg.seeds[0]) {
        Err(Error::StageFailed { stage, reason }) => {
            assert_eq!(stage, "pretrain");
            assert!(reason.contains("WER"), "{reason}");
        }
        Ok(_) => panic!("a one-epoch run at lr 1e-12 should not reach 10% WER"),
        Err(other) => panic!("unexpected error {other:?}"),
    }
}
