mod common;

use std::sync::OnceLock;

use intapt_core::accent::{train_am, AccentModule, AmStats};
use intapt_core::backbone::{pretrain, Backbone};
use intapt_core::config::ExperimentConfig;
use intapt_core::synthcorpus::Corpus;
use intapt_core::tensor::{cosine, Mat};

use common::tiny_corpus;

struct Fixture {
    cfg: ExperimentConfig,
    corpus: Corpus,
    bb: Backbone<f64>,
    am: AccentModule<f64>,
    stats: AmStats,
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let (cfg, corpus) = tiny_corpus();
        let (bb, _) = pretrain::<f64>(&corpus, &cfg, cfg.seeds[0]).expect("pretraining converges");
        let (am, stats) = train_am(&corpus, &bb, &cfg, cfg.seeds[0]).expect("accent module trains");
        Fixture { cfg, corpus, bb, am, stats }
    })
}

fn tap_of(fix: &Fixture, features: &Mat<f64>) -> Mat<f64> {
    fix.bb.run(features).unwrap().hidden[fix.bb.cfg.tap_layer].clone()
}

#[test]
fn extraction_is_deterministic_and_pooling_invariant() {
    let fix = fixture();
    let u = &fix.corpus.utterances[0];
    let tap = tap_of(fix, &u.features);
    let z1 = fix.am.extract(&tap);
    let z2 = fix.am.extract(&tap);
    assert_eq!(z1, z2);
    assert_eq!((z1.rows(), z1.cols()), (1, fix.cfg.d_acc));
    assert!(z1.as_slice().iter().all(|v| v.is_finite()));

    // mean-pooling makes z blind to the order of time frames
    let rows: Vec<usize> = (0..tap.rows()).rev().collect();
    let reversed = Mat::from_fn(tap.rows(), tap.cols(), |i, j| tap[(rows[i], j)]);
    let z3 = fix.am.extract(&reversed);
    for (a, b) in z1.as_slice().iter().zip(z3.as_slice()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn classifier_reaches_high_dev_accuracy() {
    let fix = fixture();
    assert!(
        fix.stats.dev_accuracy >= 0.9,
        "dev accent accuracy {} below 0.9",
        fix.stats.dev_accuracy
    );
}

#[test]
fn intensity_head_tracks_ctc_difficulty() {
    let fix = fixture();
    assert!(
        fix.stats.intensity_correlation > 0.5,
        "correlation {} too weak",
        fix.stats.intensity_correlation
    );
}

#[test]
fn trained_head_beats_the_constant_predictor() {
    let fix = fixture();
    // dev targets are z-scored with train statistics, so the best constant
    // predictor's MSE is their variance around their own mean
    let dev = fix.corpus.resolve(&fix.corpus.splits.l2_dev);
    let classifiable: Vec<_> =
        dev.into_iter().filter(|u| fix.am.class_index(u.accent_id).is_some()).collect();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for u in &classifiable {
        let tap = tap_of(fix, &u.features);
        let z = fix.am.extract(&tap);
        preds.push(fix.am.predict_intensity(&z)[0]);
        let out = fix.bb.run(&u.features).unwrap();
        let raw = intapt_core::ctc::ctc_loss(&out.log_probs, &u.transcript).unwrap()
            / out.log_probs.rows() as f64;
        targets.push((raw - fix.am.target_norm.0) / fix.am.target_norm.1);
    }
    let n = targets.len() as f64;
    let tm = targets.iter().sum::<f64>() / n;
    let const_mse = targets.iter().map(|t| (t - tm) * (t - tm)).sum::<f64>() / n;
    let trained_mse =
        preds.iter().zip(&targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    assert!(
        trained_mse < const_mse,
        "trained MSE {trained_mse} not below constant-baseline {const_mse}"
    );
}

#[test]
fn accent_features_cluster_by_accent() {
    let fix = fixture();
    let dev = fix.corpus.resolve(&fix.corpus.splits.l2_dev);
    let mut zs: Vec<(usize, Vec<f64>)> = Vec::new();
    for u in &dev {
        let tap = tap_of(fix, &u.features);
        zs.push((u.accent_id, fix.am.extract(&tap).into_data()));
    }
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for i in 0..zs.len() {
        for j in (i + 1)..zs.len() {
            let c = cosine(&zs[i].1, &zs[j].1);
            if zs[i].0 == zs[j].0 {
                intra = (intra.0 + c, intra.1 + 1);
            } else {
                inter = (inter.0 + c, inter.1 + 1);
            }
        }
    }
    let intra_mean = intra.0 / intra.1 as f64;
    let inter_mean = inter.0 / inter.1 as f64;
    assert!(
        intra_mean > inter_mean,
        "intra-accent cosine {intra_mean} not above inter-accent {inter_mean}"
    );
}

#[test]
fn training_leaves_the_backbone_untouched() {
    let (cfg, corpus) = tiny_corpus();
    let (bb, _) = pretrain::<f64>(&corpus, &cfg, cfg.seeds[0]).unwrap();
    let before = bb.fingerprint();
    let _ = train_am(&corpus, &bb, &cfg, cfg.seeds[0]).unwrap();
    assert_eq!(before, bb.fingerprint());
}

#[test]
fn zero_regression_weight_decouples_the_heads() {
    let fix = fixture();
    let mut cfg = fix.cfg.clone();
    cfg.lambda_am = 0.0;
    let (_, stats) = train_am(&fix.corpus, &fix.bb, &cfg, cfg.seeds[0]).unwrap();
    assert!(stats.dev_accuracy >= 0.9, "classification should still train");
    assert!(
        stats.intensity_correlation < fix.stats.intensity_correlation - 0.2,
        "regression should stay near chance without its loss term: \
         got {} vs {} with the term",
        stats.intensity_correlation,
        fix.stats.intensity_correlation
    );
}

#[test]
fn training_is_reproducible() {
    let fix = fixture();
    let (again, _) = train_am(&fix.corpus, &fix.bb, &fix.cfg, fix.cfg.seeds[0]).unwrap();
    assert_eq!(fix.am.fingerprint(), again.fingerprint());
}

#[test]
fn checkpoint_round_trip_preserves_everything() {
    let fix = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("am.json");
    fix.am.save(&path, &fix.stats).unwrap();
    let (loaded, stats) = AccentModule::<f64>::load(&path).unwrap();
    assert_eq!(fix.am.fingerprint(), loaded.fingerprint());
    assert_eq!(fix.am.classes, loaded.classes);
    assert_eq!(fix.am.target_norm, loaded.target_norm);
    assert_eq!(fix.stats.chosen_epoch, stats.chosen_epoch);

    let u = &fix.corpus.utterances[3];
    let tap = tap_of(fix, &u.features);
    assert_eq!(fix.am.extract(&tap), loaded.extract(&tap));
}
