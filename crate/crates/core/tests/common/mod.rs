//! Shared fixtures: a scaled-down experiment configuration that keeps
//! integration tests fast while exercising every code path.

use intapt_core::config::ExperimentConfig;
use intapt_core::synthcorpus::{build_corpus, Corpus};

pub fn tiny_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus_seed = 77;
    cfg.seeds = vec![11];
    cfg.epochs_pretrain = 45;
    cfg.epochs_am = 60;
    cfg.epochs_regime = 8;
    cfg.d_acc = 32;
    cfg.mine_hidden = 64;
    cfg.prompt_d_ff = 32;
    cfg.prompt_len = 4;
    // At this scale the generator is a larger fraction of the backbone than
    // the default cap allows; the cap itself is exercised in trainer tests.
    cfg.param_ratio_cap = 0.6;

    cfg.backbone.n_layers = 2;
    cfg.backbone.d_model = 32;
    cfg.backbone.n_heads = 4;
    cfg.backbone.d_ff = 64;
    cfg.backbone.d_feat = 12;
    cfg.backbone.vocab_size = 8;
    cfg.backbone.tap_layer = 1;
    cfg.backbone.max_len = 48;

    cfg.corpus.d_feat = 12;
    cfg.corpus.vocab_size = 8;
    cfg.corpus.n_transcripts = 80;
    cfg.corpus.transcript_len_min = 2;
    cfg.corpus.transcript_len_max = 4;
    cfg.corpus.frames_per_token = 3;
    cfg.corpus.n_mfa = 2;
    cfg.corpus.n_lfa = 1;
    cfg.corpus.n_ua = 1;
    cfg.corpus.mix_strength = 0.45;
    cfg.corpus.shift_scale = 2.0;

    cfg.validate().expect("tiny config must be valid");
    cfg
}

pub fn tiny_corpus() -> (ExperimentConfig, Corpus) {
    let cfg = tiny_cfg();
    let corpus = build_corpus(&cfg).expect("corpus builds");
    (cfg, corpus)
}
