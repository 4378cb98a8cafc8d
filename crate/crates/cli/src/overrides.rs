//! Flag mirrors for every experiment configuration key. Values given here
//! override the config file (or the built-in defaults).

use clap::Args;
use intapt_core::config::ExperimentConfig;

#[derive(Args)]
pub struct Overrides {
    #[arg(long, global = true, help_heading = "Config overrides")]
    corpus_seed: Option<u64>,
    /// Comma-separated training seeds.
    #[arg(long, global = true, value_delimiter = ',', help_heading = "Config overrides")]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    batch_size: Option<usize>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    lambda_am: Option<f64>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    lambda_mi: Option<f64>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    lr_pretrain: Option<f64>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    lr_am: Option<f64>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    lr_mine: Option<f64>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    lr_finetune: Option<f64>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    lr_prompt: Option<f64>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    adam_beta1: Option<f64>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    adam_beta2: Option<f64>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    adam_eps: Option<f64>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    weight_decay: Option<f64>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    grad_clip: Option<f64>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    prompt_len: Option<usize>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    alternation_ratio: Option<usize>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    epochs_pretrain: Option<usize>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    epochs_am: Option<usize>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    epochs_regime: Option<usize>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    d_acc: Option<usize>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    mine_hidden: Option<usize>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    prompt_d_ff: Option<usize>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    strip_prompt_frames: Option<bool>,
    #[arg(long, global = true, help_heading = "Config overrides")]
    param_ratio_cap: Option<f64>,

    #[arg(long, global = true, help_heading = "Backbone overrides")]
    backbone_n_layers: Option<usize>,
    #[arg(long, global = true, help_heading = "Backbone overrides")]
    backbone_d_model: Option<usize>,
    #[arg(long, global = true, help_heading = "Backbone overrides")]
    backbone_n_heads: Option<usize>,
    #[arg(long, global = true, help_heading = "Backbone overrides")]
    backbone_d_ff: Option<usize>,
    #[arg(long, global = true, help_heading = "Backbone overrides")]
    backbone_d_feat: Option<usize>,
    #[arg(long, global = true, help_heading = "Backbone overrides")]
    backbone_vocab_size: Option<usize>,
    #[arg(long, global = true, help_heading = "Backbone overrides")]
    backbone_tap_layer: Option<usize>,
    #[arg(long, global = true, help_heading = "Backbone overrides")]
    backbone_max_len: Option<usize>,

    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_d_feat: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_vocab_size: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_n_transcripts: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_transcript_len_min: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_transcript_len_max: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_frames_per_token: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_noise_sigma: Option<f64>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_n_mfa: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_n_lfa: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_n_ua: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_l1_train_reps: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_mix_strength: Option<f64>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_shift_scale: Option<f64>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_nuisance_scale: Option<f64>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_warp_min: Option<f64>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_warp_max: Option<f64>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_intensity_mean_min: Option<f64>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_intensity_mean_max: Option<f64>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_intensity_jitter: Option<f64>,
    #[arg(long, global = true, help_heading = "Corpus overrides")]
    corpus_speakers_per_accent: Option<usize>,
}

macro_rules! set {
    ($target:expr, $value:expr) => {
        if let Some(v) = &$value {
            $target = v.clone();
        }
    };
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        set!(cfg.corpus_seed, self.corpus_seed);
        set!(cfg.seeds, self.seeds);
        set!(cfg.batch_size, self.batch_size);
        set!(cfg.lambda_am, self.lambda_am);
        set!(cfg.lambda_mi, self.lambda_mi);
        set!(cfg.lr_pretrain, self.lr_pretrain);
        set!(cfg.lr_am, self.lr_am);
        set!(cfg.lr_mine, self.lr_mine);
        set!(cfg.lr_finetune, self.lr_finetune);
        set!(cfg.lr_prompt, self.lr_prompt);
        set!(cfg.adam_beta1, self.adam_beta1);
        set!(cfg.adam_beta2, self.adam_beta2);
        set!(cfg.adam_eps, self.adam_eps);
        set!(cfg.weight_decay, self.weight_decay);
        set!(cfg.grad_clip, self.grad_clip);
        set!(cfg.prompt_len, self.prompt_len);
        set!(cfg.alternation_ratio, self.alternation_ratio);
        set!(cfg.epochs_pretrain, self.epochs_pretrain);
        set!(cfg.epochs_am, self.epochs_am);
        set!(cfg.epochs_regime, self.epochs_regime);
        set!(cfg.d_acc, self.d_acc);
        set!(cfg.mine_hidden, self.mine_hidden);
        set!(cfg.prompt_d_ff, self.prompt_d_ff);
        set!(cfg.strip_prompt_frames, self.strip_prompt_frames);
        set!(cfg.param_ratio_cap, self.param_ratio_cap);

        set!(cfg.backbone.n_layers, self.backbone_n_layers);
        set!(cfg.backbone.d_model, self.backbone_d_model);
        set!(cfg.backbone.n_heads, self.backbone_n_heads);
        set!(cfg.backbone.d_ff, self.backbone_d_ff);
        set!(cfg.backbone.d_feat, self.backbone_d_feat);
        set!(cfg.backbone.vocab_size, self.backbone_vocab_size);
        set!(cfg.backbone.tap_layer, self.backbone_tap_layer);
        set!(cfg.backbone.max_len, self.backbone_max_len);

        set!(cfg.corpus.d_feat, self.corpus_d_feat);
        set!(cfg.corpus.vocab_size, self.corpus_vocab_size);
        set!(cfg.corpus.n_transcripts, self.corpus_n_transcripts);
        set!(cfg.corpus.transcript_len_min, self.corpus_transcript_len_min);
        set!(cfg.corpus.transcript_len_max, self.corpus_transcript_len_max);
        set!(cfg.corpus.frames_per_token, self.corpus_frames_per_token);
        set!(cfg.corpus.noise_sigma, self.corpus_noise_sigma);
        set!(cfg.corpus.n_mfa, self.corpus_n_mfa);
        set!(cfg.corpus.n_lfa, self.corpus_n_lfa);
        set!(cfg.corpus.n_ua, self.corpus_n_ua);
        set!(cfg.corpus.l1_train_reps, self.corpus_l1_train_reps);
        set!(cfg.corpus.mix_strength, self.corpus_mix_strength);
        set!(cfg.corpus.shift_scale, self.corpus_shift_scale);
        set!(cfg.corpus.nuisance_scale, self.corpus_nuisance_scale);
        set!(cfg.corpus.warp_min, self.corpus_warp_min);
        set!(cfg.corpus.warp_max, self.corpus_warp_max);
        set!(cfg.corpus.intensity_mean_min, self.corpus_intensity_mean_min);
        set!(cfg.corpus.intensity_mean_max, self.corpus_intensity_mean_max);
        set!(cfg.corpus.intensity_jitter, self.corpus_intensity_jitter);
        set!(cfg.corpus.speakers_per_accent, self.corpus_speakers_per_accent);
    }
}
