//! Experiment configuration: one serializable record holding every
//! hyperparameter, with validation and a content hash for corpus caching.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_feat: usize,
    pub vocab_size: usize,
    /// Encoder layer index (0-based) whose output feeds the accent module.
    pub tap_layer: usize,
    pub max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            d_feat: 16,
            vocab_size: 12,
            tap_layer: 1,
            max_len: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub d_feat: usize,
    pub vocab_size: usize,
    pub n_transcripts: usize,
    pub transcript_len_min: usize,
    pub transcript_len_max: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    pub n_mfa: usize,
    pub n_lfa: usize,
    pub n_ua: usize,
    /// L1 renderings per training transcript (pretraining data volume).
    pub l1_train_reps: usize,
    /// Blend weight per unit intensity of the accent's feature mixing.
    pub mix_strength: f64,
    /// Feature-space shift per unit intensity along the accent direction.
    pub shift_scale: f64,
    /// Magnitude of the constant offset carried by the nuisance attribute.
    pub nuisance_scale: f64,
    pub warp_min: f64,
    pub warp_max: f64,
    /// Speaker-cluster mean intensity is drawn uniformly from this range.
    pub intensity_mean_min: f64,
    pub intensity_mean_max: f64,
    /// Half-width of the per-utterance Beta(2,2) intensity jitter.
    pub intensity_jitter: f64,
    /// Speaker clusters per accent; each fixes a nuisance value and a mean
    /// intensity.
    pub speakers_per_accent: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            d_feat: 16,
            vocab_size: 12,
            n_transcripts: 220,
            transcript_len_min: 3,
            transcript_len_max: 7,
            frames_per_token: 4,
            noise_sigma: 0.05,
            n_mfa: 2,
            n_lfa: 2,
            n_ua: 2,
            l1_train_reps: 2,
            mix_strength: 0.45,
            shift_scale: 2.0,
            nuisance_scale: 0.5,
            warp_min: 0.0,
            warp_max: 0.3,
            intensity_mean_min: 0.4,
            intensity_mean_max: 0.85,
            intensity_jitter: 0.3,
            speakers_per_accent: 4,
        }
    }
}

impl CorpusConfig {
    /// L1 plus all L2 accents.
    pub fn n_accents(&self) -> usize {
        1 + self.n_mfa + self.n_lfa + self.n_ua
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Seeds the corpus; independent of the training seeds.
    pub corpus_seed: u64,
    /// One full training pipeline runs per seed.
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    /// Weight of the intensity-regression term in the accent-module loss.
    pub lambda_am: f64,
    /// Weight of the mutual-information term in the prompt objective.
    pub lambda_mi: f64,
    pub lr_pretrain: f64,
    pub lr_am: f64,
    pub lr_mine: f64,
    pub lr_finetune: f64,
    pub lr_prompt: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Prompt length L′ in frames.
    pub prompt_len: usize,
    /// Critic updates per generator update.
    pub alternation_ratio: usize,
    pub epochs_pretrain: usize,
    pub epochs_am: usize,
    pub epochs_regime: usize,
    /// Width of the accent feature z.
    pub d_acc: usize,
    pub mine_hidden: usize,
    /// Feed-forward width inside the prompt generator's encoder layer.
    pub prompt_d_ff: usize,
    /// Drop prompt-position log-probs before the CTC loss (kept off: the
    /// model may emit blanks over prompt frames).
    pub strip_prompt_frames: bool,
    /// Hard ceiling on trainable-parameter ratio prompt-generator/backbone.
    pub param_ratio_cap: f64,
    pub backbone: BackboneConfig,
    pub corpus: CorpusConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            corpus_seed: 1234,
            seeds: vec![1, 2, 3],
            batch_size: 16,
            lambda_am: 0.5,
            lambda_mi: 0.45,
            lr_pretrain: 1e-3,
            lr_am: 1e-3,
            lr_mine: 1e-3,
            lr_finetune: 1.5e-3,
            lr_prompt: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.005,
            grad_clip: 5.0,
            prompt_len: 8,
            alternation_ratio: 4,
            epochs_pretrain: 60,
            epochs_am: 30,
            epochs_regime: 40,
            d_acc: 256,
            mine_hidden: 256,
            prompt_d_ff: 128,
            strip_prompt_frames: false,
            param_ratio_cap: 0.25,
            backbone: BackboneConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            return bad("at least one training seed required".into());
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2 (mutual information needs pairs)".into());
        }
        for (name, v) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_am", self.lr_am),
            ("lr_mine", self.lr_mine),
            ("lr_finetune", self.lr_finetune),
            ("lr_prompt", self.lr_prompt),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.lambda_am < 0.0 || self.lambda_mi < 0.0 {
            return bad("lambda weights must be non-negative".into());
        }
        if self.alternation_ratio == 0 {
            return bad("alternation ratio must be at least 1".into());
        }
        let c = &self.corpus;
        let b = &self.backbone;
        if c.d_feat != b.d_feat {
            return bad(format!("corpus d_feat {} != backbone d_feat {}", c.d_feat, b.d_feat));
        }
        if c.vocab_size != b.vocab_size {
            return bad(format!(
                "corpus vocab {} != backbone vocab {}",
                c.vocab_size, b.vocab_size
            ));
        }
        if c.n_accents() < 2 {
            return bad("need at least one L2 accent besides L1".into());
        }
        // accent directions plus the nuisance direction must fit orthogonally
        if c.n_accents() + 1 > c.d_feat {
            return Err(Error::TooManyAccents { requested: c.n_accents(), dims: c.d_feat });
        }
        if c.transcript_len_min < 1 || c.transcript_len_min > c.transcript_len_max {
            return bad("transcript length bounds out of order".into());
        }
        if c.vocab_size < 2 {
            return bad("vocabulary needs at least two tokens for repeat-free transcripts".into());
        }
        if c.n_transcripts < 10 {
            return bad("transcript pool too small to split 0.8/0.1/0.1 disjointly".into());
        }
        if c.warp_min < 0.0 || c.warp_min > c.warp_max {
            return bad("warp range out of order".into());
        }
        if c.frames_per_token < 2 {
            return bad("frames_per_token must be at least 2 to leave room for blanks".into());
        }
        if b.d_model % b.n_heads != 0 {
            return bad("d_model must be divisible by n_heads".into());
        }
        if b.tap_layer >= b.n_layers {
            return bad(format!("tap_layer {} out of range for {} layers", b.tap_layer, b.n_layers));
        }
        let longest = c.transcript_len_max * c.frames_per_token;
        let worst = (longest as f64 * (1.0 + c.warp_max)).ceil() as usize + self.prompt_len;
        if worst > b.max_len {
            return bad(format!("max_len {} cannot hold prompted worst case {worst}", b.max_len));
        }
        if !(self.param_ratio_cap > 0.0) {
            return bad("param_ratio_cap must be positive".into());
        }
        Ok(())
    }

    /// Hash of everything the corpus depends on; used for cache reuse.
    pub fn corpus_hash(&self) -> String {
        let payload =
            serde_json::to_vec(&(&self.corpus, self.corpus_seed)).expect("serializable config");
        let mut h = Sha256::new();
        h.update(&payload);
        hex(&h.finalize())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable config")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
