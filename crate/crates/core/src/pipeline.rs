//! End-to-end experiment driver: corpus caching, per-seed training of the
//! three regimes against one pretrained backbone, the accent analyses, and
//! the aggregated multi-seed report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accent::{train_am, AccentModule, AmStats};
use crate::backbone::{pretrain, Backbone, PretrainStats};
use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::eval::{
    accent_cosines, accent_feature, eval_wer, fit_linear_probe, l1_centroid,
    principal_directions, probe_accuracy, project, WerTable,
};
use crate::prompt::PromptGenerator;
use crate::scalar::Scalar;
use crate::synthcorpus::{build_corpus, AccentGroup, Corpus};
use crate::tensor::Mat;
use crate::trainer::{train_finetune, train_intapt, train_prompt_ctc, Regime, TrainedRegime};

/// Environment variable overriding the default output root.
pub const OUTPUT_ROOT_ENV: &str = "INTAPT_OUTPUT_ROOT";

/// Explicit path beats the environment override beats `runs/`.
pub fn resolve_output_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var(OUTPUT_ROOT_ENV) {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

/// Mean and sample standard deviation across seeds; std is absent with a
/// single seed.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

pub fn stat(values: &[f64]) -> Stat {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2).then(|| {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    Stat { mean, std }
}

/// Accent-isolation analysis of the accent feature space: a 2-D
/// variance-maximizing projection of the test features for plotting, plus
/// linear probes fit on the dev split and scored on the test split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IsolationReport {
    /// One (x, y) per test utterance, aligned with the label vectors.
    pub coords: Vec<(f64, f64)>,
    pub accent_ids: Vec<usize>,
    pub nuisance_ids: Vec<u8>,
    pub accent_probe: f64,
    /// Majority-class rate of the scored labels (constant-predictor floor).
    pub accent_chance: f64,
    pub nuisance_probe: f64,
    pub nuisance_chance: f64,
}

/// Mean cosine similarity of each L2 accent's features to the L1 centroid,
/// for the frozen backbone and both prompt methods.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CosineRow {
    pub accent_id: usize,
    pub group: AccentGroup,
    pub backbone: f64,
    pub prompt_ctc: f64,
    pub intapt: f64,
}

/// Test-split evaluation of one trained regime.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegimeEval {
    pub regime: Regime,
    pub l2_test: WerTable,
    /// Native-split WER; prompt regimes generate a prompt for every
    /// evaluated utterance, native ones included.
    pub l1_wer: f64,
    /// `l1_wer` minus the frozen baseline's; positive is a regression.
    pub l1_delta: f64,
    pub dev_wer: f64,
    pub chosen_epoch: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub prompt_generator: usize,
    pub critic: usize,
    /// prompt_generator / backbone.
    pub ratio: f64,
}

/// Everything measured for one training seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub pretrain: PretrainStats,
    pub am: AmStats,
    pub baseline_l2: WerTable,
    pub baseline_l1_wer: f64,
    /// Ordered finetune, prompt_ctc, intapt.
    pub regimes: Vec<RegimeEval>,
    pub cosines: Vec<CosineRow>,
    pub isolation: IsolationReport,
    pub params: ParamCounts,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccentStat {
    pub accent_id: usize,
    pub group: AccentGroup,
    pub wer: Stat,
}

/// WER table with mean/std cells across seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WerStats {
    pub rows: Vec<AccentStat>,
    pub mfa: Option<Stat>,
    pub lfa: Option<Stat>,
    pub ua: Option<Stat>,
    pub all: Stat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegimeAggregate {
    pub regime: Regime,
    pub l2_test: WerStats,
    pub l1_wer: Stat,
    pub l1_delta: Stat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CosineStatRow {
    pub accent_id: usize,
    pub group: AccentGroup,
    pub backbone: Stat,
    pub prompt_ctc: Stat,
    pub intapt: Stat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub baseline_l2: WerStats,
    pub baseline_l1_wer: Stat,
    pub regimes: Vec<RegimeAggregate>,
    pub cosines: Vec<CosineStatRow>,
    pub am_dev_accuracy: Stat,
    pub am_intensity_correlation: Stat,
    pub accent_probe: Stat,
    pub nuisance_probe: Stat,
}

/// Full experiment output: per-seed measurements plus seed aggregates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedReport>,
    pub aggregate: Aggregate,
}

/// Wraps unexpected errors with the pipeline stage they occurred in.
/// Config errors and frozen-drift violations keep their own identity; the
/// process exit code distinguishes those classes.
fn at_stage<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ (Error::StageFailed { .. } | Error::FrozenDrift(_) | Error::InvalidConfig(_)) => e,
        other => Error::StageFailed { stage: stage.to_string(), reason: other.to_string() },
    })
}

fn features_matrix<F: Scalar>(
    bb: &Backbone<F>,
    am: &AccentModule<F>,
    corpus: &Corpus,
    ids: &[String],
) -> Result<(Mat<f64>, Vec<usize>, Vec<u8>)> {
    let utts = corpus.resolve(ids);
    let mut rows = Vec::with_capacity(utts.len() * am.d_acc);
    let mut accents = Vec::with_capacity(utts.len());
    let mut nuisances = Vec::with_capacity(utts.len());
    for u in &utts {
        let z = accent_feature(bb, am, None, &u.features_as::<F>())?;
        rows.extend(z.iter().map(|v| v.to_f64_lossy()));
        accents.push(u.accent_id);
        nuisances.push(u.nuisance);
    }
    Ok((Mat::from_vec(utts.len(), am.d_acc, rows), accents, nuisances))
}

fn majority_rate(labels: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / labels.len() as f64
}

const PROBE_STEPS: usize = 500;
const PROBE_LR: f64 = 0.5;

/// Projects the test-split accent features to 2-D and fits transfer probes:
/// dev features train the probe, test features score it. The accent probe
/// should score high (the feature separates accents) and the nuisance probe
/// should stay near chance (it carries no speaker attribute).
pub fn isolation_report<F: Scalar>(
    bb: &Backbone<F>,
    am: &AccentModule<F>,
    corpus: &Corpus,
) -> Result<IsolationReport> {
    let (dev_x, dev_acc, dev_nui) = features_matrix(bb, am, corpus, &corpus.splits.l2_dev)?;
    let (test_x, test_acc, test_nui) = features_matrix(bb, am, corpus, &corpus.splits.l2_test)?;

    let mut class_of: BTreeMap<usize, usize> = BTreeMap::new();
    for &a in dev_acc.iter().chain(&test_acc) {
        let next = class_of.len();
        class_of.entry(a).or_insert(next);
    }
    let dev_y: Vec<usize> = dev_acc.iter().map(|a| class_of[a]).collect();
    let test_y: Vec<usize> = test_acc.iter().map(|a| class_of[a]).collect();

    let w = fit_linear_probe(&dev_x, &dev_y, class_of.len(), PROBE_STEPS, PROBE_LR);
    let accent_probe = probe_accuracy(&w, &test_x, &test_y);

    let dev_n: Vec<usize> = dev_nui.iter().map(|&v| v as usize).collect();
    let test_n: Vec<usize> = test_nui.iter().map(|&v| v as usize).collect();
    let wn = fit_linear_probe(&dev_x, &dev_n, 2, PROBE_STEPS, PROBE_LR);
    let nuisance_probe = probe_accuracy(&wn, &test_x, &test_n);

    let dirs = principal_directions(&test_x, 2);
    let proj = project(&test_x, &dirs);
    let coords = (0..proj.rows()).map(|i| (proj[(i, 0)], proj[(i, 1)])).collect();

    Ok(IsolationReport {
        coords,
        accent_ids: test_acc.clone(),
        nuisance_ids: test_nui,
        accent_probe,
        accent_chance: majority_rate(&test_y),
        nuisance_probe,
        nuisance_chance: majority_rate(&test_n),
    })
}

/// Builds the per-accent cosine table over the L2 test split: clean
/// features for the backbone column, prompted-pass features for the prompt
/// columns, all against the clean L1 centroid.
pub fn cosine_report<F: Scalar>(
    bb: &Backbone<F>,
    am: &AccentModule<F>,
    pg_prompt_ctc: &PromptGenerator<F>,
    pg_intapt: &PromptGenerator<F>,
    corpus: &Corpus,
) -> Result<Vec<CosineRow>> {
    let centroid = l1_centroid(bb, am, corpus)?;
    let ids = &corpus.splits.l2_test;
    let base = accent_cosines(bb, am, None, &centroid, corpus, ids)?;
    let ctc = accent_cosines(bb, am, Some(pg_prompt_ctc), &centroid, corpus, ids)?;
    let adv = accent_cosines(bb, am, Some(pg_intapt), &centroid, corpus, ids)?;

    let mut rows = Vec::new();
    for (&accent_id, &group) in &corpus.splits.group_map {
        if group == AccentGroup::L1 {
            continue;
        }
        let backbone = *base.get(&accent_id).ok_or_else(|| Error::StageFailed {
            stage: "cosine-report".to_string(),
            reason: format!("accent {accent_id} has no test utterances"),
        })?;
        rows.push(CosineRow {
            accent_id,
            group,
            backbone,
            prompt_ctc: ctc[&accent_id],
            intapt: adv[&accent_id],
        });
    }
    Ok(rows)
}

fn require<'a, T>(part: Option<&'a T>, what: &str, regime: Regime) -> Result<&'a T> {
    part.ok_or_else(|| {
        Error::BadCheckpoint(format!("{regime} checkpoint is missing its {what}"))
    })
}

/// Seed subdirectory under the output root.
pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

pub fn backbone_path(dir: &Path) -> PathBuf {
    dir.join("backbone.json")
}

pub fn accent_path(dir: &Path) -> PathBuf {
    dir.join("accent.json")
}

fn missing(stage: &str, what: &str, path: &Path) -> Error {
    Error::StageFailed {
        stage: stage.to_string(),
        reason: format!("{what} checkpoint missing at {}", path.display()),
    }
}

/// Loads a persisted backbone, failing with the consuming stage's name when
/// the artifact was never produced.
pub fn load_backbone_stage<F: Scalar>(
    dir: &Path,
    stage: &str,
) -> Result<(Backbone<F>, PretrainStats)> {
    let path = backbone_path(dir);
    if !path.exists() {
        return Err(missing(stage, "backbone", &path));
    }
    Backbone::load(&path)
}

pub fn load_accent_stage<F: Scalar>(
    dir: &Path,
    stage: &str,
) -> Result<(AccentModule<F>, AmStats)> {
    let path = accent_path(dir);
    if !path.exists() {
        return Err(missing(stage, "accent module", &path));
    }
    AccentModule::load(&path)
}

fn load_regime_stage<F: Scalar>(
    dir: &Path,
    regime: Regime,
    stage: &str,
) -> Result<TrainedRegime<F>> {
    let run = dir.join(regime.tag());
    if !run.join("weights.json").exists() {
        return Err(missing(stage, regime.tag(), &run.join("weights.json")));
    }
    let (t, _) = TrainedRegime::load(&run)?;
    if t.regime != regime {
        return Err(Error::BadCheckpoint(format!(
            "directory {} holds a {} run",
            run.display(),
            t.regime
        )));
    }
    Ok(t)
}

/// Trains one seed end to end against a freshly pretrained backbone and
/// evaluates every regime; artifacts land under `dir`.
pub fn run_seed<F: Scalar>(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    seed: u64,
    dir: &Path,
) -> Result<SeedReport> {
    std::fs::create_dir_all(dir)?;
    let (bb, pre) = at_stage("pretrain", pretrain::<F>(corpus, cfg, seed))?;
    at_stage("pretrain", bb.save(&backbone_path(dir), &pre))?;
    let (am, am_stats) = at_stage("train-am", train_am(corpus, &bb, cfg, seed))?;
    at_stage("train-am", am.save(&accent_path(dir), &am_stats))?;

    let ft = at_stage("train-finetune", train_finetune(corpus, &bb, cfg, seed))?;
    at_stage("train-finetune", ft.save(&dir.join(Regime::Finetune.tag()), cfg))?;
    let pc = at_stage("train-prompt_ctc", train_prompt_ctc(corpus, &bb, cfg, seed))?;
    at_stage("train-prompt_ctc", pc.save(&dir.join(Regime::PromptCtc.tag()), cfg))?;
    let ia = at_stage("train-intapt", train_intapt(corpus, &bb, &am, cfg, seed))?;
    at_stage("train-intapt", ia.save(&dir.join(Regime::Intapt.tag()), cfg))?;

    let report =
        at_stage("eval", evaluate_seed(cfg, corpus, seed, &bb, &pre, &am, &am_stats, &ft, &pc, &ia))?;
    std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Recomputes a seed's full evaluation from persisted checkpoints alone and
/// rewrites its `eval.json`. Guards against mixed artifacts: every regime
/// must have been trained against the stored backbone (and accent module).
pub fn eval_seed_dir<F: Scalar>(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    seed: u64,
    dir: &Path,
) -> Result<SeedReport> {
    let (bb, pre) = load_backbone_stage::<F>(dir, "eval")?;
    let (am, am_stats) = load_accent_stage::<F>(dir, "eval")?;
    let ft = load_regime_stage::<F>(dir, Regime::Finetune, "eval")?;
    let pc = load_regime_stage::<F>(dir, Regime::PromptCtc, "eval")?;
    let ia = load_regime_stage::<F>(dir, Regime::Intapt, "eval")?;

    let bb_fp = bb.fingerprint();
    for t in [&ft, &pc, &ia] {
        if t.backbone_fingerprint != bb_fp {
            return Err(Error::BadCheckpoint(format!(
                "{} run was trained against a different backbone",
                t.regime
            )));
        }
    }
    if ia.am_fingerprint.as_deref() != Some(am.fingerprint().as_str()) {
        return Err(Error::BadCheckpoint(
            "intapt run was trained against a different accent module".to_string(),
        ));
    }

    let report =
        at_stage("eval", evaluate_seed(cfg, corpus, seed, &bb, &pre, &am, &am_stats, &ft, &pc, &ia))?;
    std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_seed<F: Scalar>(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    seed: u64,
    bb: &Backbone<F>,
    pre: &PretrainStats,
    am: &AccentModule<F>,
    am_stats: &AmStats,
    ft: &TrainedRegime<F>,
    pc: &TrainedRegime<F>,
    ia: &TrainedRegime<F>,
) -> Result<SeedReport> {
    let strip = cfg.strip_prompt_frames;
    let test = &corpus.splits.l2_test;
    let l1 = &corpus.splits.l1_test;

    let baseline_l2 = eval_wer(bb, None, strip, corpus, test)?;
    let baseline_l1_wer = eval_wer(bb, None, strip, corpus, l1)?.all;

    let ft_model = require(ft.finetuned.as_ref(), "finetuned backbone", ft.regime)?;
    let pg_pc = require(pc.pg.as_ref(), "prompt generator", pc.regime)?;
    let pg_ia = require(ia.pg.as_ref(), "prompt generator", ia.regime)?;

    let mut regimes = Vec::new();
    for (run, model, pg) in [
        (ft, Some(ft_model), None),
        (pc, None, Some(pg_pc)),
        (ia, None, Some(pg_ia)),
    ] {
        let m = model.unwrap_or(bb);
        let l2_test = eval_wer(m, pg, strip, corpus, test)?;
        let l1_wer = eval_wer(m, pg, strip, corpus, l1)?.all;
        regimes.push(RegimeEval {
            regime: run.regime,
            l2_test,
            l1_wer,
            l1_delta: l1_wer - baseline_l1_wer,
            dev_wer: run.stats.dev_wer,
            chosen_epoch: run.stats.chosen_epoch,
        });
    }

    let cosines = cosine_report(bb, am, pg_pc, pg_ia, corpus)?;
    let isolation = isolation_report(bb, am, corpus)?;
    let critic = ia.mine.as_ref().map_or(0, |m| m.param_count());
    let params = ParamCounts {
        backbone: bb.param_count(),
        prompt_generator: pg_ia.param_count(),
        critic,
        ratio: pg_ia.param_count() as f64 / bb.param_count() as f64,
    };

    Ok(SeedReport {
        seed,
        pretrain: pre.clone(),
        am: am_stats.clone(),
        baseline_l2,
        baseline_l1_wer,
        regimes,
        cosines,
        isolation,
        params,
    })
}

pub fn corpus_cache_path(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(format!("corpus-{}.json", &cfg.corpus_hash()[..16]))
}

/// Loads the cached corpus whose filename matches this config's hash, or
/// builds and caches it.
pub fn load_or_build_corpus(root: &Path, cfg: &ExperimentConfig) -> Result<Corpus> {
    let path = corpus_cache_path(root, cfg);
    if path.exists() {
        return Corpus::load(&path);
    }
    let corpus = build_corpus(cfg)?;
    std::fs::create_dir_all(root)?;
    corpus.save(&path)?;
    Ok(corpus)
}

fn wer_stats(tables: &[&WerTable]) -> WerStats {
    let mut per_accent: BTreeMap<usize, (AccentGroup, Vec<f64>)> = BTreeMap::new();
    for t in tables {
        for row in &t.rows {
            per_accent
                .entry(row.accent_id)
                .or_insert_with(|| (row.group, Vec::new()))
                .1
                .push(row.wer);
        }
    }
    let rows = per_accent
        .into_iter()
        .map(|(accent_id, (group, wers))| AccentStat { accent_id, group, wer: stat(&wers) })
        .collect();
    let group_stat = |get: fn(&WerTable) -> Option<f64>| {
        let vals: Vec<f64> = tables.iter().filter_map(|t| get(t)).collect();
        (vals.len() == tables.len()).then(|| stat(&vals))
    };
    WerStats {
        rows,
        mfa: group_stat(|t| t.mfa),
        lfa: group_stat(|t| t.lfa),
        ua: group_stat(|t| t.ua),
        all: stat(&tables.iter().map(|t| t.all).collect::<Vec<_>>()),
    }
}

pub fn aggregate(per_seed: &[SeedReport]) -> Aggregate {
    assert!(!per_seed.is_empty());
    let collect = |f: &dyn Fn(&SeedReport) -> f64| {
        stat(&per_seed.iter().map(f).collect::<Vec<_>>())
    };

    let baseline_l2 = wer_stats(&per_seed.iter().map(|s| &s.baseline_l2).collect::<Vec<_>>());
    let n_regimes = per_seed[0].regimes.len();
    let regimes = (0..n_regimes)
        .map(|r| {
            let tables: Vec<&WerTable> = per_seed.iter().map(|s| &s.regimes[r].l2_test).collect();
            RegimeAggregate {
                regime: per_seed[0].regimes[r].regime,
                l2_test: wer_stats(&tables),
                l1_wer: collect(&|s| s.regimes[r].l1_wer),
                l1_delta: collect(&|s| s.regimes[r].l1_delta),
            }
        })
        .collect();

    let cosines = per_seed[0]
        .cosines
        .iter()
        .enumerate()
        .map(|(i, first)| {
            let col = |f: &dyn Fn(&CosineRow) -> f64| {
                stat(&per_seed.iter().map(|s| f(&s.cosines[i])).collect::<Vec<_>>())
            };
            CosineStatRow {
                accent_id: first.accent_id,
                group: first.group,
                backbone: col(&|c| c.backbone),
                prompt_ctc: col(&|c| c.prompt_ctc),
                intapt: col(&|c| c.intapt),
            }
        })
        .collect();

    Aggregate {
        baseline_l2,
        baseline_l1_wer: collect(&|s| s.baseline_l1_wer),
        regimes,
        cosines,
        am_dev_accuracy: collect(&|s| s.am.dev_accuracy),
        am_intensity_correlation: collect(&|s| s.am.intensity_correlation),
        accent_probe: collect(&|s| s.isolation.accent_probe),
        nuisance_probe: collect(&|s| s.isolation.nuisance_probe),
    }
}

fn assemble_report(
    cfg: &ExperimentConfig,
    per_seed: Vec<SeedReport>,
    root: &Path,
) -> Result<MetricsReport> {
    let aggregate = aggregate(&per_seed);
    let report = MetricsReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        per_seed,
        aggregate,
    };
    std::fs::write(root.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(root.join("report.txt"), render_text(&report))?;
    Ok(report)
}

/// Runs the whole experiment: cached corpus, every seed through pretraining
/// and all three regimes, evaluation, aggregation. Writes `report.json` and
/// `report.txt` under `root` and returns the report.
pub fn run_experiment<F: Scalar>(cfg: &ExperimentConfig, root: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let corpus = at_stage("gen-data", load_or_build_corpus(root, cfg))?;
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        per_seed.push(run_seed::<F>(cfg, &corpus, seed, &seed_dir(root, seed))?);
    }
    assemble_report(cfg, per_seed, root)
}

/// Rebuilds the aggregate report from the per-seed evaluations already on
/// disk, without retraining anything.
pub fn report_from_dirs(cfg: &ExperimentConfig, root: &Path) -> Result<MetricsReport> {
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let path = seed_dir(root, seed).join("eval.json");
        if !path.exists() {
            return Err(Error::StageFailed {
                stage: "report".to_string(),
                reason: format!("missing {}; run eval for seed {seed} first", path.display()),
            });
        }
        per_seed.push(serde_json::from_str(&std::fs::read_to_string(path)?)?);
    }
    assemble_report(cfg, per_seed, root)
}

fn fmt_stat(s: Stat) -> String {
    match s.std {
        Some(sd) => format!("{:.4}±{:.4}", s.mean, sd),
        None => format!("{:.4}", s.mean),
    }
}

fn fmt_opt(s: Option<Stat>) -> String {
    s.map_or_else(|| "--".to_string(), fmt_stat)
}

fn push_row(out: &mut String, cells: &[String], widths: &[usize]) {
    for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
        if i > 0 {
            out.push_str("  ");
        }
        out.push_str(&format!("{c:>w$}", w = w));
    }
    out.push('\n');
}

/// Renders the aligned-text version of the report.
pub fn render_text(r: &MetricsReport) -> String {
    let mut out = String::new();
    let a = &r.aggregate;
    out.push_str(&format!(
        "seeds: {}\n",
        r.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
    ));
    let p = r.per_seed[0].params;
    out.push_str(&format!(
        "parameters: backbone {}, prompt generator {} (ratio {:.4}, cap {}), critic {}\n\n",
        p.backbone, p.prompt_generator, p.ratio, r.config.param_ratio_cap, p.critic
    ));

    out.push_str("L2 test WER (mean over seeds, lower is better)\n");
    let widths = [12, 15, 15, 15, 15];
    push_row(
        &mut out,
        &["method", "MFA", "LFA", "UA", "ALL"].map(str::to_string),
        &widths,
    );
    let line = |name: &str, t: &WerStats| {
        [
            name.to_string(),
            fmt_opt(t.mfa),
            fmt_opt(t.lfa),
            fmt_opt(t.ua),
            fmt_stat(t.all),
        ]
    };
    push_row(&mut out, &line("backbone", &a.baseline_l2), &widths);
    for reg in &a.regimes {
        push_row(&mut out, &line(reg.regime.tag(), &reg.l2_test), &widths);
    }

    out.push_str("\nL1 test WER (drift relative to the frozen backbone)\n");
    let w2 = [12, 15, 15];
    push_row(&mut out, &["method", "WER", "delta"].map(str::to_string), &w2);
    push_row(
        &mut out,
        &[
            "backbone".to_string(),
            fmt_stat(a.baseline_l1_wer),
            "--".to_string(),
        ],
        &w2,
    );
    for reg in &a.regimes {
        push_row(
            &mut out,
            &[reg.regime.tag().to_string(), fmt_stat(reg.l1_wer), fmt_stat(reg.l1_delta)],
            &w2,
        );
    }

    out.push_str("\ncosine similarity of accent features to the L1 centroid (L2 test)\n");
    let w3 = [7, 6, 15, 15, 15];
    push_row(
        &mut out,
        &["accent", "group", "backbone", "prompt_ctc", "intapt"].map(str::to_string),
        &w3,
    );
    for c in &a.cosines {
        push_row(
            &mut out,
            &[
                c.accent_id.to_string(),
                format!("{:?}", c.group),
                fmt_stat(c.backbone),
                fmt_stat(c.prompt_ctc),
                fmt_stat(c.intapt),
            ],
            &w3,
        );
    }

    out.push_str("\naccent module\n");
    out.push_str(&format!(
        "dev accuracy {}   intensity correlation {}\n",
        fmt_stat(a.am_dev_accuracy),
        fmt_stat(a.am_intensity_correlation)
    ));
    let iso = &r.per_seed[0].isolation;
    out.push_str(&format!(
        "accent probe {} (chance {:.4})   nuisance probe {} (chance {:.4})\n",
        fmt_stat(a.accent_probe),
        iso.accent_chance,
        fmt_stat(a.nuisance_probe),
        iso.nuisance_chance
    ));
    out
}
