//! Deterministic synthetic accented-speech corpus.
//!
//! An utterance renders its transcript as token-prototype frames plus noise
//! and a speaker (nuisance) offset; an accent then remixes the features,
//! shifts them along an accent direction, and stretches time, all scaled by
//! a continuous intensity. The L1 accent is the identity: intensity is
//! pinned to zero, so its utterances are the clean renderings the backbone
//! pretrains on.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};
use crate::error::{Error, Result};
use crate::rng::{beta22, derive_seed, normal, rng_for};
use crate::scalar::{sc, Scalar};
use crate::tensor::Mat;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccentGroup {
    L1,
    Mfa,
    Lfa,
    Ua,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccentSpec {
    pub accent_id: usize,
    pub mixing_seed: u64,
    /// Unit vector in feature space along which intensity shifts features.
    pub direction: Vec<f64>,
    pub warp_range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    /// L × d_feat feature sequence.
    pub features: Mat<f64>,
    /// Tokens in 1..=vocab_size; never the blank (0).
    pub transcript: Vec<usize>,
    pub accent_id: usize,
    pub intensity: f64,
    /// Binary speaker attribute the accent feature must not encode.
    pub nuisance: u8,
}

impl Utterance {
    /// Features converted to the model's scalar type.
    pub fn features_as<F: Scalar>(&self) -> Mat<F> {
        Mat::from_vec(
            self.features.rows(),
            self.features.cols(),
            self.features.as_slice().iter().map(|&x| sc::<F>(x)).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub l1_pretrain: Vec<String>,
    pub l2_train: Vec<String>,
    pub l2_dev: Vec<String>,
    pub l2_test: Vec<String>,
    pub l1_test: Vec<String>,
    pub group_map: BTreeMap<usize, AccentGroup>,
}

/// Everything shared by all utterances of one corpus: token prototypes and
/// the nuisance offset direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthContext {
    pub prototypes: Mat<f64>,
    pub nuisance_dir: Vec<f64>,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    pub mix_strength: f64,
    pub shift_scale: f64,
    pub nuisance_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config_hash: String,
    pub specs: Vec<AccentSpec>,
    pub synth: SynthContext,
    pub utterances: Vec<Utterance>,
    pub splits: CorpusSplits,
}

/// Orthonormal columns of a seeded Gaussian matrix via modified
/// Gram-Schmidt; the source of accent and nuisance directions.
fn orthonormal_columns(d: usize, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k > d {
        return Err(Error::TooManyAccents { requested: k, dims: d });
    }
    let mut rng = rng_for("orthonormal", seed, 0);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| normal::<f64>(&mut rng)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= dot * ci;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // degenerate draw, try again
        }
        for vi in &mut v {
            *vi /= norm;
        }
        cols.push(v);
    }
    Ok(cols)
}

pub fn gen_accent_specs(n_accents: usize, d_feat: usize, seed: u64) -> Result<Vec<AccentSpec>> {
    if n_accents < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 accents (one L1, one L2), got {n_accents}"
        )));
    }
    gen_accent_specs_with(n_accents, d_feat, seed, (0.0, 0.3))
}

fn gen_accent_specs_with(
    n_accents: usize,
    d_feat: usize,
    seed: u64,
    warp_range: (f64, f64),
) -> Result<Vec<AccentSpec>> {
    let dirs = orthonormal_columns(d_feat, n_accents, derive_seed("directions", seed, 0))?;
    Ok(dirs
        .into_iter()
        .enumerate()
        .map(|(i, direction)| AccentSpec {
            accent_id: i,
            mixing_seed: derive_seed("mixing", seed, i as u64),
            direction,
            warp_range,
        })
        .collect())
}

/// Orthogonal feature-mixing transform for one accent.
fn mixing_matrix(d: usize, seed: u64) -> Mat<f64> {
    let cols = orthonormal_columns(d, d, seed).expect("square basis always fits");
    Mat::from_fn(d, d, |i, j| cols[j][i])
}

pub fn synthesize_utterance(
    ctx: &SynthContext,
    id: &str,
    transcript: &[usize],
    spec: &AccentSpec,
    intensity: f64,
    nuisance: u8,
    seed: u64,
) -> Utterance {
    assert!(!transcript.is_empty(), "transcript must be nonempty");
    assert!((0.0..=1.0).contains(&intensity), "intensity out of [0,1]");
    let d = ctx.prototypes.cols();
    let mut rng = rng_for("utterance", seed, 0);

    // clean rendering: prototype frames + noise + speaker offset
    let l_base = transcript.len() * ctx.frames_per_token;
    let nuisance_sign = if nuisance == 1 { 1.0 } else { -1.0 };
    let mut base = Mat::zeros(l_base, d);
    for (ti, &tok) in transcript.iter().enumerate() {
        let proto = ctx.prototypes.row(tok - 1).to_vec();
        for f in 0..ctx.frames_per_token {
            let row = base.row_mut(ti * ctx.frames_per_token + f);
            for (j, r) in row.iter_mut().enumerate() {
                *r = proto[j]
                    + normal::<f64>(&mut rng) * ctx.noise_sigma
                    + nuisance_sign * ctx.nuisance_scale * ctx.nuisance_dir[j];
            }
        }
    }

    let features = if intensity > 0.0 {
        let mixing = mixing_matrix(d, spec.mixing_seed);
        let mixed = base.matmul(&mixing);
        let m = intensity * ctx.mix_strength;
        let shift = intensity * ctx.shift_scale;
        let mut accented = Mat::zeros(l_base, d);
        for i in 0..l_base {
            for j in 0..d {
                accented[(i, j)] = (1.0 - m) * base[(i, j)]
                    + m * mixed[(i, j)]
                    + shift * spec.direction[j];
            }
        }
        let warp = 1.0
            + intensity
                * (spec.warp_range.0
                    + rng.gen::<f64>() * (spec.warp_range.1 - spec.warp_range.0));
        stretch_time(&accented, warp)
    } else {
        base
    };

    Utterance {
        id: id.to_string(),
        features,
        transcript: transcript.to_vec(),
        accent_id: spec.accent_id,
        intensity,
        nuisance,
    }
}

/// Lengthens a frame sequence by `factor` ≥ 1 with linear interpolation.
fn stretch_time(features: &Mat<f64>, factor: f64) -> Mat<f64> {
    let l = features.rows();
    let new_l = ((l as f64) * factor).round() as usize;
    if new_l <= l {
        return features.clone();
    }
    let d = features.cols();
    Mat::from_fn(new_l, d, |i, j| {
        let src = i as f64 * (l - 1) as f64 / (new_l - 1) as f64;
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(l - 1);
        let frac = src - lo as f64;
        features[(lo, j)] * (1.0 - frac) + features[(hi, j)] * frac
    })
}

struct SpeakerCluster {
    mean_intensity: f64,
    nuisance: u8,
}

pub fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    cfg.validate()?;
    let c = &cfg.corpus;
    let seed = cfg.corpus_seed;
    let n_accents = c.n_accents();

    // distinct transcripts
    let mut rng = rng_for("transcripts", seed, 0);
    let mut seen = HashSet::new();
    let mut transcripts: Vec<Vec<usize>> = Vec::with_capacity(c.n_transcripts);
    let mut attempts = 0usize;
    while transcripts.len() < c.n_transcripts {
        attempts += 1;
        if attempts > 200 * c.n_transcripts {
            return Err(Error::InvalidConfig(
                "vocabulary too small for the requested number of distinct transcripts".into(),
            ));
        }
        let len = rng.gen_range(c.transcript_len_min..=c.transcript_len_max);
        // No adjacent repeats: consecutive identical tokens collapse under
        // greedy CTC decoding unless the model emits a blank between two
        // identical frame blocks, an ambiguity this corpus does not study.
        let mut t: Vec<usize> = Vec::with_capacity(len);
        for _ in 0..len {
            let mut tok = rng.gen_range(1..=c.vocab_size);
            while Some(&tok) == t.last() {
                tok = rng.gen_range(1..=c.vocab_size);
            }
            t.push(tok);
        }
        if seen.insert(t.clone()) {
            transcripts.push(t);
        }
    }

    // transcript-level split: test and dev get a tenth each
    let mut order: Vec<usize> = (0..c.n_transcripts).collect();
    order.shuffle(&mut rng_for("split", seed, 0));
    let tenth = c.n_transcripts / 10;
    let test_ts: Vec<usize> = order[..tenth].to_vec();
    let dev_ts: Vec<usize> = order[tenth..2 * tenth].to_vec();
    let train_ts: Vec<usize> = order[2 * tenth..].to_vec();

    // accent geometry: one extra orthonormal direction for the nuisance
    let dirs = orthonormal_columns(c.d_feat, n_accents + 1, derive_seed("directions", seed, 0))?;
    let specs: Vec<AccentSpec> = (0..n_accents)
        .map(|i| AccentSpec {
            accent_id: i,
            mixing_seed: derive_seed("mixing", seed, i as u64),
            direction: dirs[i].clone(),
            warp_range: (c.warp_min, c.warp_max),
        })
        .collect();

    let mut proto_rng = rng_for("prototypes", seed, 0);
    let prototypes = Mat::from_fn(c.vocab_size, c.d_feat, |_, _| normal::<f64>(&mut proto_rng));

    let synth = SynthContext {
        prototypes,
        nuisance_dir: dirs[n_accents].clone(),
        frames_per_token: c.frames_per_token,
        noise_sigma: c.noise_sigma,
        mix_strength: c.mix_strength,
        shift_scale: c.shift_scale,
        nuisance_scale: c.nuisance_scale,
    };

    let mut group_map = BTreeMap::new();
    group_map.insert(0, AccentGroup::L1);
    for i in 0..c.n_mfa {
        group_map.insert(1 + i, AccentGroup::Mfa);
    }
    for i in 0..c.n_lfa {
        group_map.insert(1 + c.n_mfa + i, AccentGroup::Lfa);
    }
    for i in 0..c.n_ua {
        group_map.insert(1 + c.n_mfa + c.n_lfa + i, AccentGroup::Ua);
    }

    // speaker clusters per L2 accent: fixed nuisance, own mean intensity
    let mut clusters: HashMap<usize, Vec<SpeakerCluster>> = HashMap::new();
    for accent in 1..n_accents {
        let mut crng = rng_for("clusters", seed, accent as u64);
        let cs = (0..c.speakers_per_accent)
            .map(|s| SpeakerCluster {
                mean_intensity: c.intensity_mean_min
                    + crng.gen::<f64>() * (c.intensity_mean_max - c.intensity_mean_min),
                nuisance: (s % 2) as u8,
            })
            .collect();
        clusters.insert(accent, cs);
    }

    let mut utterances: Vec<Utterance> = Vec::new();
    let mut splits = CorpusSplits {
        l1_pretrain: Vec::new(),
        l2_train: Vec::new(),
        l2_dev: Vec::new(),
        l2_test: Vec::new(),
        l1_test: Vec::new(),
        group_map,
    };

    let render = |id: String,
                  transcript: &[usize],
                  spec: &AccentSpec,
                  intensity: f64,
                  nuisance: u8,
                  out: &mut Vec<Utterance>| {
        let u = synthesize_utterance(
            &synth,
            &id,
            transcript,
            spec,
            intensity,
            nuisance,
            derive_seed(&id, seed, 1),
        );
        out.push(u);
    };

    // L1: clean renderings for pretraining and for the L1 test column
    for (k, &ti) in train_ts.iter().enumerate() {
        for rep in 0..c.l1_train_reps {
            let nuisance = ((k + rep) % 2) as u8;
            let id = format!("a0_t{ti}_r{rep}");
            render(id.clone(), &transcripts[ti], &specs[0], 0.0, nuisance, &mut utterances);
            splits.l1_pretrain.push(id);
        }
    }
    for (k, &ti) in test_ts.iter().enumerate() {
        let id = format!("a0_t{ti}_r0");
        render(id.clone(), &transcripts[ti], &specs[0], 0.0, (k % 2) as u8, &mut utterances);
        splits.l1_test.push(id);
    }

    // L2 accents
    for accent in 1..n_accents {
        let group = splits.group_map[&accent];
        let spec = &specs[accent];
        let cs = &clusters[&accent];

        let train_for_accent: Vec<usize> = match group {
            AccentGroup::Mfa => train_ts.clone(),
            AccentGroup::Lfa => {
                let mut shuffled = train_ts.clone();
                shuffled.shuffle(&mut rng_for("lfa-subset", seed, accent as u64));
                shuffled.truncate(train_ts.len() / 2);
                shuffled
            }
            AccentGroup::Ua => Vec::new(),
            AccentGroup::L1 => unreachable!("accent 0 is the only L1"),
        };

        let emit = |ti: usize,
                    k: usize,
                    bucket: &str,
                    utterances: &mut Vec<Utterance>|
         -> String {
            let cluster = &cs[(ti + k) % cs.len()];
            let id = format!("a{accent}_t{ti}_{bucket}");
            let mut irng = rng_for(&id, seed, 2);
            let intensity = (cluster.mean_intensity
                + (beta22(&mut irng) - 0.5) * c.intensity_jitter)
                .clamp(0.01, 1.0);
            render(id.clone(), &transcripts[ti], spec, intensity, cluster.nuisance, utterances);
            id
        };

        for (k, &ti) in train_for_accent.iter().enumerate() {
            let id = emit(ti, k, "train", &mut utterances);
            splits.l2_train.push(id);
        }
        for (k, &ti) in dev_ts.iter().enumerate() {
            let id = emit(ti, k, "dev", &mut utterances);
            splits.l2_dev.push(id);
        }
        for (k, &ti) in test_ts.iter().enumerate() {
            let id = emit(ti, k, "test", &mut utterances);
            splits.l2_test.push(id);
        }
    }

    let corpus = Corpus {
        config_hash: cfg.corpus_hash(),
        specs,
        synth,
        utterances,
        splits,
    };
    corpus.check_invariants()?;
    Ok(corpus)
}

impl Corpus {
    pub fn by_id(&self) -> HashMap<&str, &Utterance> {
        self.utterances.iter().map(|u| (u.id.as_str(), u)).collect()
    }

    pub fn resolve<'a>(&'a self, ids: &[String]) -> Vec<&'a Utterance> {
        let map = self.by_id();
        ids.iter().map(|id| *map.get(id.as_str()).expect("unknown utterance id")).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::CorpusCorrupt(msg));
        let map = self.by_id();
        for split in [
            &self.splits.l1_pretrain,
            &self.splits.l2_train,
            &self.splits.l2_dev,
            &self.splits.l2_test,
            &self.splits.l1_test,
        ] {
            for id in split {
                if !map.contains_key(id.as_str()) {
                    return fail(format!("split references unknown utterance {id}"));
                }
            }
        }

        let transcript_set = |ids: &[String]| -> HashSet<Vec<usize>> {
            ids.iter().map(|id| map[id.as_str()].transcript.clone()).collect()
        };
        let tr = transcript_set(&self.splits.l2_train);
        let de = transcript_set(&self.splits.l2_dev);
        let te = transcript_set(&self.splits.l2_test);
        if tr.intersection(&de).next().is_some()
            || tr.intersection(&te).next().is_some()
            || de.intersection(&te).next().is_some()
        {
            return fail("transcript overlap between L2 splits".into());
        }

        let mut train_counts: BTreeMap<usize, usize> = BTreeMap::new();
        for id in &self.splits.l2_train {
            *train_counts.entry(map[id.as_str()].accent_id).or_default() += 1;
        }
        let mfa_count = self
            .splits
            .group_map
            .iter()
            .filter(|(_, g)| **g == AccentGroup::Mfa)
            .map(|(a, _)| train_counts.get(a).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        for (&accent, &group) in &self.splits.group_map {
            let count = train_counts.get(&accent).copied().unwrap_or(0);
            match group {
                AccentGroup::Ua => {
                    if count != 0 {
                        return fail(format!("unseen accent {accent} has training data"));
                    }
                }
                AccentGroup::Lfa => {
                    if count != mfa_count / 2 {
                        return fail(format!(
                            "low-frequency accent {accent} has {count} training utterances, expected {}",
                            mfa_count / 2
                        ));
                    }
                }
                _ => {}
            }
        }

        for spec in &self.specs {
            let norm = spec.direction.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return fail(format!("accent {} direction not unit length", spec.accent_id));
            }
        }
        for u in &self.utterances {
            if u.features.rows() < u.transcript.len() {
                return fail(format!("utterance {} shorter than its transcript", u.id));
            }
            if !u.features.as_slice().iter().all(|x| x.is_finite()) {
                return fail(format!("utterance {} has non-finite features", u.id));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&(&self.specs, &self.synth, &self.splits))?;
        let mut body = Vec::new();
        body.extend_from_slice(meta.as_bytes());
        body.push(b'\n');
        for u in &self.utterances {
            body.extend_from_slice(serde_json::to_string(u)?.as_bytes());
            body.push(b'\n');
        }
        let mut h = Sha256::new();
        h.update(&body);
        let header = serde_json::json!({
            "format_version": CORPUS_FORMAT_VERSION,
            "config_hash": self.config_hash,
            "n_utterances": self.utterances.len(),
            "checksum": hex(&h.finalize()),
        });
        let mut f = std::fs::File::create(path)?;
        f.write_all(header.to_string().as_bytes())?;
        f.write_all(b"\n")?;
        f.write_all(&body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let corrupt = |msg: &str| Error::CorpusCorrupt(format!("{}: {msg}", path.display()));
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).split(b'\n');
        let header_line = lines.next().ok_or_else(|| corrupt("empty file"))??;
        let header: serde_json::Value =
            serde_json::from_slice(&header_line).map_err(|_| corrupt("unreadable header"))?;
        let version = header["format_version"].as_u64().ok_or_else(|| corrupt("missing version"))?;
        if version != u64::from(CORPUS_FORMAT_VERSION) {
            return Err(corrupt(&format!("unsupported format version {version}")));
        }
        let n = header["n_utterances"].as_u64().ok_or_else(|| corrupt("missing count"))? as usize;
        let checksum =
            header["checksum"].as_str().ok_or_else(|| corrupt("missing checksum"))?.to_string();
        let config_hash =
            header["config_hash"].as_str().ok_or_else(|| corrupt("missing config hash"))?.to_string();

        let mut body = Vec::new();
        let mut records: Vec<Vec<u8>> = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            body.extend_from_slice(&line);
            body.push(b'\n');
            records.push(line);
        }
        let mut h = Sha256::new();
        h.update(&body);
        if hex(&h.finalize()) != checksum {
            return Err(corrupt("checksum mismatch"));
        }
        if records.len() != n + 1 {
            return Err(corrupt(&format!("expected {} records, found {}", n + 1, records.len())));
        }
        let (specs, synth, splits): (Vec<AccentSpec>, SynthContext, CorpusSplits) =
            serde_json::from_slice(&records[0]).map_err(|_| corrupt("unreadable metadata"))?;
        let mut utterances = Vec::with_capacity(n);
        for rec in &records[1..] {
            utterances
                .push(serde_json::from_slice(rec).map_err(|_| corrupt("unreadable utterance"))?);
        }
        let corpus = Corpus { config_hash, specs, synth, utterances, splits };
        corpus.check_invariants()?;
        Ok(corpus)
    }
}
