use std::collections::BTreeMap;
use std::path::PathBuf;

use intapt_core::backbone::{backbone_wer, pretrain};
use intapt_core::config::ExperimentConfig;
use intapt_core::ctc::wer;
use intapt_core::eval::eval_wer;
use intapt_core::pipeline::load_or_build_corpus;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let root = PathBuf::from(&args[1]);
    let mix: f64 = args[2].parse().unwrap();
    let imin: f64 = args[3].parse().unwrap();
    let imax: f64 = args[4].parse().unwrap();

    let mut cfg = ExperimentConfig::default();
    cfg.corpus.mix_strength = mix;
    cfg.corpus.intensity_mean_min = imin;
    cfg.corpus.intensity_mean_max = imax;
    cfg.validate().unwrap();

    std::fs::create_dir_all(&root).unwrap();
    let corpus = load_or_build_corpus(&root, &cfg).unwrap();
    let (bb, stats) = pretrain::<f64>(&corpus, &cfg, 1).unwrap();
    println!(
        "pretrain: chosen {} dev {:.4} loss {:.4}",
        stats.chosen_epoch, stats.dev_wer, stats.history[stats.chosen_epoch].0
    );

    let l1 = corpus.resolve(&corpus.splits.l1_test);
    println!("L1 test {:.4}", backbone_wer(&bb, &l1).unwrap());
    let t = eval_wer(&bb, None, cfg.strip_prompt_frames, &corpus, &corpus.splits.l2_test).unwrap();
    println!(
        "L2 test ALL {:.4} MFA {:.4} LFA {:.4} UA {:.4}",
        t.all,
        t.mfa.unwrap_or(f64::NAN),
        t.lfa.unwrap_or(f64::NAN),
        t.ua.unwrap_or(f64::NAN)
    );

    let mut by_accent: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for u in corpus.resolve(&corpus.splits.l2_test) {
        let hyp = bb.transcribe(&u.features_as::<f64>()).unwrap();
        let e = by_accent.entry(u.accent_id).or_insert((0.0, 0));
        e.0 += wer(&u.transcript, &hyp).unwrap();
        e.1 += 1;
    }
    for (a, (s, n)) in by_accent {
        println!("  accent {a}: wer {:.4} (n {n})", s / n as f64);
    }
}
