use std::path::PathBuf;
use std::time::Instant;

use intapt_core::accent::AccentModule;
use intapt_core::backbone::Backbone;
use intapt_core::config::ExperimentConfig;
use intapt_core::eval::{accent_cosines, eval_wer, l1_centroid};
use intapt_core::pipeline::load_or_build_corpus;
use intapt_core::synthcorpus::Corpus;
use intapt_core::accent::train_am;
use intapt_core::trainer::{train_intapt, train_prompt_ctc, TrainedRegime};

fn cosine_line(map: &std::collections::BTreeMap<usize, f64>) -> String {
    map.iter().map(|(a, c)| format!("a{a} {c:.4}")).collect::<Vec<_>>().join("  ")
}

fn eval_regime(
    tag: &str,
    corpus: &Corpus,
    bb: &Backbone<f64>,
    am: &AccentModule<f64>,
    centroid: &[f64],
    run: &TrainedRegime<f64>,
    dt: std::time::Duration,
) {
    let pg = run.pg.as_ref().unwrap();
    let l2 = eval_wer(bb, Some(pg), false, corpus, &corpus.splits.l2_test).unwrap();
    let l1 = eval_wer(bb, Some(pg), false, corpus, &corpus.splits.l1_test).unwrap().all;
    let cos = accent_cosines(bb, am, Some(pg), centroid, corpus, &corpus.splits.l2_test).unwrap();
    let mi = run
        .stats
        .history
        .iter()
        .find(|h| h.epoch == run.stats.chosen_epoch)
        .and_then(|h| h.mi_estimate)
        .unwrap_or(f64::NAN);
    println!(
        "  {tag}: chose {} dev {:.4} | L2 ALL {:.4} UA {:.4} | L1 {:.4} | mi {:.3} [{:?}]",
        run.stats.chosen_epoch,
        run.stats.dev_wer,
        l2.all,
        l2.ua.unwrap_or(f64::NAN),
        l1,
        mi,
        dt
    );
    println!("    cos {}", cosine_line(&cos));
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let root = PathBuf::from(&args[1]);
    let mix: f64 = args[2].parse().unwrap();
    let seed: u64 = args[3].parse().unwrap();
    let corpus_seed: u64 = args.get(4).map_or(1234, |s| s.parse().unwrap());

    let mut cfg = ExperimentConfig::default();
    cfg.epochs_pretrain = 60;
    cfg.epochs_regime = 40;
    cfg.corpus.mix_strength = mix;
    cfg.corpus_seed = corpus_seed;

    let corpus = load_or_build_corpus(&root, &cfg).unwrap();
    let (bb, _) = Backbone::<f64>::load(&root.join(format!("backbone-{seed}.json"))).unwrap();

    let am_path = root.join(format!("accent-{seed}.json"));
    let (am, _) = if am_path.exists() {
        AccentModule::<f64>::load(&am_path).unwrap()
    } else {
        let (am, stats) = train_am(&corpus, &bb, &cfg, seed).unwrap();
        am.save(&am_path, &stats).unwrap();
        println!("AM: acc {:.4} corr {:.4}", stats.dev_accuracy, stats.intensity_correlation);
        (am, stats)
    };

    let centroid = l1_centroid(&bb, &am, &corpus).unwrap();
    let l2b = eval_wer(&bb, None, false, &corpus, &corpus.splits.l2_test).unwrap();
    let base_cos =
        accent_cosines(&bb, &am, None, &centroid, &corpus, &corpus.splits.l2_test).unwrap();
    println!(
        "seed {seed}: baseline L2 ALL {:.4} UA {:.4}",
        l2b.all,
        l2b.ua.unwrap_or(f64::NAN)
    );
    println!("  backbone cos {}", cosine_line(&base_cos));

    let t = Instant::now();
    let pc = train_prompt_ctc(&corpus, &bb, &cfg, seed).unwrap();
    eval_regime("pc", &corpus, &bb, &am, &centroid, &pc, t.elapsed());

    for &(lambda, alt, dff) in
        &[(0.3, 1usize, 128usize), (0.3, 4, 128), (0.45, 1, 128), (0.45, 4, 128), (0.3, 4, 64)]
    {
        let mut c = cfg.clone();
        c.lambda_mi = lambda;
        c.alternation_ratio = alt;
        c.prompt_d_ff = dff;
        let t = Instant::now();
        let ia = train_intapt(&corpus, &bb, &am, &c, seed).unwrap();
        eval_regime(
            &format!("ia l{lambda} r{alt} f{dff}"),
            &corpus,
            &bb,
            &am,
            &centroid,
            &ia,
            t.elapsed(),
        );
    }
}
