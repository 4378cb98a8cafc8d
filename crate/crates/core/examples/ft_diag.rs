use std::path::PathBuf;

use intapt_core::backbone::{backbone_wer, Backbone};
use intapt_core::config::ExperimentConfig;
use intapt_core::pipeline::load_or_build_corpus;
use intapt_core::trainer::train_finetune;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let root = PathBuf::from(&args[1]);
    let mix: f64 = args[2].parse().unwrap();
    let imin: f64 = args[3].parse().unwrap();
    let imax: f64 = args[4].parse().unwrap();
    let seed: u64 = args[5].parse().unwrap();

    let mut cfg = ExperimentConfig::default();
    cfg.corpus.mix_strength = mix;
    cfg.corpus.intensity_mean_min = imin;
    cfg.corpus.intensity_mean_max = imax;
    cfg.validate().unwrap();

    let corpus = load_or_build_corpus(&root, &cfg).unwrap();
    let (bb, _) = Backbone::<f64>::load(&root.join(format!("seed-{seed}/backbone.json"))).unwrap();
    let l1 = corpus.resolve(&corpus.splits.l1_test);
    let base_l1 = backbone_wer(&bb, &l1).unwrap();
    println!("baseline l1 {base_l1:.4}");

    for lr in [1.5e-3, 3e-3, 6e-3, 1e-2] {
        let mut c = cfg.clone();
        c.lr_finetune = lr;
        let run = train_finetune(&corpus, &bb, &c, seed).unwrap();
        let m = run.finetuned.as_ref().unwrap();
        let l1_wer = backbone_wer(m, &l1).unwrap();
        let l2 = intapt_core::eval::eval_wer(m, None, c.strip_prompt_frames, &corpus, &corpus.splits.l2_test).unwrap();
        println!(
            "lr {lr:.4}: l1 {l1_wer:.4} delta {:+.4}  l2 ALL {:.4} UA {:.4}  dev {:.4} ep {}",
            l1_wer - base_l1,
            l2.all,
            l2.ua.unwrap_or(f64::NAN),
            run.stats.dev_wer,
            run.stats.chosen_epoch
        );
    }
}
