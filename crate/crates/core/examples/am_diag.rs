use std::time::Instant;

use intapt_core::accent::train_am;
use intapt_core::backbone::pretrain;
use intapt_core::config::ExperimentConfig;
use intapt_core::synthcorpus::build_corpus;

fn main() {
    for (mix, shift) in [(0.25, 1.5), (0.45, 2.0)] {
        let mut cfg = ExperimentConfig::default();
        cfg.corpus.mix_strength = mix;
        cfg.corpus.shift_scale = shift;
        cfg.validate().unwrap();
        let corpus = build_corpus(&cfg).unwrap();

        let t0 = Instant::now();
        let (bb, ps) = match pretrain::<f64>(&corpus, &cfg, 1) {
            Ok(x) => x,
            Err(e) => {
                println!("mix {mix} shift {shift}: pretrain failed: {e}");
                continue;
            }
        };
        let t1 = Instant::now();
        let (_, stats) = train_am(&corpus, &bb, &cfg, 1).unwrap();
        println!(
            "mix {mix} shift {shift}: pretrain wer {:.4} ({:.0?}) am acc {:.3} corr {:.3} ({:.0?})",
            ps.dev_wer,
            t1 - t0,
            stats.dev_accuracy,
            stats.intensity_correlation,
            t1.elapsed()
        );
    }
}
