//! Scratch driver: one default-scale seed end to end, with per-epoch
//! histories and stage timings, to calibrate the default epoch counts.

use std::path::Path;
use std::time::Instant;

use intapt_core::config::ExperimentConfig;
use intapt_core::pipeline::{render_text, run_experiment};

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = vec![1];
    cfg.epochs_regime = 40;

    let root = Path::new("/tmp/desk_diag");
    let _ = std::fs::remove_dir_all(root);

    let t0 = Instant::now();
    let report = run_experiment::<f64>(&cfg, root).expect("run");
    println!("total {:.1}s", t0.elapsed().as_secs_f64());

    let s = &report.per_seed[0];
    println!("\npretrain history (loss, dev wer):");
    for (e, (l, w)) in s.pretrain.history.iter().enumerate() {
        if e % 3 == 0 || e + 1 == s.pretrain.history.len() {
            println!("  {e:3} {l:.4} {w:.4}");
        }
    }
    println!("pretrain chosen epoch {} dev {:.4}", s.pretrain.chosen_epoch, s.pretrain.dev_wer);
    println!(
        "am dev acc {:.4} corr {:.4} chosen {}",
        s.am.dev_accuracy, s.am.intensity_correlation, s.am.chosen_epoch
    );

    for tag in ["finetune", "prompt_ctc", "intapt"] {
        println!("\n{tag} per-epoch (train loss, mi, dev wer):");
        let path = root.join("seed-1").join(tag).join("metrics.jsonl");
        let text = std::fs::read_to_string(path).expect("metrics");
        for (e, line) in text.lines().enumerate() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            if e % 2 == 0 || e + 1 == text.lines().count() {
                println!(
                    "  {e:3} {:8.4} {:>8} {:.4}",
                    v["train_loss"].as_f64().unwrap(),
                    v["mi_estimate"].as_f64().map_or("--".into(), |m| format!("{m:.3}")),
                    v["dev_wer"].as_f64().unwrap()
                );
            }
        }
    }

    println!("\n{}", render_text(&report));
}
