use std::path::PathBuf;

use intapt_core::backbone::Backbone;
use intapt_core::config::ExperimentConfig;
use intapt_core::ctc::wer;
use intapt_core::pipeline::load_or_build_corpus;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.epochs_pretrain = 60;
    let root = PathBuf::from("/tmp/sat_cache");
    let corpus = load_or_build_corpus(&root, &cfg).unwrap();
    let (bb, _) = Backbone::<f64>::load(&root.join("backbone-1.json")).unwrap();

    let mut err_rep = 0usize;
    let mut err_norep = 0usize;
    let mut ok_rep = 0usize;
    for u in corpus.resolve(&corpus.splits.l1_test) {
        let hyp = bb.transcribe(&u.features_as::<f64>()).unwrap();
        let w = wer(&u.transcript, &hyp).unwrap();
        let has_rep = u.transcript.windows(2).any(|p| p[0] == p[1]);
        if w > 0.0 {
            if has_rep {
                err_rep += 1;
            } else {
                err_norep += 1;
                println!("non-repeat error: ref {:?} hyp {:?}", u.transcript, hyp);
            }
        } else if has_rep {
            ok_rep += 1;
        }
    }
    println!("errors on repeat transcripts: {err_rep}");
    println!("errors on repeat-free transcripts: {err_norep}");
    println!("repeat transcripts decoded clean: {ok_rep}");
}
