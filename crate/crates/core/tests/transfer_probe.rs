//! Calibration probe for the synthetic transfer experiment (ignored by
//! default; run with --ignored to print timings and metric trends).

use mlma_core::align::AlignMode;
use mlma_core::config::{KvConfig, RunConfig};
use mlma_core::corpus::{gen_synthetic_pair, SyntheticPairSpec};
use mlma_core::pipeline::{evaluate_checkpoints, train_lm_from_data, train_tagger_from_data};
use std::time::Instant;

fn probe_config(mode: &str, epochs: usize) -> RunConfig {
    let text = format!(
        "languages = src,tgt\nsources = src\ntarget = tgt\ntask = pos\nmode = {mode}\n\
         lm.epochs = {epochs}\nlm.lr = 1e-3\nlm.tokens_per_lang = 256\nalign.row_cap = 128\nalign.lambda_avl = 0.3\n\
         tagger.use_char = false\n\
         tagger.epochs = 60\ntagger.patience = 20\ntagger.lr = 1e-2\ntagger.decay_factor = 0.05\n\
         tagger.word_hidden = 48\n"
    );
    RunConfig::from_kv(&KvConfig::parse(&text).unwrap()).unwrap()
}

#[test]
#[ignore]
fn probe_transfer_gap() {
    let spec = SyntheticPairSpec::desk_default(8, 0.1, 2000);
    let pair = gen_synthetic_pair(&spec, 7).unwrap();
    let corpora = vec![pair.mono_source.clone(), pair.mono_target.clone()];

    for mode in ["none", "avl"] {
        let cfg = probe_config(mode, 60);
        let t0 = Instant::now();
        let (lm, report) = train_lm_from_data::<f32>(&cfg, &corpora, 1).unwrap();
        let lm_time = t0.elapsed();
        let ppl = |log: &mlma_core::pipeline::LmEpochLog| -> Vec<f64> {
            log.per_language_nll.iter().map(|n| n.exp()).collect()
        };
        eprintln!(
            "mode={mode}: lm {lm_time:?}; first ppl {:?}; last ppl {:?}; reg {:.4} -> {:.4}",
            ppl(&report.epochs[0]),
            ppl(report.epochs.last().unwrap()),
            report.epochs[0].reg,
            report.epochs.last().unwrap().reg
        );
        assert_eq!(lm.align_mode, AlignMode::parse(mode).unwrap());

        let t1 = Instant::now();
        let (bundle, trep) = train_tagger_from_data(
            &cfg,
            &lm,
            &pair.labeled_train_source[60..].to_vec(),
            &pair.labeled_train_source[..60].to_vec(),
            11,
        )
        .unwrap();
        eprintln!(
            "mode={mode}: tagger {:?}; best dev {:.2} at {}; last {:?}",
            t1.elapsed(),
            trep.best_dev,
            trep.best_epoch,
            &trep.dev_history[trep.dev_history.len().saturating_sub(5)..]
        );
        let report =
            evaluate_checkpoints(&cfg, &lm, &[(11, bundle)], &pair.labeled_test_target).unwrap();
        eprintln!("mode={mode}: target accuracy {:.2}", report.mean.accuracy);
    }
}

/// Viterbi accuracy of a reader that knows the latent dynamics and tag
/// masses but nothing lexical: the ceiling for context-only transfer.
#[test]
#[ignore]
fn probe_dynamics_only_ceiling() {
    let spec = SyntheticPairSpec::desk_default(8, 0.1, 100);
    let pair = gen_synthetic_pair(&spec, 7).unwrap();
    let n = spec.n_tags;
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in &pair.labeled_test_target {
        let len = s.tokens.len();
        // Viterbi over the true transition matrix with uniform emissions
        let mut delta: Vec<f64> = spec.initial.iter().map(|p| p.ln()).collect();
        let mut back: Vec<Vec<usize>> = Vec::new();
        for _ in 1..len {
            let mut next = vec![f64::NEG_INFINITY; n];
            let mut ptr = vec![0usize; n];
            for j in 0..n {
                for i in 0..n {
                    let sc = delta[i] + spec.transition[i][j].ln();
                    if sc > next[j] {
                        next[j] = sc;
                        ptr[j] = i;
                    }
                }
            }
            delta = next;
            back.push(ptr);
        }
        let mut best = 0usize;
        for j in 1..n {
            if delta[j] > delta[best] {
                best = j;
            }
        }
        let mut path = vec![best];
        for ptr in back.iter().rev() {
            path.push(ptr[*path.last().unwrap()]);
        }
        path.reverse();
        for (p, gold) in path.iter().zip(s.tags.iter()) {
            if format!("T{p}") == *gold {
                correct += 1;
            }
            total += 1;
        }
    }
    eprintln!("dynamics-only ceiling: {:.2}%", 100.0 * correct as f64 / total as f64);
}
