//! Entity-level exact-span exact-type F1 (conlleval semantics) and
//! token-level accuracy, with multi-seed aggregation.

use crate::error::{Error, Result};
use crate::tagger::TagKind;
use std::fmt::Write as _;

/// A labeled span: `(entity type, first token, last token)`, inclusive.
pub type Entity = (String, usize, usize);

/// Decode BIO tags into entities. Stray `I-X` after `O`, after a
/// different type, or at the start opens a new entity (the conlleval
/// repair convention).
pub fn extract_entities(tags: &[String]) -> Vec<Entity> {
    let mut out = Vec::new();
    let mut current: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (prefix, kind) = match tag.split_once('-') {
            Some((p, k)) if p == "B" || p == "I" => (p, k),
            _ => ("O", ""),
        };
        let continues = prefix == "I"
            && current.as_ref().map(|(k, _)| k.as_str() == kind).unwrap_or(false);
        if !continues {
            if let Some((k, start)) = current.take() {
                out.push((k, start, i - 1));
            }
            if prefix == "B" || prefix == "I" {
                current = Some((kind.to_string(), i));
            }
        }
    }
    if let Some((k, start)) = current {
        out.push((k, start, tags.len() - 1));
    }
    out
}

/// Task metrics in percent. For POS only `accuracy` is meaningful; for
/// NER `accuracy` carries the token-level score alongside the span F1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Score predictions against gold tags. Sentence lists must be parallel
/// and each sentence pair of equal length.
pub fn evaluate(kind: TagKind, gold: &[Vec<String>], pred: &[Vec<String>]) -> Result<Metrics> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold sentences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut token_correct = 0usize;
    let mut token_total = 0usize;
    let mut n_gold = 0usize;
    let mut n_pred = 0usize;
    let mut n_correct = 0usize;
    for (g, p) in gold.iter().zip(pred.iter()) {
        if g.len() != p.len() {
            return Err(Error::Contract(format!(
                "sentence length mismatch: {} gold tags vs {} predicted",
                g.len(),
                p.len()
            )));
        }
        token_total += g.len();
        token_correct += g.iter().zip(p.iter()).filter(|(a, b)| a == b).count();
        if kind == TagKind::NerBio {
            let ge = extract_entities(g);
            let pe = extract_entities(p);
            n_gold += ge.len();
            n_pred += pe.len();
            n_correct += pe.iter().filter(|e| ge.contains(e)).count();
        }
    }
    let accuracy = if token_total > 0 {
        100.0 * token_correct as f64 / token_total as f64
    } else {
        0.0
    };
    match kind {
        TagKind::Pos => Ok(Metrics { precision: accuracy, recall: accuracy, f1: accuracy, accuracy }),
        TagKind::NerBio => {
            let precision = if n_pred > 0 { 100.0 * n_correct as f64 / n_pred as f64 } else { 0.0 };
            let recall = if n_gold > 0 { 100.0 * n_correct as f64 / n_gold as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            Ok(Metrics { precision, recall, f1, accuracy })
        }
    }
}

/// Per-seed metrics with mean and (population) standard deviation.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub task: TagKind,
    pub per_seed: Vec<(u64, Metrics)>,
    pub mean: Metrics,
    pub std: Metrics,
}

impl MetricsReport {
    pub fn from_runs(task: TagKind, per_seed: Vec<(u64, Metrics)>) -> MetricsReport {
        assert!(!per_seed.is_empty());
        let n = per_seed.len() as f64;
        let pick = |f: fn(&Metrics) -> f64| -> (f64, f64) {
            let mean = per_seed.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
            let var = per_seed.iter().map(|(_, m)| (f(m) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (pm, ps) = pick(|m| m.precision);
        let (rm, rs) = pick(|m| m.recall);
        let (fm, fs) = pick(|m| m.f1);
        let (am, as_) = pick(|m| m.accuracy);
        MetricsReport {
            task,
            per_seed,
            mean: Metrics { precision: pm, recall: rm, f1: fm, accuracy: am },
            std: Metrics { precision: ps, recall: rs, f1: fs, accuracy: as_ },
        }
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        match self.task {
            TagKind::NerBio => {
                let _ = writeln!(out, "{:>8} {:>10} {:>10} {:>10} {:>10}", "seed", "precision", "recall", "f1", "token-acc");
                for (seed, m) in &self.per_seed {
                    let _ = writeln!(
                        out,
                        "{seed:>8} {:>10.2} {:>10.2} {:>10.2} {:>10.2}",
                        m.precision, m.recall, m.f1, m.accuracy
                    );
                }
                let _ = writeln!(
                    out,
                    "{:>8} {:>10.2} {:>10.2} {:>10.2} {:>10.2}",
                    "mean", self.mean.precision, self.mean.recall, self.mean.f1, self.mean.accuracy
                );
                let _ = writeln!(
                    out,
                    "{:>8} {:>10.2} {:>10.2} {:>10.2} {:>10.2}",
                    "std", self.std.precision, self.std.recall, self.std.f1, self.std.accuracy
                );
            }
            TagKind::Pos => {
                let _ = writeln!(out, "{:>8} {:>10}", "seed", "accuracy");
                for (seed, m) in &self.per_seed {
                    let _ = writeln!(out, "{seed:>8} {:>10.2}", m.accuracy);
                }
                let _ = writeln!(out, "{:>8} {:>10.2}", "mean", self.mean.accuracy);
                let _ = writeln!(out, "{:>8} {:>10.2}", "std", self.std.accuracy);
            }
        }
        out
    }

    /// Machine-readable line-delimited records.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for (seed, m) in &self.per_seed {
            let _ = writeln!(
                out,
                "task={} seed={seed} precision={:.6} recall={:.6} f1={:.6} accuracy={:.6}",
                self.task.name(),
                m.precision,
                m.recall,
                m.f1,
                m.accuracy
            );
        }
        let _ = writeln!(
            out,
            "task={} summary=mean precision={:.6} recall={:.6} f1={:.6} accuracy={:.6}",
            self.task.name(),
            self.mean.precision,
            self.mean.recall,
            self.mean.f1,
            self.mean.accuracy
        );
        let _ = writeln!(
            out,
            "task={} summary=std precision={:.6} recall={:.6} f1={:.6} accuracy={:.6}",
            self.task.name(),
            self.std.precision,
            self.std.recall,
            self.std.f1,
            self.std.accuracy
        );
        out
    }
}
