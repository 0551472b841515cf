//! Unsupervised cross-lingual regularizers over hidden-state populations,
//! and the combined training objective.
//!
//! All three losses operate on the current mini-batch as an approximation
//! of the full per-layer state collections. For more than two languages
//! the regularizer sums over all unordered language pairs.

use crate::corpus::{Vocabulary, SPECIALS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::model::{MlmaModel, SentencePass};
use crate::tensor::{rng_stream, Scalar};
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    /// No alignment regularizer (plain multilingual LM baseline).
    None,
    /// Identical-string embedding matching.
    Iden,
    /// Mean/variance moment matching per layer.
    Mv,
    /// Average-linkage (energy-distance) matching per layer.
    Avl,
}

impl AlignMode {
    pub fn parse(s: &str) -> Result<AlignMode> {
        match s {
            "none" => Ok(AlignMode::None),
            "iden" => Ok(AlignMode::Iden),
            "mv" => Ok(AlignMode::Mv),
            "avl" => Ok(AlignMode::Avl),
            other => Err(Error::Config(format!("unknown alignment mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AlignMode::None => "none",
            AlignMode::Iden => "iden",
            AlignMode::Mv => "mv",
            AlignMode::Avl => "avl",
        }
    }
}

/// Loss mode and every scaling weight. The per-layer weights apply the
/// same value to every layer.
#[derive(Debug, Clone)]
pub struct AlignmentConfig {
    pub mode: AlignMode,
    pub lambda_iden: f64,
    pub lambda_mean: f64,
    pub lambda_var: f64,
    pub lambda_avl: f64,
    /// Language-modeling weight, identical for every language.
    pub lambda_lm: f64,
    /// Per-language per-layer row cap for the quadratic-cost losses;
    /// larger batches are subsampled (seeded).
    pub row_cap: usize,
}

impl Default for AlignmentConfig {
    fn default() -> AlignmentConfig {
        AlignmentConfig {
            mode: AlignMode::Avl,
            lambda_iden: 100.0,
            lambda_mean: 0.1,
            lambda_var: 0.01,
            lambda_avl: 1.0,
            lambda_lm: 1.0,
            row_cap: 512,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.lambda_iden, "lambda_iden"),
            (self.lambda_mean, "lambda_mean"),
            (self.lambda_var, "lambda_var"),
            (self.lambda_avl, "lambda_avl"),
            (self.lambda_lm, "lambda_lm"),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative")));
            }
        }
        if self.row_cap == 0 {
            return Err(Error::Config("row_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Strings present in both vocabularies, with both languages' token ids,
/// in lexicographic order. Specials are excluded.
#[derive(Debug, Clone, Default)]
pub struct IdenticalSet {
    pub entries: Vec<(String, usize, usize)>,
}

impl IdenticalSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Exact string-equality intersection of two vocabularies (which store
/// lowercased tokens), deterministic lexicographic order.
pub fn identical_set(vocab_s: &Vocabulary, vocab_t: &Vocabulary) -> IdenticalSet {
    let mut entries: Vec<(String, usize, usize)> = vocab_s
        .words()
        .filter(|w| !SPECIALS.contains(w))
        .filter_map(|w| {
            vocab_t
                .id_exact(w)
                .filter(|&id| id >= SPECIALS.len())
                .map(|t_id| (w.to_string(), vocab_s.id_exact(w).unwrap(), t_id))
        })
        .collect();
    entries.sort();
    IdenticalSet { entries }
}

/// `lambda / |W| * sum_w ||e_w^s - e_w^t||`, differentiable with respect
/// to both embedding tables. Empty sets contribute zero with a warning.
pub fn loss_iden<T: Scalar>(
    g: &mut Graph<'_, T>,
    table_s: Value,
    table_t: Value,
    iden: &IdenticalSet,
    lambda: f64,
) -> Result<Value> {
    if iden.is_empty() {
        log::warn!("identical-string set is empty; loss_iden contributes 0");
        return Ok(g.constant(crate::tensor::Tensor::scalar(T::zero())));
    }
    let ids_s: Vec<usize> = iden.entries.iter().map(|(_, s, _)| *s).collect();
    let ids_t: Vec<usize> = iden.entries.iter().map(|(_, _, t)| *t).collect();
    let rows_s = g.gather_rows(table_s, ids_s)?;
    let rows_t = g.gather_rows(table_t, ids_t)?;
    let total = g.paired_dist_sum(rows_s, rows_t)?;
    Ok(g.scale(total, lambda / iden.len() as f64))
}

/// Per-layer row matrices of concatenated hidden states for one language
/// pair, sentinel and pad rows already removed.
pub struct BatchStateSample {
    /// One `(rows_s, rows_t)` entry per layer `l = 0..n`.
    pub layers: Vec<(Value, Value)>,
}

impl BatchStateSample {
    fn check_rows<T: Scalar>(&self, g: &Graph<'_, T>, min_rows: usize, what: &str) -> Result<()> {
        for (l, &(s, t)) in self.layers.iter().enumerate() {
            for (side, v) in [("s", s), ("t", t)] {
                let rows = g.value(v).rows();
                if rows < min_rows {
                    return Err(Error::Contract(format!(
                        "{what}: layer {l} side {side} has {rows} rows, needs at least {min_rows}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Moment-matching loss: per layer, normalized Euclidean distances between
/// per-dimension batch means and (population) variances of the two sides.
/// The L1-norm denominators stop the model from shrinking the statistics
/// to evade the regularizer.
pub fn loss_mv<T: Scalar>(
    g: &mut Graph<'_, T>,
    sample: &BatchStateSample,
    cfg: &AlignmentConfig,
) -> Result<Value> {
    sample.check_rows(g, 2, "loss_mv")?;
    let mut terms = Vec::new();
    for &(s, t) in &sample.layers {
        let m_s = g.mean_rows(s);
        let m_t = g.mean_rows(t);
        let v_s = variance_rows(g, s, m_s)?;
        let v_t = variance_rows(g, t, m_t)?;

        let dm = g.sub(m_s, m_t)?;
        let num_m = g.l2_norm(dm);
        let l1_ms = g.l1_norm(m_s);
        let l1_mt = g.l1_norm(m_t);
        let den_m = g.add(l1_ms, l1_mt)?;
        let frac_m = g.div(num_m, den_m)?;
        terms.push(g.scale(frac_m, cfg.lambda_mean));

        let dv = g.sub(v_s, v_t)?;
        let num_v = g.l2_norm(dv);
        let l1_vs = g.l1_norm(v_s);
        let l1_vt = g.l1_norm(v_t);
        let den_v = g.add(l1_vs, l1_vt)?;
        let frac_v = g.div(num_v, den_v)?;
        terms.push(g.scale(frac_v, cfg.lambda_var));
    }
    sum_values(g, &terms)
}

/// Per-dimension population variance of the rows, as `1 x c`.
fn variance_rows<T: Scalar>(g: &mut Graph<'_, T>, x: Value, mean: Value) -> Result<Value> {
    let neg_mean = g.neg(mean);
    let centered = g.add_row_broadcast(x, neg_mean)?;
    let sq = g.mul(centered, centered)?;
    Ok(g.mean_rows(sq))
}

/// Average-linkage loss: per layer,
/// `lambda * (2 avl(S, T) - avl(S, S) - avl(T, T))` with
/// `avl(X, Y) = mean pairwise Euclidean distance`. Self terms include the
/// zero diagonal, which makes each layer term a nonnegative V-statistic.
pub fn loss_avl<T: Scalar>(
    g: &mut Graph<'_, T>,
    sample: &BatchStateSample,
    cfg: &AlignmentConfig,
) -> Result<Value> {
    sample.check_rows(g, 1, "loss_avl")?;
    let mut terms = Vec::new();
    for &(s, t) in &sample.layers {
        let n_s = g.value(s).rows() as f64;
        let n_t = g.value(t).rows() as f64;
        let st = g.pairwise_dist_sum(s, t)?;
        let ss = g.pairwise_dist_sum(s, s)?;
        let tt = g.pairwise_dist_sum(t, t)?;
        let avl_st = g.scale(st, 2.0 / (n_s * n_t));
        let avl_ss = g.scale(ss, 1.0 / (n_s * n_s));
        let avl_tt = g.scale(tt, 1.0 / (n_t * n_t));
        let d1 = g.sub(avl_st, avl_ss)?;
        let d2 = g.sub(d1, avl_tt)?;
        terms.push(g.scale(d2, cfg.lambda_avl));
    }
    sum_values(g, &terms)
}

fn sum_values<T: Scalar>(g: &mut Graph<'_, T>, vs: &[Value]) -> Result<Value> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Everything `total_loss` needs besides the batch itself: the alignment
/// configuration and, for iden mode, one identical set per unordered
/// language pair in `(i, j), i < j` order.
pub struct AlignmentPlan {
    pub cfg: AlignmentConfig,
    pub pair_iden: Vec<IdenticalSet>,
}

impl AlignmentPlan {
    pub fn without_iden(cfg: AlignmentConfig) -> AlignmentPlan {
        AlignmentPlan { cfg, pair_iden: Vec::new() }
    }

    fn iden_for_pair(&self, pair_index: usize) -> &IdenticalSet {
        static EMPTY: IdenticalSet = IdenticalSet { entries: Vec::new() };
        self.pair_iden.get(pair_index).unwrap_or(&EMPTY)
    }
}

/// Combined objective over one mini-batch.
pub struct TotalLossOut {
    pub total: Value,
    /// Per-language `(summed NLL, real-token count)`.
    pub lm_terms: Vec<(Value, usize)>,
    /// The alignment regularizer (zero constant in `None` mode).
    pub reg: Value,
}

/// `L = sum_i lambda_lm * NLL_i / tokens_i + L_reg`, with `L_reg` summed
/// over all unordered language pairs. `batch[i]` holds the token-id
/// sentences of language `i` (model language order); every configured
/// language must contribute at least one sentence. The per-language NLL is
/// normalized by its real-token count so corpora sizes do not skew the
/// balance the equal-sentence sampling establishes.
pub fn total_loss<'g, T: Scalar>(
    g: &mut Graph<'g, T>,
    model: &'g MlmaModel<T>,
    batch: &[Vec<Vec<usize>>],
    plan: &AlignmentPlan,
    seed: u64,
) -> Result<TotalLossOut> {
    plan.cfg.validate()?;
    let n_langs = model.languages().len();
    if batch.len() != n_langs {
        return Err(Error::Contract(format!(
            "batch covers {} languages, model has {n_langs}",
            batch.len()
        )));
    }
    if let Some(missing) = batch.iter().position(|s| s.is_empty()) {
        return Err(Error::Contract(format!(
            "language {} contributes no sentences to this batch",
            model.languages()[missing]
        )));
    }

    let needs_states = matches!(plan.cfg.mode, AlignMode::Mv | AlignMode::Avl);
    let mut lm_terms = Vec::with_capacity(n_langs);
    let mut pooled: Vec<Vec<Value>> = Vec::with_capacity(n_langs);
    for (lang, sentences) in batch.iter().enumerate() {
        let mut nll_acc: Option<Value> = None;
        let mut tokens = 0usize;
        let mut per_layer: Vec<Vec<Value>> = vec![Vec::new(); model.config().n_layers + 1];
        for ids in sentences {
            let pass: SentencePass = model.sentence_pass(g, ids, lang)?;
            tokens += pass.n_tokens;
            nll_acc = Some(match nll_acc {
                Some(acc) => g.add(acc, pass.nll)?,
                None => pass.nll,
            });
            if needs_states {
                let fwd = model.real_rows(g, &pass.fwd_layers, pass.n_tokens)?;
                let bwd = model.real_rows(g, &pass.bwd_layers, pass.n_tokens)?;
                let hidden = model.concat_hidden(g, &fwd, &bwd)?;
                for (l, h) in hidden.into_iter().enumerate() {
                    per_layer[l].push(h);
                }
            }
        }
        lm_terms.push((nll_acc.expect("nonempty"), tokens));
        if needs_states {
            let mut layers = Vec::with_capacity(per_layer.len());
            for (l, vs) in per_layer.iter().enumerate() {
                let all = g.concat_rows(vs)?;
                layers.push(subsample_rows(g, all, plan.cfg.row_cap, seed, (lang, l))?);
            }
            pooled.push(layers);
        }
    }

    let mut reg_terms: Vec<Value> = Vec::new();
    let mut pair_index = 0usize;
    for i in 0..n_langs {
        for j in (i + 1)..n_langs {
            match plan.cfg.mode {
                AlignMode::None => {}
                AlignMode::Iden => {
                    let iden = plan.iden_for_pair(pair_index);
                    let e_s = g.param(model.embedding_id(i));
                    let e_t = g.param(model.embedding_id(j));
                    reg_terms.push(loss_iden(g, e_s, e_t, iden, plan.cfg.lambda_iden)?);
                }
                AlignMode::Mv | AlignMode::Avl => {
                    let sample = BatchStateSample {
                        layers: pooled[i]
                            .iter()
                            .zip(pooled[j].iter())
                            .map(|(&a, &b)| (a, b))
                            .collect(),
                    };
                    let term = if plan.cfg.mode == AlignMode::Mv {
                        loss_mv(g, &sample, &plan.cfg)?
                    } else {
                        loss_avl(g, &sample, &plan.cfg)?
                    };
                    reg_terms.push(term);
                }
            }
            pair_index += 1;
        }
    }

    let reg = if reg_terms.is_empty() {
        g.constant(crate::tensor::Tensor::scalar(T::zero()))
    } else {
        sum_values(g, &reg_terms)?
    };

    let mut total = reg;
    for &(nll, tokens) in &lm_terms {
        let weighted = g.scale(nll, plan.cfg.lambda_lm / tokens as f64);
        total = g.add(total, weighted)?;
    }
    Ok(TotalLossOut { total, lm_terms, reg })
}

/// Uniform seeded subsample of rows when the pooled batch exceeds the cap.
fn subsample_rows<T: Scalar>(
    g: &mut Graph<'_, T>,
    rows: Value,
    cap: usize,
    seed: u64,
    tag: (usize, usize),
) -> Result<Value> {
    let n = g.value(rows).rows();
    if n <= cap {
        return Ok(rows);
    }
    let mut rng = rng_stream(seed, 0x7375_6200 ^ ((tag.0 as u64) << 16) ^ tag.1 as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(cap);
    idx.sort_unstable();
    g.gather_rows(rows, idx)
}
