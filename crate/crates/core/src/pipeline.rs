//! The three-step pipeline: LM+alignment training, frozen-representation
//! tagger training on source languages, and target-language evaluation,
//! plus the nearest-neighbor probe.

use crate::align::{identical_set, AlignMode, AlignmentPlan, IdenticalSet};
use crate::checkpoint;
use crate::clcr::{extract_clcr, stack_constants, uniform_combine, ClcrStack};
use crate::config::{Precision, RunConfig};
use crate::corpus::{self, LabeledSentence, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics, MetricsReport};
use crate::graph::Graph;
use crate::model::MlmaModel;
use crate::optim::{adam_step, set_learning_rate, AdamState};
use crate::params::{GradStore, ParamSet};
use crate::tagger::{predict, CharVocab, CrfTagger, TagScheme};
use crate::tensor::{cosine, rng_stream, Scalar, Tensor};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

// -- LM training --------------------------------------------------------------

/// Per-epoch view of LM training.
#[derive(Debug, Clone)]
pub struct LmEpochLog {
    /// Per-token NLL per language, model language order.
    pub per_language_nll: Vec<f64>,
    /// Mean regularizer value per batch.
    pub reg: f64,
}

#[derive(Debug, Clone)]
pub struct LmTrainReport {
    pub epochs: Vec<LmEpochLog>,
}

/// A trained or loaded LM with everything downstream stages need.
pub struct LmBundle<T: Scalar> {
    pub model: MlmaModel<T>,
    pub params: ParamSet<T>,
    pub vocabs: Vec<Vocabulary>,
    pub align_mode: AlignMode,
}

impl<T: Scalar> LmBundle<T> {
    pub fn language_index(&self, lang: &str) -> Result<usize> {
        self.model.language_index(lang)
    }

    /// Token ids of a sentence in one language (unknowns map to `<unk>`).
    pub fn encode(&self, lang: usize, tokens: &[String]) -> Vec<usize> {
        self.vocabs[lang].encode(tokens)
    }
}

/// Train the multilingual LM with the configured alignment mode on
/// in-memory corpora (one token-sentence list per configured language).
pub fn train_lm_from_data<T: Scalar>(
    cfg: &RunConfig,
    corpora: &[Vec<Vec<String>>],
    seed: u64,
) -> Result<(LmBundle<T>, LmTrainReport)> {
    if corpora.len() != cfg.languages.len() {
        return Err(Error::Config(format!(
            "{} corpora for {} languages",
            corpora.len(),
            cfg.languages.len()
        )));
    }
    let vocabs: Vec<Vocabulary> = corpora
        .iter()
        .map(|sents| corpus::build_vocab(sents.iter().map(|s| s.as_slice()), cfg.mlma.vocab_cap))
        .collect();
    let lang_sizes: Vec<(String, usize)> = cfg
        .languages
        .iter()
        .zip(vocabs.iter())
        .map(|(l, v)| (l.clone(), v.len()))
        .collect();
    let (model, mut params) = MlmaModel::<T>::new(cfg.mlma.clone(), &lang_sizes, seed)?;

    let ids: Vec<Vec<Vec<usize>>> = corpora
        .iter()
        .zip(vocabs.iter())
        .map(|(sents, v)| sents.iter().map(|s| v.encode(s)).collect())
        .collect();

    // identical sets per unordered pair, in (i, j) i < j order
    let mut pair_iden: Vec<IdenticalSet> = Vec::new();
    for i in 0..vocabs.len() {
        for j in (i + 1)..vocabs.len() {
            pair_iden.push(identical_set(&vocabs[i], &vocabs[j]));
        }
    }
    let plan = AlignmentPlan { cfg: cfg.align.clone(), pair_iden };

    let mut grads = GradStore::new(&params);
    let mut adam = AdamState::new(cfg.lm_opt.lr, cfg.lm_opt.clip_norm);
    let mut report = LmTrainReport { epochs: Vec::new() };
    for epoch in 0..cfg.lm_opt.epochs {
        let batches = corpus::lm_batches(
            &ids,
            cfg.lm_opt.tokens_per_language,
            cfg.mlma.max_sentence_len,
            seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9),
        )?;
        let mut nll_sums = vec![0.0f64; cfg.languages.len()];
        let mut token_sums = vec![0usize; cfg.languages.len()];
        let mut reg_sum = 0.0f64;
        for (bi, batch) in batches.iter().enumerate() {
            let batch_sents: Vec<Vec<Vec<usize>>> = batch
                .per_language
                .iter()
                .enumerate()
                .map(|(li, idxs)| idxs.iter().map(|&i| ids[li][i].clone()).collect())
                .collect();
            let graph_seed = rng_stream(seed, ((epoch as u64) << 24) | bi as u64).next_u64();
            let mut g = Graph::train(&params, graph_seed);
            let out = crate::align::total_loss(&mut g, &model, &batch_sents, &plan, graph_seed)?;
            let total = g.value(out.total).item().to_f64();
            if !total.is_finite() {
                return Err(non_finite_diagnostic(&g, &out, &cfg.languages));
            }
            for (li, &(nll, tokens)) in out.lm_terms.iter().enumerate() {
                nll_sums[li] += g.value(nll).item().to_f64();
                token_sums[li] += tokens;
            }
            reg_sum += g.value(out.reg).item().to_f64();
            g.backward(out.total)?;
            g.flush_param_grads(&mut grads);
            if !grads.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in epoch {epoch} batch {bi}"
                )));
            }
            adam_step(&mut params, &grads, &mut adam)?;
            grads.zero();
        }
        let log = LmEpochLog {
            per_language_nll: nll_sums
                .iter()
                .zip(token_sums.iter())
                .map(|(&s, &t)| s / (2.0 * t.max(1) as f64))
                .collect(),
            reg: reg_sum / batches.len().max(1) as f64,
        };
        log::info!(
            "lm epoch {epoch}: per-token nll {:?}, reg {:.6}",
            log.per_language_nll,
            log.reg
        );
        report.epochs.push(log);
    }
    Ok((LmBundle { model, params, vocabs, align_mode: cfg.align.mode }, report))
}

fn non_finite_diagnostic<T: Scalar>(
    g: &Graph<'_, T>,
    out: &crate::align::TotalLossOut,
    languages: &[String],
) -> Error {
    for (li, &(nll, _)) in out.lm_terms.iter().enumerate() {
        if !g.value(nll).item().to_f64().is_finite() {
            return Error::Numeric(format!(
                "language-model loss for {} is not finite",
                languages[li]
            ));
        }
    }
    if !g.value(out.reg).item().to_f64().is_finite() {
        return Error::Numeric("alignment regularizer is not finite".into());
    }
    Error::Numeric("total loss is not finite".into())
}

/// File-based front end: loads the per-language corpora, trains, writes
/// the checkpoint, its sidecar, and one vocabulary file per language.
pub fn train_lm<T: Scalar>(cfg: &RunConfig, seed: u64, out: &Path) -> Result<LmTrainReport> {
    let mut corpora = Vec::new();
    for lang in &cfg.languages {
        let path = cfg
            .corpus_paths
            .get(lang)
            .ok_or_else(|| Error::Config(format!("no corpus path for language {lang}")))?;
        corpora.push(corpus::load_plain(path)?);
    }
    let (bundle, report) = train_lm_from_data::<T>(cfg, &corpora, seed)?;
    save_lm(&bundle, cfg, seed, out)?;
    Ok(report)
}

pub fn save_lm<T: Scalar>(
    bundle: &LmBundle<T>,
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
) -> Result<()> {
    checkpoint::write_params(out, &bundle.params)?;
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "lm".into());
    meta.insert("precision".into(), T::DTYPE.name().into());
    meta.insert("languages".into(), cfg.languages.join(","));
    meta.insert("mode".into(), bundle.align_mode.name().into());
    meta.insert("seed".into(), seed.to_string());
    meta.insert("lm.layers".into(), cfg.mlma.n_layers.to_string());
    meta.insert("lm.heads".into(), cfg.mlma.n_heads.to_string());
    meta.insert("lm.d_model".into(), cfg.mlma.d_model.to_string());
    meta.insert("lm.d_ff".into(), cfg.mlma.d_ff.to_string());
    meta.insert("lm.dropout".into(), cfg.mlma.dropout.to_string());
    meta.insert("lm.max_len".into(), cfg.mlma.max_sentence_len.to_string());
    meta.insert("lm.vocab_cap".into(), cfg.mlma.vocab_cap.to_string());
    for (lang, vocab) in cfg.languages.iter().zip(bundle.vocabs.iter()) {
        let text = vocab.to_text();
        std::fs::write(vocab_path(out, lang), &text)?;
        meta.insert(format!("vocab_hash.{lang}"), checkpoint::sha256_hex(text.as_bytes()));
    }
    checkpoint::write_sidecar(&checkpoint::sidecar_path(out), &meta)
}

fn vocab_path(ckpt: &Path, lang: &str) -> PathBuf {
    let mut os = ckpt.as_os_str().to_os_string();
    os.push(format!(".vocab.{lang}"));
    PathBuf::from(os)
}

pub fn load_lm<T: Scalar>(ckpt: &Path) -> Result<LmBundle<T>> {
    let meta = checkpoint::read_sidecar(&checkpoint::sidecar_path(ckpt))?;
    let req = |k: &str| -> Result<&str> {
        meta.get(k)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("sidecar missing {k}")))
    };
    if req("precision")? != T::DTYPE.name() {
        return Err(Error::Checkpoint(format!(
            "checkpoint precision {} does not match requested {}",
            req("precision")?,
            T::DTYPE.name()
        )));
    }
    let parse_usize = |k: &str| -> Result<usize> {
        req(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad sidecar value for {k}")))
    };
    let config = crate::model::MlmaConfig {
        n_layers: parse_usize("lm.layers")?,
        n_heads: parse_usize("lm.heads")?,
        d_model: parse_usize("lm.d_model")?,
        d_ff: parse_usize("lm.d_ff")?,
        dropout: req("lm.dropout")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad sidecar value for lm.dropout".into()))?,
        max_sentence_len: parse_usize("lm.max_len")?,
        vocab_cap: parse_usize("lm.vocab_cap")?,
    };
    let languages: Vec<String> = req("languages")?.split(',').map(|s| s.to_string()).collect();
    let mut vocabs = Vec::new();
    for lang in &languages {
        let text = std::fs::read_to_string(vocab_path(ckpt, lang))?;
        let expect = req(&format!("vocab_hash.{lang}"))?;
        let got = checkpoint::sha256_hex(text.as_bytes());
        if got != expect {
            return Err(Error::Checkpoint(format!(
                "vocabulary file for {lang} does not match its recorded hash"
            )));
        }
        vocabs.push(Vocabulary::from_text(&text)?);
    }
    let lang_sizes: Vec<(String, usize)> = languages
        .iter()
        .zip(vocabs.iter())
        .map(|(l, v)| (l.clone(), v.len()))
        .collect();
    let (model, mut params) = MlmaModel::<T>::new(config, &lang_sizes, 0)?;
    checkpoint::read_params(ckpt, &mut params)?;
    let align_mode = AlignMode::parse(req("mode")?)?;
    Ok(LmBundle { model, params, vocabs, align_mode })
}

// -- tagger training -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TaggerTrainReport {
    /// Dev metric after each epoch (entity F1 for NER, accuracy for POS).
    pub dev_history: Vec<f64>,
    pub best_epoch: usize,
    pub best_dev: f64,
    pub stopped_early: bool,
}

pub struct TaggerBundle<T: Scalar> {
    pub tagger: CrfTagger<T>,
    pub params: ParamSet<T>,
}

/// Extract (or reuse) the frozen stacks for a list of sentences.
fn clcr_stacks<T: Scalar>(
    lm: &LmBundle<T>,
    sentences: &[LabeledSentence],
) -> Result<Vec<ClcrStack<T>>> {
    sentences
        .iter()
        .map(|s| {
            let lang = lm.language_index(&s.language)?;
            let ids = lm.encode(lang, &s.tokens);
            extract_clcr(&lm.model, &lm.params, &ids, lang)
        })
        .collect()
}

/// Train the labeler on source-language data with the LM frozen.
/// `train` may mix several source languages; `dev` drives early stopping.
/// Returns the best-dev parameters, not the last.
pub fn train_tagger_from_data<T: Scalar>(
    cfg: &RunConfig,
    lm: &LmBundle<T>,
    train: &[LabeledSentence],
    dev: &[LabeledSentence],
    seed: u64,
) -> Result<(TaggerBundle<T>, TaggerTrainReport)> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config("tagger needs nonempty train and dev sets".into()));
    }
    // zero-resource contract: no target-language labels enter training
    if !cfg.target.is_empty() {
        for s in train.iter().chain(dev.iter()) {
            if s.language == cfg.target {
                return Err(Error::Contract(format!(
                    "target language {} labeled data passed as training input",
                    cfg.target
                )));
            }
        }
    }
    let mut scheme_sents: Vec<LabeledSentence> = train.to_vec();
    scheme_sents.extend_from_slice(dev);
    let scheme = TagScheme::from_corpus(&scheme_sents, cfg.task);
    let char_vocab = CharVocab::from_corpus(train);
    let (tagger, mut params) = CrfTagger::<T>::new(
        cfg.tagger.clone(),
        scheme,
        char_vocab,
        lm.model.config().n_layers + 1,
        lm.model.clcr_width(),
        cfg.combiner,
        seed,
    )?;

    let train_stacks = clcr_stacks(lm, train)?;
    let dev_stacks = clcr_stacks(lm, dev)?;
    let gold_ids: Vec<Vec<usize>> = train
        .iter()
        .map(|s| tagger.scheme.encode(&s.tags))
        .collect::<Result<_>>()?;

    let lm_fingerprint = param_fingerprint(&lm.params);

    let mut grads = GradStore::new(&params);
    let mut adam = AdamState::new(cfg.tagger_opt.lr, cfg.tagger_opt.clip_norm);
    let mut best_params = params.clone();
    let mut best_dev = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut non_improving = 0usize;
    let mut report = TaggerTrainReport {
        dev_history: Vec::new(),
        best_epoch: 0,
        best_dev: 0.0,
        stopped_early: false,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.tagger_opt.epochs {
        set_learning_rate(
            &mut adam,
            cfg.tagger_opt.decay.rate(cfg.tagger_opt.lr, cfg.tagger_opt.decay_factor, epoch),
        );
        let mut rng = rng_stream(seed, 0x6570 ^ (epoch as u64) << 8);
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(cfg.tagger_opt.batch_size).enumerate() {
            grads.zero();
            let graph_seed = rng_stream(seed, ((epoch as u64) << 20) | bi as u64).next_u64();
            let mut g = Graph::train(&params, graph_seed);
            let mut loss_acc = None;
            for &si in chunk {
                let layers = stack_constants(&mut g, &train_stacks[si]);
                let em = tagger.emissions(&mut g, &layers, &train[si].tokens)?;
                let nll = tagger.crf_nll(&mut g, em, &gold_ids[si])?;
                loss_acc = Some(match loss_acc {
                    Some(acc) => g.add(acc, nll)?,
                    None => nll,
                });
            }
            let loss = loss_acc.expect("nonempty batch");
            if !g.value(loss).item().to_f64().is_finite() {
                return Err(Error::Numeric(format!(
                    "tagger loss not finite in epoch {epoch} batch {bi}"
                )));
            }
            g.backward(loss)?;
            g.flush_param_grads(&mut grads);
            adam_step(&mut params, &grads, &mut adam)?;
        }
        let metric = dev_metric(cfg, &tagger, &params, dev, &dev_stacks)?;
        report.dev_history.push(metric);
        log::info!("tagger epoch {epoch}: dev {metric:.2}");
        if metric > best_dev {
            best_dev = metric;
            best_epoch = epoch;
            best_params = params.clone();
            non_improving = 0;
        } else {
            non_improving += 1;
            if non_improving >= cfg.tagger_opt.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    debug_assert_eq!(
        lm_fingerprint,
        param_fingerprint(&lm.params),
        "frozen LM parameters must not move during tagger training"
    );
    report.best_epoch = best_epoch;
    report.best_dev = best_dev;
    Ok((TaggerBundle { tagger, params: best_params }, report))
}

fn dev_metric<T: Scalar>(
    cfg: &RunConfig,
    tagger: &CrfTagger<T>,
    params: &ParamSet<T>,
    dev: &[LabeledSentence],
    stacks: &[ClcrStack<T>],
) -> Result<f64> {
    let mut gold = Vec::with_capacity(dev.len());
    let mut pred = Vec::with_capacity(dev.len());
    for (s, stack) in dev.iter().zip(stacks.iter()) {
        let path = predict(tagger, params, stack, &s.tokens)?;
        pred.push(path.iter().map(|&i| tagger.scheme.tag(i).to_string()).collect());
        gold.push(s.tags.clone());
    }
    let m = evaluate(cfg.task, &gold, &pred)?;
    Ok(match cfg.task {
        crate::tagger::TagKind::NerBio => m.f1,
        crate::tagger::TagKind::Pos => m.accuracy,
    })
}

/// SHA-256 over a parameter set's current bytes.
pub fn param_fingerprint<T: Scalar>(params: &ParamSet<T>) -> String {
    let tensors: Vec<(String, &Tensor<T>)> =
        params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    checkpoint::sha256_hex(&checkpoint::encode(&tensors))
}

/// File-based front end for tagger training. Loads source training data
/// (concatenating multiple sources), splits a held-out dev set when no dev
/// file is configured, trains, and writes the checkpoint.
pub fn train_tagger<T: Scalar>(
    cfg: &RunConfig,
    lm: &LmBundle<T>,
    seed: u64,
    out: &Path,
) -> Result<TaggerTrainReport> {
    if cfg.sources.is_empty() {
        return Err(Error::Config("no source languages configured".into()));
    }
    if !cfg.target.is_empty() && cfg.sources.contains(&cfg.target) {
        return Err(Error::Contract(format!(
            "target language {} listed as a training source (zero-resource contract)",
            cfg.target
        )));
    }
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for lang in &cfg.sources {
        let path = cfg
            .train_paths
            .get(lang)
            .ok_or_else(|| Error::Config(format!("no train path for source {lang}")))?;
        let mut sents = corpus::load_conll(path, lang)?;
        if let Some(dev_path) = cfg.dev_paths.get(lang) {
            dev.extend(corpus::load_conll(dev_path, lang)?);
            train.append(&mut sents);
        } else {
            // held-out split when no dev file is given
            let n_dev = ((sents.len() as f64) * cfg.tagger_opt.dev_fraction).ceil() as usize;
            let n_dev = n_dev.clamp(1, sents.len().saturating_sub(1).max(1));
            let mut idx: Vec<usize> = (0..sents.len()).collect();
            idx.shuffle(&mut rng_stream(seed, 0x6465_76));
            let dev_set: std::collections::HashSet<usize> =
                idx.into_iter().take(n_dev).collect();
            for (i, s) in sents.into_iter().enumerate() {
                if dev_set.contains(&i) {
                    dev.push(s);
                } else {
                    train.push(s);
                }
            }
        }
    }
    let (bundle, report) = train_tagger_from_data(cfg, lm, &train, &dev, seed)?;
    save_tagger(&bundle, cfg, seed, out)?;
    Ok(report)
}

pub fn save_tagger<T: Scalar>(
    bundle: &TaggerBundle<T>,
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
) -> Result<()> {
    checkpoint::write_params(out, &bundle.params)?;
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "tagger".into());
    meta.insert("precision".into(), T::DTYPE.name().into());
    meta.insert("seed".into(), seed.to_string());
    meta.insert("task".into(), cfg.task.name().into());
    meta.insert("scheme".into(), bundle.tagger.scheme.to_text());
    meta.insert("chars".into(), bundle.tagger.char_vocab.to_text());
    meta.insert("combiner".into(), bundle.tagger.combiner.kind().name().into());
    meta.insert("tagger.word_hidden".into(), cfg.tagger.word_hidden.to_string());
    meta.insert("tagger.char_hidden".into(), cfg.tagger.char_hidden.to_string());
    meta.insert("tagger.char_emb".into(), cfg.tagger.char_emb.to_string());
    meta.insert("tagger.dropout".into(), cfg.tagger.dropout.to_string());
    meta.insert("tagger.use_char".into(), cfg.tagger.use_char.to_string());
    meta.insert("clcr.layers".into(), (cfg.mlma.n_layers + 1).to_string());
    meta.insert("clcr.width".into(), (2 * cfg.mlma.d_model).to_string());
    checkpoint::write_sidecar(&checkpoint::sidecar_path(out), &meta)
}

pub fn load_tagger<T: Scalar>(ckpt: &Path) -> Result<TaggerBundle<T>> {
    let meta = checkpoint::read_sidecar(&checkpoint::sidecar_path(ckpt))?;
    let req = |k: &str| -> Result<&str> {
        meta.get(k)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("sidecar missing {k}")))
    };
    if req("precision")? != T::DTYPE.name() {
        return Err(Error::Checkpoint(format!(
            "checkpoint precision {} does not match requested {}",
            req("precision")?,
            T::DTYPE.name()
        )));
    }
    let scheme = TagScheme::from_text(req("scheme")?)?;
    let char_vocab = CharVocab::from_text(req("chars")?);
    let parse_usize = |k: &str| -> Result<usize> {
        req(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad sidecar value for {k}")))
    };
    let config = crate::tagger::TaggerConfig {
        word_hidden: parse_usize("tagger.word_hidden")?,
        char_hidden: parse_usize("tagger.char_hidden")?,
        char_emb: parse_usize("tagger.char_emb")?,
        dropout: req("tagger.dropout")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad sidecar value for tagger.dropout".into()))?,
        use_char: req("tagger.use_char")? == "true",
    };
    let combiner = crate::clcr::CombinerKind::parse(req("combiner")?)?;
    let (tagger, mut params) = CrfTagger::<T>::new(
        config,
        scheme,
        char_vocab,
        parse_usize("clcr.layers")?,
        parse_usize("clcr.width")?,
        combiner,
        0,
    )?;
    checkpoint::read_params(ckpt, &mut params)?;
    Ok(TaggerBundle { tagger, params })
}

// -- evaluation ---------------------------------------------------------------

/// Predict tags for labeled sentences with a frozen LM and a trained
/// tagger. Returns parallel (gold, predicted) tag sequences.
pub fn predict_corpus<T: Scalar>(
    lm: &LmBundle<T>,
    bundle: &TaggerBundle<T>,
    data: &[LabeledSentence],
) -> Result<(Vec<Vec<String>>, Vec<Vec<String>>)> {
    let mut gold = Vec::with_capacity(data.len());
    let mut pred = Vec::with_capacity(data.len());
    for s in data {
        for tag in &s.tags {
            if bundle.tagger.scheme.index_of(tag).is_err() {
                return Err(Error::Contract(format!(
                    "tag {tag:?} in evaluation data is outside the checkpoint's tag scheme"
                )));
            }
        }
        let lang = lm.language_index(&s.language)?;
        let ids = lm.encode(lang, &s.tokens);
        let stack = extract_clcr(&lm.model, &lm.params, &ids, lang)?;
        let path = predict(&bundle.tagger, &bundle.params, &stack, &s.tokens)?;
        pred.push(path.iter().map(|&i| bundle.tagger.scheme.tag(i).to_string()).collect());
        gold.push(s.tags.clone());
    }
    Ok((gold, pred))
}

/// Evaluate one tagger checkpoint per seed on labeled data, aggregating
/// mean and standard deviation.
pub fn evaluate_checkpoints<T: Scalar>(
    cfg: &RunConfig,
    lm: &LmBundle<T>,
    taggers: &[(u64, TaggerBundle<T>)],
    data: &[LabeledSentence],
) -> Result<MetricsReport> {
    if taggers.is_empty() {
        return Err(Error::Config("no tagger checkpoints to evaluate".into()));
    }
    let mut per_seed: Vec<(u64, Metrics)> = Vec::new();
    for (seed, bundle) in taggers {
        let (gold, pred) = predict_corpus(lm, bundle, data)?;
        per_seed.push((*seed, evaluate(cfg.task, &gold, &pred)?));
    }
    Ok(MetricsReport::from_runs(cfg.task, per_seed))
}

// -- nearest neighbors ----------------------------------------------------------

/// One occurrence of the query token in the source corpus.
#[derive(Debug, Clone)]
pub struct NeighborQuery {
    pub sentence: usize,
    pub position: usize,
    pub context: String,
}

/// One ranked target-side occurrence.
#[derive(Debug, Clone)]
pub struct NeighborHit {
    pub token: String,
    pub sentence: usize,
    pub position: usize,
    pub context: String,
    pub cosine: f64,
}

fn context_window(tokens: &[String], pos: usize, radius: usize) -> String {
    let lo = pos.saturating_sub(radius);
    let hi = (pos + radius + 1).min(tokens.len());
    let mut parts = Vec::with_capacity(hi - lo);
    for (i, tok) in tokens.iter().enumerate().take(hi).skip(lo) {
        if i == pos {
            parts.push(format!("[{tok}]"));
        } else {
            parts.push(tok.clone());
        }
    }
    parts.join(" ")
}

/// Cosine nearest neighbors of each occurrence of `query` in the source
/// sample, over all token occurrences of the target sample. Combined
/// representations use the trained combiner when one is supplied and the
/// uniform layer average otherwise.
#[allow(clippy::too_many_arguments)]
pub fn neighbors<T: Scalar>(
    lm: &LmBundle<T>,
    lang_s: &str,
    lang_t: &str,
    corpus_s: &[Vec<String>],
    corpus_t: &[Vec<String>],
    query: &str,
    k: usize,
    sample_cap: usize,
    combiner: Option<&TaggerBundle<T>>,
    seed: u64,
) -> Result<Vec<(NeighborQuery, Vec<NeighborHit>)>> {
    let li_s = lm.language_index(lang_s)?;
    let li_t = lm.language_index(lang_t)?;
    let query_lower = query.to_lowercase();

    let sample = |corpus: &[Vec<String>], tag: u64| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..corpus.len()).collect();
        if corpus.len() > sample_cap {
            idx.shuffle(&mut rng_stream(seed, tag));
            idx.truncate(sample_cap);
            idx.sort_unstable();
        }
        idx
    };

    let combined_rows = |lang: usize, tokens: &[String]| -> Result<Tensor<T>> {
        let ids = lm.encode(lang, tokens);
        let stack = extract_clcr(&lm.model, &lm.params, &ids, lang)?;
        match combiner {
            None => Ok(uniform_combine(&stack)),
            Some(bundle) => {
                let mut g = Graph::eval(&bundle.params);
                let layers = stack_constants(&mut g, &stack);
                let v = bundle.tagger.combiner.combine(&mut g, &layers)?;
                Ok(g.value(v).clone())
            }
        }
    };

    // target side: every token occurrence of the sample
    let mut target: Vec<(usize, usize, String, Vec<T>)> = Vec::new();
    for &si in &sample(corpus_t, 0x6e74) {
        let rows = combined_rows(li_t, &corpus_t[si])?;
        for (pos, tok) in corpus_t[si].iter().enumerate() {
            target.push((si, pos, tok.clone(), rows.row(pos).to_vec()));
        }
    }

    let mut out = Vec::new();
    for &si in &sample(corpus_s, 0x6e73) {
        let tokens = &corpus_s[si];
        let positions: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.to_lowercase() == query_lower)
            .map(|(i, _)| i)
            .collect();
        if positions.is_empty() {
            continue;
        }
        let rows = combined_rows(li_s, tokens)?;
        for pos in positions {
            let qv = rows.row(pos);
            let mut scored: Vec<NeighborHit> = target
                .iter()
                .map(|(tsi, tpos, tok, tv)| NeighborHit {
                    token: tok.clone(),
                    sentence: *tsi,
                    position: *tpos,
                    context: context_window(&corpus_t[*tsi], *tpos, 3),
                    cosine: cosine(qv, tv).to_f64(),
                })
                .collect();
            scored.sort_by(|a, b| {
                b.cosine
                    .partial_cmp(&a.cosine)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| (a.sentence, a.position).cmp(&(b.sentence, b.position)))
            });
            scored.truncate(k);
            out.push((
                NeighborQuery { sentence: si, position: pos, context: context_window(tokens, pos, 3) },
                scored,
            ));
        }
    }
    if out.is_empty() {
        log::warn!("query token {query:?} does not occur in the source sample");
    }
    Ok(out)
}

trait NextU64 {
    fn next_u64(&mut self) -> u64;
}

impl NextU64 for rand_chacha::ChaCha8Rng {
    fn next_u64(&mut self) -> u64 {
        rand::RngCore::next_u64(self)
    }
}

impl crate::tensor::Dtype {
    pub fn name(&self) -> &'static str {
        match self {
            crate::tensor::Dtype::F32 => "f32",
            crate::tensor::Dtype::F64 => "f64",
        }
    }
}

/// Convenience used by the CLI to pick `f32` or `f64` code paths.
pub fn precision_of(cfg: &RunConfig) -> Precision {
    cfg.precision
}
