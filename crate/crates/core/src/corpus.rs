//! Corpus loading, vocabulary construction, LM batch planning, and a
//! synthetic bilingual corpus generator with ground-truth cross-lingual
//! structure for desk-scale verification.

use crate::error::{Error, Result};
use crate::tensor::rng_stream;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token <-> id bijection with fixed specials at ids 0..=3. All stored
/// tokens are lowercased.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    freq: Vec<u64>,
}

impl Vocabulary {
    fn with_specials() -> Vocabulary {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new(), freq: Vec::new() };
        for s in SPECIALS {
            v.index.insert(s.to_string(), v.tokens.len());
            v.tokens.push(s.to_string());
            v.freq.push(0);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a token, mapping unknown strings to `<unk>`. Input is
    /// lowercased to match the stored form.
    pub fn id(&self, token: &str) -> usize {
        let lower = token.to_lowercase();
        self.index.get(lower.as_str()).copied().unwrap_or(UNK)
    }

    /// Id of an already-lowercased token, without the `<unk>` fallback.
    pub fn id_exact(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.freq[id]
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens[SPECIALS.len()..].iter().map(|s| s.as_str())
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Serialize as one `token\tfrequency` line per id (specials included).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, f) in self.tokens.iter().zip(self.freq.iter()) {
            let _ = writeln!(out, "{t}\t{f}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocabulary> {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new(), freq: Vec::new() };
        for (i, line) in text.lines().enumerate() {
            let (tok, f) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "vocabulary line has no tab".into(),
            })?;
            let f: u64 = f.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad frequency {f:?}"),
            })?;
            v.index.insert(tok.to_string(), v.tokens.len());
            v.tokens.push(tok.to_string());
            v.freq.push(f);
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if v.tokens.get(i).map(|t| t.as_str()) != Some(*s) {
                return Err(Error::Parse { line: i + 1, msg: format!("special {s} missing at id {i}") });
            }
        }
        Ok(v)
    }
}

/// Top-`cap - 4` tokens by frequency after lowercasing; ties broken
/// lexicographically. The remainder maps to `<unk>` at lookup time.
pub fn build_vocab<'s>(sentences: impl Iterator<Item = &'s [String]>, cap: usize) -> Vocabulary {
    assert!(cap >= SPECIALS.len(), "cap must cover the specials");
    let mut counts: HashMap<String, u64> = HashMap::new();
    for sent in sentences {
        for tok in sent {
            *counts.entry(tok.to_lowercase()).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(cap - SPECIALS.len());
    let mut v = Vocabulary::with_specials();
    for (tok, f) in entries {
        v.index.insert(tok.clone(), v.tokens.len());
        v.tokens.push(tok);
        v.freq.push(f);
    }
    v
}

/// A tagged sentence. `tokens` and `tags` always have equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub language: String,
}

/// Plain monolingual sentences, one per line, whitespace-tokenized.
pub fn load_plain(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_plain(&text))
}

pub fn parse_plain(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
        .collect()
}

/// CoNLL column format: whitespace-separated columns, token first, label
/// last, blank lines separating sentences. `-DOCSTART-` rows are skipped.
pub fn load_conll(path: &Path, language: &str) -> Result<Vec<LabeledSentence>> {
    let text = std::fs::read_to_string(path)?;
    parse_conll(&text, language)
}

pub fn parse_conll(text: &str, language: &str) -> Result<Vec<LabeledSentence>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            if !tokens.is_empty() {
                out.push(LabeledSentence {
                    tokens: std::mem::take(&mut tokens),
                    tags: std::mem::take(&mut tags),
                    language: language.to_string(),
                });
            }
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected at least 2 columns, got {:?}", trimmed),
            });
        }
        tokens.push(cols[0].to_string());
        tags.push(cols[cols.len() - 1].to_string());
    }
    if !tokens.is_empty() {
        out.push(LabeledSentence { tokens, tags, language: language.to_string() });
    }
    Ok(out)
}

pub fn write_conll(sentences: &[LabeledSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (tok, tag) in s.tokens.iter().zip(s.tags.iter()) {
            let _ = writeln!(out, "{tok} {tag}");
        }
        out.push('\n');
    }
    out
}

// -- LM batch planning --------------------------------------------------------

/// One mini-batch of the LM plan: for every language, the indices of the
/// sentences (into that language's corpus) it contributes.
#[derive(Debug, Clone)]
pub struct LmBatch {
    pub per_language: Vec<Vec<usize>>,
}

/// Plan mini-batches over per-language corpora (token-id sequences).
///
/// Sentences of `max_len` or more tokens are dropped. Per language,
/// sentences are sorted by length, sliced into contiguous chunks of about
/// `tokens_per_language` real tokens, and the chunk order is shuffled under
/// `seed`. Chunk `i` of every language forms batch `i`; languages with
/// fewer chunks wrap around, so every batch contains every language.
/// Partial tail chunks are dropped unless a language would otherwise
/// contribute nothing.
pub fn lm_batches(
    corpora: &[Vec<Vec<usize>>],
    tokens_per_language: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<LmBatch>> {
    assert!(tokens_per_language > 0);
    let mut chunks_per_lang: Vec<Vec<Vec<usize>>> = Vec::with_capacity(corpora.len());
    for (li, corpus) in corpora.iter().enumerate() {
        let mut usable: Vec<(usize, usize)> = corpus
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty() && s.len() < max_len)
            .map(|(i, s)| (s.len(), i))
            .collect();
        if usable.is_empty() {
            return Err(Error::Config(format!(
                "language {li} has no usable sentences after the {max_len}-token filter"
            )));
        }
        usable.sort();
        let mut chunks: Vec<Vec<usize>> = Vec::new();
        let mut cur: Vec<usize> = Vec::new();
        let mut cur_tokens = 0usize;
        for (len, idx) in usable {
            if !cur.is_empty() && cur_tokens + len > tokens_per_language {
                chunks.push(std::mem::take(&mut cur));
                cur_tokens = 0;
            }
            cur.push(idx);
            cur_tokens += len;
        }
        // The tail remainder is dropped to keep per-batch budgets tight,
        // unless it is all this language has.
        if chunks.is_empty() && !cur.is_empty() {
            chunks.push(cur);
        }
        let mut rng = rng_stream(seed, 0x6261_7463_6800 + li as u64);
        chunks.shuffle(&mut rng);
        chunks_per_lang.push(chunks);
    }
    let n_batches = chunks_per_lang.iter().map(|c| c.len()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let per_language = chunks_per_lang
            .iter()
            .map(|chunks| chunks[b % chunks.len()].clone())
            .collect();
        out.push(LmBatch { per_language });
    }
    Ok(out)
}

// -- synthetic bilingual pair ------------------------------------------------

/// Generator spec for a pair of corpora realizing the same latent
/// tag-Markov process under two surface vocabularies.
#[derive(Debug, Clone)]
pub struct SyntheticPairSpec {
    pub n_tags: usize,
    /// Distinct latent lexemes available to each tag.
    pub lexemes_per_tag: usize,
    /// Row-stochastic `n_tags x n_tags` transition matrix.
    pub transition: Vec<Vec<f64>>,
    /// Initial tag distribution.
    pub initial: Vec<f64>,
    /// Zipf-like skew of each tag's lexeme distribution per language;
    /// weight of lexeme rank r is `1 / (r + 1)^skew`. Different skews give
    /// the two languages different surface frequency shapes over the same
    /// latent lexicon.
    pub emission_skew: (f64, f64),
    /// Fraction of latent lexemes rendered to identical surface strings in
    /// both languages.
    pub shared_fraction: f64,
    pub sentences_per_language: usize,
    pub labeled_train: usize,
    pub labeled_test: usize,
    /// Sentence length bounds per language; asymmetric bounds decouple the
    /// languages' positional statistics.
    pub len_range: ((usize, usize), (usize, usize)),
}

impl SyntheticPairSpec {
    /// Desk-scale default. Tags carry distinct marginal masses and mild
    /// context structure, but every row mixes strongly toward the base
    /// distribution, so tag identity decorrelates from sentence position
    /// within a couple of steps and cannot be read off shared positional
    /// encodings; lexical identity is what pins a tag down.
    pub fn desk_default(n_tags: usize, shared_fraction: f64, sentences: usize) -> SyntheticPairSpec {
        let base: Vec<f64> = (0..n_tags).map(|j| ((j + 1) as f64).powf(0.8)).collect();
        let z: f64 = base.iter().sum();
        let base: Vec<f64> = base.into_iter().map(|w| w / z).collect();
        let mut transition = vec![vec![0.0; n_tags]; n_tags];
        for (i, row) in transition.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = 0.8 * base[j];
            }
            // mild pseudo-scattered context bumps per tag
            row[(3 * i + 1) % n_tags] += 0.10;
            row[(5 * i + 2) % n_tags] += 0.06;
            row[(7 * i + 4) % n_tags] += 0.04;
        }
        let initial = base;
        SyntheticPairSpec {
            n_tags,
            lexemes_per_tag: 24,
            transition,
            initial,
            emission_skew: (0.6, 1.2),
            shared_fraction,
            sentences_per_language: sentences,
            labeled_train: 600,
            labeled_test: 300,
            len_range: ((5, 12), (8, 16)),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_tags == 0 || self.lexemes_per_tag == 0 {
            return Err(Error::Config("synthetic spec needs tags and lexemes".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::Config("shared_fraction outside [0, 1]".into()));
        }
        for (lo, hi) in [self.len_range.0, self.len_range.1] {
            if lo == 0 || lo > hi {
                return Err(Error::Config("bad sentence length bounds".into()));
            }
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != self.n_tags || row.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!("transition row {i} is degenerate")));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::Config(format!("transition row {i} has negative mass")));
            }
        }
        if self.initial.len() != self.n_tags || self.initial.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("initial distribution is degenerate".into()));
        }
        Ok(())
    }
}

/// Output of the synthetic generator. The oracle maps record, for each
/// surface string of each language, its latent lexeme id; they exist only
/// to *evaluate* alignment quality and never feed training.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub mono_source: Vec<Vec<String>>,
    pub mono_target: Vec<Vec<String>>,
    pub labeled_train_source: Vec<LabeledSentence>,
    pub labeled_test_target: Vec<LabeledSentence>,
    pub oracle_source: HashMap<String, usize>,
    pub oracle_target: HashMap<String, usize>,
}

/// Render latent lexeme `lex` for one language. The first
/// `shared_fraction` of each tag's lexemes get a language-independent
/// surface form. Surface strings carry no tag marker, so character
/// features cannot shortcut the labeling task.
fn render(lex: usize, rank: usize, ranks_per_tag: usize, shared_fraction: f64, lang: &str) -> String {
    let shared_cut = (shared_fraction * ranks_per_tag as f64).round() as usize;
    if rank < shared_cut {
        format!("w{lex}")
    } else {
        format!("{lang}{lex}")
    }
}

pub fn gen_synthetic_pair(spec: &SyntheticPairSpec, seed: u64) -> Result<SyntheticPair> {
    spec.validate()?;
    let n_tags = spec.n_tags;
    let per_tag = spec.lexemes_per_tag;

    // Lexeme id space: tag t owns ids [t*per_tag, (t+1)*per_tag).
    let surface = |lang: &str| -> (Vec<Vec<String>>, HashMap<String, usize>) {
        let mut table = vec![Vec::with_capacity(per_tag); n_tags];
        let mut oracle = HashMap::new();
        for (t, row) in table.iter_mut().enumerate() {
            for r in 0..per_tag {
                let lex = t * per_tag + r;
                let s = render(lex, r, per_tag, spec.shared_fraction, lang);
                oracle.insert(s.clone(), lex);
                row.push(s);
            }
        }
        (table, oracle)
    };
    let (surf_s, oracle_s) = surface("s");
    let (surf_t, oracle_t) = surface("t");

    let trans_dists: Vec<WeightedIndex<f64>> = spec
        .transition
        .iter()
        .map(|row| WeightedIndex::new(row).map_err(|e| Error::Config(format!("transition: {e}"))))
        .collect::<Result<_>>()?;
    let init_dist =
        WeightedIndex::new(&spec.initial).map_err(|e| Error::Config(format!("initial: {e}")))?;
    let lex_dist_for = |skew: f64| {
        let weights: Vec<f64> =
            (0..per_tag).map(|r| 1.0 / ((r + 1) as f64).powf(skew)).collect();
        WeightedIndex::new(&weights).expect("positive weights")
    };
    let lex_dists = (lex_dist_for(spec.emission_skew.0), lex_dist_for(spec.emission_skew.1));

    let sample = |rng: &mut rand_chacha::ChaCha8Rng,
                  table: &[Vec<String>],
                  lex_dist: &WeightedIndex<f64>,
                  len_range: (usize, usize),
                  n: usize| {
        let mut sents = Vec::with_capacity(n);
        let mut tag_seqs = Vec::with_capacity(n);
        for _ in 0..n {
            let len = rng.gen_range(len_range.0..=len_range.1);
            let mut tags = Vec::with_capacity(len);
            let mut toks = Vec::with_capacity(len);
            let mut tag = init_dist.sample(rng);
            for _ in 0..len {
                tags.push(tag);
                toks.push(table[tag][lex_dist.sample(rng)].clone());
                tag = trans_dists[tag].sample(rng);
            }
            sents.push(toks);
            tag_seqs.push(tags);
        }
        (sents, tag_seqs)
    };

    let mut rng_s = rng_stream(seed, 0x7379_6e74_6873);
    let mut rng_t = rng_stream(seed, 0x7379_6e74_6874);
    let (mono_source, _) =
        sample(&mut rng_s, &surf_s, &lex_dists.0, spec.len_range.0, spec.sentences_per_language);
    let (mono_target, _) =
        sample(&mut rng_t, &surf_t, &lex_dists.1, spec.len_range.1, spec.sentences_per_language);

    let mut rng_ls = rng_stream(seed, 0x6c61_6273);
    let mut rng_lt = rng_stream(seed, 0x6c61_6274);
    let (train_toks, train_tags) =
        sample(&mut rng_ls, &surf_s, &lex_dists.0, spec.len_range.0, spec.labeled_train);
    let (test_toks, test_tags) =
        sample(&mut rng_lt, &surf_t, &lex_dists.1, spec.len_range.1, spec.labeled_test);

    let to_labeled = |toks: Vec<Vec<String>>, tags: Vec<Vec<usize>>, lang: &str| -> Vec<LabeledSentence> {
        toks.into_iter()
            .zip(tags)
            .map(|(tokens, ts)| LabeledSentence {
                tokens,
                tags: ts.into_iter().map(|t| format!("T{t}")).collect(),
                language: lang.to_string(),
            })
            .collect()
    };

    Ok(SyntheticPair {
        mono_source,
        mono_target,
        labeled_train_source: to_labeled(train_toks, train_tags, "src"),
        labeled_test_target: to_labeled(test_toks, test_tags, "tgt"),
        oracle_source: oracle_s,
        oracle_target: oracle_t,
    })
}

pub fn write_plain(sentences: &[Vec<String>]) -> String {
    let mut out = String::new();
    for s in sentences {
        let _ = writeln!(out, "{}", s.join(" "));
    }
    out
}
