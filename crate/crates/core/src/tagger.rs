//! LSTM-CRF sequence labeler over frozen contextual representations:
//! a character-level bidirectional LSTM, a word-level bidirectional LSTM
//! over `x_k = CLCR_k (+) e_k`, and a linear-chain CRF with exact
//! dynamic-programming inference.

use crate::clcr::{ClcrStack, Combiner, CombinerKind};
use crate::corpus::LabeledSentence;
use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{init_glorot, init_uniform, rng_stream, Scalar, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct TaggerConfig {
    pub word_hidden: usize,
    pub char_hidden: usize,
    pub char_emb: usize,
    /// Applied at the input and the output of the word-level LSTM.
    pub dropout: f64,
    pub use_char: bool,
}

impl TaggerConfig {
    pub fn paper() -> TaggerConfig {
        TaggerConfig { word_hidden: 300, char_hidden: 100, char_emb: 100, dropout: 0.5, use_char: true }
    }

    pub fn desk() -> TaggerConfig {
        TaggerConfig { word_hidden: 64, char_hidden: 16, char_emb: 16, dropout: 0.5, use_char: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_hidden == 0 || self.char_hidden == 0 || self.char_emb == 0 {
            return Err(Error::Config("tagger extents must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("tagger dropout outside [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagKind {
    /// BIO span tags: entity-level evaluation.
    NerBio,
    /// Flat tags: token-accuracy evaluation.
    Pos,
}

impl TagKind {
    pub fn parse(s: &str) -> Result<TagKind> {
        match s {
            "ner" => Ok(TagKind::NerBio),
            "pos" => Ok(TagKind::Pos),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TagKind::NerBio => "ner",
            TagKind::Pos => "pos",
        }
    }
}

/// Tag inventory with a stable tag <-> index bijection.
#[derive(Debug, Clone, PartialEq)]
pub struct TagScheme {
    tags: Vec<String>,
    index: HashMap<String, usize>,
    pub kind: TagKind,
}

impl TagScheme {
    pub fn new(mut tags: Vec<String>, kind: TagKind) -> TagScheme {
        tags.sort();
        tags.dedup();
        let index = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        TagScheme { tags, index, kind }
    }

    pub fn from_corpus(sentences: &[LabeledSentence], kind: TagKind) -> TagScheme {
        let tags: Vec<String> =
            sentences.iter().flat_map(|s| s.tags.iter().cloned()).collect();
        TagScheme::new(tags, kind)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn index_of(&self, tag: &str) -> Result<usize> {
        self.index
            .get(tag)
            .copied()
            .ok_or_else(|| Error::Contract(format!("tag {tag:?} not in scheme")))
    }

    pub fn tag(&self, idx: usize) -> &str {
        &self.tags[idx]
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn encode(&self, tags: &[String]) -> Result<Vec<usize>> {
        tags.iter().map(|t| self.index_of(t)).collect()
    }

    pub fn to_text(&self) -> String {
        format!("{}|{}", self.kind.name(), self.tags.join(","))
    }

    pub fn from_text(text: &str) -> Result<TagScheme> {
        let (kind, tags) = text
            .split_once('|')
            .ok_or_else(|| Error::Parse { line: 1, msg: "tag scheme has no '|'".into() })?;
        let kind = TagKind::parse(kind)?;
        Ok(TagScheme::new(tags.split(',').map(|t| t.to_string()).collect(), kind))
    }
}

/// Character inventory built from a training corpus; id 0 is the unknown
/// character.
#[derive(Debug, Clone)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub fn from_corpus(sentences: &[LabeledSentence]) -> CharVocab {
        let mut chars: Vec<char> =
            sentences.iter().flat_map(|s| s.tokens.iter()).flat_map(|t| t.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        CharVocab { chars, index }
    }

    /// Inventory size including the unknown slot.
    pub fn len(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(0)
    }

    pub fn to_text(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn from_text(text: &str) -> CharVocab {
        let chars: Vec<char> = text.chars().collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        CharVocab { chars, index }
    }
}

/// One direction of an LSTM. Gate layout along the `4H` axis is
/// `[input, forget, cell, output]`.
#[derive(Debug, Clone, Copy)]
struct LstmIds {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    hidden: usize,
}

impl LstmIds {
    fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> LstmIds {
        LstmIds {
            wx: params.add(&format!("{name}.wx"), init_glorot(input, 4 * hidden, rng)),
            wh: params.add(&format!("{name}.wh"), init_glorot(hidden, 4 * hidden, rng)),
            b: params.add(&format!("{name}.b"), Tensor::zeros(&[1, 4 * hidden])),
            hidden,
        }
    }
}

/// Run an LSTM over the rows of `x`, returning one output row per input
/// row in the original order. `reverse` walks the rows back to front.
fn lstm_run<T: Scalar>(g: &mut Graph<'_, T>, x: Value, lstm: &LstmIds, reverse: bool) -> Result<Value> {
    let n = g.value(x).rows();
    let cols = g.value(x).cols();
    let h_dim = lstm.hidden;
    let wx = g.param(lstm.wx);
    let wh = g.param(lstm.wh);
    let b = g.param(lstm.b);
    let mut h = g.constant(Tensor::zeros(&[1, h_dim]));
    let mut c = g.constant(Tensor::zeros(&[1, h_dim]));
    let mut outputs: Vec<Option<Value>> = vec![None; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let x_t = g.slice(x, t, 1, 0, cols)?;
        let gx = g.matmul(x_t, wx)?;
        let gh = g.matmul(h, wh)?;
        let gsum = g.add(gx, gh)?;
        let gates = g.add_row_broadcast(gsum, b)?;
        let i_lin = g.slice(gates, 0, 1, 0, h_dim)?;
        let f_lin = g.slice(gates, 0, 1, h_dim, h_dim)?;
        let c_lin = g.slice(gates, 0, 1, 2 * h_dim, h_dim)?;
        let o_lin = g.slice(gates, 0, 1, 3 * h_dim, h_dim)?;
        let i_gate = g.sigmoid(i_lin);
        let f_gate = g.sigmoid(f_lin);
        let c_hat = g.tanh(c_lin);
        let o_gate = g.sigmoid(o_lin);
        let keep = g.mul(f_gate, c)?;
        let write = g.mul(i_gate, c_hat)?;
        c = g.add(keep, write)?;
        let c_act = g.tanh(c);
        h = g.mul(o_gate, c_act)?;
        outputs[t] = Some(h);
    }
    let rows: Vec<Value> = outputs.into_iter().map(|v| v.expect("filled")).collect();
    g.concat_rows(&rows)
}

/// The labeler: combiner over frozen CLCR stacks, optional char encoder,
/// bidirectional word LSTM, emission projection, and CRF transitions with
/// synthetic START/STOP states.
pub struct CrfTagger<T: Scalar> {
    pub config: TaggerConfig,
    pub scheme: TagScheme,
    pub char_vocab: CharVocab,
    pub combiner: Combiner,
    char_table: Option<ParamId>,
    char_fwd: Option<LstmIds>,
    char_bwd: Option<LstmIds>,
    word_fwd: LstmIds,
    word_bwd: LstmIds,
    emit_w: ParamId,
    emit_b: ParamId,
    transitions: ParamId,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> CrfTagger<T> {
    pub fn new(
        config: TaggerConfig,
        scheme: TagScheme,
        char_vocab: CharVocab,
        clcr_layers: usize,
        clcr_width: usize,
        combiner_kind: CombinerKind,
        seed: u64,
    ) -> Result<(CrfTagger<T>, ParamSet<T>)> {
        config.validate()?;
        if scheme.is_empty() {
            return Err(Error::Config("tag scheme is empty".into()));
        }
        let mut params = ParamSet::new();
        let mut rng = rng_stream(seed, 0x7467_72);
        let combiner = Combiner::new(combiner_kind, &mut params, clcr_layers, clcr_width, &mut rng);
        let (char_table, char_fwd, char_bwd) = if config.use_char {
            (
                Some(params.add("char.emb", init_uniform(&[char_vocab.len(), config.char_emb], &mut rng))),
                Some(LstmIds::new(&mut params, "char.fwd", config.char_emb, config.char_hidden, &mut rng)),
                Some(LstmIds::new(&mut params, "char.bwd", config.char_emb, config.char_hidden, &mut rng)),
            )
        } else {
            (None, None, None)
        };
        let word_input = clcr_width + if config.use_char { 2 * config.char_hidden } else { 0 };
        let word_fwd = LstmIds::new(&mut params, "word.fwd", word_input, config.word_hidden, &mut rng);
        let word_bwd = LstmIds::new(&mut params, "word.bwd", word_input, config.word_hidden, &mut rng);
        let t = scheme.len();
        let emit_w = params.add("emit.w", init_glorot(2 * config.word_hidden, t, &mut rng));
        let emit_b = params.add("emit.b", Tensor::zeros(&[1, t]));
        let transitions = params.add("crf.transitions", init_uniform(&[t + 2, t + 2], &mut rng));
        let tagger = CrfTagger {
            config,
            scheme,
            char_vocab,
            combiner,
            char_table,
            char_fwd,
            char_bwd,
            word_fwd,
            word_bwd,
            emit_w,
            emit_b,
            transitions,
            _marker: std::marker::PhantomData,
        };
        Ok((tagger, params))
    }

    pub fn n_tags(&self) -> usize {
        self.scheme.len()
    }

    pub fn transitions_id(&self) -> ParamId {
        self.transitions
    }

    /// Width of the char feature appended to each CLCR vector.
    pub fn char_width(&self) -> usize {
        if self.config.use_char {
            2 * self.config.char_hidden
        } else {
            0
        }
    }

    /// Bidirectional char-LSTM encoding of one word: final forward state
    /// concatenated with the state at the first position of the backward
    /// run. A zero row when the char encoder is disabled or the word is
    /// empty.
    pub fn char_encode(&self, g: &mut Graph<'_, T>, word: &str) -> Result<Value> {
        let width = 2 * self.config.char_hidden;
        if !self.config.use_char || word.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[1, width])));
        }
        let ids: Vec<usize> = word.chars().map(|c| self.char_vocab.id(c)).collect();
        let m = ids.len();
        let table = g.param(self.char_table.expect("char enabled"));
        let emb = g.gather_rows(table, ids)?;
        let fwd = lstm_run(g, emb, self.char_fwd.as_ref().expect("char enabled"), false)?;
        let bwd = lstm_run(g, emb, self.char_bwd.as_ref().expect("char enabled"), true)?;
        let f_last = g.slice(fwd, m - 1, 1, 0, self.config.char_hidden)?;
        let b_first = g.slice(bwd, 0, 1, 0, self.config.char_hidden)?;
        g.concat_cols(&[f_last, b_first])
    }

    /// Per-token tag scores: combiner over the stack, char features,
    /// bidirectional word LSTM, linear projection. `N x T`.
    pub fn emissions(&self, g: &mut Graph<'_, T>, stack: &[Value], words: &[String]) -> Result<Value> {
        let n = g.value(stack[0]).rows();
        if words.len() != n {
            return Err(Error::Contract(format!(
                "{} words for {n} representation rows",
                words.len()
            )));
        }
        let combined = self.combiner.combine(g, stack)?;
        let x = if self.config.use_char {
            let rows: Vec<Value> =
                words.iter().map(|w| self.char_encode(g, w)).collect::<Result<_>>()?;
            let chars = g.concat_rows(&rows)?;
            g.concat_cols(&[combined, chars])?
        } else {
            combined
        };
        let x = g.dropout(x, self.config.dropout);
        let fwd = lstm_run(g, x, &self.word_fwd, false)?;
        let bwd = lstm_run(g, x, &self.word_bwd, true)?;
        let outs = g.concat_cols(&[fwd, bwd])?;
        let outs = g.dropout(outs, self.config.dropout);
        let w = g.param(self.emit_w);
        let b = g.param(self.emit_b);
        let e0 = g.matmul(outs, w)?;
        g.add_row_broadcast(e0, b)
    }

    /// CRF negative log likelihood: `logZ - score(gold)`, with `logZ` from
    /// the forward algorithm in log space over START/STOP-extended
    /// transitions.
    pub fn crf_nll(&self, g: &mut Graph<'_, T>, emissions: Value, gold: &[usize]) -> Result<Value> {
        let trans = g.param(self.transitions);
        let gold_score = g.crf_gold_score(emissions, trans, gold.to_vec())?;
        let log_z = self.log_partition(g, emissions)?;
        g.sub(log_z, gold_score)
    }

    /// `logZ` via the forward algorithm.
    pub fn log_partition(&self, g: &mut Graph<'_, T>, emissions: Value) -> Result<Value> {
        let t = self.n_tags();
        let n = g.value(emissions).rows();
        let trans = g.param(self.transitions);
        let start_row = g.slice(trans, t, 1, 0, t)?;
        let e0 = g.slice(emissions, 0, 1, 0, t)?;
        let mut alpha = g.add(e0, start_row)?;
        if n > 1 {
            let inner = g.slice(trans, 0, t, 0, t)?;
            let inner_t = g.transpose(inner);
            for step in 1..n {
                let m = g.add_row_broadcast(inner_t, alpha)?;
                let lse = g.logsumexp_rows(m);
                let lse_row = g.transpose(lse);
                let e_t = g.slice(emissions, step, 1, 0, t)?;
                alpha = g.add(e_t, lse_row)?;
            }
        }
        let stop_col = g.slice(trans, 0, t, t + 1, 1)?;
        let stop_row = g.transpose(stop_col);
        let final_scores = g.add(alpha, stop_row)?;
        Ok(g.logsumexp_rows(final_scores))
    }
}

/// Max-scoring tag path including START/STOP transitions. Ties break
/// toward the lowest tag index at every backpointer.
pub fn viterbi<T: Scalar>(emissions: &Tensor<T>, transitions: &Tensor<T>) -> Vec<usize> {
    let n = emissions.rows();
    let t = emissions.cols();
    let w = t + 2;
    debug_assert_eq!(transitions.rows(), w);
    let start = t;
    let stop = t + 1;
    let mut delta = vec![T::zero(); t];
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n);
    for j in 0..t {
        delta[j] = transitions.at(start, j) + emissions.at(0, j);
    }
    for step in 1..n {
        let mut next = vec![T::neg_infinity(); t];
        let mut ptr = vec![0usize; t];
        for j in 0..t {
            let mut best = T::neg_infinity();
            let mut best_i = 0usize;
            for (i, &d) in delta.iter().enumerate() {
                let score = d + transitions.at(i, j);
                if score > best {
                    best = score;
                    best_i = i;
                }
            }
            next[j] = best + emissions.at(step, j);
            ptr[j] = best_i;
        }
        delta = next;
        back.push(ptr);
    }
    let mut best = T::neg_infinity();
    let mut last = 0usize;
    for (j, &d) in delta.iter().enumerate() {
        let score = d + transitions.at(j, stop);
        if score > best {
            best = score;
            last = j;
        }
    }
    let mut path = vec![last];
    for ptr in back.iter().rev() {
        last = ptr[last];
        path.push(last);
    }
    path.reverse();
    path
}

/// Viterbi over a tagger's current parameters in evaluation mode.
pub fn predict<T: Scalar>(
    tagger: &CrfTagger<T>,
    params: &ParamSet<T>,
    stack: &ClcrStack<T>,
    words: &[String],
) -> Result<Vec<usize>> {
    let mut g = Graph::eval(params);
    let layers = crate::clcr::stack_constants(&mut g, stack);
    let emissions = tagger.emissions(&mut g, &layers, words)?;
    let e = g.value(emissions).clone();
    let trans = params.value(tagger.transitions_id());
    Ok(viterbi(&e, trans))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clcr::stack_constants;
    use crate::model::HiddenStack;
    use rand::Rng;

    fn scheme(n: usize) -> TagScheme {
        TagScheme::new((0..n).map(|i| format!("T{i}")).collect(), TagKind::Pos)
    }

    fn sentences(words: &[&str]) -> Vec<LabeledSentence> {
        vec![LabeledSentence {
            tokens: words.iter().map(|w| w.to_string()).collect(),
            tags: words.iter().map(|_| "T0".to_string()).collect(),
            language: "xx".into(),
        }]
    }

    fn random_stack(n: usize, layers: usize, width: usize, seed: u64) -> HiddenStack<f64> {
        let mut rng = rng_stream(seed, 901);
        HiddenStack {
            layers: (0..layers)
                .map(|_| Tensor::from_fn(n, width, |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
        }
    }

    fn make_tagger(
        n_tags: usize,
        use_char: bool,
        seed: u64,
    ) -> (CrfTagger<f64>, ParamSet<f64>) {
        let cfg = TaggerConfig {
            word_hidden: 5,
            char_hidden: 3,
            char_emb: 4,
            dropout: 0.0,
            use_char,
        };
        let cv = CharVocab::from_corpus(&sentences(&["abc", "de", "xyz"]));
        CrfTagger::new(cfg, scheme(n_tags), cv, 3, 6, CombinerKind::Sws, seed).unwrap()
    }

    // Plain LSTM cell recurrence, independent of the graph ops.
    fn lstm_oracle(
        x: &Tensor<f64>,
        wx: &Tensor<f64>,
        wh: &Tensor<f64>,
        b: &Tensor<f64>,
        hidden: usize,
        reverse: bool,
    ) -> Tensor<f64> {
        let n = x.rows();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut out = Tensor::zeros(&[n, hidden]);
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let mut gates = vec![0.0; 4 * hidden];
            for (j, gate) in gates.iter_mut().enumerate() {
                let mut acc = b.data()[j];
                for k in 0..x.cols() {
                    acc += x.at(t, k) * wx.at(k, j);
                }
                for (k, &hk) in h.iter().enumerate() {
                    acc += hk * wh.at(k, j);
                }
                *gate = acc;
            }
            for j in 0..hidden {
                let i = sig(gates[j]);
                let f = sig(gates[hidden + j]);
                let ch = gates[2 * hidden + j].tanh();
                let o = sig(gates[3 * hidden + j]);
                c[j] = f * c[j] + i * ch;
                h[j] = o * c[j].tanh();
            }
            for j in 0..hidden {
                out.set(t, j, h[j]);
            }
        }
        out
    }

    #[test]
    fn char_encode_disabled_gives_zero_row() {
        let (tagger, params) = make_tagger(3, false, 1);
        let mut g = Graph::eval(&params);
        let e = tagger.char_encode(&mut g, "abc").unwrap();
        assert_eq!(g.value(e).rows(), 1);
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn char_encode_is_deterministic_and_matches_cell_oracle() {
        let (tagger, params) = make_tagger(3, true, 2);
        let mut g = Graph::eval(&params);
        let a = tagger.char_encode(&mut g, "abc").unwrap();
        let b = tagger.char_encode(&mut g, "abc").unwrap();
        assert_eq!(g.value(a), g.value(b));

        // oracle: run the plain recurrence on the same char embeddings
        let h = tagger.config.char_hidden;
        let ids: Vec<usize> = "abc".chars().map(|c| tagger.char_vocab.id(c)).collect();
        let table = params.value(tagger.char_table.unwrap());
        let emb = Tensor::from_fn(3, tagger.config.char_emb, |r, c| table.at(ids[r], c));
        let f = tagger.char_fwd.as_ref().unwrap();
        let bd = tagger.char_bwd.as_ref().unwrap();
        let fwd = lstm_oracle(&emb, params.value(f.wx), params.value(f.wh), params.value(f.b), h, false);
        let bwd = lstm_oracle(&emb, params.value(bd.wx), params.value(bd.wh), params.value(bd.b), h, true);
        for j in 0..h {
            assert!((g.value(a).at(0, j) - fwd.at(2, j)).abs() < 1e-9);
            assert!((g.value(a).at(0, h + j) - bwd.at(0, j)).abs() < 1e-9);
        }
    }

    #[test]
    fn emissions_shape_and_recurrence_oracle() {
        let (tagger, params) = make_tagger(4, false, 3);
        let stack = random_stack(5, 3, 6, 3);
        let words: Vec<String> = (0..5).map(|i| format!("w{i}")).collect();
        let mut g = Graph::eval(&params);
        let layers = stack_constants(&mut g, &stack);
        let em = tagger.emissions(&mut g, &layers, &words).unwrap();
        assert_eq!(g.value(em).rows(), 5);
        assert_eq!(g.value(em).cols(), 4);

        // oracle: combiner output -> both word LSTMs -> projection
        let combined = {
            let c = tagger.combiner.combine(&mut g, &layers).unwrap();
            g.value(c).clone()
        };
        let wf = &tagger.word_fwd;
        let wb = &tagger.word_bwd;
        let fwd = lstm_oracle(&combined, params.value(wf.wx), params.value(wf.wh), params.value(wf.b), 5, false);
        let bwd = lstm_oracle(&combined, params.value(wb.wx), params.value(wb.wh), params.value(wb.b), 5, true);
        let ew = params.value(tagger.emit_w);
        let eb = params.value(tagger.emit_b);
        for r in 0..5 {
            for t in 0..4 {
                let mut acc = eb.data()[t];
                for j in 0..5 {
                    acc += fwd.at(r, j) * ew.at(j, t);
                    acc += bwd.at(r, j) * ew.at(5 + j, t);
                }
                assert!((g.value(em).at(r, t) - acc).abs() < 1e-9, "row {r} tag {t}");
            }
        }
    }

    #[test]
    fn emissions_are_context_sensitive() {
        let (tagger, params) = make_tagger(4, false, 4);
        let stack = random_stack(6, 3, 6, 4);
        // swap two distant token rows in every layer
        let swapped = HiddenStack {
            layers: stack
                .layers
                .iter()
                .map(|l| {
                    Tensor::from_fn(6, 6, |r, c| {
                        let rr = match r {
                            0 => 5,
                            5 => 0,
                            other => other,
                        };
                        l.at(rr, c)
                    })
                })
                .collect(),
        };
        let words: Vec<String> = (0..6).map(|i| format!("w{i}")).collect();
        let mut g = Graph::eval(&params);
        let a = stack_constants(&mut g, &stack);
        let b = stack_constants(&mut g, &swapped);
        let em_a = tagger.emissions(&mut g, &a, &words).unwrap();
        let em_b = tagger.emissions(&mut g, &b, &words).unwrap();
        // a middle token's scores change because its context changed
        let changed = (0..4).any(|t| (g.value(em_a).at(2, t) - g.value(em_b).at(2, t)).abs() > 1e-9);
        assert!(changed);
    }

    #[test]
    fn crf_single_tag_nll_is_exactly_zero() {
        let (tagger, params) = make_tagger(1, false, 5);
        let mut g = Graph::eval(&params);
        let em = g.constant(Tensor::from_vec(&[3, 1], vec![0.7, -0.2, 1.1]).unwrap());
        let nll = tagger.crf_nll(&mut g, em, &[0, 0, 0]).unwrap();
        assert_eq!(g.value(nll).item(), 0.0);
    }

    #[test]
    fn crf_zero_scores_give_n_log_t() {
        let (tagger, mut params) = make_tagger(3, false, 6);
        params.value_mut(tagger.transitions_id()).fill(0.0);
        let mut g = Graph::eval(&params);
        let em = g.constant(Tensor::zeros(&[4, 3]));
        let nll = tagger.crf_nll(&mut g, em, &[1, 0, 2, 1]).unwrap();
        let expect = 4.0 * 3.0f64.ln();
        assert!((g.value(nll).item() - expect).abs() < 1e-12);
    }

    fn brute_force_paths(n: usize, t: usize) -> Vec<Vec<usize>> {
        let mut paths = vec![vec![]];
        for _ in 0..n {
            let mut next = Vec::new();
            for p in &paths {
                for tag in 0..t {
                    let mut q = p.clone();
                    q.push(tag);
                    next.push(q);
                }
            }
            paths = next;
        }
        paths
    }

    fn path_score(em: &Tensor<f64>, trans: &Tensor<f64>, path: &[usize]) -> f64 {
        let t = em.cols();
        let mut s = trans.at(t, path[0]);
        for (i, &y) in path.iter().enumerate() {
            s += em.at(i, y);
            if i + 1 < path.len() {
                s += trans.at(y, path[i + 1]);
            }
        }
        s + trans.at(path[path.len() - 1], t + 1)
    }

    #[test]
    fn crf_logz_and_viterbi_match_exhaustive_enumeration() {
        let mut rng = rng_stream(7, 55);
        for trial in 0..60 {
            let n = rng.gen_range(1..=5);
            let t = rng.gen_range(1..=4);
            let (tagger, mut params) = make_tagger(t, false, 100 + trial);
            let trans = Tensor::from_fn(t + 2, t + 2, |_, _| rng.gen_range(-1.0..1.0));
            *params.value_mut(tagger.transitions_id()) = trans.clone();
            let em = Tensor::from_fn(n, t, |_, _| rng.gen_range(-2.0..2.0));
            let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..t)).collect();

            let paths = brute_force_paths(n, t);
            let scores: Vec<f64> = paths.iter().map(|p| path_score(&em, &trans, p)).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();

            let mut g = Graph::eval(&params);
            let emv = g.constant(em.clone());
            let nll = tagger.crf_nll(&mut g, emv, &gold).unwrap();
            let gold_score = path_score(&em, &trans, &gold);
            assert!(
                (g.value(nll).item() - (log_z - gold_score)).abs() < 1e-8,
                "nll mismatch on trial {trial}"
            );
            assert!(g.value(nll).item() >= -1e-12, "nll nonnegative");

            // total probability over all paths is 1
            let total: f64 = scores.iter().map(|s| (s - log_z).exp()).sum();
            assert!((total - 1.0).abs() < 1e-8);

            let vit = viterbi(&em, &trans);
            assert!(log_z >= path_score(&em, &trans, &vit) - 1e-9, "logZ bounds best path");
            assert_eq!(vit, brute_force_argmax(&em, &trans), "trial {trial}");
        }
    }

    /// Among all max-scoring paths, the lowest-index backpointer rule
    /// yields the path whose reversed tag sequence is smallest: the last
    /// tag is minimized first, then the one before it, and so on.
    fn brute_force_argmax(em: &Tensor<f64>, trans: &Tensor<f64>) -> Vec<usize> {
        let paths = brute_force_paths(em.rows(), em.cols());
        let best = paths
            .iter()
            .map(|p| path_score(em, trans, p))
            .fold(f64::NEG_INFINITY, f64::max);
        paths
            .into_iter()
            .filter(|p| path_score(em, trans, p) >= best - 1e-9)
            .min_by_key(|p| p.iter().rev().copied().collect::<Vec<_>>())
            .unwrap()
    }

    #[test]
    fn viterbi_tie_rule_on_integer_scores() {
        // integer-valued scores force exact ties; the backpointer rule must
        // match the brute-force emulation on every instance
        let mut rng = rng_stream(13, 99);
        for _ in 0..200 {
            let n = rng.gen_range(1..=4);
            let t = rng.gen_range(2..=3);
            let em = Tensor::from_fn(n, t, |_, _| rng.gen_range(0..2) as f64);
            let trans = Tensor::from_fn(t + 2, t + 2, |_, _| rng.gen_range(0..2) as f64);
            assert_eq!(viterbi(&em, &trans), brute_force_argmax(&em, &trans));
        }
    }

    #[test]
    fn viterbi_separable_case_is_per_position_argmax() {
        let t = 4;
        let trans = Tensor::<f64>::zeros(&[t + 2, t + 2]);
        let em = Tensor::from_vec(
            &[3, 4],
            vec![0.0, 9.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 9.0],
        )
        .unwrap();
        assert_eq!(viterbi(&em, &trans), vec![1, 0, 3]);
    }

    #[test]
    fn crf_saturated_emissions_drive_nll_to_zero() {
        let (tagger, mut params) = make_tagger(3, false, 8);
        params.value_mut(tagger.transitions_id()).fill(0.0);
        let gold = vec![2usize, 0, 1];
        let em = Tensor::from_fn(3, 3, |r, c| if gold[r] == c { 200.0 } else { -200.0 });
        let mut g = Graph::eval(&params);
        let emv = g.constant(em);
        let nll = tagger.crf_nll(&mut g, emv, &gold).unwrap();
        assert!(g.value(nll).item().abs() < 1e-9);
    }

    #[test]
    fn crf_invalid_gold_tag_is_contract_error() {
        let (tagger, params) = make_tagger(3, false, 9);
        let mut g = Graph::eval(&params);
        let em = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tagger.crf_nll(&mut g, em, &[0, 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn tagger_gradients_match_finite_differences() {
        use crate::optim::gradient_check;
        use crate::params::GradStore;
        let (tagger, mut params) = make_tagger(3, true, 10);
        let stack = random_stack(4, 3, 6, 10);
        let words: Vec<String> = vec!["ab".into(), "c".into(), "de".into(), "xy".into()];
        let gold = vec![0usize, 2, 1, 1];
        let mut grads = GradStore::new(&params);
        {
            let mut g = Graph::eval(&params);
            let layers = stack_constants(&mut g, &stack);
            let em = tagger.emissions(&mut g, &layers, &words).unwrap();
            let nll = tagger.crf_nll(&mut g, em, &gold).unwrap();
            g.backward(nll).unwrap();
            g.flush_param_grads(&mut grads);
        }
        let report = gradient_check(&mut params, &grads, 1e-5, 1e-5, |p| {
            let mut g = Graph::eval(p);
            let layers = stack_constants(&mut g, &stack);
            let em = tagger.emissions(&mut g, &layers, &words)?;
            let nll = tagger.crf_nll(&mut g, em, &gold)?;
            Ok(g.value(nll).item())
        })
        .unwrap();
        assert!(report.unreliable.is_empty(), "{:?}", report.unreliable);
        assert!(report.max_rel_err < 1e-4, "err {} at {:?}", report.max_rel_err, report.worst);
    }

    #[test]
    fn tagger_memorizes_small_labeled_set() {
        use crate::optim::{adam_step, AdamState};
        use crate::params::GradStore;

        // 50 sentences over a 12-word vocabulary; each word has a fixed
        // tag and a fixed random feature stack, so a working tagger can
        // reach perfect training accuracy.
        let n_tags = 3;
        let vocab = 12;
        let mut rng = rng_stream(31, 7);
        let word_tag: Vec<usize> = (0..vocab).map(|w| w % n_tags).collect();
        let feats: Vec<Vec<Tensor<f64>>> = (0..vocab)
            .map(|_| (0..3).map(|_| Tensor::from_fn(1, 6, |_, _| rng.gen_range(-1.0..1.0))).collect())
            .collect();
        let sents: Vec<Vec<usize>> = (0..50)
            .map(|_| (0..rng.gen_range(3..8)).map(|_| rng.gen_range(0..vocab)).collect())
            .collect();
        let stack_of = |sent: &[usize]| -> HiddenStack<f64> {
            HiddenStack {
                layers: (0..3)
                    .map(|l| {
                        Tensor::from_fn(sent.len(), 6, |r, c| feats[sent[r]][l].at(0, c))
                    })
                    .collect(),
            }
        };

        let (tagger, mut params) = make_tagger(n_tags, false, 11);
        let mut grads = GradStore::new(&params);
        let mut adam = AdamState::new(1e-2, 5.0);
        for _epoch in 0..50 {
            grads.zero();
            let mut loss_acc = 0.0;
            for sent in &sents {
                let stack = stack_of(sent);
                let words: Vec<String> = sent.iter().map(|w| format!("w{w}")).collect();
                let gold: Vec<usize> = sent.iter().map(|&w| word_tag[w]).collect();
                let mut g = Graph::eval(&params);
                let layers = stack_constants(&mut g, &stack);
                let em = tagger.emissions(&mut g, &layers, &words).unwrap();
                let nll = tagger.crf_nll(&mut g, em, &gold).unwrap();
                loss_acc += g.value(nll).item();
                g.backward(nll).unwrap();
                g.flush_param_grads(&mut grads);
            }
            adam_step(&mut params, &grads, &mut adam).unwrap();
            if loss_acc < 1.0 {
                break;
            }
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for sent in &sents {
            let stack = stack_of(sent);
            let words: Vec<String> = sent.iter().map(|w| format!("w{w}")).collect();
            let pred = predict(&tagger, &params, &stack, &words).unwrap();
            for (p, &w) in pred.iter().zip(sent.iter()) {
                if *p == word_tag[w] {
                    correct += 1;
                }
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.99, "training accuracy {acc}");
    }
}
