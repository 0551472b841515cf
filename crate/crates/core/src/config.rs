//! UTF-8 `key=value` run configuration files and the parsed [`RunConfig`].

use crate::align::{AlignMode, AlignmentConfig};
use crate::clcr::CombinerKind;
use crate::error::{Error, Result};
use crate::model::MlmaConfig;
use crate::tagger::{TagKind, TaggerConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Raw key=value map. Lines are `key = value`; `#` starts a comment;
/// blank lines are ignored.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<KvConfig> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {raw:?}"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvConfig { map })
    }

    pub fn load(path: &Path) -> Result<KvConfig> {
        KvConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    pub fn get_parse<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {s:?}"))),
        }
    }

    pub fn get_list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .map(|s| {
                s.split(',')
                    .map(|p| p.trim().to_string())
                    .filter(|p| !p.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Precision> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Learning-rate decay for the tagger: `harmonic` divides the base rate by
/// `1 + factor * epoch`; `multiplicative` multiplies by `factor` each
/// epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayKind {
    Harmonic,
    Multiplicative,
}

impl DecayKind {
    pub fn parse(s: &str) -> Result<DecayKind> {
        match s {
            "harmonic" => Ok(DecayKind::Harmonic),
            "multiplicative" => Ok(DecayKind::Multiplicative),
            other => Err(Error::Config(format!("unknown decay {other:?}"))),
        }
    }

    /// Learning rate for 0-based `epoch`.
    pub fn rate(&self, base: f64, factor: f64, epoch: usize) -> f64 {
        match self {
            DecayKind::Harmonic => base / (1.0 + factor * epoch as f64),
            DecayKind::Multiplicative => base * factor.powi(epoch as i32),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOptConfig {
    pub lr: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub tokens_per_language: usize,
}

impl Default for LmOptConfig {
    fn default() -> LmOptConfig {
        LmOptConfig { lr: 1e-4, clip_norm: 5.0, epochs: 10, tokens_per_language: 256 }
    }
}

#[derive(Debug, Clone)]
pub struct TaggerOptConfig {
    pub lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub decay: DecayKind,
    pub decay_factor: f64,
    /// Held-out fraction of the source training data when no dev file is
    /// configured.
    pub dev_fraction: f64,
}

impl Default for TaggerOptConfig {
    fn default() -> TaggerOptConfig {
        TaggerOptConfig {
            lr: 1e-3,
            clip_norm: 5.0,
            batch_size: 20,
            epochs: 20,
            patience: 3,
            decay: DecayKind::Harmonic,
            decay_factor: 0.1,
            dev_fraction: 0.1,
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub languages: Vec<String>,
    pub corpus_paths: BTreeMap<String, PathBuf>,
    pub train_paths: BTreeMap<String, PathBuf>,
    pub dev_paths: BTreeMap<String, PathBuf>,
    pub test_paths: BTreeMap<String, PathBuf>,
    pub sources: Vec<String>,
    pub target: String,
    pub task: TagKind,
    pub combiner: CombinerKind,
    pub precision: Precision,
    pub mlma: MlmaConfig,
    pub align: AlignmentConfig,
    pub tagger: TaggerConfig,
    pub lm_opt: LmOptConfig,
    pub tagger_opt: TaggerOptConfig,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    /// Desk-scale defaults overlaid with the file's keys.
    pub fn from_kv(kv: &KvConfig) -> Result<RunConfig> {
        let languages = kv.get_list("languages");
        if languages.is_empty() {
            return Err(Error::Config("languages must list at least one language".into()));
        }
        let path_map = |prefix: &str| -> BTreeMap<String, PathBuf> {
            languages
                .iter()
                .filter_map(|l| kv.get(&format!("{prefix}.{l}")).map(|p| (l.clone(), PathBuf::from(p))))
                .collect()
        };
        let corpus_paths = path_map("corpus");
        let train_paths = path_map("train");
        let dev_paths = path_map("dev");
        let test_paths = path_map("test");

        let sources = kv.get_list("sources");
        let target = kv.get("target").unwrap_or("").to_string();
        if !target.is_empty() && !languages.contains(&target) {
            return Err(Error::Config(format!("target {target:?} not in languages")));
        }
        for s in &sources {
            if !languages.contains(s) {
                return Err(Error::Config(format!("source {s:?} not in languages")));
            }
        }

        let task = TagKind::parse(kv.get("task").unwrap_or("pos"))?;
        let combiner = CombinerKind::parse(kv.get("combiner").unwrap_or("sws"))?;
        let precision = Precision::parse(kv.get("precision").unwrap_or("f32"))?;

        let desk = MlmaConfig::desk();
        let mlma = MlmaConfig {
            n_layers: kv.get_parse("lm.layers", desk.n_layers)?,
            n_heads: kv.get_parse("lm.heads", desk.n_heads)?,
            d_model: kv.get_parse("lm.d_model", desk.d_model)?,
            d_ff: kv.get_parse("lm.d_ff", desk.d_ff)?,
            dropout: kv.get_parse("lm.dropout", desk.dropout)?,
            max_sentence_len: kv.get_parse("lm.max_len", desk.max_sentence_len)?,
            vocab_cap: kv.get_parse("lm.vocab_cap", desk.vocab_cap)?,
        };
        mlma.validate()?;

        let ad = AlignmentConfig::default();
        let align = AlignmentConfig {
            mode: AlignMode::parse(kv.get("mode").unwrap_or("avl"))?,
            lambda_iden: kv.get_parse("align.lambda_iden", ad.lambda_iden)?,
            lambda_mean: kv.get_parse("align.lambda_mean", ad.lambda_mean)?,
            lambda_var: kv.get_parse("align.lambda_var", ad.lambda_var)?,
            lambda_avl: kv.get_parse("align.lambda_avl", ad.lambda_avl)?,
            lambda_lm: kv.get_parse("align.lambda_lm", ad.lambda_lm)?,
            row_cap: kv.get_parse("align.row_cap", ad.row_cap)?,
        };
        align.validate()?;

        let td = TaggerConfig::desk();
        let tagger = TaggerConfig {
            word_hidden: kv.get_parse("tagger.word_hidden", td.word_hidden)?,
            char_hidden: kv.get_parse("tagger.char_hidden", td.char_hidden)?,
            char_emb: kv.get_parse("tagger.char_emb", td.char_emb)?,
            dropout: kv.get_parse("tagger.dropout", td.dropout)?,
            // default per task: char features off for POS
            use_char: kv.get_parse("tagger.use_char", task == TagKind::NerBio)?,
        };
        tagger.validate()?;

        let lod = LmOptConfig::default();
        let lm_opt = LmOptConfig {
            lr: kv.get_parse("lm.lr", lod.lr)?,
            clip_norm: kv.get_parse("lm.clip", lod.clip_norm)?,
            epochs: kv.get_parse("lm.epochs", lod.epochs)?,
            tokens_per_language: kv.get_parse("lm.tokens_per_lang", lod.tokens_per_language)?,
        };

        let tod = TaggerOptConfig::default();
        let tagger_opt = TaggerOptConfig {
            lr: kv.get_parse("tagger.lr", tod.lr)?,
            clip_norm: kv.get_parse("tagger.clip", tod.clip_norm)?,
            batch_size: kv.get_parse("tagger.batch", tod.batch_size)?,
            epochs: kv.get_parse("tagger.epochs", tod.epochs)?,
            patience: kv.get_parse("tagger.patience", tod.patience)?,
            decay: DecayKind::parse(kv.get("tagger.decay").unwrap_or("harmonic"))?,
            decay_factor: kv.get_parse("tagger.decay_factor", tod.decay_factor)?,
            dev_fraction: kv.get_parse("tagger.dev_fraction", tod.dev_fraction)?,
        };

        let seeds: Vec<u64> = kv
            .get_list("seeds")
            .iter()
            .map(|s| s.parse().map_err(|_| Error::Config(format!("bad seed {s:?}"))))
            .collect::<Result<Vec<u64>>>()?;
        let seeds = if seeds.is_empty() { vec![1] } else { seeds };

        Ok(RunConfig {
            languages,
            corpus_paths,
            train_paths,
            dev_paths,
            test_paths,
            sources,
            target,
            task,
            combiner,
            precision,
            mlma,
            align,
            tagger,
            lm_opt,
            tagger_opt,
            seeds,
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_kv(&KvConfig::load(path)?)
    }
}
