//! Synthetic bilingual corpora: bigram languages over disjoint vocabulary
//! slices, batching, and token-level language identification.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, WeightedIndex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Sentence separator; every emitted sentence starts with it.
pub const BOS: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageTag {
    Source,
    Target,
}

/// Output of [`classify_token`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageLabel {
    Source,
    Target,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pos {
    Det,
    Noun,
    Verb,
    Adp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Number {
    Sing,
    Plur,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tense {
    Past,
    Pres,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordProperties {
    pub pos: Pos,
    pub number: Option<Number>,
    pub tense: Option<Tense>,
}

/// Property used to group token representations for PCA alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Pos,
    Number,
    Tense,
}

impl Property {
    pub const ALL: [Property; 3] = [Property::Pos, Property::Number, Property::Tense];

    /// Class index of a word for this property, if it carries one.
    pub fn class_of(self, w: &WordProperties) -> Option<usize> {
        match self {
            Property::Pos => Some(w.pos as usize),
            Property::Number => w.number.map(|n| n as usize),
            Property::Tense => w.tense.map(|t| t as usize),
        }
    }
}

/// One synthetic language. Word `i` of the source and word `i` of the target
/// are translation equivalents: same properties, same role in the grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub name: String,
    pub tag: LanguageTag,
    /// `[lo, hi)`
    pub script_range: (u32, u32),
    /// Token id of each word.
    pub lexicon: Vec<u32>,
    /// Distribution of the first word of a sentence.
    pub initial: Vec<f64>,
    /// Row-stochastic word-to-word transition table.
    pub transitions: Vec<Vec<f64>>,
    /// Token ids that lie in the other language's script range.
    pub shared_tokens: Vec<u32>,
    pub property_labels: BTreeMap<u32, WordProperties>,
}

impl SyntheticLanguageSpec {
    pub fn n_words(&self) -> usize {
        self.lexicon.len()
    }

    pub fn word_index(&self, token: u32) -> Option<usize> {
        self.lexicon.iter().position(|&t| t == token)
    }

    /// Samples `n_sentences` sentences of `sentence_len` words.
    pub fn sample(&self, n_sentences: usize, sentence_len: usize, rng: &mut impl Rng) -> Result<Vec<Vec<u32>>> {
        let initial = WeightedIndex::new(&self.initial).map_err(|e| Error::invalid(e.to_string()))?;
        let rows = self
            .transitions
            .iter()
            .map(WeightedIndex::new)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid(e.to_string()))?;
        let mut out = Vec::with_capacity(n_sentences);
        for _ in 0..n_sentences {
            let mut s = Vec::with_capacity(sentence_len);
            let mut w = initial.sample(rng);
            for _ in 0..sentence_len {
                s.push(self.lexicon[w]);
                w = rows[w].sample(rng);
            }
            out.push(s);
        }
        Ok(out)
    }
}

/// Sentences of one language; each line of the persisted file is a sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub tag: LanguageTag,
    pub sentences: Vec<Vec<u32>>,
}

impl Corpus {
    /// Token stream with [`BOS`] before every sentence.
    pub fn tokens(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.sentences.iter().map(|s| s.len() + 1).sum());
        for s in &self.sentences {
            out.push(BOS);
            out.extend_from_slice(s);
        }
        out
    }

    pub fn n_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.len() + 1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Consecutive non-overlapping windows of `len` tokens (the remainder is
    /// dropped).
    pub fn chunks(&self, len: usize) -> Vec<Vec<u32>> {
        self.tokens().chunks_exact(len.max(1)).map(<[u32]>::to_vec).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sent in &self.sentences {
            let line: Vec<String> = sent.iter().map(u32::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(tag: LanguageTag, text: &str) -> Result<Self> {
        let sentences = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<u32>().map_err(|e| Error::invalid(format!("bad token {t:?}: {e}"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tag, sentences })
    }

    /// SHA-256 of the persisted text form.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageData {
    pub spec: SyntheticLanguageSpec,
    pub train: Corpus,
    pub val: Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguagePair {
    pub config: PairConfig,
    pub seed: u64,
    pub source: LanguageData,
    pub target: LanguageData,
}

/// Generation knobs. Language distance is controlled by
/// `1 - grammar_similarity` and `overlap_fraction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    pub vocab_size: usize,
    /// Words per language; `None` splits the vocabulary evenly.
    pub words_per_language: Option<usize>,
    pub overlap_fraction: f64,
    /// 1 makes the target grammar an exact relabelled copy of the source.
    pub grammar_similarity: f64,
    pub n_sentences: usize,
    pub sentence_len: usize,
    pub val_fraction: f64,
    /// Gamma shape of the within-class successor weights; small values give
    /// peaked, more predictable rows.
    pub concentration: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            words_per_language: None,
            overlap_fraction: 0.0,
            grammar_similarity: 1.0,
            n_sentences: 4000,
            sentence_len: 15,
            val_fraction: 0.1,
            concentration: 0.3,
        }
    }
}

impl PairConfig {
    fn n_words(&self) -> usize {
        self.words_per_language.unwrap_or((self.vocab_size.saturating_sub(1)) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::invalid(format!("overlap_fraction {} not in [0,1)", self.overlap_fraction)));
        }
        if !(0.0..=1.0).contains(&self.grammar_similarity) {
            return Err(Error::invalid("grammar_similarity must lie in [0,1]"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must lie in [0,1)"));
        }
        if self.concentration <= 0.0 {
            return Err(Error::invalid("concentration must be positive"));
        }
        let n = self.n_words();
        if n < MIN_WORDS {
            return Err(Error::invalid(format!("{n} words per language, need at least {MIN_WORDS}")));
        }
        if 1 + 2 * n > self.vocab_size {
            return Err(Error::invalid(format!(
                "vocabulary overflow: two languages of {n} words plus BOS need {} ids, vocab_size is {}",
                1 + 2 * n,
                self.vocab_size
            )));
        }
        if self.n_sentences == 0 || self.sentence_len == 0 {
            return Err(Error::invalid("empty corpus requested"));
        }
        Ok(())
    }
}

const MIN_WORDS: usize = 12;

/// Word classes the grammar distinguishes; agreement lives in the class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Det(Number),
    Noun(Number),
    Verb(Number, Tense),
    Adp,
}

fn class_of(w: &WordProperties) -> Class {
    match w.pos {
        Pos::Det => Class::Det(w.number.expect("det number")),
        Pos::Noun => Class::Noun(w.number.expect("noun number")),
        Pos::Verb => Class::Verb(w.number.expect("verb number"), w.tense.expect("verb tense")),
        Pos::Adp => Class::Adp,
    }
}

/// Successor classes with their probabilities.
fn class_successors(c: Class) -> Vec<(Box<dyn Fn(Class) -> bool>, f64)> {
    match c {
        Class::Det(n) => vec![(Box::new(move |x| x == Class::Noun(n)), 1.0)],
        Class::Noun(n) => vec![
            (Box::new(move |x| matches!(x, Class::Verb(m, _) if m == n)), 0.6),
            (Box::new(|x| x == Class::Adp), 0.4),
        ],
        Class::Verb(..) => vec![
            (Box::new(|x| matches!(x, Class::Det(_))), 0.7),
            (Box::new(|x| x == Class::Adp), 0.3),
        ],
        Class::Adp => vec![(Box::new(|x| matches!(x, Class::Det(_))), 1.0)],
    }
}

/// Properties of word `i` of `n`. Words are laid out class by class.
fn word_properties(n: usize) -> Vec<WordProperties> {
    let n_det = (n / 10).max(2) & !1;
    let n_adp = (n * 3 / 20).max(1);
    let n_verb = ((n * 7 / 20).max(4)) & !3;
    let n_noun = n - n_det - n_adp - n_verb;
    let mut out = Vec::with_capacity(n);
    let num = |i: usize| if i % 2 == 0 { Number::Sing } else { Number::Plur };
    for i in 0..n_det {
        out.push(WordProperties { pos: Pos::Det, number: Some(num(i)), tense: None });
    }
    for i in 0..n_noun {
        out.push(WordProperties { pos: Pos::Noun, number: Some(num(i)), tense: None });
    }
    for i in 0..n_verb {
        let tense = if (i / 2) % 2 == 0 { Tense::Pres } else { Tense::Past };
        out.push(WordProperties { pos: Pos::Verb, number: Some(num(i)), tense: Some(tense) });
    }
    for _ in 0..n_adp {
        out.push(WordProperties { pos: Pos::Adp, number: None, tense: None });
    }
    out
}

/// Random grammar obeying the class-level rules: returns `(initial, rows)`.
fn random_grammar(props: &[WordProperties], concentration: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = props.len();
    let classes: Vec<Class> = props.iter().map(class_of).collect();
    let gamma = Gamma::new(concentration, 1.0).expect("positive shape");
    let mut draw = |allowed: &dyn Fn(Class) -> bool, mass: f64, row: &mut [f64]| {
        let members: Vec<usize> = (0..n).filter(|&j| allowed(classes[j])).collect();
        let w: Vec<f64> = members.iter().map(|_| gamma.sample(rng) + 1e-3).collect();
        let total: f64 = w.iter().sum();
        for (&j, wj) in members.iter().zip(w) {
            row[j] += mass * wj / total;
        }
    };
    let mut initial = vec![0.0; n];
    draw(&|c| matches!(c, Class::Det(_)), 1.0, &mut initial);
    let mut rows = vec![vec![0.0; n]; n];
    for i in 0..n {
        for (allowed, mass) in class_successors(classes[i]) {
            draw(&*allowed, mass, &mut rows[i]);
        }
    }
    (initial, rows)
}

fn mix(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| s * x + (1.0 - s) * y).collect()
}

fn split(sentences: Vec<Vec<u32>>, tag: LanguageTag, val_fraction: f64) -> (Corpus, Corpus) {
    let n_val = ((sentences.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.clamp(usize::from(val_fraction > 0.0), sentences.len().saturating_sub(1));
    let mut train = sentences;
    let val = train.split_off(train.len() - n_val);
    (Corpus { tag, sentences: train }, Corpus { tag, sentences: val })
}

/// Generates a source language, a target language that is a token-permuted
/// copy of its grammar on a separate vocabulary slice, and corpora of both.
pub fn generate_language_pair(seed: u64, config: &PairConfig) -> Result<LanguagePair> {
    config.validate()?;
    let n = config.n_words();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let props = word_properties(n);
    let (src_initial, src_rows) = random_grammar(&props, config.concentration, &mut rng);
    let (fresh_initial, fresh_rows) = random_grammar(&props, config.concentration, &mut rng);
    let s = config.grammar_similarity;
    let tgt_initial = mix(&src_initial, &fresh_initial, s);
    let tgt_rows: Vec<Vec<f64>> = src_rows.iter().zip(&fresh_rows).map(|(a, b)| mix(a, b, s)).collect();

    let src_lo = 1u32;
    let tgt_lo = src_lo + n as u32;
    let src_lexicon: Vec<u32> = (0..n as u32).map(|i| src_lo + i).collect();
    let mut perm: Vec<u32> = (0..n as u32).collect();
    perm.shuffle(&mut rng);
    let mut tgt_lexicon: Vec<u32> = perm.iter().map(|&p| tgt_lo + p).collect();
    let n_shared = (config.overlap_fraction * n as f64).round() as usize;
    let mut shared_words: Vec<usize> = (0..n).collect();
    shared_words.shuffle(&mut rng);
    shared_words.truncate(n_shared);
    shared_words.sort_unstable();
    for &w in &shared_words {
        tgt_lexicon[w] = src_lexicon[w];
    }
    let shared_tokens: Vec<u32> = shared_words.iter().map(|&w| src_lexicon[w]).collect();

    let labels = |lex: &[u32]| -> BTreeMap<u32, WordProperties> { lex.iter().copied().zip(props.iter().copied()).collect() };
    let source_spec = SyntheticLanguageSpec {
        name: "source".into(),
        tag: LanguageTag::Source,
        script_range: (src_lo, tgt_lo),
        property_labels: labels(&src_lexicon),
        lexicon: src_lexicon,
        initial: src_initial,
        transitions: src_rows,
        shared_tokens: Vec::new(),
    };
    let target_spec = SyntheticLanguageSpec {
        name: "target".into(),
        tag: LanguageTag::Target,
        script_range: (tgt_lo, tgt_lo + n as u32),
        property_labels: labels(&tgt_lexicon),
        lexicon: tgt_lexicon,
        initial: tgt_initial,
        transitions: tgt_rows,
        shared_tokens,
    };
    let mut src_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let src_sent = source_spec.sample(config.n_sentences, config.sentence_len, &mut src_rng)?;
    let tgt_sent = target_spec.sample(config.n_sentences, config.sentence_len, &mut tgt_rng)?;
    let (src_train, src_val) = split(src_sent, LanguageTag::Source, config.val_fraction);
    let (tgt_train, tgt_val) = split(tgt_sent, LanguageTag::Target, config.val_fraction);
    Ok(LanguagePair {
        config: config.clone(),
        seed,
        source: LanguageData { spec: source_spec, train: src_train, val: src_val },
        target: LanguageData { spec: target_spec, train: tgt_train, val: tgt_val },
    })
}

impl LanguagePair {
    pub fn language(&self, tag: LanguageTag) -> &LanguageData {
        match tag {
            LanguageTag::Source => &self.source,
            LanguageTag::Target => &self.target,
        }
    }

    /// Language-identification table counted over both training corpora.
    pub fn lang_id_table(&self) -> LangIdTable {
        LangIdTable::from_corpora(
            &self.source.spec,
            &self.target.spec,
            &self.source.train,
            &self.target.train,
            DEFAULT_LANG_ID_THRESHOLD,
        )
    }

    /// Hash over every persisted file of the pair.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for lang in [&self.source, &self.target] {
            h.update(lang.train.to_text());
            h.update(b"|");
            h.update(lang.val.to_text());
            h.update(b"|");
        }
        h.update(serde_json::to_vec(&self.spec_file()).expect("spec serializes"));
        hex::encode(h.finalize())
    }

    fn spec_file(&self) -> PairSpecFile {
        PairSpecFile {
            seed: self.seed,
            config: self.config.clone(),
            bos: BOS,
            source: self.source.spec.clone(),
            target: self.target.spec.clone(),
        }
    }

    /// Writes `spec.json` plus one token text file per language and split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&self.spec_file())?)?;
        for (name, lang) in [("source", &self.source), ("target", &self.target)] {
            fs::write(dir.join(format!("{name}.train.txt")), lang.train.to_text())?;
            fs::write(dir.join(format!("{name}.val.txt")), lang.val.to_text())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: PairSpecFile = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
        let read = |name: &str, tag| -> Result<Corpus> { Corpus::from_text(tag, &fs::read_to_string(dir.join(name))?) };
        Ok(Self {
            config: spec.config,
            seed: spec.seed,
            source: LanguageData {
                spec: spec.source,
                train: read("source.train.txt", LanguageTag::Source)?,
                val: read("source.val.txt", LanguageTag::Source)?,
            },
            target: LanguageData {
                spec: spec.target,
                train: read("target.train.txt", LanguageTag::Target)?,
                val: read("target.val.txt", LanguageTag::Target)?,
            },
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairSpecFile {
    seed: u64,
    config: PairConfig,
    bos: u32,
    source: SyntheticLanguageSpec,
    target: SyntheticLanguageSpec,
}

pub const DEFAULT_LANG_ID_THRESHOLD: f64 = 0.7;

/// Token counts per language plus each language's script range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangIdTable {
    pub source_range: (u32, u32),
    pub target_range: (u32, u32),
    /// Tokens belonging to both languages.
    pub shared: Vec<u32>,
    pub source_counts: BTreeMap<u32, u64>,
    pub target_counts: BTreeMap<u32, u64>,
    pub threshold: f64,
}

impl LangIdTable {
    pub fn from_corpora(
        source: &SyntheticLanguageSpec,
        target: &SyntheticLanguageSpec,
        source_corpus: &Corpus,
        target_corpus: &Corpus,
        threshold: f64,
    ) -> Self {
        let count = |c: &Corpus| {
            let mut m = BTreeMap::new();
            for s in &c.sentences {
                for &t in s {
                    *m.entry(t).or_insert(0u64) += 1;
                }
            }
            m
        };
        let mut shared: Vec<u32> = source.shared_tokens.iter().chain(&target.shared_tokens).copied().collect();
        shared.sort_unstable();
        shared.dedup();
        Self {
            source_range: source.script_range,
            target_range: target.script_range,
            shared,
            source_counts: count(source_corpus),
            target_counts: count(target_corpus),
            threshold,
        }
    }
}

fn in_range(t: u32, (lo, hi): (u32, u32)) -> bool {
    (lo..hi).contains(&t)
}

/// Script rule for tokens owned by one language; for shared tokens the
/// predominant language by count, falling back to the source language when
/// `source_count / predominant_count` exceeds the threshold.
pub fn classify_token(token: u32, table: &LangIdTable) -> LanguageLabel {
    let is_shared = table.shared.binary_search(&token).is_ok();
    if !is_shared {
        let s = in_range(token, table.source_range);
        let t = in_range(token, table.target_range);
        return match (s, t) {
            (true, false) => LanguageLabel::Source,
            (false, true) => LanguageLabel::Target,
            _ => LanguageLabel::Other,
        };
    }
    let sc = table.source_counts.get(&token).copied().unwrap_or(0);
    let tc = table.target_counts.get(&token).copied().unwrap_or(0);
    if sc == 0 && tc == 0 {
        return LanguageLabel::Other;
    }
    if sc >= tc {
        return LanguageLabel::Source;
    }
    if sc as f64 / tc as f64 <= table.threshold {
        LanguageLabel::Target
    } else {
        LanguageLabel::Source
    }
}

/// One epoch of shuffled fixed-length windows grouped into batches. Partial
/// windows and partial batches are dropped.
pub fn batch_iterator(
    corpus: &Corpus,
    batch_size: usize,
    seq_len: usize,
    max_seq_len: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<Vec<u32>>>> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if seq_len > max_seq_len {
        return Err(Error::SequenceTooLong { len: seq_len, max: max_seq_len });
    }
    if batch_size == 0 || seq_len < 2 {
        return Err(Error::invalid("batch_size must be ≥ 1 and seq_len ≥ 2"));
    }
    Ok(shuffled_batches(corpus.chunks(seq_len), batch_size, seed))
}

pub(crate) fn shuffled_batches(
    mut chunks: Vec<Vec<u32>>,
    batch_size: usize,
    seed: u64,
) -> impl Iterator<Item = Vec<Vec<u32>>> {
    chunks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_batches = chunks.len() / batch_size;
    chunks.truncate(n_batches * batch_size);
    let mut it = chunks.into_iter();
    (0..n_batches).map(move |_| it.by_ref().take(batch_size).collect())
}
