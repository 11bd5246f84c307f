//! Seeded synthetic QA data: a corpus of filler passages, a subset of which
//! carry unique key tokens and a planted answer span.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::corpus::{ingest_text_with_limit, parse_passage_tsv, TokenCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::retriever::{parse_qa_tsv, qa_to_tsv, QaRecord};
use crate::rng;

/// Smallest filler pool the generator accepts.
const MIN_FILLER: usize = 8;
const MAX_ANSWER_PER_CLASS: usize = 12;
/// Question padding; these never occur in passages.
const QUESTION_WORDS: [&str; 8] = [
    "what", "who", "which", "where", "when", "how", "whose", "whom",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    /// Vocabulary size including the reserved tokens.
    pub vocab_size: usize,
    pub passages: usize,
    pub passage_len: usize,
    pub questions: usize,
    /// Unique key tokens planted in each positive passage.
    pub keys_per_passage: usize,
    /// Share of questions held out for dev; each dev question shares its
    /// positive with a training question.
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            passages: 2000,
            passage_len: 40,
            questions: 500,
            keys_per_passage: 3,
            dev_fraction: 0.2,
            seed: 7,
        }
    }
}

/// How the vocabulary is carved up. Every group of answer tokens has its own
/// surface pattern so start and end positions are identifiable per token.
#[derive(Debug, Clone)]
struct Layout {
    single: Vec<String>,
    begin: Vec<String>,
    middle: Vec<String>,
    end: Vec<String>,
    keys: Vec<String>,
    filler: Vec<String>,
    question_words: Vec<String>,
}

impl SyntheticConfig {
    /// Positive passages; two questions share each one.
    pub fn groups(&self) -> usize {
        self.questions.div_ceil(2)
    }

    fn answer_per_class(&self) -> usize {
        (self.vocab_size.saturating_sub(3) / 20).clamp(1, MAX_ANSWER_PER_CLASS)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 50 {
            return Err(Error::config(format!(
                "vocabulary size {} below 50",
                self.vocab_size
            )));
        }
        if self.questions == 0 {
            return Err(Error::config("need at least one question"));
        }
        if self.keys_per_passage < 2 {
            return Err(Error::config(
                "questions share at least two key tokens, so passages need two",
            ));
        }
        if self.passages < self.groups() {
            return Err(Error::config(format!(
                "{} passages cannot hold {} distinct positives",
                self.passages,
                self.groups()
            )));
        }
        if self.passage_len < self.keys_per_passage + 3 {
            return Err(Error::config(format!(
                "passage length {} cannot hold {} keys and a 3-token answer",
                self.passage_len, self.keys_per_passage
            )));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::config("dev fraction must lie in [0, 1)"));
        }
        let needed = 3
            + QUESTION_WORDS.len()
            + 4 * self.answer_per_class()
            + self.keys_per_passage * self.groups()
            + MIN_FILLER;
        if needed > self.vocab_size {
            return Err(Error::config(format!(
                "vocabulary of {} cannot allocate unique keys: {} tokens needed",
                self.vocab_size, needed
            )));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let a = self.answer_per_class();
        let n_keys = self.keys_per_passage * self.groups();
        let n_filler = self.vocab_size - 3 - QUESTION_WORDS.len() - 4 * a - n_keys;
        let named = |prefix: &str, n: usize| {
            (0..n)
                .map(|i| format!("{prefix}{i:04}"))
                .collect::<Vec<_>>()
        };
        Layout {
            single: named("sol", a),
            begin: named("beg", a),
            middle: named("mid", a),
            end: named("fin", a),
            keys: named("key", n_keys),
            filler: named("w", n_filler),
            question_words: QUESTION_WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub corpus: TokenCorpus,
    pub records: Vec<QaRecord>,
    /// Indices into `records`.
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
}

pub const PASSAGES_FILE: &str = "passages.tsv";
pub const QA_FILE: &str = "qa.tsv";
pub const SPLIT_FILE: &str = "split.tsv";

impl SyntheticDataset {
    pub fn vocab(&self) -> &Arc<Vocabulary> {
        self.corpus.vocab()
    }

    /// `train<TAB>i` / `dev<TAB>i` lines.
    pub fn split_tsv(&self) -> String {
        let mut out = String::new();
        for i in &self.train {
            out.push_str(&format!("train\t{i}\n"));
        }
        for i in &self.dev {
            out.push_str(&format!("dev\t{i}\n"));
        }
        out
    }

    /// Vocabulary, passages, QA records and split as one byte string.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.vocab().tokens().join("\n").into_bytes();
        for part in [
            self.corpus.to_tsv(),
            qa_to_tsv(&self.records),
            self.split_tsv(),
        ] {
            out.push(0);
            out.extend(part.into_bytes());
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("vocab.txt"),
            self.vocab().tokens().join("\n") + "\n",
        )?;
        fs::write(dir.join(PASSAGES_FILE), self.corpus.to_tsv())?;
        fs::write(dir.join(QA_FILE), qa_to_tsv(&self.records))?;
        fs::write(dir.join(SPLIT_FILE), self.split_tsv())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let words: Vec<String> = fs::read_to_string(dir.join("vocab.txt"))?
            .lines()
            .map(str::to_string)
            .collect();
        let vocab = Arc::new(Vocabulary::from_tokens(words)?);
        let lines = parse_passage_tsv(&fs::read_to_string(dir.join(PASSAGES_FILE))?)?;
        let max_len = lines
            .iter()
            .map(|(_, t)| t.split_whitespace().count())
            .max()
            .unwrap_or(0);
        let corpus = ingest_text_with_limit(&lines, vocab, max_len.max(1))?;
        let records = parse_qa_tsv(&fs::read_to_string(dir.join(QA_FILE))?)?;
        let (mut train, mut dev) = (Vec::new(), Vec::new());
        for (n, line) in fs::read_to_string(dir.join(SPLIT_FILE))?
            .lines()
            .enumerate()
        {
            let bad = || Error::Data(format!("split line {}: {line:?}", n + 1));
            let (side, idx) = line.split_once('\t').ok_or_else(bad)?;
            let idx: usize = idx.parse().map_err(|_| bad())?;
            if idx >= records.len() {
                return Err(bad());
            }
            match side {
                "train" => train.push(idx),
                "dev" => dev.push(idx),
                _ => return Err(bad()),
            }
        }
        let ds = Self {
            corpus,
            records,
            train,
            dev,
        };
        ds.check()?;
        Ok(ds)
    }

    /// Every record's answer sits at its recorded span.
    pub fn check(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            let toks = self.corpus.tokens(r.positive_id as usize)?;
            if r.end >= toks.len() || self.vocab().detokenize(&toks[r.start..=r.end]) != r.answer {
                return Err(Error::Data(format!(
                    "record {i}: answer not at its recorded span"
                )));
            }
        }
        Ok(())
    }
}

/// Builds the dataset described by `config`, seeded by `seed`.
pub fn gen_synthetic(config: &SyntheticConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let layout = config.layout();
    let words = layout
        .single
        .iter()
        .chain(&layout.begin)
        .chain(&layout.middle)
        .chain(&layout.end)
        .chain(&layout.keys)
        .chain(&layout.filler)
        .chain(&layout.question_words)
        .cloned();
    let vocab = Arc::new(Vocabulary::new(words)?);
    debug_assert_eq!(vocab.len(), config.vocab_size);
    let id = |w: &String| vocab.id(w).expect("layout words are in the vocabulary");
    let filler: Vec<u32> = layout.filler.iter().map(id).collect();
    let question_words: Vec<u32> = layout.question_words.iter().map(id).collect();

    let mut rng = rng::derive(seed, "synthetic");
    let mut passages: Vec<Vec<u32>> = (0..config.passages)
        .map(|_| {
            (0..config.passage_len)
                .map(|_| *filler.choose(&mut rng).unwrap())
                .collect()
        })
        .collect();

    let groups = config.groups();
    let mut ids: Vec<usize> = (0..config.passages).collect();
    ids.shuffle(&mut rng);
    let positives = &ids[..groups];

    let kp = config.keys_per_passage;
    let mut records = Vec::with_capacity(config.questions);
    for (g, &pos) in positives.iter().enumerate() {
        let keys: Vec<u32> = layout.keys[g * kp..(g + 1) * kp].iter().map(id).collect();
        let answer: Vec<u32> = match rng.random_range(1..=3) {
            1 => vec![id(layout.single.choose(&mut rng).unwrap())],
            2 => vec![
                id(layout.begin.choose(&mut rng).unwrap()),
                id(layout.end.choose(&mut rng).unwrap()),
            ],
            _ => vec![
                id(layout.begin.choose(&mut rng).unwrap()),
                id(layout.middle.choose(&mut rng).unwrap()),
                id(layout.end.choose(&mut rng).unwrap()),
            ],
        };
        // answer first, then keys into slots outside it
        let start = rng.random_range(0..=config.passage_len - answer.len());
        let end = start + answer.len() - 1;
        let p = &mut passages[pos];
        p[start..=end].copy_from_slice(&answer);
        let free: Vec<usize> = (0..config.passage_len)
            .filter(|i| *i < start || *i > end)
            .collect();
        for (slot, key) in free.choose_multiple(&mut rng, kp).zip(&keys) {
            p[*slot] = *key;
        }
        let answer_text = vocab.detokenize(&answer);
        let n_questions = if 2 * g + 1 < config.questions { 2 } else { 1 };
        for _ in 0..n_questions {
            let n_keys = kp;
            let len = rng.random_range(n_keys.max(3)..=6);
            let mut q: Vec<u32> = keys.choose_multiple(&mut rng, n_keys).copied().collect();
            q.extend((n_keys..len).map(|_| *question_words.choose(&mut rng).unwrap()));
            q.shuffle(&mut rng);
            records.push(QaRecord {
                question: vocab.detokenize(&q),
                positive_id: pos as u64,
                answer: answer_text.clone(),
                start,
                end,
            });
        }
    }

    // dev takes the second question of a random subset of full groups
    let full_groups: Vec<usize> = (0..groups)
        .filter(|g| 2 * g + 1 < config.questions)
        .collect();
    let n_dev =
        ((config.questions as f64 * config.dev_fraction).round() as usize).min(full_groups.len());
    let mut dev: Vec<usize> = full_groups
        .choose_multiple(&mut rng, n_dev)
        .map(|g| 2 * g + 1)
        .collect();
    dev.sort_unstable();
    let train: Vec<usize> = (0..records.len())
        .filter(|i| dev.binary_search(i).is_err())
        .collect();

    let corpus = TokenCorpus::from_token_ids(vocab, &passages)?;
    let ds = SyntheticDataset {
        corpus,
        records,
        train,
        dev,
    };
    ds.check()?;
    Ok(ds)
}
