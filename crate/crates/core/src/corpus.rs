//! Passages stored as packed token IDs with an offset table.
//!
//! The on-disk layout (`MRRC`, little-endian) is:
//!
//! ```text
//! magic "MRRC" | version u16 | vocab count u32 | (len u32, utf-8 bytes)* |
//! passage count u64 | offsets (count + 1) x u64 | payload x u32
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, FormatError, Result};
use crate::wire::{ByteReader, PutLe};

pub const CORPUS_MAGIC: &[u8; 4] = b"MRRC";
pub const CORPUS_VERSION: u16 = 1;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
/// Separator between question and passage in reader inputs. Vocabularies
/// built with [`Vocabulary::new`] always reserve it.
pub const SEP_ID: u32 = 2;

pub const PAD_TOKEN: &str = "[pad]";
pub const UNK_TOKEN: &str = "[unk]";
pub const SEP_TOKEN: &str = "[sep]";

/// Retrieval sequence length used for passages by default.
pub const DEFAULT_MAX_PASSAGE_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in order.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            SEP_TOKEN.to_string(),
        ];
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    /// Takes the complete token table, reserved entries included.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::invalid(
                "vocabulary needs at least the two reserved tokens",
            ));
        }
        if tokens[PAD_ID as usize] != PAD_TOKEN || tokens[UNK_ID as usize] != UNK_TOKEN {
            return Err(Error::invalid("vocabulary must start with [pad] and [unk]"));
        }
        if tokens.len() > u32::MAX as usize {
            return Err(Error::invalid("vocabulary too large"));
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) || t.to_lowercase() != *t {
                return Err(Error::invalid(format!(
                    "token {i} ({t:?}) is not a lowercase word"
                )));
            }
            if lookup.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, lookup })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Lowercase, split on whitespace, map unknown words to [`UNK_ID`].
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                let lower = w.to_lowercase();
                self.id(&lower).unwrap_or(UNK_ID)
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|id| self.token(*id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub id: usize,
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenCorpus {
    vocab: Arc<Vocabulary>,
    offsets: Vec<u64>,
    payload: Vec<u32>,
}

impl TokenCorpus {
    /// Builds a corpus from already-tokenized passages.
    pub fn from_token_ids(vocab: Arc<Vocabulary>, passages: &[Vec<u32>]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(passages.len() + 1);
        let mut payload = Vec::with_capacity(passages.iter().map(Vec::len).sum());
        offsets.push(0);
        for (j, p) in passages.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::invalid(format!("passage {j} is empty")));
            }
            if let Some(bad) = p.iter().find(|id| **id as usize >= vocab.len()) {
                return Err(Error::invalid(format!(
                    "passage {j} holds token id {bad} outside vocabulary"
                )));
            }
            payload.extend_from_slice(p);
            offsets.push(payload.len() as u64);
        }
        Ok(Self {
            vocab,
            offsets,
            payload,
        })
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn payload_len(&self) -> usize {
        self.payload.len()
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    /// Borrowed token IDs of passage `j`.
    pub fn tokens(&self, j: usize) -> Result<&[u32]> {
        if j >= self.len() {
            return Err(Error::Lookup {
                index: j,
                size: self.len(),
            });
        }
        Ok(&self.payload[self.offsets[j] as usize..self.offsets[j + 1] as usize])
    }

    pub fn get_passage(&self, j: usize) -> Result<Passage> {
        Ok(Passage {
            id: j,
            token_ids: self.tokens(j)?.to_vec(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> + '_ {
        self.offsets
            .windows(2)
            .map(move |w| &self.payload[w[0] as usize..w[1] as usize])
    }

    pub fn passage_text(&self, j: usize) -> Result<String> {
        Ok(self.vocab.detokenize(self.tokens(j)?))
    }

    /// Serialized size predicted from the passage count and total token count.
    pub fn encoded_len(&self) -> usize {
        vocab_section_len(&self.vocab) + 4 + 2 + 8 + 8 * self.offsets.len() + 4 * self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(CORPUS_MAGIC);
        out.put_u16(CORPUS_VERSION);
        out.put_u32(self.vocab.len() as u32);
        for t in self.vocab.tokens() {
            out.put_u32(t.len() as u32);
            out.extend_from_slice(t.as_bytes());
        }
        out.put_u64(self.len() as u64);
        for o in &self.offsets {
            out.put_u64(*o);
        }
        for id in &self.payload {
            out.put_u32(*id);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CORPUS_MAGIC)?;
        let version = r.u16("version")?;
        if version != CORPUS_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let raw = r.u32("vocab count")?;
        let vocab_count = r.count(u64::from(raw), 4, "vocab section")?;
        let mut tokens = Vec::with_capacity(vocab_count);
        for _ in 0..vocab_count {
            let len = r.u32("token length")? as usize;
            let bytes = r.take(len, "token bytes")?;
            let s = std::str::from_utf8(bytes)
                .map_err(|_| FormatError::InvalidField("token is not utf-8".into()))?;
            tokens.push(s.to_string());
        }
        let vocab = Vocabulary::from_tokens(tokens)
            .map_err(|e| FormatError::InvalidField(format!("vocabulary: {e}")))?;
        let raw = r.u64("passage count")?;
        let count = r.count(raw, 8, "offset table")?;
        let count = r.count(count as u64 + 1, 8, "offset table")? - 1;
        let mut offsets = Vec::with_capacity(count + 1);
        for _ in 0..=count {
            offsets.push(r.u64("offset table")?);
        }
        if offsets[0] != 0 {
            return Err(FormatError::OffsetInconsistency("first offset is not zero".into()).into());
        }
        if let Some(w) = offsets.windows(2).position(|w| w[1] <= w[0]) {
            return Err(FormatError::OffsetInconsistency(format!(
                "offsets not increasing at passage {w}"
            ))
            .into());
        }
        let last = offsets[count];
        let expected = last
            .checked_mul(4)
            .ok_or(FormatError::Truncated("payload"))?;
        let remaining = r.remaining() as u64;
        if remaining < expected {
            return Err(FormatError::Truncated("payload").into());
        }
        if remaining > expected {
            return Err(FormatError::OffsetInconsistency(format!(
                "last offset {last} does not cover {} payload tokens",
                remaining / 4
            ))
            .into());
        }
        let mut payload = Vec::with_capacity(last as usize);
        for _ in 0..last {
            let id = r.u32("payload")?;
            if id as usize >= vocab.len() {
                return Err(
                    FormatError::InvalidField(format!("token id {id} outside vocabulary")).into(),
                );
            }
            payload.push(id);
        }
        r.finish()?;
        Ok(Self {
            vocab: Arc::new(vocab),
            offsets,
            payload,
        })
    }

    /// Raw-text view, one `id<TAB>text` line per passage.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (j, toks) in self.iter().enumerate() {
            out.push_str(&j.to_string());
            out.push('\t');
            out.push_str(&self.vocab.detokenize(toks));
            out.push('\n');
        }
        out
    }
}

fn vocab_section_len(vocab: &Vocabulary) -> usize {
    4 + vocab.tokens().iter().map(|t| 4 + t.len()).sum::<usize>()
}

/// Tokenizes `(id, text)` records into a corpus. IDs must be `0..n` in order.
pub fn ingest_text<S: AsRef<str>>(
    lines: &[(u64, S)],
    vocab: Arc<Vocabulary>,
) -> Result<TokenCorpus> {
    ingest_text_with_limit(lines, vocab, DEFAULT_MAX_PASSAGE_LEN)
}

pub fn ingest_text_with_limit<S: AsRef<str>>(
    lines: &[(u64, S)],
    vocab: Arc<Vocabulary>,
    max_len: usize,
) -> Result<TokenCorpus> {
    let mut passages = Vec::with_capacity(lines.len());
    for (expected, (id, text)) in lines.iter().enumerate() {
        if *id != expected as u64 {
            return Err(FormatError::InvalidField(format!(
                "passage ids must be unique and contiguous from 0: found {id} at position {expected}"
            ))
            .into());
        }
        let ids = vocab.tokenize(text.as_ref());
        if ids.is_empty() {
            return Err(Error::invalid(format!("passage {id} has no tokens")));
        }
        if ids.len() > max_len {
            return Err(Error::invalid(format!(
                "passage {id} has {} tokens, limit {max_len}",
                ids.len()
            )));
        }
        passages.push(ids);
    }
    TokenCorpus::from_token_ids(vocab, &passages)
}

/// Parses `id<TAB>text` lines.
pub fn parse_passage_tsv(text: &str) -> Result<Vec<(u64, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| FormatError::InvalidField(format!("line {}: missing tab", n + 1)))?;
        let id = id.trim().parse::<u64>().map_err(|_| {
            FormatError::InvalidField(format!("line {}: bad passage id {id:?}", n + 1))
        })?;
        out.push((id, body.to_string()));
    }
    Ok(out)
}

/// A corpus restricted to a subset of passages, densely re-indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetCorpus {
    pub corpus: TokenCorpus,
    /// `original_ids[new] = old`, strictly increasing.
    pub original_ids: Vec<usize>,
}

impl SubsetCorpus {
    pub fn new_id(&self, old: usize) -> Option<usize> {
        self.original_ids.binary_search(&old).ok()
    }
}

/// Keeps passages whose IDs are in `keep`, preserving original order.
pub fn subset_corpus(corpus: &TokenCorpus, keep: &[usize]) -> Result<SubsetCorpus> {
    if keep.is_empty() {
        return Err(Error::invalid("subset keep set is empty"));
    }
    let mut ids = keep.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if let Some(&bad) = ids.iter().find(|j| **j >= corpus.len()) {
        return Err(Error::Lookup {
            index: bad,
            size: corpus.len(),
        });
    }
    let mut offsets = Vec::with_capacity(ids.len() + 1);
    let mut payload = Vec::new();
    offsets.push(0);
    for &j in &ids {
        payload.extend_from_slice(corpus.tokens(j)?);
        offsets.push(payload.len() as u64);
    }
    Ok(SubsetCorpus {
        corpus: TokenCorpus {
            vocab: corpus.vocab.clone(),
            offsets,
            payload,
        },
        original_ids: ids,
    })
}

pub fn write_corpus(corpus: &TokenCorpus, path: &Path) -> Result<()> {
    fs::write(path, corpus.to_bytes())?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<TokenCorpus> {
    TokenCorpus::from_bytes(&fs::read(path)?)
}
