//! Exact-match evaluation of a retrieve-and-read system over an m′ grid.

use std::fmt::Write as _;

use crate::corpus::TokenCorpus;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::index::DenseIndex;
use crate::reader::{
    extract_answer, read_scores, ExtractionMode, ReaderHeads, SpanScores, DEFAULT_MAX_SPAN_LEN,
};
use crate::retriever::{retrieve, Retriever};
use crate::unification::{TeacherPipeline, UnifiedModel};

/// Lowercase, drop ASCII punctuation, drop the articles `a`, `an`, `the`,
/// collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, golds: &[String]) -> bool {
    let p = normalize_answer(prediction);
    golds.iter().any(|g| normalize_answer(g) == p)
}

/// Everything needed to answer a question: retriever, reader and the index
/// over `corpus` (index IDs are corpus indices).
#[derive(Debug, Clone)]
pub struct QaSystem {
    pub retriever: Retriever,
    pub reader_encoder: EncoderParams,
    pub heads: ReaderHeads,
    pub index: DenseIndex,
    pub corpus: TokenCorpus,
    pub max_seq_len: usize,
}

impl QaSystem {
    pub fn teacher(
        teacher: &TeacherPipeline,
        index: DenseIndex,
        corpus: TokenCorpus,
        max_seq_len: usize,
    ) -> Self {
        Self {
            retriever: teacher.retriever.clone(),
            reader_encoder: teacher.reader.encoder.clone(),
            heads: teacher.reader.heads.clone(),
            index,
            corpus,
            max_seq_len,
        }
    }

    pub fn unified(
        model: &UnifiedModel,
        index: DenseIndex,
        corpus: TokenCorpus,
        max_seq_len: usize,
    ) -> Self {
        Self {
            retriever: model.retriever(),
            reader_encoder: model.encoder.clone(),
            heads: model.heads.clone(),
            index,
            corpus,
            max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DevQuestion {
    pub question: Vec<u32>,
    pub answers: Vec<String>,
    /// Corpus index of the positive, `None` once it has been filtered away.
    pub positive: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Passages read per question; the reported EM is the best over the grid.
    pub grid: Vec<usize>,
    pub hit_ks: Vec<usize>,
    pub mode: ExtractionMode,
    pub max_span_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid: vec![1, 5, 10, 20],
            hit_ks: vec![1, 5, 10, 20, 50],
            mode: ExtractionMode::Weighted {
                lambda: crate::reader::REFERENCE_LAMBDA,
            },
            max_span_len: DEFAULT_MAX_SPAN_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub passage_id: u64,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// The m′ values actually used, after clipping to the index size.
    pub grid: Vec<usize>,
    pub em: Vec<f64>,
    pub best_em: f64,
    pub best_m: usize,
    pub hit_at: Vec<(usize, f64)>,
    /// `predictions[g][q]` for grid entry `g` and dev question `q`.
    pub predictions: Vec<Vec<Prediction>>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        for (m, em) in self.grid.iter().zip(&self.em) {
            let _ = writeln!(s, "m'={m:<4} EM {:.4}", em);
        }
        for (k, h) in &self.hit_at {
            let _ = writeln!(s, "hit@{k:<4} {:.4}", h);
        }
        let _ = writeln!(s, "best EM {:.4} at m'={}", self.best_em, self.best_m);
        s
    }

    /// `kind<TAB>k<TAB>value` lines.
    pub fn records(&self) -> String {
        let mut s = String::from("metric\tk\tvalue\n");
        for (m, em) in self.grid.iter().zip(&self.em) {
            let _ = writeln!(s, "em\t{m}\t{em}");
        }
        for (k, h) in &self.hit_at {
            let _ = writeln!(s, "hit\t{k}\t{h}");
        }
        s
    }
}

fn clip(values: &[usize], limit: usize, what: &str, warnings: &mut Vec<String>) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &v in values {
        if v == 0 {
            continue;
        }
        let c = v.min(limit);
        if c != v {
            warnings.push(format!("{what} {v} exceeds index size {limit}; clipped"));
        }
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out.sort_unstable();
    out
}

pub fn evaluate(system: &QaSystem, dev: &[DevQuestion], config: &EvalConfig) -> Result<EvalReport> {
    if dev.is_empty() {
        return Err(Error::Data("empty dev set".into()));
    }
    if system.index.len() != system.corpus.len() {
        return Err(Error::Alignment(format!(
            "index holds {} vectors for {} passages",
            system.index.len(),
            system.corpus.len()
        )));
    }
    let mut warnings = Vec::new();
    let grid = clip(&config.grid, system.index.len(), "m'", &mut warnings);
    let hit_ks = clip(
        &config.hit_ks,
        system.index.len(),
        "hit@k depth",
        &mut warnings,
    );
    if grid.is_empty() {
        return Err(Error::config("empty m' grid"));
    }
    let depth = grid.iter().chain(&hit_ks).copied().max().unwrap_or(1);

    let mut correct = vec![0usize; grid.len()];
    let mut hits = vec![0usize; hit_ks.len()];
    let mut predictions = vec![Vec::with_capacity(dev.len()); grid.len()];
    for q in dev {
        let ids = retrieve(&system.retriever, &q.question, &system.index, depth)?.ids();
        if let Some(pos) = q.positive {
            for (h, k) in hits.iter_mut().zip(&hit_ks) {
                if ids[..*k].contains(&pos) {
                    *h += 1;
                }
            }
        }
        let max_m = *grid.last().unwrap();
        let scored: Vec<(u64, SpanScores)> = ids[..max_m]
            .iter()
            .map(|id| {
                let toks = system.corpus.tokens(*id as usize)?;
                let s = read_scores(
                    &system.reader_encoder,
                    &system.heads,
                    &q.question,
                    toks,
                    system.max_seq_len,
                )?;
                Ok((*id, s))
            })
            .collect::<Result<_>>()?;
        for (g, m) in grid.iter().enumerate() {
            let a = extract_answer(
                &scored[..*m],
                &system.corpus,
                config.mode,
                config.max_span_len,
            )?;
            if exact_match(&a.text, &q.answers) {
                correct[g] += 1;
            }
            predictions[g].push(Prediction {
                passage_id: a.candidate.passage_id,
                start: a.candidate.start,
                end: a.candidate.end,
                text: a.text,
            });
        }
    }
    let n = dev.len() as f64;
    let em: Vec<f64> = correct.iter().map(|c| *c as f64 / n).collect();
    // earliest m' wins ties
    let mut best = 0;
    for (g, v) in em.iter().enumerate() {
        if *v > em[best] {
            best = g;
        }
    }
    Ok(EvalReport {
        best_em: em[best],
        best_m: grid[best],
        hit_at: hit_ks
            .iter()
            .zip(&hits)
            .map(|(k, h)| (*k, *h as f64 / n))
            .collect(),
        grid,
        em,
        predictions,
        warnings,
    })
}
