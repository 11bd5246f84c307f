//! Dense retrieval over [`EncoderParams`]: similarity, in-batch-negative
//! training and top-k search against a [`DenseIndex`].

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::checkpoint::{Checkpoint, Precision};
use crate::corpus::TokenCorpus;
use crate::encoder::{truncate, EncoderGrad, EncoderParams, TypeFlag};
use crate::error::{Error, Result};
use crate::index::{DenseIndex, FlatIndex, SearchResult};
use crate::linalg::{axpy, dot};
use crate::numerics::nll_of_index_with_grad;
use crate::optim::{GradBlock, Grads, Optimizer, OptimizerKind, Params};
use crate::rng;

pub const REFERENCE_RETRIEVER_LR: f64 = 2e-5;
pub const REFERENCE_WARMUP_STEPS: u64 = 1237;
pub const REFERENCE_IN_BATCH_NEGATIVES: usize = 127;
pub const REFERENCE_GRAD_CLIP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverConfig {
    pub retrieval_dim: usize,
    /// In-batch negatives per question; a batch holds `negatives + 1` questions.
    pub negatives: usize,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_steps: u64,
    /// Decay the rate linearly to zero over the run.
    pub linear_decay: bool,
    pub clip_norm: Option<f64>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            retrieval_dim: 16,
            negatives: REFERENCE_IN_BATCH_NEGATIVES,
            lr: 0.01,
            epochs: 80,
            warmup_steps: 0,
            linear_decay: true,
            clip_norm: Some(REFERENCE_GRAD_CLIP),
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

impl RetrieverConfig {
    fn validate(&self) -> Result<()> {
        if self.negatives == 0 {
            return Err(Error::config(
                "retriever needs at least one in-batch negative",
            ));
        }
        if self.retrieval_dim == 0 {
            return Err(Error::config("retrieval dimension must be positive"));
        }
        Ok(())
    }
}

/// Either one encoder for both sides (`ψ = φ = θ`) or a question/passage pair.
#[derive(Debug, Clone, PartialEq)]
pub enum Retriever {
    Shared(EncoderParams),
    Dual {
        question: EncoderParams,
        passage: EncoderParams,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum RetrieverGrad {
    Shared(EncoderGrad),
    Dual {
        question: EncoderGrad,
        passage: EncoderGrad,
    },
}

impl Retriever {
    pub fn question_encoder(&self) -> &EncoderParams {
        match self {
            Retriever::Shared(p) => p,
            Retriever::Dual { question, .. } => question,
        }
    }

    pub fn passage_encoder(&self) -> &EncoderParams {
        match self {
            Retriever::Shared(p) => p,
            Retriever::Dual { passage, .. } => passage,
        }
    }

    pub fn width(&self) -> usize {
        self.question_encoder().width()
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, Retriever::Shared(_))
    }

    pub fn encode_question(&self, tokens: &[u32], retrieval_dim: usize) -> Result<Vec<f64>> {
        truncate(
            &self.question_encoder().pooled(tokens, TypeFlag::Question)?,
            retrieval_dim,
        )
    }

    pub fn encode_passage(&self, tokens: &[u32], retrieval_dim: usize) -> Result<Vec<f64>> {
        truncate(
            &self.passage_encoder().pooled(tokens, TypeFlag::Passage)?,
            retrieval_dim,
        )
    }

    pub fn sim(&self, question: &[u32], passage: &[u32], retrieval_dim: usize) -> Result<f64> {
        Ok(dot(
            &self.encode_question(question, retrieval_dim)?,
            &self.encode_passage(passage, retrieval_dim)?,
        ))
    }

    pub fn zero_grad(&self) -> RetrieverGrad {
        match self {
            Retriever::Shared(p) => RetrieverGrad::Shared(p.zero_grad()),
            Retriever::Dual { question, passage } => RetrieverGrad::Dual {
                question: question.zero_grad(),
                passage: passage.zero_grad(),
            },
        }
    }

    /// `encoder.*` for a shared retriever, `question.*` and `passage.*` for a pair.
    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Retriever::Shared(p) => p.to_checkpoint("encoder."),
            Retriever::Dual { question, passage } => {
                let mut ck = question.to_checkpoint("question.");
                ck.extend(passage.to_checkpoint("passage."));
                ck
            }
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get("question.token_embedding").is_some() {
            Ok(Retriever::Dual {
                question: EncoderParams::from_checkpoint(ck, "question.")?,
                passage: EncoderParams::from_checkpoint(ck, "passage.")?,
            })
        } else {
            Ok(Retriever::Shared(EncoderParams::from_checkpoint(
                ck, "encoder.",
            )?))
        }
    }

    pub fn rounded(&self, precision: Precision) -> Self {
        match self {
            Retriever::Shared(p) => Retriever::Shared(p.rounded(precision)),
            Retriever::Dual { question, passage } => Retriever::Dual {
                question: question.rounded(precision),
                passage: passage.rounded(precision),
            },
        }
    }
}

impl RetrieverGrad {
    fn parts(&mut self) -> (&mut EncoderGrad, Option<&mut EncoderGrad>) {
        match self {
            RetrieverGrad::Shared(g) => (g, None),
            RetrieverGrad::Dual { question, passage } => (question, Some(passage)),
        }
    }
}

impl Params for Retriever {
    fn blocks(&self) -> Vec<&[f64]> {
        match self {
            Retriever::Shared(p) => p.blocks(),
            Retriever::Dual { question, passage } => {
                let mut b = question.blocks();
                b.extend(passage.blocks());
                b
            }
        }
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Retriever::Shared(p) => p.blocks_mut(),
            Retriever::Dual { question, passage } => {
                let mut b = question.blocks_mut();
                b.extend(passage.blocks_mut());
                b
            }
        }
    }
}

impl Grads for RetrieverGrad {
    fn grad_blocks(&self) -> Vec<GradBlock<'_>> {
        match self {
            RetrieverGrad::Shared(g) => g.grad_blocks(),
            RetrieverGrad::Dual { question, passage } => {
                let mut b = question.grad_blocks();
                b.extend(passage.grad_blocks());
                b
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        match self {
            RetrieverGrad::Shared(g) => g.scale(factor),
            RetrieverGrad::Dual { question, passage } => {
                question.scale(factor);
                passage.scale(factor);
            }
        }
    }
}

/// One training question and the corpus index of its positive passage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub question: Vec<u32>,
    pub positive: usize,
}

/// Mean in-batch NLL over `batch`, with its gradient.
///
/// Columns are the distinct positives of the batch, so a question never sees
/// its own passage as a negative.
pub fn in_batch_loss_with_grad(
    retriever: &Retriever,
    corpus: &TokenCorpus,
    batch: &[TrainingPair],
    retrieval_dim: usize,
) -> Result<(f64, RetrieverGrad)> {
    if batch.is_empty() {
        return Err(Error::Batch("empty retriever batch".into()));
    }
    let width = retriever.width();
    if retrieval_dim == 0 || retrieval_dim > width {
        return Err(Error::config(format!(
            "retrieval dimension {retrieval_dim} exceeds width {width}"
        )));
    }
    let mut columns: Vec<usize> = Vec::new();
    let mut col_of = BTreeMap::new();
    for pair in batch {
        col_of.entry(pair.positive).or_insert_with(|| {
            columns.push(pair.positive);
            columns.len() - 1
        });
    }
    let qe = retriever.question_encoder();
    let pe = retriever.passage_encoder();
    let mut q_fwd = Vec::with_capacity(batch.len());
    for pair in batch {
        qe.validate_tokens(&pair.question)?;
        q_fwd.push(qe.pooled_forward(&pair.question, TypeFlag::Question));
    }
    let mut p_tokens = Vec::with_capacity(columns.len());
    let mut p_fwd = Vec::with_capacity(columns.len());
    for &j in &columns {
        let toks = corpus.tokens(j).map_err(|_| {
            Error::Data(format!(
                "positive passage {j} outside corpus of {}",
                corpus.len()
            ))
        })?;
        pe.validate_tokens(toks)?;
        p_fwd.push(pe.pooled_forward(toks, TypeFlag::Passage));
        p_tokens.push(toks);
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut gq = vec![vec![0.0; width]; batch.len()];
    let mut gp = vec![vec![0.0; width]; columns.len()];
    for (i, pair) in batch.iter().enumerate() {
        let qv = &q_fwd[i].pooled[..retrieval_dim];
        let row: Vec<f64> = p_fwd
            .iter()
            .map(|p| dot(qv, &p.pooled[..retrieval_dim]))
            .collect();
        let (l, g) = nll_of_index_with_grad(&row, col_of[&pair.positive])?;
        loss += l * inv_b;
        for (j, gij) in g.iter().enumerate() {
            let s = gij * inv_b;
            axpy(
                s,
                &p_fwd[j].pooled[..retrieval_dim],
                &mut gq[i][..retrieval_dim],
            );
            axpy(s, qv, &mut gp[j][..retrieval_dim]);
        }
    }
    let mut grad = retriever.zero_grad();
    let (g_question, g_passage) = grad.parts();
    for (i, pair) in batch.iter().enumerate() {
        qe.backward_pooled_full(
            &pair.question,
            TypeFlag::Question,
            &q_fwd[i],
            &gq[i],
            g_question,
        );
    }
    let g_passage = match g_passage {
        Some(g) => g,
        None => g_question,
    };
    for (j, toks) in p_tokens.iter().enumerate() {
        pe.backward_pooled_full(toks, TypeFlag::Passage, &p_fwd[j], &gp[j], g_passage);
    }
    Ok((loss, grad))
}

/// Per-epoch mean training loss.
pub type LossTrace = Vec<f64>;

/// In-batch-negative training starting from `init`. Batches are drawn from a
/// seeded shuffle each epoch.
pub fn train_retriever(
    init: Retriever,
    corpus: &TokenCorpus,
    pairs: &[TrainingPair],
    config: &RetrieverConfig,
) -> Result<(Retriever, LossTrace)> {
    train_retriever_with(init, corpus, pairs, config, |_, _| Ok(()))
}

/// As [`train_retriever`], calling `on_epoch(epoch, &model)` after every epoch.
pub fn train_retriever_with<F>(
    init: Retriever,
    corpus: &TokenCorpus,
    pairs: &[TrainingPair],
    config: &RetrieverConfig,
    mut on_epoch: F,
) -> Result<(Retriever, LossTrace)>
where
    F: FnMut(usize, &Retriever) -> Result<()>,
{
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no retriever training pairs".into()));
    }
    if let Some(bad) = pairs.iter().find(|p| p.positive >= corpus.len()) {
        return Err(Error::Data(format!(
            "positive passage {} outside corpus of {}",
            bad.positive,
            corpus.len()
        )));
    }
    let mut model = init;
    let batch_size = config.negatives + 1;
    let total_steps = (config.epochs * pairs.len().div_ceil(batch_size)) as u64;
    let mut opt = Optimizer::new(config.optimizer, config.lr)
        .with_clip(config.clip_norm)
        .with_warmup(config.warmup_steps)
        .with_linear_decay(config.linear_decay.then_some(total_steps));
    let mut rng = rng::derive(config.seed, "retriever-batches");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<TrainingPair> = chunk.iter().map(|i| pairs[*i].clone()).collect();
            let (loss, grad) =
                in_batch_loss_with_grad(&model, corpus, &batch, config.retrieval_dim)
                    .map_err(|e| e.in_training(&format!("retriever epoch {epoch}")))?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "retriever loss not finite at epoch {epoch}"
                )));
            }
            opt.step(&mut model, &grad)?;
            total += loss;
            steps += 1;
        }
        trace.push(total / steps as f64);
        on_epoch(epoch, &model)?;
    }
    Ok((model, trace))
}

/// Trains one encoder for both questions and passages.
pub fn train_shared_retriever(
    corpus: &TokenCorpus,
    pairs: &[TrainingPair],
    width: usize,
    config: &RetrieverConfig,
) -> Result<EncoderParams> {
    let init = Retriever::Shared(EncoderParams::init(
        corpus.vocab().len(),
        width,
        config.seed,
    ));
    match train_retriever(init, corpus, pairs, config)?.0 {
        Retriever::Shared(p) => Ok(p),
        Retriever::Dual { .. } => unreachable!("shared training keeps one encoder"),
    }
}

/// Encodes every passage of `corpus` and stores the truncated vectors.
pub fn build_passage_index(
    retriever: &Retriever,
    corpus: &TokenCorpus,
    retrieval_dim: usize,
) -> Result<FlatIndex> {
    let rows = corpus
        .iter()
        .map(|toks| retriever.encode_passage(toks, retrieval_dim))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<u64> = (0..corpus.len() as u64).collect();
    FlatIndex::build(&rows, &ids)
}

/// Encodes the question and searches `index` for its top `k` passages.
pub fn retrieve(
    retriever: &Retriever,
    question: &[u32],
    index: &DenseIndex,
    k: usize,
) -> Result<SearchResult> {
    let d = index.dim();
    if d > retriever.width() {
        return Err(Error::config(format!(
            "index dimension {d} exceeds encoder width {}",
            retriever.width()
        )));
    }
    index.search(&retriever.encode_question(question, d)?, k)
}

/// One line of QA training data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaRecord {
    pub question: String,
    pub positive_id: u64,
    pub answer: String,
    /// Token span of the answer inside the positive passage, inclusive.
    pub start: usize,
    pub end: usize,
}

impl QaRecord {
    pub fn to_tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.question, self.positive_id, self.answer, self.start, self.end
        )
    }
}

pub fn parse_qa_tsv(text: &str) -> Result<Vec<QaRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::Data(format!("qa line {}: {what}", n + 1));
        if f.len() != 5 {
            return Err(bad(&format!("expected 5 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| s.trim().parse::<u64>().map_err(|_| bad(what));
        let start = num(f[3], "bad start")? as usize;
        let end = num(f[4], "bad end")? as usize;
        if start > end {
            return Err(bad("start after end"));
        }
        out.push(QaRecord {
            question: f[0].to_string(),
            positive_id: num(f[1], "bad passage id")?,
            answer: f[2].to_string(),
            start,
            end,
        });
    }
    Ok(out)
}

pub fn qa_to_tsv(records: &[QaRecord]) -> String {
    records.iter().map(|r| r.to_tsv_line() + "\n").collect()
}
