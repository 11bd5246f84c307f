//! Extractive reader heads: start/end span scorers and a passage ranker on top
//! of an [`EncoderParams`], plus answer extraction.
//!
//! The reader input is `question ⊕ [sep] ⊕ passage`, encoded with the passage
//! type flag. Start/end logits are produced only for passage positions.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::checkpoint::{Checkpoint, Precision, Tensor};
use crate::corpus::{TokenCorpus, SEP_ID};
use crate::encoder::{EncoderGrad, EncoderParams, TypeFlag, INIT_SCALE, MEAN_MIX};
use crate::error::{Error, Result};
use crate::linalg::{add_outer, axpy, dot, matvec, matvec_t};
use crate::numerics::{log_softmax_unchecked, nll_of_index_with_grad, softmax_unchecked};
use crate::optim::{GradBlock, Grads, Optimizer, OptimizerKind, Params};
use crate::retriever::{retrieve, Retriever};
use crate::{index::DenseIndex, rng};

pub const REFERENCE_READER_SEQ_LEN: usize = 350;
pub const DEFAULT_MAX_SPAN_LEN: usize = 10;
/// Spans kept per passage in weighted extraction.
pub const WEIGHTED_TOP_SPANS: usize = 5;
pub const REFERENCE_LAMBDA: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderHeads {
    pub w_start: Vec<f64>,
    pub w_end: Vec<f64>,
    pub w_rank: Vec<f64>,
}

impl ReaderHeads {
    pub fn zeros(width: usize) -> Self {
        Self {
            w_start: vec![0.0; width],
            w_end: vec![0.0; width],
            w_rank: vec![0.0; width],
        }
    }

    pub fn init(width: usize, seed: u64) -> Self {
        let mut rng = rng::derive(seed, "reader-heads");
        let mut h = Self::zeros(width);
        for b in h.blocks_mut() {
            b.iter_mut()
                .for_each(|v| *v = rng.random_range(-INIT_SCALE..INIT_SCALE));
        }
        h
    }

    pub fn width(&self) -> usize {
        self.w_start.len()
    }

    pub fn param_count(&self) -> usize {
        3 * self.width()
    }

    pub fn to_checkpoint(&self, prefix: &str) -> Checkpoint {
        let d = self.width();
        let mut ck = Checkpoint::new();
        for (name, v) in [
            ("w_start", &self.w_start),
            ("w_end", &self.w_end),
            ("w_rank", &self.w_rank),
        ] {
            ck.push(Tensor::new(format!("{prefix}{name}"), vec![d], v.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let get = |n: &str| ck.require(&format!("{prefix}{n}")).map(|t| t.data.clone());
        let h = Self {
            w_start: get("w_start")?,
            w_end: get("w_end")?,
            w_rank: get("w_rank")?,
        };
        if h.w_end.len() != h.width() || h.w_rank.len() != h.width() {
            return Err(
                crate::FormatError::InvalidField("reader heads disagree on width".into()).into(),
            );
        }
        Ok(h)
    }

    pub fn rounded(&self, precision: Precision) -> Self {
        let mut out = self.clone();
        for b in out.blocks_mut() {
            b.iter_mut().for_each(|v| *v = precision.round(*v));
        }
        out
    }
}

impl Params for ReaderHeads {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![&self.w_start, &self.w_end, &self.w_rank]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w_start, &mut self.w_end, &mut self.w_rank]
    }
}

/// Gradient of [`ReaderHeads`].
pub type HeadsGrad = ReaderHeads;

impl Grads for ReaderHeads {
    fn grad_blocks(&self) -> Vec<GradBlock<'_>> {
        self.blocks().into_iter().map(GradBlock::Dense).collect()
    }

    fn scale(&mut self, factor: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

impl HeadsGrad {
    pub fn add(&mut self, other: &HeadsGrad) {
        axpy(1.0, &other.w_start, &mut self.w_start);
        axpy(1.0, &other.w_end, &mut self.w_end);
        axpy(1.0, &other.w_rank, &mut self.w_rank);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanScores {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub rank: f64,
    /// The passage was cut to fit the reader sequence length.
    pub truncated: bool,
}

impl SpanScores {
    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }
}

/// Builds the reader input; returns it with the passage offset and whether
/// the passage had to be cut.
pub fn reader_input(
    question: &[u32],
    passage: &[u32],
    max_seq_len: usize,
) -> Result<(Vec<u32>, usize, bool)> {
    let offset = question.len() + 1;
    if offset >= max_seq_len {
        return Err(Error::invalid(format!(
            "question of {} tokens leaves no room in a reader sequence of {max_seq_len}",
            question.len()
        )));
    }
    if passage.is_empty() {
        return Err(Error::invalid("cannot read an empty passage"));
    }
    let keep = passage.len().min(max_seq_len - offset);
    let mut seq = Vec::with_capacity(offset + keep);
    seq.extend_from_slice(question);
    seq.push(SEP_ID);
    seq.extend_from_slice(&passage[..keep]);
    Ok((seq, offset, keep < passage.len()))
}

/// Intermediates needed by [`read_backward`].
#[derive(Debug, Clone)]
pub struct ReadForward {
    seq: Vec<u32>,
    offset: usize,
    /// `x_i` for passage positions, `len × width`.
    x: Vec<f64>,
    pooled: crate::encoder::PooledForward,
}

pub fn read_forward(
    enc: &EncoderParams,
    heads: &ReaderHeads,
    question: &[u32],
    passage: &[u32],
    max_seq_len: usize,
) -> Result<(SpanScores, ReadForward)> {
    if heads.width() != enc.width() {
        return Err(Error::config(format!(
            "reader heads width {} does not match encoder width {}",
            heads.width(),
            enc.width()
        )));
    }
    let (seq, offset, truncated) = reader_input(question, passage, max_seq_len)?;
    enc.validate_tokens(&seq)?;
    let pooled = enc.pooled_forward(&seq, TypeFlag::Passage);
    let d = enc.width();
    let u_s = matvec_t(&enc.mix, &heads.w_start);
    let u_e = matvec_t(&enc.mix, &heads.w_end);
    let t = &enc.type_embedding[TypeFlag::Passage.index()];
    let n = seq.len() - offset;
    let mut x = Vec::with_capacity(n * d);
    let mut start = Vec::with_capacity(n);
    let mut end = Vec::with_capacity(n);
    for tok in &seq[offset..] {
        let e = enc.embedding(*tok);
        let at = x.len();
        x.extend((0..d).map(|k| e[k] + t[k] + MEAN_MIX * pooled.mean_emb[k]));
        start.push(dot(&u_s, &x[at..]));
        end.push(dot(&u_e, &x[at..]));
    }
    let rank = dot(&heads.w_rank, &pooled.pooled);
    Ok((
        SpanScores {
            start,
            end,
            rank,
            truncated,
        },
        ReadForward {
            seq,
            offset,
            x,
            pooled,
        },
    ))
}

/// Start, end and rank logits for one question/passage pair.
pub fn read_scores(
    enc: &EncoderParams,
    heads: &ReaderHeads,
    question: &[u32],
    passage: &[u32],
    max_seq_len: usize,
) -> Result<SpanScores> {
    Ok(read_forward(enc, heads, question, passage, max_seq_len)?.0)
}

/// Accumulates the gradient of a loss given its logit gradients.
pub fn read_backward(
    enc: &EncoderParams,
    heads: &ReaderHeads,
    fwd: &ReadForward,
    g_start: &[f64],
    g_end: &[f64],
    g_rank: f64,
    grad: &mut EncoderGrad,
    heads_grad: &mut HeadsGrad,
) {
    let d = enc.width();
    let n = fwd.seq.len() - fwd.offset;
    debug_assert_eq!(g_start.len(), n);
    let mut s_s = vec![0.0; d];
    let mut s_e = vec![0.0; d];
    for i in 0..n {
        let xi = &fwd.x[i * d..(i + 1) * d];
        axpy(g_start[i], xi, &mut s_s);
        axpy(g_end[i], xi, &mut s_e);
    }
    axpy(1.0, &matvec(&enc.mix, &s_s), &mut heads_grad.w_start);
    axpy(1.0, &matvec(&enc.mix, &s_e), &mut heads_grad.w_end);
    add_outer(&mut grad.mix, &heads.w_start, &s_s);
    add_outer(&mut grad.mix, &heads.w_end, &s_e);
    axpy(g_rank, &fwd.pooled.pooled, &mut heads_grad.w_rank);

    let u_s = matvec_t(&enc.mix, &heads.w_start);
    let u_e = matvec_t(&enc.mix, &heads.w_end);
    let mut pos = vec![0.0; fwd.seq.len() * d];
    for i in 0..n {
        let row = &mut pos[(fwd.offset + i) * d..(fwd.offset + i + 1) * d];
        axpy(g_start[i], &u_s, row);
        axpy(g_end[i], &u_e, row);
    }
    let g_pooled: Vec<f64> = heads.w_rank.iter().map(|w| w * g_rank).collect();
    let g_x_bar = enc.backward_pooled(&fwd.pooled, &g_pooled, grad);
    enc.backward_inputs(&fwd.seq, TypeFlag::Passage, Some(&pos), &g_x_bar, grad);
}

fn check_gold(len: usize, gold: &[(usize, usize)]) -> Result<()> {
    if gold.is_empty() {
        return Err(Error::invalid(
            "marginal span loss needs at least one gold span",
        ));
    }
    if let Some((s, e)) = gold.iter().find(|(s, e)| s > e || *e >= len) {
        return Err(Error::invalid(format!(
            "gold span ({s}, {e}) invalid for passage of {len}"
        )));
    }
    Ok(())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn dedup_gold(gold: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut g = gold.to_vec();
    g.sort_unstable();
    g.dedup();
    g
}

/// `-ln Σ_(s,e) P_start(s) P_end(e)` over the distinct gold spans.
pub fn marginal_span_nll(scores: &SpanScores, gold: &[(usize, usize)]) -> Result<f64> {
    Ok(marginal_span_nll_with_grad(scores, gold)?.0)
}

/// Loss plus gradients with respect to the start and end logits.
pub fn marginal_span_nll_with_grad(
    scores: &SpanScores,
    gold: &[(usize, usize)],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_gold(scores.len(), gold)?;
    let gold = dedup_gold(gold);
    let ls = log_softmax_unchecked(&scores.start, 1.0);
    let le = log_softmax_unchecked(&scores.end, 1.0);
    let joint: Vec<f64> = gold.iter().map(|(s, e)| ls[*s] + le[*e]).collect();
    let lz = log_sum_exp(&joint);
    let mut g_start = softmax_unchecked(&scores.start, 1.0);
    let mut g_end = softmax_unchecked(&scores.end, 1.0);
    for ((s, e), j) in gold.iter().zip(&joint) {
        let w = (j - lz).exp();
        g_start[*s] -= w;
        g_end[*e] -= w;
    }
    Ok(((-lz).max(0.0), g_start, g_end))
}

/// Reader training loss for one question: span NLL on the positive (first
/// passage) plus rank NLL with the positive as target.
pub fn reader_loss_with_grad(
    enc: &EncoderParams,
    heads: &ReaderHeads,
    question: &[u32],
    passages: &[&[u32]],
    gold: &[(usize, usize)],
    max_seq_len: usize,
) -> Result<(f64, EncoderGrad, HeadsGrad)> {
    if passages.is_empty() {
        return Err(Error::Batch(
            "reader loss needs at least one passage".into(),
        ));
    }
    let mut fwds = Vec::with_capacity(passages.len());
    let mut ranks = Vec::with_capacity(passages.len());
    let mut first = None;
    for p in passages {
        let (s, f) = read_forward(enc, heads, question, p, max_seq_len)?;
        ranks.push(s.rank);
        if first.is_none() {
            first = Some(s);
        }
        fwds.push(f);
    }
    let first = first.expect("at least one passage");
    let (l_span, gs, ge) = marginal_span_nll_with_grad(&first, gold)?;
    let (l_rank, gr) = nll_of_index_with_grad(&ranks, 0)?;
    let mut grad = enc.zero_grad();
    let mut hg = HeadsGrad::zeros(enc.width());
    for (i, f) in fwds.iter().enumerate() {
        let n = f.seq.len() - f.offset;
        if i == 0 {
            read_backward(enc, heads, f, &gs, &ge, gr[0], &mut grad, &mut hg);
        } else {
            let z = vec![0.0; n];
            read_backward(enc, heads, f, &z, &z, gr[i], &mut grad, &mut hg);
        }
    }
    Ok((l_span + l_rank, grad, hg))
}

/// A reader encoder with its heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Reader {
    pub encoder: EncoderParams,
    pub heads: ReaderHeads,
}

impl Reader {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.encoder.to_checkpoint("encoder.");
        ck.extend(self.heads.to_checkpoint("reader."));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            encoder: EncoderParams::from_checkpoint(ck, "encoder.")?,
            heads: ReaderHeads::from_checkpoint(ck, "reader.")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderGrad {
    pub encoder: EncoderGrad,
    pub heads: HeadsGrad,
}

impl Params for Reader {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut b = self.encoder.blocks();
        b.extend(self.heads.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b = self.encoder.blocks_mut();
        b.extend(self.heads.blocks_mut());
        b
    }
}

impl Grads for ReaderGrad {
    fn grad_blocks(&self) -> Vec<GradBlock<'_>> {
        let mut b = self.encoder.grad_blocks();
        b.extend(self.heads.grad_blocks());
        b
    }

    fn scale(&mut self, factor: f64) {
        self.encoder.scale(factor);
        Grads::scale(&mut self.heads, factor);
    }
}

/// A training question for the reader: token IDs, positive corpus index and
/// gold spans inside the positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReaderExample {
    pub question: Vec<u32>,
    pub positive: usize,
    pub gold: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderConfig {
    pub width: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Passages per question: the positive plus negatives from the retriever pool.
    pub passages_per_question: usize,
    /// Retriever depth the negatives are drawn from.
    pub negative_pool: usize,
    pub max_seq_len: usize,
    pub clip_norm: Option<f64>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self {
            width: crate::encoder::TEACHER_WIDTH,
            lr: 0.01,
            epochs: 8,
            passages_per_question: 4,
            negative_pool: 8,
            max_seq_len: REFERENCE_READER_SEQ_LEN,
            clip_norm: Some(2.0),
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

/// Trains a reader from scratch, with negatives drawn from the top of
/// `retriever`'s ranking over `index`. `on_epoch` sees every epoch's model.
pub fn train_reader<F>(
    corpus: &TokenCorpus,
    examples: &[ReaderExample],
    retriever: &Retriever,
    index: &DenseIndex,
    config: &ReaderConfig,
    mut on_epoch: F,
) -> Result<Reader>
where
    F: FnMut(usize, &Reader) -> Result<()>,
{
    if examples.is_empty() {
        return Err(Error::Data("no reader training examples".into()));
    }
    if config.passages_per_question < 1 {
        return Err(Error::config(
            "reader needs at least one passage per question",
        ));
    }
    let vocab = corpus.vocab().len();
    let mut model = Reader {
        encoder: EncoderParams::init(vocab, config.width, config.seed),
        heads: ReaderHeads::init(config.width, config.seed),
    };
    let mut pools = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.positive >= corpus.len() {
            return Err(Error::Data(format!(
                "positive passage {} outside corpus",
                ex.positive
            )));
        }
        let depth = config.negative_pool.min(index.len());
        let hits = retrieve(retriever, &ex.question, index, depth)?;
        let pool: Vec<usize> = hits
            .ids()
            .into_iter()
            .map(|id| id as usize)
            .filter(|j| *j != ex.positive)
            .collect();
        pools.push(pool);
    }
    let mut opt = Optimizer::new(config.optimizer, config.lr).with_clip(config.clip_norm);
    let mut rng = rng::derive(config.seed, "reader-batches");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &qi in &order {
            let ex = &examples[qi];
            let negs: Vec<usize> = pools[qi]
                .choose_multiple(&mut rng, config.passages_per_question - 1)
                .cloned()
                .collect();
            let mut passages = vec![corpus.tokens(ex.positive)?];
            for j in negs {
                passages.push(corpus.tokens(j)?);
            }
            let (loss, g_enc, g_heads) = reader_loss_with_grad(
                &model.encoder,
                &model.heads,
                &ex.question,
                &passages,
                &ex.gold,
                config.max_seq_len,
            )
            .map_err(|e| e.in_training(&format!("reader epoch {epoch}")))?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "reader loss not finite at epoch {epoch}"
                )));
            }
            opt.step(
                &mut model,
                &ReaderGrad {
                    encoder: g_enc,
                    heads: g_heads,
                },
            )?;
        }
        on_epoch(epoch, &model)?;
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerCandidate {
    pub passage_id: u64,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub candidate: AnswerCandidate,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtractionMode {
    /// Best span of the highest-ranked passage.
    TopRanked,
    /// `(1 - λ)(log P_start + log P_end) + 2λ log P_rank` over each passage's top spans.
    Weighted { lambda: f64 },
}

/// All `(start, end, log P_start + log P_end)` with `end - start < max_span_len`,
/// best first; ties go to the smaller start, then the smaller end.
pub fn ranked_spans(scores: &SpanScores, max_span_len: usize) -> Vec<(usize, usize, f64)> {
    let ls = log_softmax_unchecked(&scores.start, 1.0);
    let le = log_softmax_unchecked(&scores.end, 1.0);
    let n = scores.len();
    let mut spans = Vec::new();
    for s in 0..n {
        for e in s..n.min(s + max_span_len) {
            spans.push((s, e, ls[s] + le[e]));
        }
    }
    spans.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    spans
}

/// Picks an answer from scored passages. Earlier passages win exact ties.
pub fn extract_answer(
    scored: &[(u64, SpanScores)],
    corpus: &TokenCorpus,
    mode: ExtractionMode,
    max_span_len: usize,
) -> Result<Answer> {
    let candidate = extract_candidate(scored, mode, max_span_len)?;
    let toks = corpus.tokens(candidate.passage_id as usize)?;
    let text = corpus
        .vocab()
        .detokenize(&toks[candidate.start..=candidate.end]);
    Ok(Answer { candidate, text })
}

pub fn extract_candidate(
    scored: &[(u64, SpanScores)],
    mode: ExtractionMode,
    max_span_len: usize,
) -> Result<AnswerCandidate> {
    if scored.is_empty() {
        return Err(Error::Extraction("no passages to extract from".into()));
    }
    if max_span_len == 0 || scored.iter().all(|(_, s)| s.is_empty()) {
        return Err(Error::Extraction("no candidate spans".into()));
    }
    match mode {
        ExtractionMode::TopRanked => {
            let mut best = 0;
            for (i, (_, s)) in scored.iter().enumerate() {
                if s.rank > scored[best].1.rank {
                    best = i;
                }
            }
            let (id, s) = &scored[best];
            let &(start, end, score) = ranked_spans(s, max_span_len)
                .first()
                .ok_or_else(|| Error::Extraction(format!("top-ranked passage {id} is empty")))?;
            Ok(AnswerCandidate {
                passage_id: *id,
                start,
                end,
                score,
            })
        }
        ExtractionMode::Weighted { lambda } => {
            let ranks: Vec<f64> = scored.iter().map(|(_, s)| s.rank).collect();
            let log_rank = log_softmax_unchecked(&ranks, 1.0);
            let mut best: Option<AnswerCandidate> = None;
            for ((id, s), lr) in scored.iter().zip(&log_rank) {
                for &(start, end, span) in ranked_spans(s, max_span_len)
                    .iter()
                    .take(WEIGHTED_TOP_SPANS)
                {
                    let score = (1.0 - lambda) * span + 2.0 * lambda * lr;
                    if best.as_ref().is_none_or(|b| score > b.score) {
                        best = Some(AnswerCandidate {
                            passage_id: *id,
                            start,
                            end,
                            score,
                        });
                    }
                }
            }
            best.ok_or_else(|| Error::Extraction("no candidate spans".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, MODEL_FD_STEP};
    use crate::optim::block_shapes;

    fn scores(start: Vec<f64>, end: Vec<f64>, rank: f64) -> SpanScores {
        SpanScores {
            start,
            end,
            rank,
            truncated: false,
        }
    }

    #[test]
    fn span_nll_closed_forms() {
        let one = scores(vec![0.3], vec![-1.0], 0.0);
        assert_eq!(marginal_span_nll(&one, &[(0, 0)]).unwrap(), 0.0);
        let flat = scores(vec![0.0; 4], vec![0.0; 4], 0.0);
        let l = marginal_span_nll(&flat, &[(1, 2)]).unwrap();
        assert!((l - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let l2 = marginal_span_nll(&flat, &[(1, 2), (0, 3), (1, 2)]).unwrap();
        assert!((l2 - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(marginal_span_nll(&flat, &[]).is_err());
        assert!(marginal_span_nll(&flat, &[(2, 1)]).is_err());
    }

    #[test]
    fn zero_heads_give_uniform_spans() {
        let enc = EncoderParams::init(10, 4, 2);
        let s = read_scores(&enc, &ReaderHeads::zeros(4), &[3, 4], &[5, 6, 7], 350).unwrap();
        assert_eq!(s.start, vec![0.0; 3]);
        assert_eq!(s.rank, 0.0);
        assert!(!s.truncated);
    }

    #[test]
    fn truncation_is_flagged() {
        let enc = EncoderParams::init(10, 4, 2);
        let s = read_scores(&enc, &ReaderHeads::init(4, 1), &[3, 4], &[5, 6, 7, 8, 9], 6).unwrap();
        assert!(s.truncated);
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn reader_gradient_matches_differences() {
        let model = Reader {
            encoder: EncoderParams::init(12, 3, 5),
            heads: ReaderHeads::init(3, 6),
        };
        let q = [3u32, 4];
        let p1 = [5u32, 6, 7, 8];
        let p2 = [9u32, 10, 11];
        let gold = [(1, 2), (3, 3)];
        let loss = |m: &Reader| {
            reader_loss_with_grad(&m.encoder, &m.heads, &q, &[&p1, &p2], &gold, 350).unwrap()
        };
        let (_, ge, gh) = loss(&model);
        let g = ReaderGrad {
            encoder: ge,
            heads: gh,
        };
        let analytic = g.flatten_dense(&block_shapes(&model));
        let mut probe = model.clone();
        let report = finite_difference_check(
            |flat| {
                probe.assign_flat(flat);
                loss(&probe).0
            },
            &model.flatten(),
            &analytic,
            MODEL_FD_STEP,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn single_passage_modes_agree() {
        let s = scores(vec![0.1, 2.0, -1.0, 0.5], vec![0.0, 0.3, 1.5, -0.2], 0.7);
        let scored = vec![(3, s)];
        let a = extract_candidate(&scored, ExtractionMode::TopRanked, 10).unwrap();
        let b = extract_candidate(&scored, ExtractionMode::Weighted { lambda: 0.8 }, 10).unwrap();
        assert_eq!((a.start, a.end), (1, 2));
        assert_eq!(
            (a.start, a.end, a.passage_id),
            (b.start, b.end, b.passage_id)
        );
    }

    #[test]
    fn span_cap_is_respected() {
        let s = scores(vec![5.0, 0.0, 0.0], vec![0.0, 0.0, 5.0], 0.0);
        let c = extract_candidate(&[(0, s)], ExtractionMode::TopRanked, 2).unwrap();
        assert!(c.end - c.start < 2);
        assert!(extract_candidate(&[], ExtractionMode::TopRanked, 2).is_err());
    }
}
