//! One shared encoder for retrieval and reading: distillation from a teacher
//! reader, then iterative finetuning with a retrieval-score reconstruction term.

use std::fmt;

use rand::seq::index;

use crate::checkpoint::{Checkpoint, Precision};
use crate::corpus::TokenCorpus;
use crate::encoder::{EncoderGrad, EncoderParams, PooledForward, TypeFlag};
use crate::error::{Error, Result};
use crate::index::DenseIndex;
use crate::linalg::{axpy, dot};
use crate::numerics::{nll_of_index_with_grad, softened_kl_with_grad};
use crate::optim::{Optimizer, OptimizerKind, Params};
use crate::reader::{
    read_backward, read_forward, read_scores, HeadsGrad, Reader, ReaderExample, ReaderGrad,
    ReaderHeads,
};
use crate::retriever::{build_passage_index, Retriever};
use crate::rng::{self, SeededRng};

pub const REFERENCE_POOL_DEPTH: usize = 200;
pub const REFERENCE_PASSAGES_PER_QUESTION: usize = 24;
pub const REFERENCE_TEMPERATURE: f64 = 3.0;
pub const REFERENCE_DISTILL_LR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// `k′`: teacher-retrieved pool depth per question.
    pub pool_depth: usize,
    /// `m`: passages per training question, the positive first.
    pub passages: usize,
    pub temperature: f64,
    pub lr: f64,
    pub epochs: usize,
    pub max_seq_len: usize,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            pool_depth: 32,
            passages: 8,
            temperature: REFERENCE_TEMPERATURE,
            lr: 0.005,
            epochs: 6,
            max_seq_len: crate::reader::REFERENCE_READER_SEQ_LEN,
            optimizer: OptimizerKind::adam(),
            clip_norm: Some(2.0),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passages < 2 {
            return Err(Error::config("need at least two passages per question"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.pool_depth < self.passages {
            return Err(Error::config(format!(
                "pool depth {} smaller than passages per question {}",
                self.pool_depth, self.passages
            )));
        }
        Ok(())
    }
}

/// The single parameter set serving retrieval, reading and ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedModel {
    pub encoder: EncoderParams,
    pub heads: ReaderHeads,
    pub retrieval_dim: usize,
}

impl UnifiedModel {
    /// Starts from a trained shared retriever with fresh reader heads.
    pub fn from_retriever(encoder: EncoderParams, retrieval_dim: usize, seed: u64) -> Self {
        let heads = ReaderHeads::init(encoder.width(), seed);
        Self {
            encoder,
            heads,
            retrieval_dim,
        }
    }

    pub fn retriever(&self) -> Retriever {
        Retriever::Shared(self.encoder.clone())
    }

    pub fn sim(&self, question: &[u32], passage: &[u32]) -> Result<f64> {
        self.retriever().sim(question, passage, self.retrieval_dim)
    }

    pub fn build_index(&self, corpus: &TokenCorpus) -> Result<DenseIndex> {
        Ok(build_passage_index(&self.retriever(), corpus, self.retrieval_dim)?.into())
    }

    pub fn param_count(&self) -> usize {
        Params::param_count(self)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.encoder.to_checkpoint("encoder.");
        ck.extend(self.heads.to_checkpoint("reader."));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, retrieval_dim: usize) -> Result<Self> {
        Ok(Self {
            encoder: EncoderParams::from_checkpoint(ck, "encoder.")?,
            heads: ReaderHeads::from_checkpoint(ck, "reader.")?,
            retrieval_dim,
        })
    }

    pub fn rounded(&self, precision: Precision) -> Self {
        Self {
            encoder: self.encoder.rounded(precision),
            heads: self.heads.rounded(precision),
            retrieval_dim: self.retrieval_dim,
        }
    }
}

impl Params for UnifiedModel {
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

/// Frozen teacher: retriever `ω` and reader `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPipeline {
    pub retriever: Retriever,
    pub reader: Reader,
    pub retrieval_dim: usize,
}

/// For each question, the `k′` passages of `corpus` scored highest by `ω`.
pub fn build_read_pool(
    teacher: &Retriever,
    corpus: &TokenCorpus,
    questions: &[Vec<u32>],
    pool_depth: usize,
    retrieval_dim: usize,
) -> Result<Vec<Vec<usize>>> {
    if corpus.is_empty() {
        return Err(Error::config("empty passage subset"));
    }
    if pool_depth == 0 || pool_depth > corpus.len() {
        return Err(Error::config(format!(
            "pool depth {pool_depth} outside 1..={}",
            corpus.len()
        )));
    }
    let index: DenseIndex = build_passage_index(teacher, corpus, retrieval_dim)?.into();
    questions
        .iter()
        .map(|q| {
            let q_vec = teacher.encode_question(q, retrieval_dim)?;
            Ok(index
                .search(&q_vec, pool_depth)?
                .ids()
                .into_iter()
                .map(|id| id as usize)
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub question: Vec<u32>,
    /// Corpus indices; the positive is first.
    pub passages: Vec<usize>,
    /// Gold spans inside the positive.
    pub gold: Vec<(usize, usize)>,
}

impl TrainBatch {
    pub fn labels(&self) -> Vec<f64> {
        (0..self.passages.len())
            .map(|i| if i == 0 { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Positive first, then `m - 1` negatives drawn without replacement from the
/// pool. `Ok(None)` when the positive is not in the pool.
pub fn sample_batch(
    pool: &[usize],
    example: &ReaderExample,
    passages: usize,
    rng: &mut SeededRng,
) -> Result<Option<TrainBatch>> {
    if pool.len() < passages {
        return Err(Error::Batch(format!(
            "pool of {} cannot supply {passages} passages",
            pool.len()
        )));
    }
    if passages < 2 {
        return Err(Error::Batch(
            "a batch needs a positive and at least one negative".into(),
        ));
    }
    if !pool.contains(&example.positive) {
        return Ok(None);
    }
    let negatives: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|j| *j != example.positive)
        .collect();
    let mut chosen = vec![example.positive];
    chosen.extend(
        index::sample(rng, negatives.len(), passages - 1)
            .into_iter()
            .map(|i| negatives[i]),
    );
    Ok(Some(TrainBatch {
        question: example.question.clone(),
        passages: chosen,
        gold: example.gold.clone(),
    }))
}

struct SimForward<'a> {
    question: PooledForward,
    passages: Vec<(&'a [u32], PooledForward)>,
    scores: Vec<f64>,
}

fn sim_forward<'a>(
    enc: &EncoderParams,
    question: &[u32],
    passages: &[&'a [u32]],
    retrieval_dim: usize,
) -> Result<SimForward<'a>> {
    if retrieval_dim == 0 || retrieval_dim > enc.width() {
        return Err(Error::config(format!(
            "retrieval dimension {retrieval_dim} invalid"
        )));
    }
    enc.validate_tokens(question)?;
    let q = enc.pooled_forward(question, TypeFlag::Question);
    let mut ps = Vec::with_capacity(passages.len());
    let mut scores = Vec::with_capacity(passages.len());
    for p in passages {
        enc.validate_tokens(p)?;
        let f = enc.pooled_forward(p, TypeFlag::Passage);
        scores.push(dot(&q.pooled[..retrieval_dim], &f.pooled[..retrieval_dim]));
        ps.push((*p, f));
    }
    Ok(SimForward {
        question: q,
        passages: ps,
        scores,
    })
}

fn sim_backward(
    enc: &EncoderParams,
    question: &[u32],
    fwd: &SimForward<'_>,
    g: &[f64],
    retrieval_dim: usize,
    grad: &mut EncoderGrad,
) {
    let d = enc.width();
    let mut gq = vec![0.0; d];
    for ((toks, pf), gi) in fwd.passages.iter().zip(g) {
        axpy(*gi, &pf.pooled[..retrieval_dim], &mut gq[..retrieval_dim]);
        let mut gp = vec![0.0; d];
        axpy(
            *gi,
            &fwd.question.pooled[..retrieval_dim],
            &mut gp[..retrieval_dim],
        );
        enc.backward_pooled_full(toks, TypeFlag::Passage, pf, &gp, grad);
    }
    enc.backward_pooled_full(question, TypeFlag::Question, &fwd.question, &gq, grad);
}

fn batch_tokens<'a>(corpus: &'a TokenCorpus, batch: &TrainBatch) -> Result<Vec<&'a [u32]>> {
    if batch.passages.len() < 2 {
        return Err(Error::Batch("batch needs at least two passages".into()));
    }
    batch.passages.iter().map(|j| corpus.tokens(*j)).collect()
}

/// Student similarity scores `ℓ` of every batch passage against the question.
pub fn sim_scores(
    model: &UnifiedModel,
    corpus: &TokenCorpus,
    batch: &TrainBatch,
) -> Result<Vec<f64>> {
    let toks = batch_tokens(corpus, batch)?;
    Ok(sim_forward(&model.encoder, &batch.question, &toks, model.retrieval_dim)?.scores)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillLosses {
    pub l_read: f64,
    pub l_ret: f64,
}

/// `L_read + L_ret` for one batch and its gradient with respect to the student.
///
/// `L_read` sums the softened start and end KL of every passage plus the
/// softened KL of the rank distribution; `L_ret` is the NLL of the positive
/// under the student's similarity scores.
pub fn distill_loss_with_grad(
    student: &UnifiedModel,
    teacher: &Reader,
    corpus: &TokenCorpus,
    batch: &TrainBatch,
    temperature: f64,
    max_seq_len: usize,
) -> Result<(DistillLosses, ReaderGrad)> {
    let toks = batch_tokens(corpus, batch)?;
    let enc = &student.encoder;
    let mut grad = enc.zero_grad();
    let mut hg = HeadsGrad::zeros(enc.width());
    let mut l_read = 0.0;
    let mut student_fwd = Vec::with_capacity(toks.len());
    let mut s_rank = Vec::with_capacity(toks.len());
    let mut t_rank = Vec::with_capacity(toks.len());
    for (i, p) in toks.iter().enumerate() {
        let (s, f) = read_forward(enc, &student.heads, &batch.question, p, max_seq_len)?;
        let t = read_scores(
            &teacher.encoder,
            &teacher.heads,
            &batch.question,
            p,
            max_seq_len,
        )?;
        if s.len() != t.len() {
            return Err(Error::Alignment(format!(
                "passage {} has {} student positions but {} teacher positions",
                batch.passages[i],
                s.len(),
                t.len()
            )));
        }
        let (ls, gs) = softened_kl_with_grad(&t.start, &s.start, temperature)?;
        let (le, ge) = softened_kl_with_grad(&t.end, &s.end, temperature)?;
        l_read += ls + le;
        s_rank.push(s.rank);
        t_rank.push(t.rank);
        student_fwd.push((f, gs, ge));
    }
    let (lr, gr) = softened_kl_with_grad(&t_rank, &s_rank, temperature)?;
    l_read += lr;
    for ((f, gs, ge), g_rank) in student_fwd.iter().zip(&gr) {
        read_backward(enc, &student.heads, f, gs, ge, *g_rank, &mut grad, &mut hg);
    }
    let sims = sim_forward(enc, &batch.question, &toks, student.retrieval_dim)?;
    let (l_ret, g_sim) = nll_of_index_with_grad(&sims.scores, 0)?;
    sim_backward(
        enc,
        &batch.question,
        &sims,
        &g_sim,
        student.retrieval_dim,
        &mut grad,
    );
    Ok((
        DistillLosses { l_read, l_ret },
        ReaderGrad {
            encoder: grad,
            heads: hg,
        },
    ))
}

/// One plain gradient step on `L_read + L_ret`.
pub fn distill_step(
    student: &UnifiedModel,
    teacher: &Reader,
    corpus: &TokenCorpus,
    batch: &TrainBatch,
    temperature: f64,
    lr: f64,
    max_seq_len: usize,
) -> Result<(UnifiedModel, DistillLosses)> {
    let (losses, grad) =
        distill_loss_with_grad(student, teacher, corpus, batch, temperature, max_seq_len)?;
    check_finite(losses.l_read + losses.l_ret, "distillation")?;
    let mut next = student.clone();
    Optimizer::sgd(lr).step(&mut next, &grad)?;
    Ok((next, losses))
}

fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{what} loss is not finite ({loss})"
        )))
    }
}

/// Reader loss on a batch: span NLL on the positive plus rank NLL.
pub fn batch_reader_loss_with_grad(
    model: &UnifiedModel,
    corpus: &TokenCorpus,
    batch: &TrainBatch,
    max_seq_len: usize,
) -> Result<(f64, ReaderGrad)> {
    let toks = batch_tokens(corpus, batch)?;
    let (l, ge, gh) = crate::reader::reader_loss_with_grad(
        &model.encoder,
        &model.heads,
        &batch.question,
        &toks,
        &batch.gold,
        max_seq_len,
    )?;
    Ok((
        l,
        ReaderGrad {
            encoder: ge,
            heads: gh,
        },
    ))
}

/// `L_recon + L_nll` at `model`, with `ℓ` held fixed, and its gradient.
pub fn recon_nll_with_grad(
    model: &UnifiedModel,
    corpus: &TokenCorpus,
    batch: &TrainBatch,
    ell: &[f64],
    temperature: f64,
) -> Result<(Vec<f64>, f64, f64, ReaderGrad)> {
    let toks = batch_tokens(corpus, batch)?;
    let sims = sim_forward(&model.encoder, &batch.question, &toks, model.retrieval_dim)?;
    let (l_recon, g_recon) = softened_kl_with_grad(ell, &sims.scores, temperature)?;
    let (l_nll, g_nll) = nll_of_index_with_grad(&sims.scores, 0)?;
    let g: Vec<f64> = g_recon.iter().zip(&g_nll).map(|(a, b)| a + b).collect();
    let mut grad = model.encoder.zero_grad();
    sim_backward(
        &model.encoder,
        &batch.question,
        &sims,
        &g,
        model.retrieval_dim,
        &mut grad,
    );
    Ok((
        sims.scores.clone(),
        l_recon,
        l_nll,
        ReaderGrad {
            encoder: grad,
            heads: HeadsGrad::zeros(model.encoder.width()),
        },
    ))
}

/// Every intermediate of one iterative finetuning step.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneStep {
    /// `ℓ`: similarity scores before the step.
    pub ell: Vec<f64>,
    pub l_read: f64,
    /// `θ̂`: parameters after the reader-loss step.
    pub theta_hat: UnifiedModel,
    /// `ℓ̂`: similarity scores under `θ̂`.
    pub ell_hat: Vec<f64>,
    pub l_recon: f64,
    pub l_nll: f64,
    /// `θ(t+1)`.
    pub next: UnifiedModel,
}

/// One iterative finetuning step:
///
/// 1. `ℓ` = similarity scores of all batch passages under `θ`
/// 2. `θ̂` = `θ` after one gradient step on the reader loss
/// 3. `ℓ̂` = similarity scores under `θ̂`
/// 4. `L_recon = KL(softmax(ℓ/τ) || softmax(ℓ̂/τ))`
/// 5. `L_nll` = cross-entropy of `softmax(ℓ̂)` against the labels
/// 6. `θ(t+1)` = `θ̂` after one gradient step on `L_recon + L_nll`
pub fn iterative_finetune_step(
    model: &UnifiedModel,
    corpus: &TokenCorpus,
    batch: &TrainBatch,
    temperature: f64,
    lr: f64,
    max_seq_len: usize,
) -> Result<FinetuneStep> {
    finetune_step_inner(model, corpus, batch, temperature, lr, max_seq_len, true)
}

/// [`iterative_finetune_step`] with line 2 replaced by the identity.
pub fn retrieval_only_step(
    model: &UnifiedModel,
    corpus: &TokenCorpus,
    batch: &TrainBatch,
    temperature: f64,
    lr: f64,
) -> Result<FinetuneStep> {
    finetune_step_inner(model, corpus, batch, temperature, lr, usize::MAX, false)
}

fn finetune_step_inner(
    model: &UnifiedModel,
    corpus: &TokenCorpus,
    batch: &TrainBatch,
    temperature: f64,
    lr: f64,
    max_seq_len: usize,
    reader_step: bool,
) -> Result<FinetuneStep> {
    let ell = sim_scores(model, corpus, batch)?;
    let mut theta_hat = model.clone();
    let mut l_read = 0.0;
    if reader_step {
        let (l, g) = batch_reader_loss_with_grad(model, corpus, batch, max_seq_len)?;
        check_finite(l, "reader")?;
        Optimizer::sgd(lr).step(&mut theta_hat, &g)?;
        l_read = l;
    }
    let (ell_hat, l_recon, l_nll, g) =
        recon_nll_with_grad(&theta_hat, corpus, batch, &ell, temperature)?;
    check_finite(l_recon + l_nll, "reconstruction")?;
    let mut next = theta_hat.clone();
    Optimizer::sgd(lr).step(&mut next, &g)?;
    Ok(FinetuneStep {
        ell,
        l_read,
        theta_hat,
        ell_hat,
        l_recon,
        l_nll,
        next,
    })
}

/// Index of the best candidate by `score`; the earliest wins ties.
pub fn select_checkpoint<T, F>(candidates: &[T], mut score: F) -> Result<usize>
where
    F: FnMut(&T) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::config("no checkpoints to select from"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let s = score(c)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// One line of the per-step loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub l_read: f64,
    pub l_ret: f64,
    pub l_recon: f64,
    pub l_nll: f64,
}

impl fmt::Display for LossRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.step, self.l_read, self.l_ret, self.l_recon, self.l_nll
        )
    }
}

pub fn parse_loss_log(text: &str) -> Result<Vec<LossRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Data(format!("loss log line {}: {line:?}", n + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LossRecord {
                step: f[0].parse().map_err(|_| bad())?,
                l_read: num(f[1])?,
                l_ret: num(f[2])?,
                l_recon: num(f[3])?,
                l_nll: num(f[4])?,
            })
        })
        .collect()
}

/// What a training run produced besides the final model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
    /// Questions dropped because their positive fell outside the pool.
    pub skipped_questions: usize,
}

fn prepare(
    examples: &[ReaderExample],
    pools: &[Vec<usize>],
    config: &DistillConfig,
) -> Result<(Vec<usize>, usize)> {
    config.validate()?;
    if examples.len() != pools.len() {
        return Err(Error::invalid("one read pool per example required"));
    }
    let usable: Vec<usize> = (0..examples.len())
        .filter(|i| pools[*i].contains(&examples[*i].positive))
        .collect();
    if usable.is_empty() {
        return Err(Error::Data(
            "no training question has its positive in its pool".into(),
        ));
    }
    let skipped = examples.len() - usable.len();
    Ok((usable, skipped))
}

/// Distills `teacher` into `student`. `on_epoch` sees the model after every epoch.
pub fn distill<F>(
    student: UnifiedModel,
    teacher: &Reader,
    corpus: &TokenCorpus,
    examples: &[ReaderExample],
    pools: &[Vec<usize>],
    config: &DistillConfig,
    mut on_epoch: F,
) -> Result<(UnifiedModel, TrainLog)>
where
    F: FnMut(usize, &UnifiedModel) -> Result<()>,
{
    let (mut order, skipped) = prepare(examples, pools, config)?;
    let mut model = student;
    let mut opt = Optimizer::new(config.optimizer, config.lr).with_clip(config.clip_norm);
    let mut rng = rng::derive(config.seed, "distill-batches");
    let mut log = TrainLog {
        records: Vec::new(),
        skipped_questions: skipped,
    };
    for epoch in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for &qi in &order {
            let batch = sample_batch(&pools[qi], &examples[qi], config.passages, &mut rng)?
                .expect("usable questions have their positive in the pool");
            let (losses, grad) = distill_loss_with_grad(
                &model,
                teacher,
                corpus,
                &batch,
                config.temperature,
                config.max_seq_len,
            )
            .map_err(|e| e.in_training(&format!("distillation step {}", log.records.len())))?;
            check_finite(
                losses.l_read + losses.l_ret,
                &format!("distillation step {}", log.records.len()),
            )?;
            opt.step(&mut model, &grad)?;
            log.records.push(LossRecord {
                step: log.records.len() as u64,
                l_read: losses.l_read,
                l_ret: losses.l_ret,
                l_recon: 0.0,
                l_nll: 0.0,
            });
        }
        on_epoch(epoch, &model)?;
    }
    Ok((model, log))
}

/// Runs iterative finetuning steps over the training questions, one question
/// per step, with the step size `config.lr`.
pub fn iterative_finetune<F>(
    model: UnifiedModel,
    corpus: &TokenCorpus,
    examples: &[ReaderExample],
    pools: &[Vec<usize>],
    config: &DistillConfig,
    mut on_epoch: F,
) -> Result<(UnifiedModel, TrainLog)>
where
    F: FnMut(usize, &UnifiedModel) -> Result<()>,
{
    let (mut order, skipped) = prepare(examples, pools, config)?;
    let mut model = model;
    let mut rng = rng::derive(config.seed, "finetune-batches");
    let mut log = TrainLog {
        records: Vec::new(),
        skipped_questions: skipped,
    };
    for epoch in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for &qi in &order {
            let batch = sample_batch(&pools[qi], &examples[qi], config.passages, &mut rng)?
                .expect("usable questions have their positive in the pool");
            let step = iterative_finetune_step(
                &model,
                corpus,
                &batch,
                config.temperature,
                config.lr,
                config.max_seq_len,
            )
            .map_err(|e| match e {
                Error::Divergence(m) => {
                    Error::Divergence(format!("finetune step {}: {m}", log.records.len()))
                }
                other => other.in_training(&format!("finetune step {}", log.records.len())),
            })?;
            log.records.push(LossRecord {
                step: log.records.len() as u64,
                l_read: step.l_read,
                l_ret: step.l_recon + step.l_nll,
                l_recon: step.l_recon,
                l_nll: step.l_nll,
            });
            model = step.next;
        }
        on_epoch(epoch, &model)?;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::corpus::Vocabulary;
    use crate::numerics::{finite_difference_check, MODEL_FD_STEP};
    use crate::optim::{block_shapes, Grads};

    fn setup() -> (TokenCorpus, UnifiedModel, Reader, TrainBatch) {
        let vocab = Arc::new(Vocabulary::new((0..9).map(|i| format!("t{i}"))).unwrap());
        let corpus =
            TokenCorpus::from_token_ids(vocab, &[vec![3, 4, 5], vec![6, 7, 8, 9], vec![10, 3]])
                .unwrap();
        let mut student = UnifiedModel {
            encoder: EncoderParams::init(12, 3, 1),
            heads: ReaderHeads::init(3, 2),
            retrieval_dim: 2,
        };
        let lifted = crate::rng::unit_uniform(student.flatten().len(), 11);
        student.assign_flat(&lifted);
        let teacher = Reader {
            encoder: EncoderParams::init(12, 3, 8),
            heads: ReaderHeads::init(3, 9),
        };
        let batch = TrainBatch {
            question: vec![4, 11],
            passages: vec![0, 1, 2],
            gold: vec![(1, 2)],
        };
        (corpus, student, teacher, batch)
    }

    #[test]
    fn distill_gradient_matches_differences() {
        let (corpus, student, teacher, batch) = setup();
        let (_, g) = distill_loss_with_grad(&student, &teacher, &corpus, &batch, 3.0, 350).unwrap();
        let analytic = g.flatten_dense(&block_shapes(&student));
        let mut probe = student.clone();
        let report = finite_difference_check(
            |flat| {
                probe.assign_flat(flat);
                let (l, _) =
                    distill_loss_with_grad(&probe, &teacher, &corpus, &batch, 3.0, 350).unwrap();
                l.l_read + l.l_ret
            },
            &student.flatten(),
            &analytic,
            MODEL_FD_STEP,
        )
        .unwrap();
        assert!(
            report.max_relative_error < 1e-4,
            "{}",
            report.max_relative_error
        );
    }

    #[test]
    fn recon_gradient_matches_differences() {
        let (corpus, student, _, batch) = setup();
        let ell = vec![0.3, -1.0, 0.5];
        let (_, _, _, g) = recon_nll_with_grad(&student, &corpus, &batch, &ell, 3.0).unwrap();
        let analytic = g.flatten_dense(&block_shapes(&student));
        let mut probe = student.clone();
        let report = finite_difference_check(
            |flat| {
                probe.assign_flat(flat);
                let (_, a, b, _) = recon_nll_with_grad(&probe, &corpus, &batch, &ell, 3.0).unwrap();
                a + b
            },
            &student.flatten(),
            &analytic,
            MODEL_FD_STEP,
        )
        .unwrap();
        assert!(
            report.max_relative_error < 1e-4,
            "{}",
            report.max_relative_error
        );
    }

    #[test]
    fn zero_lr_step_is_identity() {
        let (corpus, student, _, batch) = setup();
        let s = iterative_finetune_step(&student, &corpus, &batch, 3.0, 0.0, 350).unwrap();
        assert_eq!(s.next, student);
        assert_eq!(s.l_recon, 0.0);
        assert_eq!(s.ell, s.ell_hat);
    }

    #[test]
    fn identical_teacher_leaves_only_retrieval_loss() {
        let (corpus, student, _, batch) = setup();
        let teacher = Reader {
            encoder: student.encoder.clone(),
            heads: student.heads.clone(),
        };
        let (l, _) = distill_loss_with_grad(&student, &teacher, &corpus, &batch, 3.0, 350).unwrap();
        assert_eq!(l.l_read, 0.0);
        assert!(l.l_ret > 0.0);
    }

    #[test]
    fn skipped_reader_step_is_plain_nll_step() {
        let (corpus, student, _, batch) = setup();
        let s = retrieval_only_step(&student, &corpus, &batch, 3.0, 0.1).unwrap();
        assert_eq!(s.l_recon, 0.0);
        let toks = batch_tokens(&corpus, &batch).unwrap();
        let sims = sim_forward(&student.encoder, &batch.question, &toks, 2).unwrap();
        let (_, g) = nll_of_index_with_grad(&sims.scores, 0).unwrap();
        let mut grad = student.encoder.zero_grad();
        sim_backward(&student.encoder, &batch.question, &sims, &g, 2, &mut grad);
        let mut direct = student.clone();
        Optimizer::sgd(0.1)
            .step(
                &mut direct,
                &ReaderGrad {
                    encoder: grad,
                    heads: HeadsGrad::zeros(3),
                },
            )
            .unwrap();
        assert_eq!(s.next, direct);
    }

    #[test]
    fn checkpoint_holds_one_encoder() {
        let (_, student, _, _) = setup();
        let ck = student.to_checkpoint();
        let encoders = ck
            .names()
            .filter(|n| n.ends_with("token_embedding"))
            .count();
        assert_eq!(encoders, 1);
        assert_eq!(UnifiedModel::from_checkpoint(&ck, 2).unwrap(), student);
    }

    #[test]
    fn selection_prefers_earliest_best() {
        assert_eq!(
            select_checkpoint(&[0.2, 0.5, 0.5, 0.1], |x| Ok(*x)).unwrap(),
            1
        );
        assert!(select_checkpoint::<f64, _>(&[], |x| Ok(*x)).is_err());
    }
}
