//! Passage filter: a binary classifier over passages whose top-n scores
//! decide which passages stay in the corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::{Checkpoint, Tensor};
use crate::corpus::{subset_corpus, SubsetCorpus, TokenCorpus};
use crate::encoder::{EncoderGrad, EncoderParams, TypeFlag, INIT_SCALE};
use crate::error::{Error, FormatError, Result};
use crate::linalg::{axpy, dot};
use crate::numerics::bce_loss_with_grad;
use crate::optim::{GradBlock, Grads, Optimizer, OptimizerKind, Params};
use crate::rng;
use crate::wire::{ByteReader, PutLe};

pub const REFERENCE_POSITIVES_PER_BATCH: usize = 9;
pub const REFERENCE_NEGATIVES_PER_BATCH: usize = 9;
pub const REFERENCE_FILTER_LR: f64 = 1e-5;
pub const REFERENCE_EVAL_INTERVAL: usize = 2000;
pub const REFERENCE_VAL_POSITIVES: usize = 893;
pub const REFERENCE_VAL_NEGATIVES: usize = 9107;
pub const REFERENCE_SUBSET_SIZE: usize = 1_224_000;
pub const REFERENCE_CORPUS_SIZE: usize = 21_015_325;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterModel {
    pub encoder: EncoderParams,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterGrad {
    pub encoder: EncoderGrad,
    pub w: Vec<f64>,
}

impl FilterModel {
    pub fn init(vocab_size: usize, width: usize, seed: u64) -> Self {
        let mut rng = rng::derive(seed, "filter-w");
        Self {
            encoder: EncoderParams::init(vocab_size, width, seed),
            w: (0..width)
                .map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE))
                .collect(),
        }
    }

    /// `s_j = E(p_j)ᵀ w` on the full-width pooled vector.
    pub fn score(&self, passage: &[u32]) -> Result<f64> {
        Ok(dot(
            &self.encoder.pooled(passage, TypeFlag::Passage)?,
            &self.w,
        ))
    }

    pub fn score_all(&self, corpus: &TokenCorpus) -> Result<Vec<f64>> {
        corpus.iter().map(|p| self.score(p)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.encoder.to_checkpoint("filter.");
        ck.push(Tensor::new("filter.w", vec![self.w.len()], self.w.clone()));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let encoder = EncoderParams::from_checkpoint(ck, "filter.")?;
        let w = ck.require("filter.w")?.data.clone();
        if w.len() != encoder.width() {
            return Err(FormatError::LengthMismatch(format!(
                "filter.w has {} entries for width {}",
                w.len(),
                encoder.width()
            ))
            .into());
        }
        Ok(Self { encoder, w })
    }
}

impl Params for FilterModel {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut b = self.encoder.blocks();
        b.push(&self.w);
        b
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b = self.encoder.blocks_mut();
        b.push(&mut self.w);
        b
    }
}

impl Grads for FilterGrad {
    fn grad_blocks(&self) -> Vec<GradBlock<'_>> {
        let mut b = self.encoder.grad_blocks();
        b.push(GradBlock::Dense(&self.w));
        b
    }

    fn scale(&mut self, factor: f64) {
        self.encoder.scale(factor);
        self.w.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Mean BCE of a labelled passage batch and its gradient.
pub fn filter_loss_with_grad(
    model: &FilterModel,
    passages: &[&[u32]],
    labels: &[f64],
) -> Result<(f64, FilterGrad)> {
    let mut fwds = Vec::with_capacity(passages.len());
    let mut scores = Vec::with_capacity(passages.len());
    for p in passages {
        model.encoder.validate_tokens(p)?;
        let f = model.encoder.pooled_forward(p, TypeFlag::Passage);
        scores.push(dot(&f.pooled, &model.w));
        fwds.push(f);
    }
    let (loss, g) = bce_loss_with_grad(&scores, labels)?;
    let d = model.w.len();
    let mut grad = FilterGrad {
        encoder: model.encoder.zero_grad(),
        w: vec![0.0; d],
    };
    for ((p, f), gi) in passages.iter().zip(&fwds).zip(&g) {
        axpy(*gi, &f.pooled, &mut grad.w);
        let g_pooled: Vec<f64> = model.w.iter().map(|w| w * gi).collect();
        model
            .encoder
            .backward_pooled_full(p, TypeFlag::Passage, f, &g_pooled, &mut grad.encoder);
    }
    Ok((loss, grad))
}

/// `⌊log_b(freq) + 1⌋`.
pub fn smoothed_frequency(freq: u64, base: f64) -> Result<u64> {
    if freq < 1 {
        return Err(Error::invalid("frequency must be at least 1"));
    }
    if !(base > 1.0) {
        return Err(Error::invalid(format!(
            "log base must exceed 1, got {base}"
        )));
    }
    // integer powers avoid log rounding right at the boundaries
    let mut k = 1;
    let mut bound = base;
    while (freq as f64) >= bound {
        k += 1;
        bound *= base;
    }
    Ok(k)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterSplit {
    pub plus_train: BTreeSet<usize>,
    pub minus_train: BTreeSet<usize>,
    pub plus_val: BTreeSet<usize>,
    pub minus_val: BTreeSet<usize>,
    /// Number of training questions per positive passage.
    pub freq: BTreeMap<usize, u64>,
}

impl FilterSplit {
    pub fn validate(&self) -> Result<()> {
        if self.plus_train.is_empty() {
            return Err(Error::config("filter has no training positives"));
        }
        if self.minus_train.is_empty() {
            return Err(Error::config("filter has no training negatives"));
        }
        if !self.plus_train.is_disjoint(&self.minus_train) {
            return Err(Error::config("training positives and negatives overlap"));
        }
        if !self.plus_val.is_disjoint(&self.minus_val) {
            return Err(Error::config("validation positives and negatives overlap"));
        }
        if !self.plus_val.is_disjoint(&self.plus_train)
            || !self.minus_val.is_disjoint(&self.plus_train)
        {
            return Err(Error::config("validation sets overlap training positives"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub width: usize,
    pub positives_per_batch: usize,
    pub negatives_per_batch: usize,
    pub log_base: f64,
    pub eval_interval: usize,
    pub lr: f64,
    /// Passes over the oversampled positive pool.
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            width: 32,
            positives_per_batch: REFERENCE_POSITIVES_PER_BATCH,
            negatives_per_batch: REFERENCE_NEGATIVES_PER_BATCH,
            log_base: 10.0,
            eval_interval: 20,
            lr: 0.01,
            epochs: 4,
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

impl FilterConfig {
    fn validate(&self) -> Result<()> {
        if self.positives_per_batch == 0 || self.positives_per_batch != self.negatives_per_batch {
            return Err(Error::config(
                "filter batches must be half positive, half negative",
            ));
        }
        if !(self.log_base > 1.0) {
            return Err(Error::config("log base must exceed 1"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval interval must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterCheckpoint {
    pub step: usize,
    pub hit_val: f64,
    pub model: FilterModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace {
    pub checkpoints: Vec<FilterCheckpoint>,
    /// Index into `checkpoints` of the selected model.
    pub selected: usize,
    pub final_loss: f64,
}

/// IDs ranked by descending score, smaller ID first on ties.
fn rank_ids(scored: &mut [(usize, f64)]) {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
}

/// Fraction of validation positives inside the top-|positives| of the
/// ranking over positives and negatives together.
pub fn hit_val_from_scores(scores: &[(usize, f64)], plus_val: &BTreeSet<usize>) -> Result<f64> {
    if plus_val.is_empty() {
        return Err(Error::invalid("hit ratio needs validation positives"));
    }
    let mut ranked = scores.to_vec();
    rank_ids(&mut ranked);
    let hits = ranked
        .iter()
        .take(plus_val.len())
        .filter(|(id, _)| plus_val.contains(id))
        .count();
    Ok(hits as f64 / plus_val.len() as f64)
}

pub fn hit_val(
    model: &FilterModel,
    corpus: &TokenCorpus,
    plus_val: &BTreeSet<usize>,
    minus_val: &BTreeSet<usize>,
) -> Result<f64> {
    if plus_val.is_empty() {
        return Err(Error::invalid("hit ratio needs validation positives"));
    }
    if !plus_val.is_disjoint(minus_val) {
        return Err(Error::invalid("validation positives and negatives overlap"));
    }
    let scores = plus_val
        .iter()
        .chain(minus_val)
        .map(|j| Ok((*j, model.score(corpus.tokens(*j)?)?)))
        .collect::<Result<Vec<_>>>()?;
    hit_val_from_scores(&scores, plus_val)
}

/// Trains the filter over the oversampled positive pool and keeps the
/// checkpoint with the best `hit_val`; the earliest wins ties. A checkpoint is
/// always recorded at the end of training.
pub fn train_filter(
    corpus: &TokenCorpus,
    split: &FilterSplit,
    config: &FilterConfig,
) -> Result<(FilterModel, FilterTrace)> {
    config.validate()?;
    split.validate()?;
    let mut pool = Vec::new();
    for &j in &split.plus_train {
        let f = split.freq.get(&j).copied().unwrap_or(1);
        for _ in 0..smoothed_frequency(f, config.log_base)? {
            pool.push(j);
        }
    }
    let negatives: Vec<usize> = split.minus_train.iter().copied().collect();
    let mut model = FilterModel::init(corpus.vocab().len(), config.width, config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    let mut rng = rng::derive(config.seed, "filter-batches");
    let mut checkpoints = Vec::new();
    let has_val = !split.plus_val.is_empty();
    let record = |step: usize, m: &FilterModel, cps: &mut Vec<FilterCheckpoint>| -> Result<()> {
        let h = if has_val {
            hit_val(m, corpus, &split.plus_val, &split.minus_val)?
        } else {
            0.0
        };
        cps.push(FilterCheckpoint {
            step,
            hit_val: h,
            model: m.clone(),
        });
        Ok(())
    };
    let mut step = 0;
    let mut last_loss = f64::NAN;
    for _ in 0..config.epochs {
        pool.shuffle(&mut rng);
        for chunk in pool.chunks(config.positives_per_batch) {
            let mut ids: Vec<usize> = chunk.to_vec();
            let mut labels = vec![1.0; chunk.len()];
            for _ in 0..chunk.len() {
                ids.push(negatives[rng.random_range(0..negatives.len())]);
                labels.push(0.0);
            }
            let toks = ids
                .iter()
                .map(|j| corpus.tokens(*j))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grad) = filter_loss_with_grad(&model, &toks, &labels)
                .map_err(|e| e.in_training(&format!("filter step {step}")))?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "filter loss not finite at step {step}"
                )));
            }
            opt.step(&mut model, &grad)?;
            step += 1;
            last_loss = loss;
            if step % config.eval_interval == 0 {
                record(step, &model, &mut checkpoints)?;
            }
        }
    }
    if checkpoints.last().is_none_or(|c| c.step != step) {
        record(step, &model, &mut checkpoints)?;
    }
    let mut selected = 0;
    for (i, c) in checkpoints.iter().enumerate() {
        if c.hit_val > checkpoints[selected].hit_val {
            selected = i;
        }
    }
    let best = checkpoints[selected].model.clone();
    Ok((
        best,
        FilterTrace {
            checkpoints,
            selected,
            final_loss: last_loss,
        },
    ))
}

/// The `n` highest-scoring passage IDs (sorted ascending) from precomputed scores.
pub fn top_n_from_scores(scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > scores.len() {
        return Err(Error::invalid(format!(
            "n = {n} outside 1..={}",
            scores.len()
        )));
    }
    let mut ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    rank_ids(&mut ranked);
    let mut keep: Vec<usize> = ranked[..n].iter().map(|(j, _)| *j).collect();
    keep.sort_unstable();
    Ok(keep)
}

/// Scores every passage and keeps the top `n` as a remapped corpus.
pub fn select_top_n(
    model: &FilterModel,
    corpus: &TokenCorpus,
    n: usize,
) -> Result<(Vec<usize>, SubsetCorpus)> {
    let keep = top_n_from_scores(&model.score_all(corpus)?, n)?;
    let sub = subset_corpus(corpus, &keep)?;
    Ok((keep, sub))
}

/// `count u64 | ids u64...`, ascending.
pub fn subset_to_bytes(ids: &[usize]) -> Vec<u8> {
    let mut sorted: Vec<u64> = ids.iter().map(|i| *i as u64).collect();
    sorted.sort_unstable();
    let mut out = Vec::with_capacity(8 + 8 * sorted.len());
    out.put_u64(sorted.len() as u64);
    for id in sorted {
        out.put_u64(id);
    }
    out
}

pub fn subset_from_bytes(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = ByteReader::new(bytes);
    let raw = r.u64("subset length")?;
    let n = r.count(raw, 8, "subset ids")?;
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.u64("subset ids")?;
        if ids.last().is_some_and(|prev| *prev >= id as usize) {
            return Err(
                FormatError::InvalidField("subset ids not strictly ascending".into()).into(),
            );
        }
        ids.push(id as usize);
    }
    r.finish()?;
    Ok(ids)
}

pub fn subset_to_text(ids: &[usize]) -> String {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sorted.iter().map(|id| format!("{id}\n")).collect()
}

pub fn write_subset(ids: &[usize], path: &Path) -> Result<()> {
    fs::write(path, subset_to_bytes(ids))?;
    Ok(())
}

pub fn read_subset(path: &Path) -> Result<Vec<usize>> {
    subset_from_bytes(&fs::read(path)?)
}
