//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use minrr::corpus::{TokenCorpus, Vocabulary};
use minrr::encoder::EncoderParams;
use minrr::optim::Params;
use minrr::reader::ReaderHeads;
use minrr::unification::{TrainBatch, UnifiedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FINETUNE_FROZEN: &str = include_str!("../oracles/finetune_step.out");

/// Name → values from the frozen finetuning oracle.
pub fn finetune_frozen() -> BTreeMap<String, Vec<f64>> {
    FINETUNE_FROZEN
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split_whitespace();
            let name = parts.next().unwrap().to_string();
            (name, parts.map(|v| v.parse().unwrap()).collect())
        })
        .collect()
}

/// Parameters in the script's order: embeddings, question type, passage type,
/// mix, pool, start, end, rank.
pub fn oracle_order(m: &UnifiedModel) -> Vec<f64> {
    let e = &m.encoder;
    let h = &m.heads;
    [
        &e.token_embedding,
        &e.type_embedding[0],
        &e.type_embedding[1],
        &e.mix,
        &e.pool,
        &h.w_start,
        &h.w_end,
        &h.w_rank,
    ]
    .into_iter()
    .flatten()
    .copied()
    .collect()
}

/// The width-2 model the oracle script hard-codes.
pub fn oracle_model() -> UnifiedModel {
    let mut enc = EncoderParams::zeros(6, 2);
    enc.token_embedding = vec![
        0.3, -0.2, 0.1, 0.4, -0.5, 0.25, 0.6, -0.1, -0.3, 0.2, 0.15, -0.45,
    ];
    enc.type_embedding = [vec![0.05, -0.1], vec![-0.2, 0.3]];
    enc.mix = vec![1.1, 0.2, -0.3, 0.9];
    enc.pool = vec![0.8, -0.4, 0.5, 1.2];
    UnifiedModel {
        encoder: enc,
        heads: ReaderHeads {
            w_start: vec![0.7, -0.6],
            w_end: vec![-0.3, 0.9],
            w_rank: vec![0.4, 0.35],
        },
        retrieval_dim: 1,
    }
}

pub fn oracle_corpus() -> TokenCorpus {
    let vocab = Arc::new(Vocabulary::new(["a", "b", "c"]).unwrap());
    TokenCorpus::from_token_ids(vocab, &[vec![4, 3, 5], vec![5, 4]]).unwrap()
}

pub fn oracle_batch() -> TrainBatch {
    TrainBatch {
        question: vec![3, 5],
        passages: vec![0, 1],
        gold: vec![(0, 0), (1, 2)],
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Overwrites every parameter with U(-scale, scale).
pub fn randomize<P: Params + ?Sized>(p: &mut P, scale: f64, rng: &mut ChaCha8Rng) {
    let flat: Vec<f64> = (0..p.flatten().len())
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    p.assign_flat(&flat);
}

/// A corpus of `n` random passages over `words` ordinary tokens.
pub fn random_corpus(words: usize, n: usize, max_len: usize, rng: &mut ChaCha8Rng) -> TokenCorpus {
    let names: Vec<String> = (0..words).map(|i| format!("w{i}")).collect();
    let vocab = Arc::new(Vocabulary::new(names).unwrap());
    let first = (vocab.len() - words) as u32;
    let passages: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len)
                .map(|_| rng.random_range(first..first + words as u32))
                .collect()
        })
        .collect();
    TokenCorpus::from_token_ids(vocab, &passages).unwrap()
}

/// `len` random ordinary token IDs for `corpus`'s vocabulary.
pub fn random_tokens(corpus: &TokenCorpus, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let v = corpus.vocab().len() as u32;
    (0..len).map(|_| rng.random_range(3..v)).collect()
}
