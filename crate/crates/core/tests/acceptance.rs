//! Acceptance run: one PASS/FAIL line per criterion, sub-checks indented
//! above it. Exits nonzero when any sub-check fails that is not a recorded
//! known failure.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    finetune_frozen, oracle_batch, oracle_corpus, oracle_model, oracle_order, random_corpus,
    random_tokens, randomize, rng,
};
use minrr::checkpoint::load_checkpoint;
use minrr::checkpoint::{Checkpoint, Precision};
use minrr::corpus::subset_corpus;
use minrr::corpus::TokenCorpus;
use minrr::encoder::EncoderParams;
use minrr::filter::read_subset;
use minrr::filter::{
    filter_loss_with_grad, hit_val, hit_val_from_scores, top_n_from_scores, FilterModel,
};
use minrr::harness::commands::{cmd_ledger, Workspace};
use minrr::harness::{prepare, run_pipeline, PipelineConfig, PipelineTrace, SyntheticDataset};
use minrr::index::read_index;
use minrr::index::{quantize, train_quantizer, DenseIndex, FlatIndex, QuantizedIndex};
use minrr::numerics::{
    bce_loss, bce_loss_with_grad, finite_difference_check, log_softmax, nll_of_index,
    nll_of_index_with_grad, softened_kl_with_grad, DEFAULT_FD_STEP, MODEL_FD_STEP,
};
use minrr::optim::{block_shapes, Grads, Params};
use minrr::packaging::{compress_resource, CompressedContainer, ResourceKind};
use minrr::reader::{
    extract_candidate, marginal_span_nll, marginal_span_nll_with_grad, ranked_spans, read_scores,
    reader_loss_with_grad, ExtractionMode, Reader, ReaderGrad, ReaderHeads, SpanScores,
    WEIGHTED_TOP_SPANS,
};
use minrr::retriever::{
    build_passage_index, in_batch_loss_with_grad, retrieve, Retriever, TrainingPair,
};
use minrr::unification::{
    build_read_pool, distill_loss_with_grad, iterative_finetune_step, recon_nll_with_grad,
    sim_scores, TrainBatch, UnifiedModel,
};
use minrr::Error;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Recall@10 of INT8 against flat search on the criterion-2 data, from the
/// pilot run; the data are seeded, so every run reproduces it exactly.
const PILOT_RECALL_AT_10: f64 = 0.9865;
const RECALL_THRESHOLD: f64 = 0.9;
const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-10;
const FUZZ_CASES: usize = 1000;
const SEQ_LEN: usize = 64;

struct Check {
    label: String,
    pass: bool,
    /// Why this sub-check is expected to fail, if it is.
    known: Option<&'static str>,
}

#[derive(Default)]
struct Criterion {
    checks: Vec<Check>,
}

impl Criterion {
    fn check(&mut self, label: impl Into<String>, pass: bool) {
        self.checks.push(Check {
            label: label.into(),
            pass,
            known: None,
        });
    }

    fn known_red(&mut self, label: impl Into<String>, pass: bool, why: &'static str) {
        self.checks.push(Check {
            label: label.into(),
            pass,
            known: Some(why),
        });
    }
}

/// State carried between criteria: the first pipeline run feeds 6 and 8.
#[derive(Default)]
struct Ctx {
    first: Option<(PipelineTrace, PathBuf)>,
    _dirs: Vec<tempfile::TempDir>,
}

type Body = fn(&mut Criterion, &mut Ctx);

fn main() -> ExitCode {
    let criteria: [(&str, Body); 8] = [
        ("size ratios", size_ratios),
        ("quantization fidelity", quantization_fidelity),
        ("oracle equivalence", oracle_equivalence),
        ("gradient suite", gradient_suite),
        ("finetuning step", finetuning_step),
        ("end-to-end synthetic trend", end_to_end),
        ("format stability", format_stability),
        ("ledger integrity", ledger_integrity),
    ];
    let mut ctx = Ctx::default();
    let mut unexpected = 0;
    for (n, (title, body)) in criteria.iter().enumerate() {
        let mut c = Criterion::default();
        let t0 = Instant::now();
        if let Err(p) = catch_unwind(AssertUnwindSafe(|| body(&mut c, &mut ctx))) {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            c.check(format!("panicked: {msg}"), false);
        }
        for ch in &c.checks {
            let mark = if ch.pass { "ok  " } else { "FAIL" };
            println!("    [{mark}] {}", ch.label);
            if let (false, Some(why)) = (ch.pass, ch.known) {
                println!("           known failure: {why}");
            }
        }
        let failed: Vec<&Check> = c.checks.iter().filter(|ch| !ch.pass).collect();
        let surprise = failed.iter().filter(|ch| ch.known.is_none()).count();
        unexpected += surprise;
        let verdict = match (failed.len(), surprise) {
            (0, _) => "PASS".to_string(),
            (f, 0) => format!("FAIL ({f} known sub-check failure, all other sub-checks pass)"),
            (f, _) => format!("FAIL ({f} sub-checks failed)"),
        };
        println!(
            "criterion {} {title}: {verdict} [{:.1}s]",
            n + 1,
            t0.elapsed().as_secs_f64()
        );
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{unexpected} unexpected sub-check failures");
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- 1

fn size_ratios(c: &mut Criterion, _: &mut Ctx) {
    let (n, d) = (10_000usize, 128usize);
    let mut r = rng(1);
    let t0 = Instant::now();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let ids: Vec<u64> = (0..n as u64).collect();
    let flat = FlatIndex::build(&rows, &ids).unwrap();
    let q = quantize(&flat, &train_quantizer(&flat)).unwrap().index;
    let (fb, qb) = (flat.to_bytes(), q.to_bytes());
    let elapsed = t0.elapsed();

    c.check(
        format!(
            "int8 payload {} = 0.25 x fp32 payload {}",
            q.payload_bytes(),
            flat.payload_bytes()
        ),
        4 * q.payload_bytes() == flat.payload_bytes(),
    );
    c.check(
        "serialized lengths equal the layout formulas",
        fb.len() == flat.file_bytes() && qb.len() == q.file_bytes(),
    );
    let ratio = qb.len() as f64 / fb.len() as f64;
    let header = (fb.len() - 8 * n - 4 * n * d) as f64;
    let predicted =
        (header + (8 * n + 8 * d + n * d) as f64) / (header + (8 * n + 4 * n * d) as f64);
    c.check(
        format!("whole-file ratio {ratio:.6} equals the layout prediction {predicted:.6}"),
        ratio == predicted,
    );
    c.known_red(
        format!("whole-file int8/fp32 ratio {ratio:.4} <= 0.26 at N=10000, d=128"),
        ratio <= 0.26,
        "the required per-row u64 IDs and per-dimension ranges fix the ratio near \
         (8+d)/(8+4d), which exceeds 0.26 for every d < 148",
    );
    c.check(
        format!(
            "build + quantize + serialize in {:.2}s < 5s",
            elapsed.as_secs_f64()
        ),
        elapsed < Duration::from_secs(5),
    );

    // truncation through the real encoder path
    let corpus = random_corpus(40, 60, 12, &mut r);
    let width = 32;
    let ret = Retriever::Shared(EncoderParams::init(corpus.vocab().len(), width, 3));
    let full = build_passage_index(&ret, &corpus, width).unwrap();
    let mut exact = true;
    for dr in [1, 4, 8, 16, 24] {
        let cut = build_passage_index(&ret, &corpus, dr).unwrap();
        exact &= cut.payload_bytes() * width == full.payload_bytes() * dr;
        exact &= cut
            .data()
            .chunks(dr)
            .zip(full.data().chunks(width))
            .all(|(a, b)| a == &b[..dr]);
    }
    let wide: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..768).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let narrow: Vec<Vec<f64>> = wide.iter().map(|v| v[..128].to_vec()).collect();
    let ids: Vec<u64> = (0..50).collect();
    let (w, nr) = (
        FlatIndex::build(&wide, &ids).unwrap(),
        FlatIndex::build(&narrow, &ids).unwrap(),
    );
    exact &= nr.payload_bytes() * 768 == w.payload_bytes() * 128;
    c.check(
        "truncation d -> d_r scales index payload by exactly d_r/d",
        exact,
    );

    let model = UnifiedModel::from_retriever(EncoderParams::init(1000, 64, 5), 16, 5);
    let ck = model.to_checkpoint();
    let (p32, p16) = (
        ck.payload_bytes(Precision::Fp32),
        ck.payload_bytes(Precision::Fp16),
    );
    let (b32, b16) = (
        ck.to_bytes(Precision::Fp32).unwrap().len(),
        ck.to_bytes(Precision::Fp16).unwrap().len(),
    );
    c.check(
        format!("fp16 tensor payload {p16} = 0.5 x fp32 payload {p32}"),
        2 * p16 == p32 && b32 - b16 == p32 - p16,
    );
}

// ---------------------------------------------------------------- 2

fn quantization_fidelity(c: &mut Criterion, _: &mut Ctx) {
    let (n, d) = (10_000usize, 64usize);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut r = rng(2);
    let t0 = Instant::now();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| normal.sample(&mut r)).collect())
        .collect();
    let ids: Vec<u64> = (0..n as u64).collect();
    let flat = FlatIndex::build(&rows, &ids).unwrap();
    let params = train_quantizer(&flat);
    let q = quantize(&flat, &params).unwrap();
    let restored = q.index.dequantize();
    let mut worst_slack = f64::NEG_INFINITY;
    for (i, (a, b)) in flat.data().iter().zip(restored.data()).enumerate() {
        let err = (f64::from(*a) - f64::from(*b)).abs();
        let bound = (f64::from(params.vmax[i % d]) - f64::from(params.vmin[i % d])) / 510.0 + 1e-6;
        worst_slack = worst_slack.max(err - bound);
    }
    c.check(
        format!(
            "all {} values within (vmax-vmin)/510 + 1e-6 (worst slack {worst_slack:.3e}), {} clamped",
            n * d,
            q.clamped
        ),
        worst_slack <= 0.0 && q.clamped == 0,
    );

    let dense: DenseIndex = q.index.into();
    let queries = 200;
    let mut overlap = 0;
    for _ in 0..queries {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(&mut r)).collect();
        let want: BTreeSet<u64> = flat.search(&v, 10).unwrap().ids().into_iter().collect();
        overlap += dense
            .search(&v, 10)
            .unwrap()
            .ids()
            .iter()
            .filter(|id| want.contains(id))
            .count();
    }
    let recall = overlap as f64 / (10 * queries) as f64;
    let elapsed = t0.elapsed();
    c.check(
        format!("recall@10 {recall:.4} >= {RECALL_THRESHOLD} (pilot {PILOT_RECALL_AT_10})"),
        recall >= RECALL_THRESHOLD,
    );
    c.check(
        format!("recall@10 reproduces the pilot value"),
        recall == PILOT_RECALL_AT_10,
    );
    c.check(
        format!("runtime {:.2}s < 30s", elapsed.as_secs_f64()),
        elapsed < Duration::from_secs(30),
    );
}

// ---------------------------------------------------------------- 3

/// Items that beat `(id, score)` under descending score, smaller ID first.
fn beaten_by<I: Copy + Ord>(all: &[(I, f64)], id: I, score: f64) -> usize {
    all.iter()
        .filter(|(j, s)| *s > score || (*s == score && *j < id))
        .count()
}

/// IDs whose rank is below `k`, in rank order.
fn oracle_top<I: Copy + Ord>(all: &[(I, f64)], k: usize) -> Vec<I> {
    let mut ranked: Vec<(usize, I)> = all
        .iter()
        .map(|(id, s)| (beaten_by(all, *id, *s), *id))
        .filter(|(rank, _)| *rank < k)
        .collect();
    ranked.sort();
    ranked.into_iter().map(|(_, id)| id).collect()
}

fn coarse(r: &mut ChaCha8Rng) -> f64 {
    f64::from(r.random_range(-3i32..=3)) * 0.5
}

fn oracle_equivalence(c: &mut Criterion, _: &mut Ctx) {
    const INSTANCES: usize = 120;
    let mut r = rng(3);

    // hit_val: rank-counting against the sort-based implementation
    let mut ok = 0;
    for inst in 0..INSTANCES {
        let n = r.random_range(2..40);
        let mut pool: Vec<usize> = (0..200).collect();
        pool.shuffle(&mut r);
        let ids = &pool[..n];
        let plus: BTreeSet<usize> = ids.iter().copied().filter(|_| r.random_bool(0.3)).collect();
        let plus = if plus.is_empty() {
            BTreeSet::from([ids[0]])
        } else {
            plus
        };
        let (got, scores) = if inst % 5 == 0 {
            let corpus = random_corpus(6, 200, 4, &mut r);
            let model = FilterModel::init(corpus.vocab().len(), 4, inst as u64);
            let minus: BTreeSet<usize> =
                ids.iter().copied().filter(|j| !plus.contains(j)).collect();
            let scores: Vec<(usize, f64)> = ids
                .iter()
                .map(|j| (*j, model.score(corpus.tokens(*j).unwrap()).unwrap()))
                .collect();
            (hit_val(&model, &corpus, &plus, &minus).unwrap(), scores)
        } else {
            let scores: Vec<(usize, f64)> = ids.iter().map(|j| (*j, coarse(&mut r))).collect();
            (hit_val_from_scores(&scores, &plus).unwrap(), scores)
        };
        let hits = plus
            .iter()
            .filter(|p| {
                let s = scores.iter().find(|(j, _)| j == *p).unwrap().1;
                beaten_by(&scores, **p, s) < plus.len()
            })
            .count();
        ok += usize::from(got == hits as f64 / plus.len() as f64);
    }
    c.check(
        format!("hit_val matches the rank-count oracle on {ok}/{INSTANCES}"),
        ok == INSTANCES,
    );

    // top-n selection
    let mut ok = 0;
    for _ in 0..INSTANCES {
        let len = r.random_range(1..50);
        let scores: Vec<f64> = (0..len).map(|_| coarse(&mut r)).collect();
        let n = r.random_range(1..=len);
        let all: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        let mut want = oracle_top(&all, n);
        want.sort_unstable();
        ok += usize::from(top_n_from_scores(&scores, n).unwrap() == want);
    }
    c.check(
        format!("top-n selection matches the oracle on {ok}/{INSTANCES}"),
        ok == INSTANCES,
    );

    // J_read pools
    let mut ok = 0;
    for inst in 0..INSTANCES {
        let corpus = random_corpus(5, r.random_range(5..40), 3, &mut r);
        let v = corpus.vocab().len();
        let width = r.random_range(1..5);
        let ret = if inst % 2 == 0 {
            Retriever::Shared(EncoderParams::init(v, width, inst as u64))
        } else {
            Retriever::Dual {
                question: EncoderParams::init(v, width, inst as u64),
                passage: EncoderParams::init(v, width, inst as u64 + 1000),
            }
        };
        let dim = r.random_range(1..=width);
        let depth = r.random_range(1..=corpus.len());
        let questions: Vec<Vec<u32>> = (0..3)
            .map(|_| {
                let len = r.random_range(1..4);
                random_tokens(&corpus, len, &mut r)
            })
            .collect();
        let pools = build_read_pool(&ret, &corpus, &questions, depth, dim).unwrap();
        let rows: Vec<Vec<f32>> = corpus
            .iter()
            .map(|p| {
                ret.encode_passage(p, dim)
                    .unwrap()
                    .iter()
                    .map(|x| *x as f32)
                    .collect()
            })
            .collect();
        let want: Vec<Vec<usize>> = questions
            .iter()
            .map(|q| {
                let qv = ret.encode_question(q, dim).unwrap();
                let all: Vec<(usize, f64)> = rows
                    .iter()
                    .enumerate()
                    .map(|(j, row)| (j, row.iter().zip(&qv).map(|(x, y)| f64::from(*x) * y).sum()))
                    .collect();
                oracle_top(&all, depth)
            })
            .collect();
        ok += usize::from(pools == want);
    }
    c.check(
        format!("J_read pools match the oracle on {ok}/{INSTANCES}"),
        ok == INSTANCES,
    );

    // flat search, bitwise
    let mut ok = 0;
    for _ in 0..INSTANCES {
        let n = r.random_range(1..80);
        let d = r.random_range(1..8);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for _ in 0..n {
            if !rows.is_empty() && r.random_bool(0.2) {
                let k = r.random_range(0..rows.len());
                rows.push(rows[k].clone());
            } else {
                rows.push((0..d).map(|_| coarse(&mut r)).collect());
            }
        }
        let mut ids: Vec<u64> = (0..10_000).collect();
        ids.shuffle(&mut r);
        ids.truncate(n);
        let index = FlatIndex::build(&rows, &ids).unwrap();
        let q: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let k = r.random_range(1..=n);
        let all: Vec<(u64, f64)> = rows
            .iter()
            .zip(&ids)
            .map(|(row, id)| {
                (
                    *id,
                    row.iter()
                        .map(|x| f64::from(*x as f32))
                        .zip(&q)
                        .map(|(x, y)| x * y)
                        .sum(),
                )
            })
            .collect();
        let want = oracle_top(&all, k);
        let got = index.search(&q, k).unwrap();
        let same = got.ids() == want
            && got.hits.iter().all(|h| {
                let s = all.iter().find(|(id, _)| *id == h.passage_id).unwrap().1;
                s.to_bits() == h.score.to_bits()
            });
        ok += usize::from(same);
    }
    c.check(
        format!("flat search matches the oracle bit for bit on {ok}/{INSTANCES}"),
        ok == INSTANCES,
    );

    // weighted extraction
    let mut ok = 0;
    for _ in 0..INSTANCES {
        let passages = r.random_range(1..5);
        let scored: Vec<(u64, SpanScores)> = (0..passages)
            .map(|i| {
                let len = r.random_range(1..8);
                let logits = |r: &mut ChaCha8Rng| -> Vec<f64> {
                    (0..len)
                        .map(|_| f64::from(r.random_range(0..3u8)))
                        .collect()
                };
                let start = logits(&mut r);
                let end = logits(&mut r);
                let s = SpanScores {
                    start,
                    end,
                    rank: f64::from(r.random_range(0..3u8)),
                    truncated: false,
                };
                (10 * i as u64 + 7, s)
            })
            .collect();
        let max_len = r.random_range(1..5);
        let lambda = [0.0, 0.3, 0.8, 1.0][r.random_range(0..4)];
        let got = extract_candidate(&scored, ExtractionMode::Weighted { lambda }, max_len).unwrap();
        let ranks: Vec<f64> = scored.iter().map(|(_, s)| s.rank).collect();
        let lr = log_softmax(&ranks, 1.0).unwrap();
        // (total, passage, span, start, end) for every eligible span
        let mut best: Option<(f64, usize, f64, usize, usize)> = None;
        for (p, (_, s)) in scored.iter().enumerate() {
            let ls = log_softmax(&s.start, 1.0).unwrap();
            let le = log_softmax(&s.end, 1.0).unwrap();
            let spans: Vec<(usize, usize, f64)> = (0..s.start.len())
                .flat_map(|a| {
                    (a..s.start.len())
                        .filter(move |b| b - a < max_len)
                        .map(move |b| (a, b))
                })
                .map(|(a, b)| (a, b, ls[a] + le[b]))
                .collect();
            for &(a, b, span) in &spans {
                let better = spans
                    .iter()
                    .filter(|(a2, b2, s2)| *s2 > span || (*s2 == span && (a2, b2) < (&a, &b)))
                    .count();
                if better >= WEIGHTED_TOP_SPANS {
                    continue;
                }
                let total = (1.0 - lambda) * span + 2.0 * lambda * lr[p];
                let wins = match best {
                    None => true,
                    Some((bt, bp, bs, ba, bb)) => {
                        total > bt
                            || (total == bt
                                && (p < bp
                                    || (p == bp
                                        && (span > bs || (span == bs && (a, b) < (ba, bb))))))
                    }
                };
                if wins {
                    best = Some((total, p, span, a, b));
                }
            }
        }
        let (total, p, _, a, b) = best.unwrap();
        ok += usize::from(
            got.passage_id == scored[p].0
                && got.start == a
                && got.end == b
                && got.score.to_bits() == total.to_bits(),
        );
    }
    c.check(
        format!("weighted extraction matches the oracle on {ok}/{INSTANCES}"),
        ok == INSTANCES,
    );
}

// ---------------------------------------------------------------- 4

const DRAWS: usize = 20;

fn max_err<F: FnMut(&[f64]) -> f64>(f: F, x: &[f64], g: &[f64], step: f64) -> f64 {
    finite_difference_check(f, x, g, step)
        .unwrap()
        .max_relative_error
}

/// Worst error over `DRAWS` draws of `draw`, each returning one check's error.
fn suite(
    c: &mut Criterion,
    name: &str,
    r: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> f64,
) {
    let worst = (0..DRAWS).map(|_| draw(r)).fold(0.0, f64::max);
    c.check(
        format!("{name}: worst relative error {worst:.2e} over {DRAWS} draws"),
        worst <= GRAD_TOL,
    );
}

fn uniform_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

fn random_gold(r: &mut ChaCha8Rng, len: usize) -> Vec<(usize, usize)> {
    let mut gold: Vec<(usize, usize)> = (0..r.random_range(1..=3))
        .map(|_| {
            let s = r.random_range(0..len);
            (s, r.random_range(s..len))
        })
        .collect();
    gold.sort_unstable();
    gold.dedup();
    gold
}

/// Checks `loss` at parameters of `model` against the gradient it reports.
fn param_check<P, G>(model: &P, grad: &G, mut loss: impl FnMut(&P) -> f64) -> f64
where
    P: Params + Clone,
    G: Grads,
{
    let x = model.flatten();
    let g = grad.flatten_dense(&block_shapes(model));
    let mut probe = model.clone();
    max_err(
        |v| {
            probe.assign_flat(v);
            loss(&probe)
        },
        &x,
        &g,
        MODEL_FD_STEP,
    )
}

fn random_unified(corpus: &TokenCorpus, r: &mut ChaCha8Rng) -> UnifiedModel {
    let width = r.random_range(2..5);
    let mut m = UnifiedModel {
        encoder: EncoderParams::zeros(corpus.vocab().len(), width),
        heads: ReaderHeads::zeros(width),
        retrieval_dim: r.random_range(1..=width),
    };
    randomize(&mut m, 0.5, r);
    m
}

fn random_batch(corpus: &TokenCorpus, r: &mut ChaCha8Rng) -> TrainBatch {
    let mut passages: Vec<usize> = (0..corpus.len()).collect();
    passages.shuffle(r);
    passages.truncate(r.random_range(2..=corpus.len().min(4)));
    let first = corpus.tokens(passages[0]).unwrap().len();
    let qlen = r.random_range(1..4);
    TrainBatch {
        question: random_tokens(corpus, qlen, r),
        gold: random_gold(r, first),
        passages,
    }
}

fn gradient_suite(c: &mut Criterion, _: &mut Ctx) {
    let mut r = rng(4);

    suite(c, "BCE (scores)", &mut r, |r| {
        let n = r.random_range(1..10);
        let x = uniform_vec(r, n, 3.0);
        let labels: Vec<f64> = (0..n)
            .map(|_| f64::from(u8::from(r.random_bool(0.5))))
            .collect();
        let (_, g) = bce_loss_with_grad(&x, &labels).unwrap();
        max_err(|v| bce_loss(v, &labels).unwrap(), &x, &g, DEFAULT_FD_STEP)
    });

    suite(c, "BCE (filter parameters)", &mut r, |r| {
        let corpus = random_corpus(6, 8, 5, r);
        let width = r.random_range(2..5);
        let mut model = FilterModel::init(corpus.vocab().len(), width, 0);
        randomize(&mut model, 0.5, r);
        let toks: Vec<&[u32]> = corpus.iter().collect();
        let labels: Vec<f64> = (0..toks.len())
            .map(|i| f64::from(u8::from(i % 2 == 0)))
            .collect();
        let (_, g) = filter_loss_with_grad(&model, &toks, &labels).unwrap();
        param_check(&model, &g, |m| {
            filter_loss_with_grad(m, &toks, &labels).unwrap().0
        })
    });

    for shared in [true, false] {
        let name = if shared {
            "in-batch NLL (shared encoder)"
        } else {
            "in-batch NLL (question/passage pair)"
        };
        suite(c, name, &mut r, |r| {
            let corpus = random_corpus(6, 8, 5, r);
            let v = corpus.vocab().len();
            let width = r.random_range(2..5);
            let mut ret = if shared {
                Retriever::Shared(EncoderParams::zeros(v, width))
            } else {
                Retriever::Dual {
                    question: EncoderParams::zeros(v, width),
                    passage: EncoderParams::zeros(v, width),
                }
            };
            randomize(&mut ret, 0.5, r);
            let dim = r.random_range(1..=width);
            let pairs: Vec<TrainingPair> = (0..r.random_range(2..5))
                .map(|_| TrainingPair {
                    question: random_tokens(&corpus, 3, r),
                    positive: r.random_range(0..corpus.len()),
                })
                .collect();
            let (_, g) = in_batch_loss_with_grad(&ret, &corpus, &pairs, dim).unwrap();
            param_check(&ret, &g, |m| {
                in_batch_loss_with_grad(m, &corpus, &pairs, dim).unwrap().0
            })
        });
    }

    suite(c, "marginal span NLL (start/end logits)", &mut r, |r| {
        let len = r.random_range(1..10);
        let gold = random_gold(r, len);
        let x = uniform_vec(r, 2 * len, 3.0);
        let scores = |v: &[f64]| SpanScores {
            start: v[..len].to_vec(),
            end: v[len..].to_vec(),
            rank: 0.0,
            truncated: false,
        };
        let (_, gs, ge) = marginal_span_nll_with_grad(&scores(&x), &gold).unwrap();
        let g = [gs, ge].concat();
        // gold sets covering a whole row give exactly zero gradients, where
        // roundoff at the small step alone exceeds the relative floor
        max_err(
            |v| marginal_span_nll(&scores(v), &gold).unwrap(),
            &x,
            &g,
            MODEL_FD_STEP,
        )
    });

    suite(c, "rank NLL (rank logits)", &mut r, |r| {
        let n = r.random_range(1..10);
        let target = r.random_range(0..n);
        let x = uniform_vec(r, n, 3.0);
        let (_, g) = nll_of_index_with_grad(&x, target).unwrap();
        max_err(
            |v| nll_of_index(v, target).unwrap(),
            &x,
            &g,
            DEFAULT_FD_STEP,
        )
    });

    suite(c, "span + rank NLL (reader parameters)", &mut r, |r| {
        let corpus = random_corpus(6, 5, 6, r);
        let m = random_unified(&corpus, r);
        let reader = Reader {
            encoder: m.encoder,
            heads: m.heads,
        };
        let b = random_batch(&corpus, r);
        let toks: Vec<&[u32]> = b
            .passages
            .iter()
            .map(|j| corpus.tokens(*j).unwrap())
            .collect();
        let loss = |rd: &Reader| {
            reader_loss_with_grad(&rd.encoder, &rd.heads, &b.question, &toks, &b.gold, SEQ_LEN)
        };
        let (_, ge, gh) = loss(&reader).unwrap();
        let g = ReaderGrad {
            encoder: ge,
            heads: gh,
        };
        param_check(&reader, &g, |rd| loss(rd).unwrap().0)
    });

    suite(c, "softened span/rank KL (student logits)", &mut r, |r| {
        let n = r.random_range(1..10);
        let t = uniform_vec(r, n, 3.0);
        let x = uniform_vec(r, n, 3.0);
        let tau = r.random_range(0.5..4.0);
        let (_, g) = softened_kl_with_grad(&t, &x, tau).unwrap();
        max_err(
            |v| softened_kl_with_grad(&t, v, tau).unwrap().0,
            &x,
            &g,
            DEFAULT_FD_STEP,
        )
    });

    suite(
        c,
        "distillation L_read + L_ret (student parameters)",
        &mut r,
        |r| {
            let corpus = random_corpus(6, 5, 6, r);
            let student = random_unified(&corpus, r);
            let mut teacher = Reader {
                encoder: EncoderParams::zeros(corpus.vocab().len(), 3),
                heads: ReaderHeads::zeros(3),
            };
            randomize(&mut teacher, 0.5, r);
            let b = random_batch(&corpus, r);
            let tau = r.random_range(0.5..4.0);
            let (_, g) =
                distill_loss_with_grad(&student, &teacher, &corpus, &b, tau, SEQ_LEN).unwrap();
            param_check(&student, &g, |m| {
                let (l, _) =
                    distill_loss_with_grad(m, &teacher, &corpus, &b, tau, SEQ_LEN).unwrap();
                l.l_read + l.l_ret
            })
        },
    );

    suite(c, "L_recon (post-step similarity scores)", &mut r, |r| {
        let corpus = random_corpus(6, 5, 6, r);
        let m = random_unified(&corpus, r);
        let b = random_batch(&corpus, r);
        let ell = sim_scores(&m, &corpus, &b).unwrap();
        let x: Vec<f64> = ell.iter().map(|l| l + r.random_range(-1.0..1.0)).collect();
        let tau = r.random_range(0.5..4.0);
        let (_, g) = softened_kl_with_grad(&ell, &x, tau).unwrap();
        max_err(
            |v| softened_kl_with_grad(&ell, v, tau).unwrap().0,
            &x,
            &g,
            DEFAULT_FD_STEP,
        )
    });

    suite(c, "L_nll (post-step similarity scores)", &mut r, |r| {
        let corpus = random_corpus(6, 5, 6, r);
        let m = random_unified(&corpus, r);
        let b = random_batch(&corpus, r);
        let x = sim_scores(&m, &corpus, &b).unwrap();
        let (_, g) = nll_of_index_with_grad(&x, 0).unwrap();
        max_err(|v| nll_of_index(v, 0).unwrap(), &x, &g, DEFAULT_FD_STEP)
    });

    suite(c, "L_recon + L_nll (model parameters)", &mut r, |r| {
        let corpus = random_corpus(6, 5, 6, r);
        let m = random_unified(&corpus, r);
        let b = random_batch(&corpus, r);
        let ell = uniform_vec(r, b.passages.len(), 2.0);
        let tau = r.random_range(0.5..4.0);
        let (_, _, _, g) = recon_nll_with_grad(&m, &corpus, &b, &ell, tau).unwrap();
        param_check(&m, &g, |p| {
            let (_, lr, ln, _) = recon_nll_with_grad(p, &corpus, &b, &ell, tau).unwrap();
            lr + ln
        })
    });
}

// ---------------------------------------------------------------- 5

fn finetuning_step(c: &mut Criterion, _: &mut Ctx) {
    let o = finetune_frozen();
    let (model, corpus, batch) = (oracle_model(), oracle_corpus(), oracle_batch());
    let s = iterative_finetune_step(&model, &corpus, &batch, 3.0, 0.1, 350).unwrap();
    let close = |got: &[f64], want: &[f64]| {
        let dev = got
            .iter()
            .zip(want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        (got.len() == want.len() && dev <= ORACLE_TOL, dev)
    };
    let rows: [(&str, Vec<f64>); 7] = [
        ("ell", s.ell.clone()),
        ("l_read", vec![s.l_read]),
        ("theta_hat", oracle_order(&s.theta_hat)),
        ("ell_hat", s.ell_hat.clone()),
        ("l_recon", vec![s.l_recon]),
        ("l_nll", vec![s.l_nll]),
        ("theta_next", oracle_order(&s.next)),
    ];
    for (name, got) in rows {
        let (pass, dev) = close(&got, &o[name]);
        c.check(
            format!("{name} matches the 50-digit oracle (max deviation {dev:.1e})"),
            pass,
        );
    }

    let mut r = rng(5);
    let mut cases = vec![(model, corpus, batch)];
    for _ in 0..10 {
        let corpus = random_corpus(6, 5, 6, &mut r);
        let m = random_unified(&corpus, &mut r);
        let b = random_batch(&corpus, &mut r);
        cases.push((m, corpus, b));
    }
    let n = cases.len();
    let still = cases
        .iter()
        .filter(|(m, corpus, b)| {
            let s = iterative_finetune_step(m, corpus, b, 2.0, 0.0, SEQ_LEN.max(350)).unwrap();
            s.theta_hat.flatten() == m.flatten()
                && s.next.flatten() == m.flatten()
                && s.l_recon == 0.0
        })
        .count();
    c.check(
        format!("lr = 0 leaves theta unchanged with L_recon = 0 on {still}/{n} instances"),
        still == n,
    );
}

// ---------------------------------------------------------------- 6

fn end_to_end(c: &mut Criterion, ctx: &mut Ctx) {
    let dir = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        seed: 7,
        ..PipelineConfig::default()
    };
    let t0 = Instant::now();
    let trace = run_pipeline(&config, dir.path()).unwrap();
    let elapsed = t0.elapsed();
    for line in trace.table().lines() {
        println!("      {line}");
    }
    let em = |l: &str| trace.em(l).unwrap();
    let teacher = em("baseline");
    c.check(
        format!("teacher pipeline EM {teacher:.3} >= 0.8"),
        teacher >= 0.8,
    );
    let distilled = em("distillation");
    c.check(
        format!("distilled EM {distilled:.3} >= teacher EM - 0.15"),
        distilled >= teacher - 0.15,
    );
    let tuned = em("iterative-finetuning");
    c.check(
        format!("finetuning moves EM {distilled:.3} -> {tuned:.3}, no drop beyond 0.01"),
        tuned >= distilled - 0.01,
    );
    c.check("finetuning increases EM", tuned > distilled);
    let int8 = em("int8-index");
    c.check(
        format!("int8 stage moves EM {tuned:.3} -> {int8:.3}, within 0.01"),
        (int8 - tuned).abs() <= 0.01,
    );
    for (prev, next) in [
        ("int8-index", "fp16-weights"),
        ("fp16-weights", "compression"),
        ("compression", "token-id-corpus"),
    ] {
        let (a, b) = (trace.stage(prev).unwrap(), trace.stage(next).unwrap());
        c.check(
            format!("{next} reported EM identical to {prev}"),
            a.report.best_em == b.report.best_em && a.report.best_m == b.report.best_m,
        );
        let changed = a
            .report
            .predictions
            .iter()
            .flatten()
            .zip(b.report.predictions.iter().flatten())
            .filter(|(x, y)| x != y)
            .count();
        let label = format!("{next} predictions identical to {prev} ({changed} changed)");
        if next == "fp16-weights" {
            c.known_red(label, changed == 0, FP16_NEAR_TIE);
        } else {
            c.check(label, changed == 0);
        }
    }
    let fp = fp16_analysis(&config, dir.path());
    c.check(
        format!(
            "fp16 weights move retrieval scores by at most {:.2e} relative (<= 1e-2)",
            fp.max_rel_score_change
        ),
        fp.max_rel_score_change <= 1e-2,
    );
    c.check(
        format!(
            "fp16 flips only decisions whose fp32 margin is below the largest candidate shift {:.2e} \
             (flipped margins {:?}, {} decisions)",
            fp.max_shift, fp.flipped_margins, fp.decisions
        ),
        fp.flipped_margins.iter().all(|m| *m < fp.max_shift),
    );
    c.check(
        format!("runtime {:.1}s < 600s", elapsed.as_secs_f64()),
        elapsed < Duration::from_secs(600),
    );
    ctx.first = Some((trace, dir.path().to_path_buf()));
    ctx._dirs.push(dir);
}

const FP16_NEAR_TIE: &str =
    "at seed 7 one passage pair has near-equal rank and span terms; the two \
     decisions choosing between them have fp32 margins near 1e-6, while half precision moves \
     candidate scores by up to ~1e-3; the next closest decision has a margin of 1.6e-3, and the \
     reported EM is unchanged (one flip at m'=5 fixes a wrong answer)";

struct Fp16Analysis {
    max_rel_score_change: f64,
    /// Largest change of any candidate's weighted score.
    max_shift: f64,
    /// fp32 winner margin of every decision whose winner changed.
    flipped_margins: Vec<f64>,
    decisions: usize,
}

/// Every weighted candidate `(passage, start, end, score)` over the top spans.
fn weighted_candidates(
    scored: &[(u64, SpanScores)],
    lambda: f64,
    max_len: usize,
) -> Vec<((u64, usize, usize), f64)> {
    let ranks: Vec<f64> = scored.iter().map(|(_, s)| s.rank).collect();
    let lr = log_softmax(&ranks, 1.0).unwrap();
    let mut out = Vec::new();
    for ((id, s), l) in scored.iter().zip(&lr) {
        for (a, b, span) in ranked_spans(s, max_len) {
            out.push(((*id, a, b), (1.0 - lambda) * span + 2.0 * lambda * l));
        }
    }
    out
}

/// Replays the dev evaluation of the int8 stage with the fp32 and the stored
/// fp16 weights side by side.
fn fp16_analysis(config: &PipelineConfig, root: &Path) -> Fp16Analysis {
    let ds = SyntheticDataset::read(&root.join("data")).unwrap();
    let sub = subset_corpus(&ds.corpus, &read_subset(&root.join("subset.bin")).unwrap()).unwrap();
    let (dev, _) = prepare(&ds).on_subset(&sub);
    let index = read_index(&root.join("stages/08-int8-index/index.mrri")).unwrap();
    let load = |stage: &str| {
        let ck = load_checkpoint(&root.join(format!("stages/{stage}/unified.mrrw"))).unwrap();
        UnifiedModel::from_checkpoint(&ck, index.dim()).unwrap()
    };
    let (m32, m16) = (load("08-int8-index"), load("09-fp16-weights"));
    let ExtractionMode::Weighted { lambda } = config.eval.mode else {
        panic!("default extraction is weighted");
    };
    let (max_len, seq) = (config.eval.max_span_len, config.reader.max_seq_len);
    let grid = config.eval.grid.clone();
    let depth = *grid.iter().max().unwrap();
    let mut out = Fp16Analysis {
        max_rel_score_change: 0.0,
        max_shift: 0.0,
        flipped_margins: Vec::new(),
        decisions: 0,
    };
    for q in &dev {
        let (h32, h16) = (
            retrieve(&m32.retriever(), &q.question, &index, depth).unwrap(),
            retrieve(&m16.retriever(), &q.question, &index, depth).unwrap(),
        );
        for h in &h32.hits {
            let other = h16.hits.iter().find(|x| x.passage_id == h.passage_id);
            if let Some(o) = other {
                let rel = (o.score - h.score).abs() / h.score.abs().max(1e-12);
                out.max_rel_score_change = out.max_rel_score_change.max(rel);
            }
        }
        let ids = h32.ids();
        let read = |m: &UnifiedModel| -> Vec<(u64, SpanScores)> {
            ids.iter()
                .map(|id| {
                    let toks = sub.corpus.tokens(*id as usize).unwrap();
                    (
                        *id,
                        read_scores(&m.encoder, &m.heads, &q.question, toks, seq).unwrap(),
                    )
                })
                .collect()
        };
        let (s32, s16) = (read(&m32), read(&m16));
        for m in &grid {
            out.decisions += 1;
            let mode = ExtractionMode::Weighted { lambda };
            let w32 = extract_candidate(&s32[..*m], mode, max_len).unwrap();
            let w16 = extract_candidate(&s16[..*m], mode, max_len).unwrap();
            let (c32, c16) = (
                weighted_candidates(&s32[..*m], lambda, max_len),
                weighted_candidates(&s16[..*m], lambda, max_len),
            );
            let c16: BTreeMap<_, f64> = c16.into_iter().collect();
            for (k, a) in &c32 {
                out.max_shift = out.max_shift.max((a - c16[k]).abs());
            }
            if (w32.passage_id, w32.start, w32.end) != (w16.passage_id, w16.start, w16.end) {
                let runner_up = c32
                    .iter()
                    .filter(|(k, _)| *k != (w32.passage_id, w32.start, w32.end))
                    .map(|(_, v)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                out.flipped_margins.push(w32.score - runner_up);
            }
        }
    }
    out
}

// ---------------------------------------------------------------- 7

type Parse = fn(&[u8]) -> minrr::Result<Vec<u8>>;

fn parse_corpus(b: &[u8]) -> minrr::Result<Vec<u8>> {
    Ok(TokenCorpus::from_bytes(b)?.to_bytes())
}

fn parse_checkpoint(b: &[u8]) -> minrr::Result<Vec<u8>> {
    let ck = Checkpoint::from_bytes(b)?;
    let p = Checkpoint::stored_precisions(b)?;
    ck.to_bytes(p.first().copied().unwrap_or(Precision::Fp32))
}

fn parse_index(b: &[u8]) -> minrr::Result<Vec<u8>> {
    Ok(DenseIndex::from_bytes(b)?.to_bytes())
}

fn parse_container(b: &[u8]) -> minrr::Result<Vec<u8>> {
    let c = CompressedContainer::from_bytes(b)?;
    c.decompress()?;
    Ok(c.to_bytes())
}

fn fuzz(c: &mut Criterion, name: &str, bytes: &[u8], parse: Parse, r: &mut ChaCha8Rng) {
    let round = parse(bytes).map(|b| b == bytes).unwrap_or(false);
    c.check(format!("{name}: byte-exact round trip"), round);
    let (mut truncated_ok, mut panics, mut untyped, mut detected, mut corrupted) = (0, 0, 0, 0, 0);
    for case in 0..FUZZ_CASES {
        let mut b = bytes.to_vec();
        let truncate = case % 2 == 0;
        if truncate {
            b.truncate(r.random_range(0..bytes.len()));
        } else {
            corrupted += 1;
            for _ in 0..r.random_range(1..=4) {
                let at = r.random_range(0..b.len());
                b[at] ^= r.random_range(1..=255u8);
            }
        }
        match catch_unwind(|| parse(&b)) {
            Err(_) => panics += 1,
            Ok(Err(Error::Format(_))) => {
                truncated_ok += usize::from(truncate);
                detected += usize::from(!truncate);
            }
            Ok(Err(_)) => untyped += 1,
            Ok(Ok(_)) => {
                if truncate {
                    untyped += 1;
                }
            }
        }
    }
    let truncations = FUZZ_CASES - corrupted;
    c.check(
        format!(
            "{name}: {FUZZ_CASES} fuzz cases, {truncated_ok}/{truncations} truncations and \
             {detected}/{corrupted} corruptions rejected with a format error, {panics} panics, \
             {untyped} other outcomes"
        ),
        panics == 0 && untyped == 0 && truncated_ok == truncations,
    );
}

fn format_stability(c: &mut Criterion, _: &mut Ctx) {
    let mut r = rng(7);
    let corpus = random_corpus(50, 30, 12, &mut r);
    let corpus_bytes = corpus.to_bytes();
    fuzz(c, "corpus", &corpus_bytes, parse_corpus, &mut r);

    let ck = UnifiedModel::from_retriever(EncoderParams::init(60, 8, 1), 4, 1).to_checkpoint();
    fuzz(
        c,
        "checkpoint fp32",
        &ck.to_bytes(Precision::Fp32).unwrap(),
        parse_checkpoint,
        &mut r,
    );
    fuzz(
        c,
        "checkpoint fp16",
        &ck.to_bytes(Precision::Fp16).unwrap(),
        parse_checkpoint,
        &mut r,
    );

    let rows: Vec<Vec<f64>> = (0..40).map(|_| uniform_vec(&mut r, 8, 1.0)).collect();
    let ids: Vec<u64> = (100..140).collect();
    let flat = FlatIndex::build(&rows, &ids).unwrap();
    let q: QuantizedIndex = quantize(&flat, &train_quantizer(&flat)).unwrap().index;
    fuzz(
        c,
        "index flat",
        &DenseIndex::from(flat).to_bytes(),
        parse_index,
        &mut r,
    );
    fuzz(
        c,
        "index int8",
        &DenseIndex::from(q).to_bytes(),
        parse_index,
        &mut r,
    );

    for kind in [ResourceKind::Binary, ResourceKind::Text] {
        let cont = compress_resource("corpus", &corpus_bytes, kind, None).unwrap();
        let name = format!("container {:?}", cont.algorithm);
        let bytes = cont.to_bytes();
        let restores = CompressedContainer::from_bytes(&bytes)
            .and_then(|c| c.decompress())
            .map(|d| d == corpus_bytes)
            .unwrap_or(false);
        c.check(
            format!("{name}: decompresses to the original bytes"),
            restores,
        );
        fuzz(c, &name, &bytes, parse_container, &mut r);
    }
}

// ---------------------------------------------------------------- 8

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn ledger_integrity(c: &mut Criterion, ctx: &mut Ctx) {
    let Some((first, root)) = ctx.first.as_ref() else {
        c.check("needs the criterion 6 run", false);
        return;
    };
    let mut sums = true;
    let mut on_disk = true;
    for (n, st) in first.stages.iter().enumerate() {
        let l = st.ledger;
        sums &= l.total() == l.retriever + l.reader + l.index + l.text + l.other
            && l.columns()[4] == l.total();
        let dir = root
            .join("stages")
            .join(format!("{:02}-{}", n + 1, st.label));
        let shipped: u64 = files_under(&dir)
            .iter()
            .filter(|p| p.as_os_str() != "eval.tsv")
            .map(|p| fs::metadata(dir.join(p)).unwrap().len())
            .sum();
        on_disk &= shipped == l.total();
    }
    c.check("total = sum of role bytes at every stage", sums);
    c.check(
        "every stage total equals the bytes shipped in its directory",
        on_disk,
    );

    // role attribution recomputed from file names alone
    let ws = Workspace::new(root.clone(), PipelineConfig::default());
    cmd_ledger(&ws).unwrap();
    let remeasured = fs::read_to_string(root.join("ledger.tsv")).unwrap();
    let stage_rows: Vec<&str> = remeasured.lines().take(first.stages.len() + 1).collect();
    let traced: Vec<&str> = first.ledger.records.lines().collect();
    c.check(
        "per-role bytes match a re-measurement of the stage directories",
        stage_rows == traced,
    );

    let dir = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        seed: 7,
        ..PipelineConfig::default()
    };
    let second = run_pipeline(&config, dir.path()).unwrap();
    c.check(
        "second run with the same seed reproduces the trace",
        &second == first,
    );
    // the first tree has had ledger files rewritten by the re-measurement
    fs::write(root.join("ledger.tsv"), &first.ledger.records).unwrap();
    fs::write(root.join("ledger.txt"), &first.ledger.table).unwrap();
    let (fa, fb) = (files_under(root), files_under(dir.path()));
    let identical = fa == fb
        && fa
            .iter()
            .all(|p| fs::read(root.join(p)).unwrap() == fs::read(dir.path().join(p)).unwrap());
    c.check(
        format!(
            "second run writes {} files, byte-identical to the first",
            fb.len()
        ),
        identical,
    );
}
