//! Trains a shared-encoder retriever with in-batch negatives on synthetic
//! questions and reports dev hit@k before and after.
//!
//! cargo run --release --example retriever_training -- [epochs]

use minrr::encoder::{EncoderParams, STUDENT_RETRIEVAL_DIM, STUDENT_WIDTH};
use minrr::harness::{gen_synthetic, prepare, DevQuestion, SyntheticConfig};
use minrr::index::DenseIndex;
use minrr::retriever::{
    build_passage_index, retrieve, train_retriever, Retriever, RetrieverConfig,
};

fn hits(r: &Retriever, index: &DenseIndex, dev: &[DevQuestion], k: usize) -> minrr::Result<f64> {
    let mut found = 0;
    for q in dev {
        let ids = retrieve(r, &q.question, index, k)?.ids();
        found += q.positive.is_some_and(|p| ids.contains(&p)) as usize;
    }
    Ok(found as f64 / dev.len() as f64)
}

fn main() -> minrr::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(40, |a| a.parse().expect("epochs"));
    let ds = gen_synthetic(&SyntheticConfig::default(), 7)?;
    let prep = prepare(&ds);
    let config = RetrieverConfig {
        retrieval_dim: STUDENT_RETRIEVAL_DIM,
        epochs,
        seed: 7,
        ..RetrieverConfig::default()
    };
    let init = Retriever::Shared(EncoderParams::init(
        ds.corpus.vocab().len(),
        STUDENT_WIDTH,
        7,
    ));
    for (label, model) in [
        ("init", init.clone()),
        (
            "trained",
            train_retriever(init, &ds.corpus, &prep.pairs, &config)?.0,
        ),
    ] {
        let index: DenseIndex =
            build_passage_index(&model, &ds.corpus, config.retrieval_dim)?.into();
        println!(
            "{label:>8}: hit@1 {:.3} hit@10 {:.3} hit@50 {:.3}",
            hits(&model, &index, &prep.dev, 1)?,
            hits(&model, &index, &prep.dev, 10)?,
            hits(&model, &index, &prep.dev, 50)?
        );
    }
    Ok(())
}
