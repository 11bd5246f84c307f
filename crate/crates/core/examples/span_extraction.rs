//! Picks answers from hand-made span scores under both extraction rules and
//! grades them with exact match.

use std::sync::Arc;

use minrr::corpus::{ingest_text, Vocabulary};
use minrr::harness::exact_match;
use minrr::reader::{
    extract_answer, ExtractionMode, SpanScores, DEFAULT_MAX_SPAN_LEN, REFERENCE_LAMBDA,
};

fn scores(start: &[f64], end: &[f64], rank: f64) -> SpanScores {
    SpanScores {
        start: start.to_vec(),
        end: end.to_vec(),
        rank,
        truncated: false,
    }
}

fn main() -> minrr::Result<()> {
    let vocab = Arc::new(Vocabulary::new([
        "paris", "is", "in", "france", "lyon", "a", "city",
    ])?);
    let corpus = ingest_text(
        &[(0, "paris is in france"), (1, "lyon is a city in france")],
        vocab,
    )?;

    // Passage 0 ranks a little higher but its spans are unsure; passage 1
    // has one confident span.
    let scored = vec![
        (0, scores(&[1.0, 0.0, 0.0, 0.9], &[0.9, 0.0, 0.0, 1.0], 1.2)),
        (
            1,
            scores(
                &[4.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                &[4.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                1.0,
            ),
        ),
    ];
    let golds = vec!["lyon".to_string()];
    for mode in [
        ExtractionMode::TopRanked,
        ExtractionMode::Weighted {
            lambda: REFERENCE_LAMBDA,
        },
    ] {
        let a = extract_answer(&scored, &corpus, mode, DEFAULT_MAX_SPAN_LEN)?;
        println!(
            "{mode:?}: passage {} span {}..={} {:?} score {:.3} em {}",
            a.candidate.passage_id,
            a.candidate.start,
            a.candidate.end,
            a.text,
            a.candidate.score,
            exact_match(&a.text, &golds)
        );
    }
    Ok(())
}
