//! Tokenizes a handful of passages, stores them as packed token IDs and
//! reads a remapped subset back.

use std::sync::Arc;

use minrr::corpus::{ingest_text, read_corpus, subset_corpus, write_corpus, Vocabulary};

fn main() -> minrr::Result<()> {
    let lines = [
        (0, "the river runs past the old mill"),
        (1, "an old mill stood by the river"),
        (2, "nothing here is in the vocabulary"),
        (3, "the mill is old"),
    ];
    let vocab = Arc::new(Vocabulary::new([
        "the", "river", "runs", "past", "old", "mill", "an", "stood", "by", "is",
    ])?);
    let corpus = ingest_text(&lines, vocab)?;
    println!(
        "{} passages, {} tokens, {} bytes encoded",
        corpus.len(),
        corpus.payload_len(),
        corpus.encoded_len()
    );
    for j in 0..corpus.len() {
        println!(
            "  {j}: {:?} -> {}",
            corpus.tokens(j)?,
            corpus.passage_text(j)?
        );
    }

    let path = std::env::temp_dir().join("minrr-corpus-storage.mrrc");
    write_corpus(&corpus, &path)?;
    let back = read_corpus(&path)?;
    assert_eq!(back, corpus);
    println!("round trip through {} ok", path.display());

    let sub = subset_corpus(&back, &[1, 3])?;
    println!("subset keeps old 3 as new {:?}", sub.new_id(3));
    Ok(())
}
