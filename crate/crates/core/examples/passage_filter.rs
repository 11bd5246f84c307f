//! Trains the passage filter on a synthetic workspace and keeps the top
//! passages as the working corpus.
//!
//! cargo run --release --example passage_filter -- [keep]

use minrr::harness::commands::{
    cmd_filter_corpus, cmd_gen_synthetic, cmd_train_filter, cmd_train_teacher, Workspace,
};
use minrr::harness::PipelineConfig;

fn main() -> minrr::Result<()> {
    let keep = std::env::args()
        .nth(1)
        .map(|a| a.parse().expect("passage count"));
    let ws = Workspace::new(
        std::env::temp_dir().join("minrr-passage-filter"),
        PipelineConfig::default(),
    );
    println!("{}", cmd_gen_synthetic(&ws)?);
    // The filter split is drawn from the teacher retriever's ranking.
    println!("{}", cmd_train_teacher(&ws)?);
    println!("{}", cmd_train_filter(&ws)?);
    println!("{}", cmd_filter_corpus(&ws, keep)?);
    Ok(())
}
