//! Runs every size-reduction stage on the default synthetic dataset and
//! prints the accuracy trace and the footprint ledger.
//!
//! cargo run --release --example staged_pipeline -- [out-dir] [key=value ...]

use std::path::PathBuf;
use std::time::Instant;

use minrr::harness::{run_pipeline, PipelineConfig};

fn main() -> minrr::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("minrr-staged-pipeline"));
    let mut config = PipelineConfig::default();
    config.apply_text(&args.collect::<Vec<_>>().join("\n"))?;
    let t = Instant::now();
    let trace = run_pipeline(&config, &out)?;
    println!("{}", trace.table());
    println!("{}", trace.ledger.table);
    println!(
        "filter kept {}/{} positives; distill skipped {} questions",
        trace.filter.positives_kept,
        trace.filter.positives_total,
        trace.distill_log.skipped_questions
    );
    println!(
        "artifacts in {}; {:.1}s",
        out.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
