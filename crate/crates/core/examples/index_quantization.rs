//! Builds a flat index over random vectors, quantizes it to one byte per
//! value and compares sizes and top-10 agreement.
//!
//! cargo run --release --example index_quantization -- [rows] [dim]

use minrr::index::{quantize, train_quantizer, FlatIndex};
use rand::Rng;

fn main() -> minrr::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("numeric argument"));
    let n = args.next().unwrap_or(10_000);
    let d = args.next().unwrap_or(128);
    let mut rng = minrr::rng::seeded(11);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ids: Vec<u64> = (0..n as u64).collect();
    let flat = FlatIndex::build(&rows, &ids)?;
    let params = train_quantizer(&flat);
    let q = quantize(&flat, &params)?;
    println!(
        "fp32 {} bytes, int8 {} bytes, ratio {:.4}, clamped {}",
        flat.file_bytes(),
        q.index.file_bytes(),
        q.index.file_bytes() as f64 / flat.file_bytes() as f64,
        q.clamped
    );

    let queries = 100;
    let mut overlap = 0;
    for _ in 0..queries {
        let query: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = flat.search(&query, 10)?.ids();
        let approx = q.index.search(&query, 10)?.ids();
        overlap += approx.iter().filter(|id| exact.contains(id)).count();
    }
    println!(
        "recall@10 over {queries} queries: {:.4}",
        overlap as f64 / (10 * queries) as f64
    );
    Ok(())
}
