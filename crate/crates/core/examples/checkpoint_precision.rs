//! Saves one encoder at full and half precision and reports the size and
//! the largest rounding error.

use minrr::checkpoint::{load_checkpoint, save_checkpoint, Precision};
use minrr::encoder::{EncoderParams, STUDENT_WIDTH};

fn main() -> minrr::Result<()> {
    let dir = std::env::temp_dir().join("minrr-checkpoint-precision");
    std::fs::create_dir_all(&dir)?;
    let ck = EncoderParams::init(1000, STUDENT_WIDTH, 3).to_checkpoint("encoder");
    println!(
        "{} tensors, {} parameters",
        ck.names().count(),
        ck.parameter_count()
    );

    let mut worst = 0.0f64;
    for precision in [Precision::Fp32, Precision::Fp16] {
        let path = dir.join(format!("encoder-{precision:?}.mrrw").to_lowercase());
        save_checkpoint(&ck, precision, &path)?;
        let back = load_checkpoint(&path)?;
        for name in ck.names() {
            let (a, b) = (ck.require(name)?, back.require(name)?);
            for (x, y) in a.data.iter().zip(&b.data) {
                worst = worst.max((x - y).abs());
            }
        }
        println!(
            "{precision:?}: {} bytes on disk, worst error so far {worst:.2e}",
            std::fs::metadata(&path)?.len()
        );
    }
    Ok(())
}
