//! Compresses a few resources, measures them per role and prints the
//! before/after ledger.

use std::fs;

use minrr::packaging::{
    measure_footprint, package_resources, render_ledger, ResourceKind, ResourceManifest, Role,
};

fn main() -> minrr::Result<()> {
    let dir = std::env::temp_dir().join("minrr-packaging-ledger");
    fs::create_dir_all(&dir)?;
    let text: String = (0..2000)
        .map(|i| format!("{i}\tpassage number {} about topic {}\n", i, i % 17))
        .collect();
    let weights: Vec<u8> = (0..40_000u32)
        .flat_map(|i| ((i % 251) as f32 * 0.01).to_le_bytes())
        .collect();
    fs::write(dir.join("passages.tsv"), text)?;
    fs::write(dir.join("reader.mrrw"), &weights)?;

    let mut raw = ResourceManifest::new();
    raw.add(
        "passages",
        Role::Text,
        dir.join("passages.tsv"),
        ResourceKind::Text,
    )?;
    raw.add(
        "reader",
        Role::Reader,
        dir.join("reader.mrrw"),
        ResourceKind::Binary,
    )?;
    let packed = package_resources(&raw, &dir.join("packed"))?;

    let stages = vec![
        ("raw".to_string(), measure_footprint(&raw)?),
        ("packed".to_string(), measure_footprint(&packed)?),
    ];
    println!("{}", render_ledger(&stages)?.table);
    Ok(())
}
