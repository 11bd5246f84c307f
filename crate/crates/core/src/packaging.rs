//! Resource compression and footprint accounting.
//!
//! Every resource is compressed into its own `MRRZ` container so that bytes
//! can still be attributed to a role afterwards:
//!
//! ```text
//! magic "MRRZ" | algorithm u8 (0 none, 1 bzip2, 2 xz) | original length u64 | stream
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, FormatError, Result};
use crate::wire::{ByteReader, PutLe};

pub const CONTAINER_MAGIC: &[u8; 4] = b"MRRZ";
pub const CONTAINER_HEADER_BYTES: usize = 4 + 1 + 8;
pub const COMPRESSION_LEVEL: u32 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    None,
    Bzip2,
    Xz,
}

impl Algorithm {
    pub fn tag(self) -> u8 {
        match self {
            Algorithm::None => 0,
            Algorithm::Bzip2 => 1,
            Algorithm::Xz => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Algorithm::None),
            1 => Some(Algorithm::Bzip2),
            2 => Some(Algorithm::Xz),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResourceKind {
    Binary,
    Text,
}

impl ResourceKind {
    /// bzip2 for binaries, xz for text.
    pub fn default_algorithm(self) -> Algorithm {
        match self {
            ResourceKind::Binary => Algorithm::Bzip2,
            ResourceKind::Text => Algorithm::Xz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Retriever,
    Reader,
    Index,
    Text,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedContainer {
    pub algorithm: Algorithm,
    pub original_len: u64,
    pub payload: Vec<u8>,
}

fn packaging_err(resource: &str, reason: impl ToString) -> Error {
    Error::Packaging {
        resource: resource.to_string(),
        reason: reason.to_string(),
    }
}

fn compress_with(algorithm: Algorithm, bytes: &[u8]) -> std::io::Result<Vec<u8>> {
    match algorithm {
        Algorithm::None => Ok(bytes.to_vec()),
        Algorithm::Bzip2 => {
            let mut enc = bzip2::write::BzEncoder::new(
                Vec::new(),
                bzip2::Compression::new(COMPRESSION_LEVEL),
            );
            enc.write_all(bytes)?;
            enc.finish()
        }
        Algorithm::Xz => {
            let mut enc = xz2::write::XzEncoder::new(Vec::new(), COMPRESSION_LEVEL);
            enc.write_all(bytes)?;
            enc.finish()
        }
    }
}

/// Compresses one resource, by kind unless `force` names an algorithm.
pub fn compress_resource(
    name: &str,
    bytes: &[u8],
    kind: ResourceKind,
    force: Option<Algorithm>,
) -> Result<CompressedContainer> {
    if bytes.is_empty() {
        return Err(packaging_err(name, "empty resource"));
    }
    let algorithm = force.unwrap_or(kind.default_algorithm());
    let payload = compress_with(algorithm, bytes).map_err(|e| packaging_err(name, e))?;
    Ok(CompressedContainer {
        algorithm,
        original_len: bytes.len() as u64,
        payload,
    })
}

impl CompressedContainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CONTAINER_HEADER_BYTES + self.payload.len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.put_u8(self.algorithm.tag());
        out.put_u64(self.original_len);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CONTAINER_MAGIC)?;
        let tag = r.u8("algorithm")?;
        let algorithm = Algorithm::from_tag(tag)
            .ok_or_else(|| FormatError::InvalidField(format!("unknown algorithm tag {tag}")))?;
        let original_len = r.u64("original length")?;
        let payload = r.take(r.remaining(), "payload")?.to_vec();
        Ok(Self {
            algorithm,
            original_len,
            payload,
        })
    }

    /// Restores the original bytes, checking the recorded length.
    pub fn decompress(&self) -> Result<Vec<u8>> {
        let limit = self.original_len;
        let mut out = Vec::new();
        let read = match self.algorithm {
            Algorithm::None => {
                out.extend_from_slice(&self.payload);
                Ok(out.len())
            }
            // one extra byte lets an over-long stream show up as a mismatch
            Algorithm::Bzip2 => bzip2::read::BzDecoder::new(&self.payload[..])
                .take(limit + 1)
                .read_to_end(&mut out),
            Algorithm::Xz => xz2::read::XzDecoder::new(&self.payload[..])
                .take(limit + 1)
                .read_to_end(&mut out),
        };
        read.map_err(|e| FormatError::InvalidField(format!("corrupt compressed stream: {e}")))?;
        if out.len() as u64 != self.original_len {
            return Err(FormatError::LengthMismatch(format!(
                "container declares {} bytes, stream holds {}",
                self.original_len,
                out.len()
            ))
            .into());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resource {
    pub name: String,
    pub role: Role,
    pub path: PathBuf,
    pub kind: ResourceKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ResourceManifest {
    resources: Vec<Resource>,
}

impl ResourceManifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: &str,
        role: Role,
        path: impl Into<PathBuf>,
        kind: ResourceKind,
    ) -> Result<()> {
        if self.resources.iter().any(|r| r.name == name) {
            return Err(packaging_err(name, "duplicate resource name"));
        }
        self.resources.push(Resource {
            name: name.to_string(),
            role,
            path: path.into(),
            kind,
        });
        Ok(())
    }

    pub fn resources(&self) -> &[Resource] {
        &self.resources
    }

    pub fn names(&self) -> BTreeSet<&str> {
        self.resources.iter().map(|r| r.name.as_str()).collect()
    }
}

/// Compresses every resource into `<out_dir>/<name>.mrrz` and returns the
/// manifest of the compressed files.
pub fn package_resources(manifest: &ResourceManifest, out_dir: &Path) -> Result<ResourceManifest> {
    fs::create_dir_all(out_dir)?;
    let mut out = ResourceManifest::new();
    for r in manifest.resources() {
        let bytes = fs::read(&r.path).map_err(|e| packaging_err(&r.name, e))?;
        let c = compress_resource(&r.name, &bytes, r.kind, None)?;
        let path = out_dir.join(format!("{}.mrrz", r.name));
        fs::write(&path, c.to_bytes()).map_err(|e| packaging_err(&r.name, e))?;
        out.add(&r.name, r.role, path, ResourceKind::Binary)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FootprintLedger {
    pub retriever: u64,
    pub reader: u64,
    pub index: u64,
    pub text: u64,
    pub other: u64,
}

impl FootprintLedger {
    pub fn total(&self) -> u64 {
        self.retriever + self.reader + self.index + self.text + self.other
    }

    pub fn add(&mut self, role: Role, bytes: u64) {
        match role {
            Role::Retriever => self.retriever += bytes,
            Role::Reader => self.reader += bytes,
            Role::Index => self.index += bytes,
            Role::Text => self.text += bytes,
            Role::Other => self.other += bytes,
        }
    }

    /// Retriever, reader, index, text, total.
    pub fn columns(&self) -> [u64; 5] {
        [
            self.retriever,
            self.reader,
            self.index,
            self.text,
            self.total(),
        ]
    }
}

fn path_bytes(path: &Path) -> std::io::Result<u64> {
    let meta = fs::metadata(path)?;
    if meta.is_dir() {
        let mut total = 0;
        let mut entries: Vec<_> = fs::read_dir(path)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            total += path_bytes(&e.path())?;
        }
        Ok(total)
    } else {
        Ok(meta.len())
    }
}

/// Sums file sizes per role; directories are summed recursively.
pub fn measure_footprint(manifest: &ResourceManifest) -> Result<FootprintLedger> {
    let mut ledger = FootprintLedger::default();
    for r in manifest.resources() {
        let bytes = path_bytes(&r.path)
            .map_err(|e| packaging_err(&r.name, format!("{}: {e}", r.path.display())))?;
        ledger.add(r.role, bytes);
    }
    Ok(ledger)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerReport {
    pub table: String,
    /// Tab-separated records with a header line.
    pub records: String,
}

pub const LEDGER_FIELDS: [&str; 6] = [
    "stage",
    "retriever_bytes",
    "reader_bytes",
    "index_bytes",
    "text_bytes",
    "total_bytes",
];

/// Renders stages as a table. Cells are suffixed `-` when the value fell
/// against the previous stage and `+` when it grew.
pub fn render_ledger(stages: &[(String, FootprintLedger)]) -> Result<LedgerReport> {
    if stages.is_empty() {
        return Err(Error::invalid("ledger needs at least one stage"));
    }
    let header = [
        "Stage",
        "Docker",
        "Retriever",
        "Reader",
        "Index",
        "Text File",
        "Total",
    ];
    let mut rows: Vec<Vec<String>> = Vec::with_capacity(stages.len());
    let mut prev: Option<[u64; 5]> = None;
    for (label, ledger) in stages {
        let cols = ledger.columns();
        let mut row = vec![label.clone(), "n/a".to_string()];
        for (k, v) in cols.iter().enumerate() {
            let mark = match prev {
                Some(p) if *v < p[k] => " -",
                Some(p) if *v > p[k] => " +",
                _ => "",
            };
            row.push(format!("{v}{mark}"));
        }
        rows.push(row);
        prev = Some(cols);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut table = String::new();
    let line = |cells: &[String], out: &mut String| {
        for (c, cell) in cells.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(out, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push('\n');
    };
    line(
        &header.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        &mut table,
    );
    for r in &rows {
        line(r, &mut table);
    }
    let mut records = LEDGER_FIELDS.join("\t");
    records.push('\n');
    for (label, ledger) in stages {
        let c = ledger.columns();
        let _ = writeln!(
            records,
            "{label}\t{}\t{}\t{}\t{}\t{}",
            c[0], c[1], c[2], c[3], c[4]
        );
    }
    Ok(LedgerReport { table, records })
}

/// Reference footprint rows in MB: retriever, reader, index, text file, total.
/// The docker column is left out.
pub const REFERENCE_LEDGER_MB: [(&str, [u64; 5]); 11] = [
    ("DPR", [836, 418, 61_919, 13_065, 77_508]),
    ("Passage filtering", [836, 418, 3_681, 756, 6_961]),
    (
        "Dimension reduction 768 -> 128",
        [836, 418, 614, 756, 3_894],
    ),
    ("Lightweight encoder", [188, 94, 614, 756, 2_922]),
    ("Retriever encoder sharing", [94, 94, 614, 756, 2_828]),
    ("Unified retriever-reader", [94, 0, 614, 756, 2_734]),
    ("Iterative finetuning", [94, 0, 614, 756, 2_734]),
    ("INT8 index", [94, 0, 170, 756, 2_290]),
    ("FP16 weights", [47, 0, 170, 756, 2_243]),
    ("Resource compression", [42, 0, 145, 187, 1_644]),
    ("Token IDs as corpus", [42, 0, 145, 177, 1_634]),
];

/// Docker image size in MB for the reference rows above.
pub const REFERENCE_DOCKER_MB: u64 = 1_270;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_each_algorithm() {
        let data: Vec<u8> = (0..5000u32).map(|i| (i * 7 % 251) as u8).collect();
        for a in [Algorithm::None, Algorithm::Bzip2, Algorithm::Xz] {
            let c = compress_resource("r", &data, ResourceKind::Binary, Some(a)).unwrap();
            let back = CompressedContainer::from_bytes(&c.to_bytes()).unwrap();
            assert_eq!(back.decompress().unwrap(), data);
        }
        assert!(compress_resource("r", &[], ResourceKind::Text, None).is_err());
    }

    #[test]
    fn policy_by_kind() {
        let c = compress_resource("t", b"hello hello", ResourceKind::Text, None).unwrap();
        assert_eq!(c.algorithm, Algorithm::Xz);
        let c = compress_resource("b", b"\x00\x01", ResourceKind::Binary, None).unwrap();
        assert_eq!(c.algorithm, Algorithm::Bzip2);
    }

    #[test]
    fn length_mismatch_detected() {
        let mut c = compress_resource("b", b"abcdef", ResourceKind::Binary, None).unwrap();
        c.original_len = 5;
        assert!(matches!(c.decompress(), Err(Error::Format(_))));
    }

    #[test]
    fn reference_rows_sum() {
        for (label, [r, rd, i, t, total]) in REFERENCE_LEDGER_MB {
            // published totals include docker and are rounded per cell
            let sum = REFERENCE_DOCKER_MB + r + rd + i + t;
            assert!(sum.abs_diff(total) <= 2, "{label}: {sum} vs {total}");
        }
    }

    #[test]
    fn delta_markers() {
        let a = FootprintLedger {
            retriever: 10,
            reader: 5,
            index: 100,
            text: 7,
            other: 0,
        };
        let mut b = a;
        b.index = 25;
        let rep = render_ledger(&[("a".into(), a), ("b".into(), b)]).unwrap();
        let last = rep.table.lines().last().unwrap();
        assert_eq!(last.matches(" -").count(), 2, "{last}");
        assert!(!last.contains('+'));
        assert!(rep.records.starts_with("stage\tretriever_bytes"));
    }
}
