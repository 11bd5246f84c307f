//! Flat inner-product index with an optional per-dimension INT8 scalar quantizer.
//!
//! Quantized indexes are searched by restoring FP32 vectors first and then
//! running the same exact full scan as the flat index.
//!
//! File layout (`MRRI`, little-endian):
//!
//! ```text
//! magic "MRRI" | version u16 | variant u8 (0 = FP32, 1 = INT8) | N u64 | d u32 |
//! passage ids N x u64 | [INT8: vmin d x f32, vmax d x f32] | payload
//! ```

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::wire::{ByteReader, PutLe};

pub const INDEX_MAGIC: &[u8; 4] = b"MRRI";
pub const INDEX_VERSION: u16 = 1;
/// magic + version + variant + N + d
pub const INDEX_HEADER_BYTES: usize = 4 + 2 + 1 + 8 + 4;

const LEVELS: f64 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    ids: Vec<u64>,
    /// `N × dim`, row-major.
    data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerParams {
    pub vmin: Vec<f32>,
    pub vmax: Vec<f32>,
}

impl QuantizerParams {
    pub fn dim(&self) -> usize {
        self.vmin.len()
    }

    /// Dimensions whose training range collapsed to a single value.
    pub fn degenerate(&self) -> Vec<bool> {
        self.vmin
            .iter()
            .zip(&self.vmax)
            .map(|(a, b)| a == b)
            .collect()
    }

    fn code(&self, k: usize, x: f32) -> (u8, bool) {
        let (lo, hi) = (f64::from(self.vmin[k]), f64::from(self.vmax[k]));
        let x = f64::from(x);
        let clamped = x < lo || x > hi;
        if hi <= lo {
            return (0, clamped);
        }
        let c = (LEVELS * (x - lo) / (hi - lo)).round().clamp(0.0, LEVELS);
        (c as u8, clamped)
    }

    fn decode(&self, k: usize, code: u8) -> f32 {
        let (lo, hi) = (f64::from(self.vmin[k]), f64::from(self.vmax[k]));
        if hi <= lo {
            return self.vmin[k];
        }
        (lo + f64::from(code) * (hi - lo) / LEVELS) as f32
    }

    /// Worst-case reconstruction error for dimension `k`, FP32 rounding excluded.
    pub fn error_bound(&self, k: usize) -> f64 {
        (f64::from(self.vmax[k]) - f64::from(self.vmin[k])) / (2.0 * LEVELS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedIndex {
    dim: usize,
    ids: Vec<u64>,
    params: QuantizerParams,
    codes: Vec<u8>,
}

/// Outcome of [`quantize`]: the index plus how many values had to be clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub index: QuantizedIndex,
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub passage_id: u64,
    pub score: f64,
}

/// Top-k hits ordered by descending score, ties broken by smaller passage ID.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
}

impl SearchResult {
    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.passage_id).collect()
    }
}

pub(crate) fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.passage_id.cmp(&b.passage_id))
}

/// Keeps the `k` best hits in rank order.
pub(crate) fn top_k(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    if k < hits.len() {
        hits.select_nth_unstable_by(k, rank_order);
        hits.truncate(k);
    }
    hits.sort_by(rank_order);
    hits
}

fn check_ids(ids: &[u64]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(*id) {
            return Err(Error::invalid(format!(
                "duplicate passage id {id} in index"
            )));
        }
    }
    Ok(())
}

impl FlatIndex {
    /// Stores `embeddings` as FP32 rows, in input order.
    pub fn build(embeddings: &[Vec<f64>], passage_ids: &[u64]) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::invalid("index needs at least one row"));
        }
        if embeddings.len() != passage_ids.len() {
            return Err(Error::invalid(format!(
                "{} embeddings but {} passage ids",
                embeddings.len(),
                passage_ids.len()
            )));
        }
        let dim = embeddings[0].len();
        if dim == 0 {
            return Err(Error::invalid("index dimension must be positive"));
        }
        let mut data = Vec::with_capacity(embeddings.len() * dim);
        for (i, e) in embeddings.iter().enumerate() {
            if e.len() != dim {
                return Err(Error::invalid(format!(
                    "row {i} has dimension {}, expected {dim}",
                    e.len()
                )));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("row {i} is not finite")));
            }
            data.extend(e.iter().map(|v| *v as f32));
        }
        check_ids(passage_ids)?;
        Ok(Self {
            dim,
            ids: passage_ids.to_vec(),
            data,
        })
    }

    pub fn from_f32(dim: usize, ids: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || ids.is_empty() || data.len() != ids.len() * dim {
            return Err(Error::invalid("inconsistent flat index shape"));
        }
        check_ids(&ids)?;
        Ok(Self { dim, ids, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn payload_bytes(&self) -> usize {
        4 * self.data.len()
    }

    pub fn file_bytes(&self) -> usize {
        INDEX_HEADER_BYTES + 8 * self.len() + self.payload_bytes()
    }

    /// Exact full scan; ties broken by smaller passage ID.
    pub fn search(&self, query: &[f64], k: usize) -> Result<SearchResult> {
        if query.len() != self.dim {
            return Err(Error::config(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dim
            )));
        }
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!(
                "k = {k} outside 1..={}",
                self.len()
            )));
        }
        let hits = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| Hit {
                passage_id: *id,
                score: self
                    .row(i)
                    .iter()
                    .zip(query)
                    .map(|(x, q)| f64::from(*x) * q)
                    .sum(),
            })
            .collect();
        Ok(SearchResult {
            hits: top_k(hits, k),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.file_bytes());
        write_header(&mut out, 0, self.len(), self.dim, &self.ids);
        for v in &self.data {
            out.put_f32(*v);
        }
        out
    }
}

/// Per-dimension min/max over all rows.
pub fn train_quantizer(index: &FlatIndex) -> QuantizerParams {
    let d = index.dim();
    let mut vmin = vec![f32::INFINITY; d];
    let mut vmax = vec![f32::NEG_INFINITY; d];
    for i in 0..index.len() {
        for (k, x) in index.row(i).iter().enumerate() {
            vmin[k] = vmin[k].min(*x);
            vmax[k] = vmax[k].max(*x);
        }
    }
    QuantizerParams { vmin, vmax }
}

/// Encodes every value as `round(255 (x - vmin) / (vmax - vmin))`, clamped.
pub fn quantize(index: &FlatIndex, params: &QuantizerParams) -> Result<Quantized> {
    if params.dim() != index.dim() || params.vmax.len() != index.dim() {
        return Err(Error::config("quantizer dimension does not match index"));
    }
    if params.vmin.iter().zip(&params.vmax).any(|(a, b)| !(a <= b)) {
        return Err(Error::invalid(
            "quantizer needs vmin <= vmax in every dimension",
        ));
    }
    let d = index.dim();
    let mut codes = Vec::with_capacity(index.data.len());
    let mut clamped = 0;
    for (i, x) in index.data.iter().enumerate() {
        let (c, was_clamped) = params.code(i % d, *x);
        clamped += usize::from(was_clamped);
        codes.push(c);
    }
    Ok(Quantized {
        index: QuantizedIndex {
            dim: d,
            ids: index.ids.clone(),
            params: params.clone(),
            codes,
        },
        clamped,
    })
}

impl QuantizedIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn params(&self) -> &QuantizerParams {
        &self.params
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn payload_bytes(&self) -> usize {
        self.codes.len()
    }

    pub fn file_bytes(&self) -> usize {
        INDEX_HEADER_BYTES + 8 * self.len() + 8 * self.dim + self.payload_bytes()
    }

    /// Restores the FP32 matrix `vmin + code · (vmax - vmin) / 255`.
    pub fn dequantize(&self) -> FlatIndex {
        let d = self.dim;
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, c)| self.params.decode(i % d, *c))
            .collect();
        FlatIndex {
            dim: d,
            ids: self.ids.clone(),
            data,
        }
    }

    /// Dequantizes, then runs the exact flat scan.
    pub fn search(&self, query: &[f64], k: usize) -> Result<SearchResult> {
        self.dequantize().search(query, k)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.file_bytes());
        write_header(&mut out, 1, self.len(), self.dim, &self.ids);
        for v in &self.params.vmin {
            out.put_f32(*v);
        }
        for v in &self.params.vmax {
            out.put_f32(*v);
        }
        out.extend_from_slice(&self.codes);
        out
    }
}

fn write_header(out: &mut Vec<u8>, variant: u8, n: usize, d: usize, ids: &[u64]) {
    out.extend_from_slice(INDEX_MAGIC);
    out.put_u16(INDEX_VERSION);
    out.put_u8(variant);
    out.put_u64(n as u64);
    out.put_u32(d as u32);
    for id in ids {
        out.put_u64(*id);
    }
}

/// A loaded index. INT8 indexes keep their restored FP32 matrix alongside the codes.
#[derive(Debug, Clone, PartialEq)]
pub enum DenseIndex {
    Flat(FlatIndex),
    Int8 {
        quantized: QuantizedIndex,
        restored: FlatIndex,
    },
}

impl From<FlatIndex> for DenseIndex {
    fn from(f: FlatIndex) -> Self {
        DenseIndex::Flat(f)
    }
}

impl From<QuantizedIndex> for DenseIndex {
    fn from(q: QuantizedIndex) -> Self {
        let restored = q.dequantize();
        DenseIndex::Int8 {
            quantized: q,
            restored,
        }
    }
}

impl DenseIndex {
    fn searchable(&self) -> &FlatIndex {
        match self {
            DenseIndex::Flat(f) => f,
            DenseIndex::Int8 { restored, .. } => restored,
        }
    }

    pub fn len(&self) -> usize {
        self.searchable().len()
    }

    pub fn is_empty(&self) -> bool {
        self.searchable().is_empty()
    }

    pub fn dim(&self) -> usize {
        self.searchable().dim()
    }

    pub fn ids(&self) -> &[u64] {
        self.searchable().ids()
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, DenseIndex::Int8 { .. })
    }

    pub fn search(&self, query: &[f64], k: usize) -> Result<SearchResult> {
        self.searchable().search(query, k)
    }

    pub fn payload_bytes(&self) -> usize {
        match self {
            DenseIndex::Flat(f) => f.payload_bytes(),
            DenseIndex::Int8 { quantized, .. } => quantized.payload_bytes(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            DenseIndex::Flat(f) => f.to_bytes(),
            DenseIndex::Int8 { quantized, .. } => quantized.to_bytes(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(INDEX_MAGIC)?;
        let version = r.u16("version")?;
        if version != INDEX_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let variant = r.u8("variant")?;
        if variant > 1 {
            return Err(
                FormatError::InvalidField(format!("unknown index variant {variant}")).into(),
            );
        }
        let raw_n = r.u64("row count")?;
        let d = r.u32("dimension")? as usize;
        if raw_n == 0 || d == 0 {
            return Err(FormatError::InvalidField(
                "index must have rows and a positive dimension".into(),
            )
            .into());
        }
        let n = r.count(raw_n, 8, "passage ids")?;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.u64("passage ids")?);
        }
        check_ids(&ids).map_err(|e| FormatError::InvalidField(e.to_string()))?;
        let cells = n
            .checked_mul(d)
            .ok_or_else(|| FormatError::InvalidField("index shape overflows".into()))?;
        let index = if variant == 0 {
            let cells = r.count(cells as u64, 4, "payload")?;
            let mut data = Vec::with_capacity(cells);
            for _ in 0..cells {
                let v = r.f32("payload")?;
                if !v.is_finite() {
                    return Err(FormatError::InvalidField("non-finite index value".into()).into());
                }
                data.push(v);
            }
            DenseIndex::Flat(FlatIndex { dim: d, ids, data })
        } else {
            let d2 = r.count(2 * d as u64, 4, "quantizer params")?;
            let mut vals = Vec::with_capacity(d2);
            for _ in 0..d2 {
                vals.push(r.f32("quantizer params")?);
            }
            let vmax = vals.split_off(d);
            let params = QuantizerParams { vmin: vals, vmax };
            if params
                .vmin
                .iter()
                .zip(&params.vmax)
                .any(|(a, b)| !a.is_finite() || !b.is_finite() || a > b)
            {
                return Err(FormatError::InvalidField("quantizer range invalid".into()).into());
            }
            let codes = r.take(cells, "payload")?.to_vec();
            QuantizedIndex {
                dim: d,
                ids,
                params,
                codes,
            }
            .into()
        };
        r.finish()?;
        Ok(index)
    }
}

pub fn write_index(index: &DenseIndex, path: &Path) -> Result<()> {
    fs::write(path, index.to_bytes())?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<DenseIndex> {
    DenseIndex::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FlatIndex {
        FlatIndex::build(
            &[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![-1.0, 0.5],
                vec![0.5, 0.5],
            ],
            &[10, 11, 12, 13],
        )
        .unwrap()
    }

    #[test]
    fn single_row_payload() {
        let f = FlatIndex::build(&[vec![0.25; 7]], &[0]).unwrap();
        assert_eq!(f.payload_bytes(), 28);
        assert_eq!(f.to_bytes().len(), f.file_bytes());
    }

    #[test]
    fn rejects_ragged_and_duplicates() {
        assert!(FlatIndex::build(&[vec![1.0], vec![1.0, 2.0]], &[0, 1]).is_err());
        assert!(FlatIndex::build(&[vec![1.0], vec![2.0]], &[3, 3]).is_err());
        assert!(FlatIndex::build(&[], &[]).is_err());
    }

    #[test]
    fn full_scan_orders_with_id_tiebreak() {
        let f = small();
        let r = f.search(&[1.0, 1.0], 4).unwrap();
        assert_eq!(r.ids(), vec![10, 11, 13, 12]);
        assert!(matches!(f.search(&[1.0], 1), Err(Error::Config(_))));
        assert!(f.search(&[1.0, 1.0], 5).is_err());
    }

    #[test]
    fn quantizer_ranges_and_degenerate_dims() {
        let f = FlatIndex::build(&[vec![-1.0, 3.0], vec![1.0, 3.0]], &[0, 1]).unwrap();
        let p = train_quantizer(&f);
        assert_eq!(p.vmin, vec![-1.0, 3.0]);
        assert_eq!(p.vmax, vec![1.0, 3.0]);
        assert_eq!(p.degenerate(), vec![false, true]);
        let q = quantize(&f, &p).unwrap();
        assert_eq!(q.index.codes(), &[0, 0, 255, 0]);
        let back = q.index.dequantize();
        assert_eq!(back.data(), f.data());
    }

    #[test]
    fn all_zero_round_trip() {
        let f = FlatIndex::build(&vec![vec![0.0; 3]; 4], &[0, 1, 2, 3]).unwrap();
        let q = quantize(&f, &train_quantizer(&f)).unwrap();
        assert_eq!(q.index.dequantize(), f);
    }

    #[test]
    fn clamps_out_of_range() {
        let f = small();
        let p = QuantizerParams {
            vmin: vec![0.0, 0.0],
            vmax: vec![0.5, 0.5],
        };
        let q = quantize(&f, &p).unwrap();
        assert_eq!(q.clamped, 3);
    }

    #[test]
    fn file_round_trips_and_sizes() {
        let f = small();
        let flat: DenseIndex = f.clone().into();
        let bytes = flat.to_bytes();
        assert_eq!(bytes.len(), INDEX_HEADER_BYTES + 8 * 4 + 4 * 8);
        assert_eq!(DenseIndex::from_bytes(&bytes).unwrap(), flat);
        let q: DenseIndex = quantize(&f, &train_quantizer(&f)).unwrap().index.into();
        let qb = q.to_bytes();
        assert_eq!(qb.len(), INDEX_HEADER_BYTES + 8 * 4 + 8 * 2 + 8);
        assert_eq!(DenseIndex::from_bytes(&qb).unwrap(), q);
        for cut in 0..qb.len() {
            assert!(matches!(
                DenseIndex::from_bytes(&qb[..cut]),
                Err(Error::Format(_))
            ));
        }
    }
}
