//! Shared sequence encoder `E_θ(tokens, type)`.
//!
//! Bag-of-embeddings with one linear mixing layer and mean pooling:
//!
//! ```text
//! x_i    = emb(token_i) + t_type + c · mean_j emb(token_j)      (c = 1)
//! h_i    = W_mix · x_i
//! pooled = W_pool · mean_i h_i
//! ```
//!
//! Retrieval vectors are the leading `d_r` entries of `pooled`. Every path
//! here has a hand-derived backward pass, validated in the tests against
//! central differences.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::checkpoint::{self, Checkpoint, Precision, Tensor};
use crate::error::{Error, FormatError, Result};
use crate::linalg::{add_outer, axpy, matvec, matvec_t};
use crate::optim::{GradBlock, Grads, Params};
use crate::rng;

/// Weight of the sequence-mean embedding added to every position.
pub const MEAN_MIX: f64 = 1.0;

/// Desk-scale student width.
pub const STUDENT_WIDTH: usize = 64;
/// Desk-scale teacher width.
pub const TEACHER_WIDTH: usize = 128;
/// Desk-scale retrieval dimension for the student.
pub const STUDENT_RETRIEVAL_DIM: usize = 16;
/// Published encoder output width and the truncated retrieval width.
pub const REFERENCE_ENCODER_WIDTH: usize = 512;
pub const REFERENCE_RETRIEVAL_DIM: usize = 128;

/// Uniform init half-width.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TypeFlag {
    Question = 0,
    Passage = 1,
}

impl TypeFlag {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    vocab_size: usize,
    width: usize,
    /// `vocab_size × width`, row-major.
    pub token_embedding: Vec<f64>,
    /// Question (0) and passage (1) type embeddings.
    pub type_embedding: [Vec<f64>; 2],
    /// `width × width`, row-major.
    pub mix: Vec<f64>,
    /// `width × width`, row-major.
    pub pool: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub width: usize,
    /// `len × width`, row-major.
    pub hidden: Vec<f64>,
    pub pooled: Vec<f64>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.hidden.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn hidden_row(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.width..(i + 1) * self.width]
    }
}

/// Intermediates of the pooled path, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct PooledForward {
    pub mean_emb: Vec<f64>,
    pub x_bar: Vec<f64>,
    pub z: Vec<f64>,
    pub pooled: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(vocab_size: usize, width: usize) -> Self {
        Self {
            vocab_size,
            width,
            token_embedding: vec![0.0; vocab_size * width],
            type_embedding: [vec![0.0; width], vec![0.0; width]],
            mix: vec![0.0; width * width],
            pool: vec![0.0; width * width],
        }
    }

    /// Embeddings uniform in ±[`INIT_SCALE`]; mixing and pooling start at the
    /// identity plus uniform noise of scale `INIT_SCALE / sqrt(width)`, so a
    /// fresh encoder passes mean embeddings through nearly unchanged.
    pub fn init(vocab_size: usize, width: usize, seed: u64) -> Self {
        let mut rng = rng::derive(seed, "encoder-init");
        let mut p = Self::zeros(vocab_size, width);
        for v in p
            .token_embedding
            .iter_mut()
            .chain(p.type_embedding.iter_mut().flatten())
        {
            *v = rng.random_range(-INIT_SCALE..INIT_SCALE);
        }
        let s = INIT_SCALE / (width as f64).sqrt();
        for m in [&mut p.mix, &mut p.pool] {
            for (i, v) in m.iter_mut().enumerate() {
                let diag = if i / width == i % width { 1.0 } else { 0.0 };
                *v = diag + rng.random_range(-s..s);
            }
        }
        p
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `V·d + 2d + 2d²`.
    pub fn expected_param_count(vocab_size: usize, width: usize) -> usize {
        vocab_size * width + 2 * width + 2 * width * width
    }

    pub fn embedding(&self, id: u32) -> &[f64] {
        let at = id as usize * self.width;
        &self.token_embedding[at..at + self.width]
    }

    pub fn embedding_mut(&mut self, id: u32) -> &mut [f64] {
        let at = id as usize * self.width;
        &mut self.token_embedding[at..at + self.width]
    }

    pub fn set_identity_mixing(&mut self) {
        let d = self.width;
        self.mix.iter_mut().for_each(|v| *v = 0.0);
        self.pool.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            self.mix[i * d + i] = 1.0;
            self.pool[i * d + i] = 1.0;
        }
    }

    pub(crate) fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        if let Some(bad) = tokens.iter().find(|t| **t as usize >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Mean token embedding, summed in sorted-token order so that it is
    /// exactly permutation invariant.
    pub(crate) fn mean_embedding(&self, tokens: &[u32]) -> Vec<f64> {
        let mut sorted = tokens.to_vec();
        sorted.sort_unstable();
        let mut acc = vec![0.0; self.width];
        for t in &sorted {
            axpy(1.0, self.embedding(*t), &mut acc);
        }
        let inv = 1.0 / tokens.len() as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        acc
    }

    pub(crate) fn pooled_forward(&self, tokens: &[u32], ty: TypeFlag) -> PooledForward {
        let mean_emb = self.mean_embedding(tokens);
        let t = &self.type_embedding[ty.index()];
        let x_bar: Vec<f64> = mean_emb
            .iter()
            .zip(t)
            .map(|(e, t)| (1.0 + MEAN_MIX) * e + t)
            .collect();
        let z = matvec(&self.mix, &x_bar);
        let pooled = matvec(&self.pool, &z);
        PooledForward {
            mean_emb,
            x_bar,
            z,
            pooled,
        }
    }

    /// Full encoding with per-token representations.
    pub fn encode(&self, tokens: &[u32], ty: TypeFlag) -> Result<EncodedSequence> {
        self.validate_tokens(tokens)?;
        let fwd = self.pooled_forward(tokens, ty);
        let t = &self.type_embedding[ty.index()];
        let mut hidden = Vec::with_capacity(tokens.len() * self.width);
        let mut x = vec![0.0; self.width];
        for tok in tokens {
            for (k, xk) in x.iter_mut().enumerate() {
                *xk = self.embedding(*tok)[k] + t[k] + MEAN_MIX * fwd.mean_emb[k];
            }
            hidden.extend(matvec(&self.mix, &x));
        }
        Ok(EncodedSequence {
            width: self.width,
            hidden,
            pooled: fwd.pooled,
        })
    }

    /// Pooled output only.
    pub fn pooled(&self, tokens: &[u32], ty: TypeFlag) -> Result<Vec<f64>> {
        self.validate_tokens(tokens)?;
        Ok(self.pooled_forward(tokens, ty).pooled)
    }

    /// Backpropagates `d loss / d pooled` into `grad` and returns `d loss / d x̄`.
    pub(crate) fn backward_pooled(
        &self,
        fwd: &PooledForward,
        g_pooled: &[f64],
        grad: &mut EncoderGrad,
    ) -> Vec<f64> {
        add_outer(&mut grad.pool, g_pooled, &fwd.z);
        let g_z = matvec_t(&self.pool, g_pooled);
        add_outer(&mut grad.mix, &g_z, &fwd.x_bar);
        matvec_t(&self.mix, &g_z)
    }

    /// Backpropagates into the embedding table and type embedding.
    ///
    /// `pos_grads` optionally holds `d loss / d x_i` per position (`len × width`);
    /// `g_x_bar` is the gradient with respect to the pooled input `x̄`.
    pub(crate) fn backward_inputs(
        &self,
        tokens: &[u32],
        ty: TypeFlag,
        pos_grads: Option<&[f64]>,
        g_x_bar: &[f64],
        grad: &mut EncoderGrad,
    ) {
        let d = self.width;
        let mut sum_pos = vec![0.0; d];
        if let Some(pg) = pos_grads {
            for row in pg.chunks_exact(d) {
                axpy(1.0, row, &mut sum_pos);
            }
        }
        let gt = &mut grad.type_embedding[ty.index()];
        axpy(1.0, &sum_pos, gt);
        axpy(1.0, g_x_bar, gt);
        let inv_len = 1.0 / tokens.len() as f64;
        let shared: Vec<f64> = sum_pos
            .iter()
            .zip(g_x_bar)
            .map(|(s, g)| (MEAN_MIX * s + (1.0 + MEAN_MIX) * g) * inv_len)
            .collect();
        for (i, tok) in tokens.iter().enumerate() {
            let row = grad.row_mut(*tok);
            axpy(1.0, &shared, row);
            if let Some(pg) = pos_grads {
                axpy(1.0, &pg[i * d..(i + 1) * d], row);
            }
        }
    }

    /// Backpropagates a pooled-output gradient all the way to the parameters.
    pub(crate) fn backward_pooled_full(
        &self,
        tokens: &[u32],
        ty: TypeFlag,
        fwd: &PooledForward,
        g_pooled: &[f64],
        grad: &mut EncoderGrad,
    ) {
        let g_x_bar = self.backward_pooled(fwd, g_pooled, grad);
        self.backward_inputs(tokens, ty, None, &g_x_bar, grad);
    }

    pub fn zero_grad(&self) -> EncoderGrad {
        EncoderGrad::zeros(self.width)
    }

    pub fn to_checkpoint(&self, prefix: &str) -> Checkpoint {
        let d = self.width;
        let mut ck = Checkpoint::new();
        ck.push(Tensor::new(
            format!("{prefix}token_embedding"),
            vec![self.vocab_size, d],
            self.token_embedding.clone(),
        ));
        ck.push(Tensor::new(
            format!("{prefix}type_embedding"),
            vec![2, d],
            self.type_embedding.concat(),
        ));
        ck.push(Tensor::new(
            format!("{prefix}mix"),
            vec![d, d],
            self.mix.clone(),
        ));
        ck.push(Tensor::new(
            format!("{prefix}pool"),
            vec![d, d],
            self.pool.clone(),
        ));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let emb = ck.require(&format!("{prefix}token_embedding"))?;
        let [vocab_size, width] = emb.dims[..] else {
            return Err(FormatError::InvalidField("token_embedding must be rank 2".into()).into());
        };
        let ty = ck.require(&format!("{prefix}type_embedding"))?;
        let mix = ck.require(&format!("{prefix}mix"))?;
        let pool = ck.require(&format!("{prefix}pool"))?;
        if ty.dims != [2, width] || mix.dims != [width, width] || pool.dims != [width, width] {
            return Err(FormatError::InvalidField(format!(
                "encoder tensors under {prefix:?} disagree on width"
            ))
            .into());
        }
        Ok(Self {
            vocab_size,
            width,
            token_embedding: emb.data.clone(),
            type_embedding: [ty.data[..width].to_vec(), ty.data[width..].to_vec()],
            mix: mix.data.clone(),
            pool: pool.data.clone(),
        })
    }

    /// Every value rounded through the given storage precision.
    pub fn rounded(&self, precision: Precision) -> Self {
        let mut out = self.clone();
        for b in out.blocks_mut() {
            b.iter_mut().for_each(|v| *v = precision.round(*v));
        }
        out
    }
}

impl Params for EncoderParams {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            &self.token_embedding,
            &self.type_embedding[0],
            &self.type_embedding[1],
            &self.mix,
            &self.pool,
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let [t0, t1] = &mut self.type_embedding;
        vec![
            &mut self.token_embedding,
            t0,
            t1,
            &mut self.mix,
            &mut self.pool,
        ]
    }
}

/// Gradient of an [`EncoderParams`]; embedding rows are stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    width: usize,
    pub rows: BTreeMap<u32, Vec<f64>>,
    pub type_embedding: [Vec<f64>; 2],
    pub mix: Vec<f64>,
    pub pool: Vec<f64>,
}

impl EncoderGrad {
    pub fn zeros(width: usize) -> Self {
        Self {
            width,
            rows: BTreeMap::new(),
            type_embedding: [vec![0.0; width], vec![0.0; width]],
            mix: vec![0.0; width * width],
            pool: vec![0.0; width * width],
        }
    }

    pub(crate) fn row_mut(&mut self, id: u32) -> &mut Vec<f64> {
        let w = self.width;
        self.rows.entry(id).or_insert_with(|| vec![0.0; w])
    }

    pub fn add(&mut self, other: &EncoderGrad) {
        for (id, r) in &other.rows {
            axpy(1.0, r, self.row_mut(*id));
        }
        for k in 0..2 {
            axpy(1.0, &other.type_embedding[k], &mut self.type_embedding[k]);
        }
        axpy(1.0, &other.mix, &mut self.mix);
        axpy(1.0, &other.pool, &mut self.pool);
    }
}

impl Grads for EncoderGrad {
    fn grad_blocks(&self) -> Vec<GradBlock<'_>> {
        vec![
            GradBlock::Rows {
                width: self.width,
                rows: &self.rows,
            },
            GradBlock::Dense(&self.type_embedding[0]),
            GradBlock::Dense(&self.type_embedding[1]),
            GradBlock::Dense(&self.mix),
            GradBlock::Dense(&self.pool),
        ]
    }

    fn scale(&mut self, factor: f64) {
        for r in self.rows.values_mut() {
            r.iter_mut().for_each(|v| *v *= factor);
        }
        for t in &mut self.type_embedding {
            t.iter_mut().for_each(|v| *v *= factor);
        }
        self.mix.iter_mut().for_each(|v| *v *= factor);
        self.pool.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Leading `d_r` entries of the pooled vector, without renormalisation.
pub fn retrieval_vector(enc: &EncodedSequence, retrieval_dim: usize) -> Result<Vec<f64>> {
    truncate(&enc.pooled, retrieval_dim)
}

pub(crate) fn truncate(pooled: &[f64], retrieval_dim: usize) -> Result<Vec<f64>> {
    if retrieval_dim == 0 || retrieval_dim > pooled.len() {
        return Err(Error::invalid(format!(
            "retrieval dimension {retrieval_dim} must be in 1..={}",
            pooled.len()
        )));
    }
    Ok(pooled[..retrieval_dim].to_vec())
}

pub fn save_encoder(params: &EncoderParams, precision: Precision, path: &Path) -> Result<()> {
    checkpoint::save_checkpoint(&params.to_checkpoint("encoder."), precision, path)
}

pub fn load_encoder(path: &Path) -> Result<EncoderParams> {
    EncoderParams::from_checkpoint(&checkpoint::load_checkpoint(path)?, "encoder.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, DEFAULT_FD_STEP};
    use crate::optim::block_shapes;

    #[test]
    fn single_token_identity_closed_form() {
        let mut p = EncoderParams::init(5, 3, 1);
        p.set_identity_mixing();
        p.type_embedding = [vec![0.0; 3], vec![0.0; 3]];
        let enc = p.encode(&[4], TypeFlag::Passage).unwrap();
        let expect: Vec<f64> = p.embedding(4).iter().map(|v| 2.0 * v).collect();
        assert_eq!(enc.pooled, expect);
    }

    #[test]
    fn type_flag_changes_pooled() {
        let p = EncoderParams::init(6, 4, 2);
        let a = p.pooled(&[3, 4], TypeFlag::Question).unwrap();
        let b = p.pooled(&[3, 4], TypeFlag::Passage).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn pooled_matches_mean_of_hidden() {
        let p = EncoderParams::init(9, 5, 3);
        let toks = [3, 7, 7, 2, 8];
        let enc = p.encode(&toks, TypeFlag::Passage).unwrap();
        let mut mean_h = vec![0.0; 5];
        for i in 0..enc.len() {
            axpy(1.0 / toks.len() as f64, enc.hidden_row(i), &mut mean_h);
        }
        let via_h = matvec(&p.pool, &mean_h);
        for (a, b) in via_h.iter().zip(&enc.pooled) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn permutation_leaves_pooled_unchanged_exactly() {
        let p = EncoderParams::init(20, 8, 4);
        let a = p.pooled(&[5, 9, 13, 2, 2, 17], TypeFlag::Passage).unwrap();
        let b = p.pooled(&[2, 17, 9, 2, 13, 5], TypeFlag::Passage).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_tokens() {
        let p = EncoderParams::init(4, 2, 0);
        assert!(p.encode(&[], TypeFlag::Question).is_err());
        assert!(p.encode(&[4], TypeFlag::Question).is_err());
    }

    #[test]
    fn retrieval_vector_truncates() {
        let p = EncoderParams::init(6, 4, 5);
        let enc = p.encode(&[3], TypeFlag::Question).unwrap();
        assert_eq!(retrieval_vector(&enc, 4).unwrap(), enc.pooled);
        assert_eq!(retrieval_vector(&enc, 2).unwrap(), enc.pooled[..2].to_vec());
        assert!(retrieval_vector(&enc, 5).is_err());
    }

    #[test]
    fn param_count_formula() {
        let p = EncoderParams::init(11, 6, 0);
        assert_eq!(p.param_count(), EncoderParams::expected_param_count(11, 6));
        assert_eq!(
            p.to_checkpoint("").parameter_count(),
            11 * 6 + 2 * 6 + 2 * 36
        );
    }

    #[test]
    fn pooled_norm_gradient_passes_fd() {
        let p = EncoderParams::init(7, 4, 9);
        let toks = [3u32, 5, 3, 6];
        let fwd = p.pooled_forward(&toks, TypeFlag::Question);
        let g_pooled: Vec<f64> = fwd.pooled.iter().map(|v| 2.0 * v).collect();
        let mut grad = p.zero_grad();
        p.backward_pooled_full(&toks, TypeFlag::Question, &fwd, &g_pooled, &mut grad);
        let analytic = grad.flatten_dense(&block_shapes(&p));
        let mut probe = p.clone();
        let r = finite_difference_check(
            |x| {
                probe.assign_flat(x);
                probe
                    .pooled(&toks, TypeFlag::Question)
                    .unwrap()
                    .iter()
                    .map(|v| v * v)
                    .sum()
            },
            &p.flatten(),
            &analytic,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(r.max_relative_error <= 1e-4, "{}", r.max_relative_error);
    }

    #[test]
    fn checkpoint_round_trips() {
        let p = EncoderParams::init(10, 4, 11);
        let ck = p.to_checkpoint("encoder.");
        let back = EncoderParams::from_checkpoint(
            &Checkpoint::from_bytes(&ck.to_bytes(Precision::Fp32).unwrap()).unwrap(),
            "encoder.",
        )
        .unwrap();
        assert_eq!(back, p.rounded(Precision::Fp32));
        let half = EncoderParams::from_checkpoint(
            &Checkpoint::from_bytes(&ck.to_bytes(Precision::Fp16).unwrap()).unwrap(),
            "encoder.",
        )
        .unwrap();
        assert_eq!(half, p.rounded(Precision::Fp16));
    }
}
