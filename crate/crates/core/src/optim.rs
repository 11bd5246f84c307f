//! Parameter/gradient block views and the optimizers that consume them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One block of a gradient. Embedding tables are accumulated sparsely by row.
#[derive(Debug, Clone, PartialEq)]
pub enum GradBlock<'a> {
    Dense(&'a [f64]),
    Rows {
        width: usize,
        rows: &'a BTreeMap<u32, Vec<f64>>,
    },
}

/// Anything holding trainable `f64` blocks in a fixed order.
pub trait Params {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for b in self.blocks_mut() {
            b.copy_from_slice(&flat[at..at + b.len()]);
            at += b.len();
        }
        assert_eq!(at, flat.len(), "flat parameter vector has wrong length");
    }

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Gradient counterpart of [`Params`]; block order must match.
pub trait Grads {
    fn grad_blocks(&self) -> Vec<GradBlock<'_>>;
    fn scale(&mut self, factor: f64);

    fn norm(&self) -> f64 {
        let mut sq = 0.0;
        for b in self.grad_blocks() {
            match b {
                GradBlock::Dense(v) => sq += v.iter().map(|x| x * x).sum::<f64>(),
                GradBlock::Rows { rows, .. } => {
                    for r in rows.values() {
                        sq += r.iter().map(|x| x * x).sum::<f64>();
                    }
                }
            }
        }
        sq.sqrt()
    }

    /// Dense flattening, laid out like [`Params::flatten`].
    fn flatten_dense(&self, shapes: &[usize]) -> Vec<f64> {
        let blocks = self.grad_blocks();
        assert_eq!(blocks.len(), shapes.len());
        let mut out = Vec::with_capacity(shapes.iter().sum());
        for (b, len) in blocks.into_iter().zip(shapes) {
            match b {
                GradBlock::Dense(v) => {
                    assert_eq!(v.len(), *len);
                    out.extend_from_slice(v);
                }
                GradBlock::Rows { width, rows } => {
                    let start = out.len();
                    out.resize(start + len, 0.0);
                    for (r, g) in rows {
                        let at = start + *r as usize * width;
                        out[at..at + width].copy_from_slice(g);
                    }
                }
            }
        }
        out
    }

    fn all_finite(&self) -> bool {
        self.grad_blocks().iter().all(|b| match b {
            GradBlock::Dense(v) => v.iter().all(|x| x.is_finite()),
            GradBlock::Rows { rows, .. } => rows.values().all(|r| r.iter().all(|x| x.is_finite())),
        })
    }
}

pub fn block_shapes<P: Params + ?Sized>(p: &P) -> Vec<usize> {
    p.blocks().iter().map(|b| b.len()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Adam with lazy (touched-rows-only) updates on embedding tables.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup_steps: u64,
    /// When set, the rate falls linearly after warmup to zero at this step.
    pub total_steps: Option<u64>,
    steps: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            clip_norm: None,
            warmup_steps: 0,
            total_steps: None,
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn with_clip(mut self, clip_norm: Option<f64>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    pub fn with_warmup(mut self, steps: u64) -> Self {
        self.warmup_steps = steps;
        self
    }

    pub fn with_linear_decay(mut self, total_steps: Option<u64>) -> Self {
        self.total_steps = total_steps;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Learning rate that the next step will use.
    pub fn current_lr(&self) -> f64 {
        let n = self.steps;
        if n < self.warmup_steps {
            return self.lr * (n + 1) as f64 / self.warmup_steps as f64;
        }
        match self.total_steps {
            Some(total) if total > self.warmup_steps => {
                let left = total.saturating_sub(n) as f64;
                self.lr * left / (total - self.warmup_steps) as f64
            }
            _ => self.lr,
        }
    }

    /// Applies one update in place. Non-finite gradients abort the step.
    pub fn step<P: Params + ?Sized, G: Grads + ?Sized>(
        &mut self,
        params: &mut P,
        grad: &G,
    ) -> Result<()> {
        if !grad.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite gradient at optimizer step {}",
                self.steps
            )));
        }
        let lr = self.current_lr();
        let clip_scale = match self.clip_norm {
            Some(max) => {
                let n = grad.norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.steps += 1;
        let t = self.steps;
        let kind = self.kind;
        let mut blocks = params.blocks_mut();
        let grads = grad.grad_blocks();
        if blocks.len() != grads.len() {
            return Err(Error::invalid("parameter/gradient block count mismatch"));
        }
        if let OptimizerKind::Adam { .. } = kind {
            if self.moments.is_empty() {
                self.moments = blocks
                    .iter()
                    .map(|b| (vec![0.0; b.len()], vec![0.0; b.len()]))
                    .collect();
            }
        }
        for (bi, (p, g)) in blocks.iter_mut().zip(grads).enumerate() {
            match kind {
                OptimizerKind::Sgd => match g {
                    GradBlock::Dense(g) => {
                        for (pi, gi) in p.iter_mut().zip(g) {
                            *pi -= lr * clip_scale * gi;
                        }
                    }
                    GradBlock::Rows { width, rows } => {
                        for (r, gr) in rows {
                            let at = *r as usize * width;
                            for (pi, gi) in p[at..at + width].iter_mut().zip(gr) {
                                *pi -= lr * clip_scale * gi;
                            }
                        }
                    }
                },
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = &mut self.moments[bi];
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    let mut update = |idx: usize, gi: f64, pi: &mut f64| {
                        let gi = gi * clip_scale;
                        m[idx] = beta1 * m[idx] + (1.0 - beta1) * gi;
                        v[idx] = beta2 * v[idx] + (1.0 - beta2) * gi * gi;
                        let mh = m[idx] / bc1;
                        let vh = v[idx] / bc2;
                        *pi -= lr * mh / (vh.sqrt() + eps);
                    };
                    match g {
                        GradBlock::Dense(g) => {
                            for (i, (pi, gi)) in p.iter_mut().zip(g).enumerate() {
                                update(i, *gi, pi);
                            }
                        }
                        GradBlock::Rows { width, rows } => {
                            for (r, gr) in rows {
                                let at = *r as usize * width;
                                for (k, gi) in gr.iter().enumerate() {
                                    update(at + k, *gi, &mut p[at + k]);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
