//! Row-major dense helpers shared by the encoder and the heads.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `m · v` for an `n × n` row-major `m`.
pub fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    m.chunks_exact(n).map(|row| dot(row, v)).collect()
}

/// `mᵀ · v` for an `n × n` row-major `m`.
pub fn matvec_t(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut out = vec![0.0; n];
    for (row, vi) in m.chunks_exact(n).zip(v) {
        if *vi != 0.0 {
            axpy(*vi, row, &mut out);
        }
    }
    out
}

/// `acc += a · bᵀ`.
pub fn add_outer(acc: &mut [f64], a: &[f64], b: &[f64]) {
    let n = b.len();
    for (row, ai) in acc.chunks_exact_mut(n).zip(a) {
        if *ai != 0.0 {
            axpy(*ai, b, row);
        }
    }
}
