//! Cross-correlation compaction loss.
//!
//! `C[i][j] = sum_b z1[b][i] z2[b][j] / (|z1[.][i]| |z2[.][j]|)` over a batch of
//! paired embeddings, and
//! `L = sum_i (1 - C[i][i])^2 + lambda * sum_{i != j} C[i][j]^2`.
//!
//! Embeddings are not mean-centred unless [`LossOptions::center`] is set.

use crate::encoder::EmbeddingBatch;
use crate::error::{Error, Result};

/// Weight of the off-diagonal (redundancy) term.
pub const DEFAULT_LAMBDA: f64 = 0.005;

/// Products of column norms at or below this give a zero correlation entry.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub lambda: f64,
    /// Subtract the per-dimension batch mean before correlating.
    pub center: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            center: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    dim: usize,
    values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    /// Row-major entries.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn from_values(dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dim * dim {
            return Err(Error::dims(dim * dim, values.len()));
        }
        Ok(Self { dim, values })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub invariance: f64,
    pub redundancy: f64,
    pub lambda: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub dz1: EmbeddingBatch,
    pub dz2: EmbeddingBatch,
    pub breakdown: LossBreakdown,
}

fn check_pair(z1: &EmbeddingBatch, z2: &EmbeddingBatch) -> Result<()> {
    if z1.rows() != z2.rows() || z1.cols() != z2.cols() {
        return Err(Error::dims(
            format!("{}x{}", z1.rows(), z1.cols()),
            format!("{}x{}", z2.rows(), z2.cols()),
        ));
    }
    if z1.rows() < 2 {
        return Err(Error::BatchTooSmall(z1.rows()));
    }
    Ok(())
}

fn centered(z: &EmbeddingBatch) -> EmbeddingBatch {
    let (b, d) = (z.rows(), z.cols());
    let mut mean = vec![0.0; d];
    for r in 0..b {
        for (m, v) in mean.iter_mut().zip(z.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut values = z.values().to_vec();
    for row in values.chunks_exact_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    EmbeddingBatch::new(b, d, values).expect("shape preserved")
}

fn column_norms(z: &EmbeddingBatch) -> Vec<f64> {
    let d = z.cols();
    let mut sq = vec![0.0; d];
    for r in 0..z.rows() {
        for (s, v) in sq.iter_mut().zip(z.row(r)) {
            *s += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Unnormalised inner products `S[i][j] = sum_b z1[b][i] z2[b][j]`.
fn inner_products(z1: &EmbeddingBatch, z2: &EmbeddingBatch) -> Vec<f64> {
    let d = z1.cols();
    let mut s = vec![0.0; d * d];
    for r in 0..z1.rows() {
        let (a, b) = (z1.row(r), z2.row(r));
        for i in 0..d {
            let ai = a[i];
            let row = &mut s[i * d..(i + 1) * d];
            for (x, bj) in row.iter_mut().zip(b) {
                *x += ai * bj;
            }
        }
    }
    s
}

struct Correlation {
    c: Vec<f64>,
    n1: Vec<f64>,
    n2: Vec<f64>,
}

fn correlate(z1: &EmbeddingBatch, z2: &EmbeddingBatch) -> Correlation {
    let d = z1.cols();
    let n1 = column_norms(z1);
    let n2 = column_norms(z2);
    let mut c = inner_products(z1, z2);
    for i in 0..d {
        for j in 0..d {
            let denom = n1[i] * n2[j];
            let v = &mut c[i * d + j];
            *v = if denom > NORM_EPS {
                (*v / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
    }
    Correlation { c, n1, n2 }
}

pub fn cross_correlation(z1: &EmbeddingBatch, z2: &EmbeddingBatch) -> Result<CorrelationMatrix> {
    cross_correlation_with(z1, z2, false)
}

pub fn cross_correlation_with(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    center: bool,
) -> Result<CorrelationMatrix> {
    check_pair(z1, z2)?;
    let corr = if center {
        correlate(&centered(z1), &centered(z2))
    } else {
        correlate(z1, z2)
    };
    Ok(CorrelationMatrix {
        dim: z1.cols(),
        values: corr.c,
    })
}

pub fn lmc_loss(c: &CorrelationMatrix, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let d = c.dim;
    let mut invariance = 0.0;
    let mut redundancy = 0.0;
    for i in 0..d {
        for j in 0..d {
            let v = c.values[i * d + j];
            if i == j {
                invariance += (1.0 - v) * (1.0 - v);
            } else {
                redundancy += v * v;
            }
        }
    }
    Ok(LossBreakdown {
        invariance,
        redundancy,
        lambda,
        total: invariance + lambda * redundancy,
    })
}

pub fn loss_gradients(z1: &EmbeddingBatch, z2: &EmbeddingBatch, lambda: f64) -> Result<LossGradients> {
    loss_gradients_with(
        z1,
        z2,
        &LossOptions {
            lambda,
            center: false,
        },
    )
}

/// Loss value and its exact gradient with respect to both embedding batches.
pub fn loss_gradients_with(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    opts: &LossOptions,
) -> Result<LossGradients> {
    check_pair(z1, z2)?;
    let (a, b) = if opts.center {
        (centered(z1), centered(z2))
    } else {
        (z1.clone(), z2.clone())
    };
    let (rows, d) = (a.rows(), a.cols());
    let Correlation { c, n1, n2 } = correlate(&a, &b);
    let cm = CorrelationMatrix { dim: d, values: c };
    let breakdown = lmc_loss(&cm, opts.lambda)?;
    let c = cm.values;

    // dL/dC, zeroed where the guard suppressed the entry.
    let mut g = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            if n1[i] * n2[j] <= NORM_EPS {
                continue;
            }
            let v = c[i * d + j];
            g[i * d + j] = if i == j {
                -2.0 * (1.0 - v)
            } else {
                2.0 * opts.lambda * v
            };
        }
    }

    // dC[i][j]/dz1[b][i] = z2[b][j] / (n1_i n2_j) - C[i][j] z1[b][i] / n1_i^2,
    // and symmetrically for z2.
    let inv1: Vec<f64> = n1.iter().map(|n| if *n > 0.0 { 1.0 / n } else { 0.0 }).collect();
    let inv2: Vec<f64> = n2.iter().map(|n| if *n > 0.0 { 1.0 / n } else { 0.0 }).collect();
    // Row weights: w1[i] = sum_j g_ij C_ij, w2[j] = sum_i g_ij C_ij.
    let mut w1 = vec![0.0; d];
    let mut w2 = vec![0.0; d];
    // Scaled adjoint G'[i][j] = g_ij / (n1_i n2_j).
    let mut gs = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let gc = g[i * d + j] * c[i * d + j];
            w1[i] += gc;
            w2[j] += gc;
            gs[i * d + j] = g[i * d + j] * inv1[i] * inv2[j];
        }
    }
    let mut dz1 = vec![0.0; rows * d];
    let mut dz2 = vec![0.0; rows * d];
    for r in 0..rows {
        let (ar, br) = (a.row(r), b.row(r));
        let d1 = &mut dz1[r * d..(r + 1) * d];
        let d2 = &mut dz2[r * d..(r + 1) * d];
        for i in 0..d {
            let gi = &gs[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                acc += gi[j] * br[j];
                d2[j] += gi[j] * ar[i];
            }
            d1[i] = acc - w1[i] * ar[i] * inv1[i] * inv1[i];
        }
        for j in 0..d {
            d2[j] -= w2[j] * br[j] * inv2[j] * inv2[j];
        }
    }
    let mut dz1 = EmbeddingBatch::new(rows, d, dz1)?;
    let mut dz2 = EmbeddingBatch::new(rows, d, dz2)?;
    if opts.center {
        dz1 = centered(&dz1);
        dz2 = centered(&dz2);
    }
    Ok(LossGradients {
        dz1,
        dz2,
        breakdown,
    })
}
