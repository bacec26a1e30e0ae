//! Objective terms: masked-reconstruction MSE, symmetric InfoNCE over the
//! two masked views, the combined self-supervised total, and the downstream
//! consistency / task losses.
//!
//! Reductions run in f64 in fixed index order so results are bit-stable.
//! Reconstruction-style losses use the voxel MEAN of squared differences so
//! magnitudes are invariant to crop size.

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Balancing coefficients plus the contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_md: f64,
    pub lambda_cl: f64,
    pub lambda_cons: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_md: 1.0,
            lambda_cl: 1.0,
            lambda_cons: 0.1,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Param(format!("tau must be > 0, got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda_md", self.lambda_md),
            ("lambda_cl", self.lambda_cl),
            ("lambda_cons", self.lambda_cons),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Param(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A batch of unit-normalized embeddings with per-row item identity.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    rows: Vec<Vec<f64>>,
    ids: Vec<(String, usize)>,
}

impl EmbeddingBatch {
    /// Normalize raw embedding rows to unit L2 norm.
    pub fn from_raw(rows: Vec<Vec<f64>>, ids: Vec<(String, usize)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Param("embedding batch is empty".into()));
        }
        if ids.len() != rows.len() {
            return Err(Error::Param(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                rows.len()
            )));
        }
        let dim = rows[0].len();
        let mut out = Vec::with_capacity(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {dim}",
                    row.len()
                )));
            }
            let norm = l2_norm(&row);
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::NonFinite(format!(
                    "embedding row {i} has norm {norm}"
                )));
            }
            out.push(row.iter().map(|v| v / norm).collect());
        }
        Ok(Self { rows: out, ids })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn ids(&self) -> &[(String, usize)] {
        &self.ids
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean squared difference between two equal-length slices.
pub fn mean_squared_error(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Param("empty input".into()));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// MSE plus its gradient with respect to the first argument.
pub fn mse_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let loss = mean_squared_error(pred, target)?;
    let scale = 2.0 / pred.len() as f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| scale * (p - t))
        .collect();
    Ok((loss, grad))
}

/// Voxel-mean squared reconstruction error.
pub fn recon_loss(pred: &Volume, target: &Volume) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "pred dims {} != target dims {}",
            pred.dims(),
            target.dims()
        )));
    }
    mean_squared_error(&pred.to_f64(), &target.to_f64())
}

/// Mean squared difference between two feature vectors.
pub fn consistency_loss(e1: &[f64], e2: &[f64]) -> Result<f64> {
    mean_squared_error(e1, e2)
}

// ---------------------------------------------------------------------------
// Contrastive losses
// ---------------------------------------------------------------------------

fn logit_matrix(f: &EmbeddingBatch, g: &EmbeddingBatch, tau: f64) -> Result<Vec<Vec<f64>>> {
    if tau <= 0.0 {
        return Err(Error::Param(format!("tau must be > 0, got {tau}")));
    }
    if f.len() != g.len() {
        return Err(Error::Shape(format!(
            "batch sizes differ: {} vs {}",
            f.len(),
            g.len()
        )));
    }
    if f.len() < 2 {
        return Err(Error::Param(
            "contrastive loss needs at least 2 rows for negatives".into(),
        ));
    }
    if f.dim() != g.dim() {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            f.dim(),
            g.dim()
        )));
    }
    Ok(f.rows()
        .iter()
        .map(|fi| g.rows().iter().map(|gj| dot(fi, gj) / tau).collect())
        .collect())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-row cross-entropy terms over a precomputed logit matrix: row i loses
/// `-S[i][i] + logsumexp_j S[i][j]`, with max-subtraction for overflow safety.
pub(crate) fn info_nce_rows_from_logits(logits: &[Vec<f64>]) -> Vec<f64> {
    logits
        .iter()
        .enumerate()
        .map(|(i, row)| -row[i] + log_sum_exp(row))
        .collect()
}

/// One direction of the contrastive objective: per-row losses where row i of
/// `f` is the positive of row i of `g` and every other row is a negative.
pub fn info_nce_rows(f: &EmbeddingBatch, g: &EmbeddingBatch, tau: f64) -> Result<Vec<f64>> {
    Ok(info_nce_rows_from_logits(&logit_matrix(f, g, tau)?))
}

/// Mean over rows of the directional contrastive terms.
pub fn info_nce(f: &EmbeddingBatch, g: &EmbeddingBatch, tau: f64) -> Result<f64> {
    let rows = info_nce_rows(f, g, tau)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Symmetric contrastive loss: the average of both directional terms.
pub fn contrastive_loss(f: &EmbeddingBatch, g: &EmbeddingBatch, tau: f64) -> Result<f64> {
    Ok(0.5 * (info_nce(f, g, tau)? + info_nce(g, f, tau)?))
}

/// Loss and input gradients for the symmetric contrastive objective over raw
/// (unnormalized) embeddings, with per-row weights.
///
/// Rows are L2-normalized internally and the gradient accounts for the
/// normalization. `row_weights[i]` scales row i's contribution in both
/// directions; pass `1/|B|` everywhere for the plain batch mean.
pub struct ContrastiveGrad {
    pub loss: f64,
    pub d_a: Vec<Vec<f64>>,
    pub d_b: Vec<Vec<f64>>,
}

pub fn contrastive_grad(
    a_raw: &[Vec<f64>],
    b_raw: &[Vec<f64>],
    tau: f64,
    row_weights: &[f64],
) -> Result<ContrastiveGrad> {
    let n = a_raw.len();
    if n != b_raw.len() || n != row_weights.len() {
        return Err(Error::Shape(format!(
            "batch sizes differ: a={n} b={} weights={}",
            b_raw.len(),
            row_weights.len()
        )));
    }
    if n < 2 {
        return Err(Error::Param(
            "contrastive loss needs at least 2 rows for negatives".into(),
        ));
    }
    if tau <= 0.0 {
        return Err(Error::Param(format!("tau must be > 0, got {tau}")));
    }
    let dim = a_raw[0].len();
    let norm_rows = |rows: &[Vec<f64>]| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut unit = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Shape(format!("row {i} length {} != {dim}", r.len())));
            }
            let nm = l2_norm(r);
            if !nm.is_finite() || nm == 0.0 {
                return Err(Error::NonFinite(format!("embedding row {i} has norm {nm}")));
            }
            unit.push(r.iter().map(|v| v / nm).collect::<Vec<_>>());
            norms.push(nm);
        }
        Ok((unit, norms))
    };
    let (f, a_norms) = norm_rows(a_raw)?;
    let (g, b_norms) = norm_rows(b_raw)?;

    // S[i][j] = f_i . g_j / tau
    let logits: Vec<Vec<f64>> = f
        .iter()
        .map(|fi| g.iter().map(|gj| dot(fi, gj) / tau).collect())
        .collect();

    // Row softmax (f->g direction) and column softmax (g->f direction).
    let row_softmax: Vec<Vec<f64>> = logits
        .iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        })
        .collect();
    let col_softmax: Vec<Vec<f64>> = {
        let mut cols = vec![vec![0.0; n]; n];
        for j in 0..n {
            let col: Vec<f64> = (0..n).map(|i| logits[i][j]).collect();
            let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = col.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for i in 0..n {
                cols[i][j] = exps[i] / z;
            }
        }
        cols
    };

    let mut loss = 0.0;
    for i in 0..n {
        let row_term = -logits[i][i] + log_sum_exp(&logits[i]);
        let col: Vec<f64> = (0..n).map(|k| logits[k][i]).collect();
        let col_term = -logits[i][i] + log_sum_exp(&col);
        loss += row_weights[i] * 0.5 * (row_term + col_term);
    }

    // dL/dS[i][j]
    let mut d_logits = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            d_logits[i][j] = 0.5
                * (row_weights[i] * (row_softmax[i][j] - delta)
                    + row_weights[j] * (col_softmax[i][j] - delta));
        }
    }

    // Backprop into the unit vectors, then through the normalization.
    let mut d_a = vec![vec![0.0; dim]; n];
    let mut d_b = vec![vec![0.0; dim]; n];
    for i in 0..n {
        let mut df = vec![0.0; dim];
        for j in 0..n {
            let c = d_logits[i][j] / tau;
            for k in 0..dim {
                df[k] += c * g[j][k];
            }
        }
        let proj = dot(&f[i], &df);
        for k in 0..dim {
            d_a[i][k] = (df[k] - f[i][k] * proj) / a_norms[i];
        }
    }
    for j in 0..n {
        let mut dg = vec![0.0; dim];
        for i in 0..n {
            let c = d_logits[i][j] / tau;
            for k in 0..dim {
                dg[k] += c * f[i][k];
            }
        }
        let proj = dot(&g[j], &dg);
        for k in 0..dim {
            d_b[j][k] = (dg[k] - g[j][k] * proj) / b_norms[j];
        }
    }

    Ok(ContrastiveGrad { loss, d_a, d_b })
}

// ---------------------------------------------------------------------------
// Totals
// ---------------------------------------------------------------------------

/// Combined self-supervised total. The batch/modality averaging is applied by
/// the trainer while accumulating the component values passed in here.
pub fn ssl_total(cmr: f64, md: f64, cl: f64, w: &LossWeights, cl_active: bool) -> f64 {
    let gated = if cl_active { w.lambda_cl * cl } else { 0.0 };
    cmr + w.lambda_md * md + gated
}

/// Overall fine-tuning total: both supervised terms plus the weighted
/// feature-consistency term.
pub fn finetune_total(sl1: f64, sl2: f64, cons: f64, lambda_cons: f64) -> f64 {
    sl1 + sl2 + lambda_cons * cons
}

// ---------------------------------------------------------------------------
// Supervised task losses
// ---------------------------------------------------------------------------

pub const DICE_EPS: f64 = 1e-5;

/// Soft Dice loss `1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn dice_loss(pred_prob: &Volume, target: &Volume) -> Result<f64> {
    if pred_prob.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "pred dims {} != target dims {}",
            pred_prob.dims(),
            target.dims()
        )));
    }
    Ok(dice_loss_slices(&pred_prob.to_f64(), &target.to_f64()))
}

pub fn dice_loss_slices(prob: &[f64], target: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (p, t) in prob.iter().zip(target) {
        inter += p * t;
        psum += p;
        tsum += t;
    }
    1.0 - (2.0 * inter + DICE_EPS) / (psum + tsum + DICE_EPS)
}

/// Soft Dice loss plus its gradient with respect to the probabilities.
pub fn dice_loss_grad(prob: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (p, t) in prob.iter().zip(target) {
        inter += p * t;
        psum += p;
        tsum += t;
    }
    let denom = psum + tsum + DICE_EPS;
    let numer = 2.0 * inter + DICE_EPS;
    let loss = 1.0 - numer / denom;
    let grad = prob
        .iter()
        .zip(target)
        .map(|(_, t)| -(2.0 * t * denom - numer) / (denom * denom))
        .collect();
    (loss, grad)
}

/// Cross-entropy of the given class under softmax of the logits, stabilized
/// by max-subtraction.
pub fn ce_loss(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(Error::Param(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(-logits[class] + log_sum_exp(logits))
}

/// Cross-entropy plus its gradient (softmax minus one-hot).
pub fn ce_grad(logits: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
    let loss = ce_loss(logits, class)?;
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / z - if i == class { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::volume::Dims3;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = l2_norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    fn batch(rows: Vec<Vec<f64>>) -> EmbeddingBatch {
        let ids = (0..rows.len()).map(|i| (format!("s{i}"), 0)).collect();
        EmbeddingBatch::from_raw(rows, ids).unwrap()
    }

    fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| (rng.next_u64() % 2000) as f64 / 1000.0 - 1.0 + 1e-3)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn recon_loss_trivials() {
        let dims = Dims3::cube(3);
        let a = Volume::filled(dims, 0.5).unwrap();
        assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);
        let z = Volume::zeros(dims);
        assert_relative_eq!(recon_loss(&z, &a).unwrap(), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn recon_loss_matches_hand_summed_oracle() {
        let dims = Dims3::cube(2);
        let mut rng = SplitMix64::new(17);
        let a: Vec<f32> = (0..8).map(|_| (rng.next_u64() % 100) as f32 / 50.0).collect();
        let b: Vec<f32> = (0..8).map(|_| (rng.next_u64() % 100) as f32 / 50.0).collect();
        let va = Volume::new(dims, a.clone()).unwrap();
        let vb = Volume::new(dims, b.clone()).unwrap();
        let mut acc = 0.0f64;
        for i in 0..8 {
            let d = a[i] as f64 - b[i] as f64;
            acc += d * d;
        }
        assert_relative_eq!(recon_loss(&va, &vb).unwrap(), acc / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn recon_loss_symmetric_and_tiling_invariant() {
        let dims = Dims3::new(1, 2, 2);
        let a = Volume::new(dims, vec![0.1, 0.9, 0.3, 0.7]).unwrap();
        let b = Volume::new(dims, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        assert_eq!(
            recon_loss(&a, &b).unwrap(),
            recon_loss(&b, &a).unwrap()
        );
        // Tile along depth: mean stays put.
        let dims2 = Dims3::new(2, 2, 2);
        let tile = |v: &Volume| {
            let mut data = v.data().to_vec();
            data.extend_from_slice(v.data());
            Volume::new(dims2, data).unwrap()
        };
        assert_relative_eq!(
            recon_loss(&tile(&a), &tile(&b)).unwrap(),
            recon_loss(&a, &b).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn info_nce_all_equal_rows_is_ln_batch() {
        let row = unit(vec![0.3, -0.5, 0.8, 0.1]);
        let f = batch(vec![row.clone(); 4]);
        let g = batch(vec![row; 4]);
        for tau in [0.05, 0.1, 1.0] {
            assert_relative_eq!(
                info_nce(&f, &g, tau).unwrap(),
                4f64.ln(),
                epsilon = 1e-9
            );
            assert_relative_eq!(
                contrastive_loss(&f, &g, tau).unwrap(),
                4f64.ln(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn info_nce_two_row_closed_form() {
        // f1.g1 = 1, f1.g2 = -1, tau = 1: row-1 term is ln(1 + e^-2).
        let e = unit(vec![1.0, 0.0]);
        let neg: Vec<f64> = e.iter().map(|v| -v).collect();
        let f = batch(vec![e.clone(), unit(vec![0.0, 1.0])]);
        let g = batch(vec![e, neg]);
        let rows = info_nce_rows(&f, &g, 1.0).unwrap();
        assert_relative_eq!(rows[0], (1.0 + (-2.0f64).exp()).ln(), epsilon = 1e-9);
    }

    #[test]
    fn info_nce_matches_double_loop_oracle() {
        let a = random_rows(8, 6, 21);
        let b = random_rows(8, 6, 22);
        let f = batch(a);
        let g = batch(b);
        let tau = 0.1;
        // Brute-force oracle: no max-subtraction, explicit softmax.
        let mut acc = 0.0;
        for i in 0..8 {
            let num = (dot(&f.rows()[i], &g.rows()[i]) / tau).exp();
            let mut den = 0.0;
            for j in 0..8 {
                den += (dot(&f.rows()[i], &g.rows()[j]) / tau).exp();
            }
            acc += -(num / den).ln();
        }
        assert_relative_eq!(info_nce(&f, &g, tau).unwrap(), acc / 8.0, epsilon = 1e-10);
    }

    #[test]
    fn contrastive_loss_symmetric_bit_exact() {
        let f = batch(random_rows(5, 4, 31));
        let g = batch(random_rows(5, 4, 32));
        let ab = contrastive_loss(&f, &g, 0.2).unwrap();
        let ba = contrastive_loss(&g, &f, 0.2).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn logit_shift_invariance() {
        let logits: Vec<Vec<f64>> = vec![
            vec![2.0, -1.0, 0.5],
            vec![-0.5, 1.5, 0.0],
            vec![0.1, 0.2, 3.0],
        ];
        let shifted: Vec<Vec<f64>> = logits
            .iter()
            .map(|r| r.iter().map(|v| v + 123.456).collect())
            .collect();
        let a = info_nce_rows_from_logits(&logits);
        let b = info_nce_rows_from_logits(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn lower_positive_similarity_increases_loss() {
        let mut logits = vec![vec![1.0, -0.2, 0.3], vec![0.0, 0.8, -0.1], vec![0.2, 0.1, 0.9]];
        let before: f64 = info_nce_rows_from_logits(&logits).iter().sum();
        logits[0][0] -= 0.5;
        let after: f64 = info_nce_rows_from_logits(&logits).iter().sum();
        assert!(after > before);
    }

    #[test]
    fn contrastive_grad_matches_finite_differences() {
        let a = random_rows(3, 4, 41);
        let b = random_rows(3, 4, 42);
        let w = vec![1.0 / 3.0; 3];
        let tau = 0.3;
        let out = contrastive_grad(&a, &b, tau, &w).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            for k in 0..4 {
                let mut ap = a.clone();
                ap[i][k] += eps;
                let mut am = a.clone();
                am[i][k] -= eps;
                let lp = contrastive_grad(&ap, &b, tau, &w).unwrap().loss;
                let lm = contrastive_grad(&am, &b, tau, &w).unwrap().loss;
                let fd = (lp - lm) / (2.0 * eps);
                assert_relative_eq!(out.d_a[i][k], fd, epsilon = 1e-7, max_relative = 1e-6);

                let mut bp = b.clone();
                bp[i][k] += eps;
                let mut bm = b.clone();
                bm[i][k] -= eps;
                let lp = contrastive_grad(&a, &bp, tau, &w).unwrap().loss;
                let lm = contrastive_grad(&a, &bm, tau, &w).unwrap().loss;
                let fd = (lp - lm) / (2.0 * eps);
                assert_relative_eq!(out.d_b[i][k], fd, epsilon = 1e-7, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn contrastive_grad_loss_agrees_with_pure_route() {
        let a = random_rows(4, 5, 51);
        let b = random_rows(4, 5, 52);
        let w = vec![0.25; 4];
        let grad = contrastive_grad(&a, &b, 0.1, &w).unwrap();
        let f = batch(a);
        let g = batch(b);
        assert_relative_eq!(
            grad.loss,
            contrastive_loss(&f, &g, 0.1).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ssl_total_examples() {
        let w = LossWeights::default();
        assert_eq!(ssl_total(0.5, 0.25, 1.0, &w, true), 1.75);
        assert_eq!(ssl_total(0.5, 0.25, 123.0, &w, false), 0.75);
        let w2 = LossWeights {
            lambda_md: 2.0,
            lambda_cl: 3.0,
            ..Default::default()
        };
        assert_eq!(ssl_total(1.0, 1.0, 1.0, &w2, true), 6.0);
    }

    #[test]
    fn consistency_loss_examples() {
        assert_eq!(consistency_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(
            consistency_loss(&[0.0; 4], &[1.0; 4]).unwrap(),
            1.0
        );
        let e1 = vec![0.1, 0.4, -0.3];
        let e2 = vec![0.2, -0.1, 0.5];
        let oracle = ((0.1f64 - 0.2).powi(2) + (0.4f64 + 0.1).powi(2) + (-0.3f64 - 0.5).powi(2)) / 3.0;
        assert_relative_eq!(consistency_loss(&e1, &e2).unwrap(), oracle, epsilon = 1e-15);
    }

    #[test]
    fn finetune_total_examples() {
        assert_eq!(finetune_total(1.0, 2.0, 0.0, 0.1), 3.0);
        assert_relative_eq!(finetune_total(1.0, 2.0, 5.0, 0.1), 3.5, epsilon = 1e-15);
    }

    #[test]
    fn dice_loss_trivials() {
        let dims = Dims3::cube(2);
        let t = Volume::new(dims, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let near_zero = dice_loss(&t, &t).unwrap();
        assert!(near_zero.abs() < 1e-5);
        let disjoint = Volume::new(dims, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((dice_loss(&disjoint, &t).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn dice_grad_matches_finite_differences() {
        let prob = vec![0.2, 0.7, 0.5, 0.9];
        let target = vec![0.0, 1.0, 1.0, 0.0];
        let (_, grad) = dice_loss_grad(&prob, &target);
        let eps = 1e-6;
        for k in 0..4 {
            let mut pp = prob.clone();
            pp[k] += eps;
            let mut pm = prob.clone();
            pm[k] -= eps;
            let fd = (dice_loss_slices(&pp, &target) - dice_loss_slices(&pm, &target)) / (2.0 * eps);
            assert_relative_eq!(grad[k], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn ce_uniform_logits_is_ln_classes() {
        let logits = vec![0.7; 4];
        assert_relative_eq!(ce_loss(&logits, 2).unwrap(), 4f64.ln(), epsilon = 1e-12);
        let (_, grad) = ce_grad(&logits, 2).unwrap();
        assert_relative_eq!(grad[2], 0.25 - 1.0, epsilon = 1e-12);
        assert_relative_eq!(grad[0], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn ce_is_stable_for_huge_logits() {
        let logits = vec![1e4, -1e4];
        let loss = ce_loss(&logits, 0).unwrap();
        assert!(loss.is_finite());
        assert!(loss.abs() < 1e-8);
    }

    #[test]
    fn embedding_batch_rejects_bad_rows() {
        assert!(EmbeddingBatch::from_raw(vec![], vec![]).is_err());
        assert!(
            EmbeddingBatch::from_raw(vec![vec![0.0, 0.0]], vec![("a".into(), 0)]).is_err()
        );
        assert!(EmbeddingBatch::from_raw(
            vec![vec![1.0, 0.0], vec![1.0]],
            vec![("a".into(), 0), ("b".into(), 1)]
        )
        .is_err());
    }

    #[test]
    fn embedding_batch_rows_are_unit_norm() {
        let b = batch(random_rows(6, 5, 77));
        for row in b.rows() {
            assert_relative_eq!(l2_norm(row), 1.0, epsilon = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn ssl_total_is_linear(
            cmr in 0.0f64..10.0,
            md in 0.0f64..10.0,
            cl in 0.0f64..10.0,
            lmd in 0.0f64..3.0,
            lcl in 0.0f64..3.0,
        ) {
            let w = LossWeights { lambda_md: lmd, lambda_cl: lcl, ..Default::default() };
            let base = ssl_total(cmr, md, cl, &w, true);
            prop_assert!((ssl_total(cmr + 1.0, md, cl, &w, true) - base - 1.0).abs() < 1e-9);
            prop_assert!((ssl_total(cmr, md + 1.0, cl, &w, true) - base - lmd).abs() < 1e-9);
            prop_assert!((ssl_total(cmr, md, cl + 1.0, &w, true) - base - lcl).abs() < 1e-9);
        }
    }
}
