//! Pre-training loss kernels with analytic gradients.
//!
//! Five objectives over dense feature matrices: masked-token cross-entropy
//! (computed for the text and cross-modal paths), parameter-free and scored
//! global matching, and local significant-word matching. Every softmax-style
//! sum goes through log-sum-exp, values and gradients are accumulated in
//! 64-bit and stored in 32-bit, and each kernel has a 64-bit core shared
//! with the finite-difference gradient checker.

use crate::error::{Error, Result};

/// Dense row-major matrix: 32-bit storage, 64-bit accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "matrix of {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "non-finite value at flat index {i}"
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// 64-bit copy for accumulation.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Store a 64-bit buffer back to 32-bit.
    pub fn from_f64(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        FeatureMatrix::new(rows, cols, values.iter().map(|&v| v as f32).collect())
    }
}

/// A batch of sampled significant-token features: `batch x n_l x dim`,
/// row-major over (batch, n_l, dim).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBlock {
    batch: usize,
    n_l: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TokenBlock {
    pub fn new(batch: usize, n_l: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if n_l == 0 {
            return Err(Error::Argument("n_l must be at least 1".to_string()));
        }
        if data.len() != batch * n_l * dim {
            return Err(Error::Argument(format!(
                "token block of {batch}x{n_l}x{dim} needs {} values, got {}",
                batch * n_l * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "non-finite value at flat index {i}"
            )));
        }
        Ok(TokenBlock {
            batch,
            n_l,
            dim,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn n_l(&self) -> usize {
        self.n_l
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Token feature `l` of batch row `i`.
    pub fn token(&self, i: usize, l: usize) -> &[f32] {
        let start = (i * self.n_l + l) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Scalar loss value plus one gradient per differentiable input.
///
/// Gradients appear in input order. A gradient with respect to a
/// [`TokenBlock`] is returned as a `(batch * n_l) x dim` matrix in the
/// block's own row-major layout.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grads: Vec<FeatureMatrix>,
}

fn ensure_finite(values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Argument(format!(
            "non-finite input at flat index {i}"
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean cross-entropy over the masked set: 64-bit core.
///
/// `logits` is `rows x cols` flat; returns the loss and its gradient
/// (softmax minus one-hot, divided by the number of rows).
pub fn masked_ce_f64(
    logits: &[f64],
    rows: usize,
    cols: usize,
    labels: &[u32],
) -> Result<(f64, Vec<f64>)> {
    if rows == 0 {
        return Err(Error::EmptyMask);
    }
    if labels.len() != rows {
        return Err(Error::Argument(format!(
            "{rows} logit rows but {} labels",
            labels.len()
        )));
    }
    if logits.len() != rows * cols {
        return Err(Error::Argument("logits shape mismatch".to_string()));
    }
    ensure_finite(logits)?;
    for &label in labels {
        if label as usize >= cols {
            return Err(Error::Argument(format!(
                "label {label} out of range for {cols} classes"
            )));
        }
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    let inv = 1.0 / rows as f64;
    for (q, &label) in labels.iter().enumerate() {
        let row = &logits[q * cols..(q + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_denom = max + denom.ln();
        value += log_denom - row[label as usize];
        for c in 0..cols {
            let p = (row[c] - max).exp() / denom;
            let target = if c == label as usize { 1.0 } else { 0.0 };
            grad[q * cols + c] = (p - target) * inv;
        }
    }
    Ok((value * inv, grad))
}

/// Masked-token prediction loss (both masking objectives share this form).
pub fn masked_ce(logits: &FeatureMatrix, labels: &[u32]) -> Result<LossResult> {
    let (value, grad) = masked_ce_f64(&logits.to_f64(), logits.rows(), logits.cols(), labels)?;
    Ok(LossResult {
        value,
        grads: vec![FeatureMatrix::from_f64(logits.rows(), logits.cols(), &grad)?],
    })
}

/// Parameter-free global matching: 64-bit core.
///
/// For each text anchor `i` the positives are the paired visual row and the
/// negatives range over the other visual rows, so the loss is a softmax
/// cross-entropy down each column of the score matrix `s[j][i] =
/// scale * <v_j, t_i>`.
pub fn gvtm_free_f64(
    vis: &[f64],
    txt: &[f64],
    batch: usize,
    dim: usize,
    scale: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if batch == 0 {
        return Err(Error::Argument("batch must be at least 1".to_string()));
    }
    if vis.len() != batch * dim || txt.len() != batch * dim {
        return Err(Error::Argument("feature shape mismatch".to_string()));
    }
    ensure_finite(vis)?;
    ensure_finite(txt)?;
    let row = |buf: &[f64], r: usize| -> Vec<f64> { buf[r * dim..(r + 1) * dim].to_vec() };

    // s[j * batch + i]
    let mut scores = vec![0.0; batch * batch];
    for j in 0..batch {
        let vj = row(vis, j);
        for i in 0..batch {
            scores[j * batch + i] = scale * dot(&vj, &row(txt, i));
        }
    }

    let mut value = 0.0;
    let mut grad_vis = vec![0.0; vis.len()];
    let mut grad_txt = vec![0.0; txt.len()];
    for i in 0..batch {
        let mut max = f64::NEG_INFINITY;
        for j in 0..batch {
            max = max.max(scores[j * batch + i]);
        }
        let mut denom = 0.0;
        for j in 0..batch {
            denom += (scores[j * batch + i] - max).exp();
        }
        value += max + denom.ln() - scores[i * batch + i];
        for j in 0..batch {
            let p = (scores[j * batch + i] - max).exp() / denom;
            let coeff = scale * (p - if i == j { 1.0 } else { 0.0 });
            for k in 0..dim {
                grad_vis[j * dim + k] += coeff * txt[i * dim + k];
                grad_txt[i * dim + k] += coeff * vis[j * dim + k];
            }
        }
    }
    Ok((value, grad_vis, grad_txt))
}

/// Parameter-free global vision-text matching over paired batch rows.
pub fn gvtm_free(vis: &FeatureMatrix, txt_cls: &FeatureMatrix, scale: f64) -> Result<LossResult> {
    if vis.rows() != txt_cls.rows() || vis.cols() != txt_cls.cols() {
        return Err(Error::Argument(format!(
            "visual {}x{} and textual {}x{} shapes differ",
            vis.rows(),
            vis.cols(),
            txt_cls.rows(),
            txt_cls.cols()
        )));
    }
    let (value, gv, gt) = gvtm_free_f64(
        &vis.to_f64(),
        &txt_cls.to_f64(),
        vis.rows(),
        vis.cols(),
        scale,
    )?;
    Ok(LossResult {
        value,
        grads: vec![
            FeatureMatrix::from_f64(vis.rows(), vis.cols(), &gv)?,
            FeatureMatrix::from_f64(txt_cls.rows(), txt_cls.cols(), &gt)?,
        ],
    })
}

/// Scored global matching: 64-bit core over a full `batch x batch` score
/// matrix with `scores[j][i]` scoring pair (visual j, text i).
pub fn gvtm_scored_f64(scores: &[f64], batch: usize) -> Result<(f64, Vec<f64>)> {
    if batch == 0 {
        return Err(Error::Argument("batch must be at least 1".to_string()));
    }
    if scores.len() != batch * batch {
        return Err(Error::Argument("score matrix shape mismatch".to_string()));
    }
    ensure_finite(scores)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for i in 0..batch {
        let mut max = f64::NEG_INFINITY;
        for j in 0..batch {
            max = max.max(scores[j * batch + i]);
        }
        let mut denom = 0.0;
        for j in 0..batch {
            denom += (scores[j * batch + i] - max).exp();
        }
        value += max + denom.ln() - scores[i * batch + i];
        for j in 0..batch {
            let p = (scores[j * batch + i] - max).exp() / denom;
            grad[j * batch + i] = p - if i == j { 1.0 } else { 0.0 };
        }
    }
    Ok((value, grad))
}

/// Scored global matching on a square score matrix (non-square is rejected).
pub fn gvtm_scored(scores: &FeatureMatrix) -> Result<LossResult> {
    if scores.rows() != scores.cols() {
        return Err(Error::Argument(format!(
            "score matrix must be square, got {}x{}",
            scores.rows(),
            scores.cols()
        )));
    }
    let (value, grad) = gvtm_scored_f64(&scores.to_f64(), scores.rows())?;
    Ok(LossResult {
        value,
        grads: vec![FeatureMatrix::from_f64(scores.rows(), scores.cols(), &grad)?],
    })
}

/// Local word matching: 64-bit core.
///
/// Per anchor `i`, the positive mass sums over that pair's `n_l` sampled
/// token scores and the denominator additionally ranges over the other
/// visual rows, all through log-sum-exp. With a single visual row the
/// numerator and denominator coincide and the loss is exactly zero.
pub fn lvwm_f64(
    vis: &[f64],
    batch: usize,
    dim: usize,
    sig: &[f64],
    n_l: usize,
    scale: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if batch == 0 {
        return Err(Error::Argument("batch must be at least 1".to_string()));
    }
    if n_l == 0 {
        return Err(Error::Argument("n_l must be at least 1".to_string()));
    }
    if vis.len() != batch * dim || sig.len() != batch * n_l * dim {
        return Err(Error::Argument("feature shape mismatch".to_string()));
    }
    ensure_finite(vis)?;
    ensure_finite(sig)?;

    // s[(j * batch + i) * n_l + l] = scale * <v_j, t_hat_{i,l}>
    let mut scores = vec![0.0; batch * batch * n_l];
    for j in 0..batch {
        let vj = &vis[j * dim..(j + 1) * dim];
        for i in 0..batch {
            for l in 0..n_l {
                let tok = &sig[(i * n_l + l) * dim..(i * n_l + l + 1) * dim];
                scores[(j * batch + i) * n_l + l] = scale * dot(vj, tok);
            }
        }
    }
    let score_at = |j: usize, i: usize, l: usize| scores[(j * batch + i) * n_l + l];

    let mut value = 0.0;
    let mut grad_vis = vec![0.0; vis.len()];
    let mut grad_sig = vec![0.0; sig.len()];
    for i in 0..batch {
        let mut max_all = f64::NEG_INFINITY;
        for j in 0..batch {
            for l in 0..n_l {
                max_all = max_all.max(score_at(j, i, l));
            }
        }
        let mut denom = 0.0;
        for j in 0..batch {
            for l in 0..n_l {
                denom += (score_at(j, i, l) - max_all).exp();
            }
        }
        let mut max_pos = f64::NEG_INFINITY;
        for l in 0..n_l {
            max_pos = max_pos.max(score_at(i, i, l));
        }
        let mut numer = 0.0;
        for l in 0..n_l {
            numer += (score_at(i, i, l) - max_pos).exp();
        }
        value += (max_all + denom.ln()) - (max_pos + numer.ln());

        for j in 0..batch {
            for l in 0..n_l {
                let a = (score_at(j, i, l) - max_all).exp() / denom;
                let b = if i == j {
                    (score_at(i, i, l) - max_pos).exp() / numer
                } else {
                    0.0
                };
                let coeff = scale * (a - b);
                let tok_base = (i * n_l + l) * dim;
                for k in 0..dim {
                    grad_vis[j * dim + k] += coeff * sig[tok_base + k];
                    grad_sig[tok_base + k] += coeff * vis[j * dim + k];
                }
            }
        }
    }
    Ok((value, grad_vis, grad_sig))
}

/// Local vision-word matching against sampled significant-token features.
///
/// The second gradient is the token-block gradient flattened to
/// `(batch * n_l) x dim`.
pub fn lvwm(vis: &FeatureMatrix, sig_tokens: &TokenBlock, scale: f64) -> Result<LossResult> {
    if vis.rows() != sig_tokens.batch() || vis.cols() != sig_tokens.dim() {
        return Err(Error::Argument(format!(
            "visual {}x{} does not match token block {}x{}x{}",
            vis.rows(),
            vis.cols(),
            sig_tokens.batch(),
            sig_tokens.n_l(),
            sig_tokens.dim()
        )));
    }
    let (value, gv, gs) = lvwm_f64(
        &vis.to_f64(),
        vis.rows(),
        vis.cols(),
        &sig_tokens.to_f64(),
        sig_tokens.n_l(),
        scale,
    )?;
    Ok(LossResult {
        value,
        grads: vec![
            FeatureMatrix::from_f64(vis.rows(), vis.cols(), &gv)?,
            FeatureMatrix::from_f64(sig_tokens.batch() * sig_tokens.n_l(), sig_tokens.dim(), &gs)?,
        ],
    })
}

/// Unweighted sum of the five objectives; omitted terms enter as zero.
pub fn total_loss(l1: f64, l2: f64, l3: f64, l4: f64, l5: f64) -> f64 {
    l1 + l2 + l3 + l4 + l5
}

/// Central-difference gradient check against a 64-bit kernel.
///
/// `f` returns the loss value and one flat gradient per input. Returns the
/// maximum over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, point: &[Vec<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Argument(format!(
            "eps must lie in [1e-6, 1e-2], got {eps}"
        )));
    }
    let (_, analytic) = f(point)?;
    if analytic.len() != point.len() {
        return Err(Error::Argument(format!(
            "kernel returned {} gradients for {} inputs",
            analytic.len(),
            point.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut probe: Vec<Vec<f64>> = point.to_vec();
    for (t, input) in point.iter().enumerate() {
        if analytic[t].len() != input.len() {
            return Err(Error::Argument(format!(
                "gradient {t} has {} coordinates, input has {}",
                analytic[t].len(),
                input.len()
            )));
        }
        for c in 0..input.len() {
            probe[t][c] = input[c] + eps;
            let plus = f(&probe)?.0;
            probe[t][c] = input[c] - eps;
            let minus = f(&probe)?.0;
            probe[t][c] = input[c];
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() || !analytic[t][c].is_finite() {
                return Err(Error::NonFinite {
                    input: t,
                    coordinate: c,
                });
            }
            let rel = (analytic[t][c] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMatrix {
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        FeatureMatrix::new(rows, cols, data).unwrap()
    }

    // Direct transcription of the per-row softmax cross-entropy, no LSE.
    fn naive_ce(logits: &FeatureMatrix, labels: &[u32]) -> f64 {
        let mut total = 0.0;
        for (q, &label) in labels.iter().enumerate() {
            let row: Vec<f64> = logits.row(q).iter().map(|&v| v as f64).collect();
            let denom: f64 = row.iter().map(|&v| v.exp()).sum();
            total -= (row[label as usize].exp() / denom).ln();
        }
        total / labels.len() as f64
    }

    #[test]
    fn ce_saturated_correct_logit_is_zero() {
        let logits = FeatureMatrix::new(1, 3, vec![1e6, 0.0, 0.0]).unwrap();
        let result = masked_ce(&logits, &[0]).unwrap();
        assert!(result.value.abs() < 1e-9, "value {}", result.value);
    }

    #[test]
    #[allow(clippy::approx_constant)] // asserting the documented 6-digit value
    fn ce_uniform_two_class_is_ln_two() {
        let logits = FeatureMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let result = masked_ce(&logits, &[0]).unwrap();
        assert!((result.value - 2.0f64.ln()).abs() < 1e-12);
        assert!((result.value - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn ce_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let rows = rng.gen_range(1..5);
            let cols = rng.gen_range(2..9);
            let logits = random_matrix(&mut rng, rows, cols);
            let labels: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..cols as u32)).collect();
            let result = masked_ce(&logits, &labels).unwrap();
            let reference = naive_ce(&logits, &labels);
            let rel = (result.value - reference).abs() / reference.abs().max(1e-12);
            assert!(rel < 1e-6, "rel {rel}");
        }
    }

    #[test]
    fn ce_empty_mask_signals() {
        let logits = FeatureMatrix::zeros(0, 4);
        assert!(matches!(masked_ce(&logits, &[]), Err(Error::EmptyMask)));
    }

    #[test]
    fn ce_label_out_of_range_is_argument_error() {
        let logits = FeatureMatrix::zeros(1, 3);
        assert!(matches!(masked_ce(&logits, &[3]), Err(Error::Argument(_))));
    }

    #[test]
    fn gvtm_free_single_pair_is_exactly_zero() {
        let v = FeatureMatrix::new(1, 4, vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let t = FeatureMatrix::new(1, 4, vec![1.0, 0.25, -0.5, 3.0]).unwrap();
        let result = gvtm_free(&v, &t, 1.0).unwrap();
        assert_eq!(result.value, 0.0);
    }

    #[test]
    fn gvtm_free_orthonormal_two_batch() {
        let v = FeatureMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let t = v.clone();
        let result = gvtm_free(&v, &t, 1.0).unwrap();
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((result.value - expected).abs() < 1e-9);
        assert!((result.value - 0.626523).abs() < 1e-6);
    }

    // Direct scalar transcription of the matching objective, raw exponentials.
    fn naive_gvtm_free(vis: &FeatureMatrix, txt: &FeatureMatrix, scale: f64) -> f64 {
        let b = vis.rows();
        let dot = |j: usize, i: usize| -> f64 {
            vis.row(j)
                .iter()
                .zip(txt.row(i))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                * scale
        };
        let mut total = 0.0;
        for i in 0..b {
            let pos = dot(i, i).exp();
            let mut neg = 0.0;
            for j in 0..b {
                if j != i {
                    neg += dot(j, i).exp();
                }
            }
            total -= (pos / (pos + neg)).ln();
        }
        total
    }

    #[test]
    fn gvtm_free_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let b = rng.gen_range(2..6);
            let d = rng.gen_range(2..8);
            let v = random_matrix(&mut rng, b, d);
            let t = random_matrix(&mut rng, b, d);
            let result = gvtm_free(&v, &t, 1.0).unwrap();
            let reference = naive_gvtm_free(&v, &t, 1.0);
            assert!((result.value - reference).abs() / reference.abs().max(1.0) < 1e-9);
        }
    }

    #[test]
    fn gvtm_free_batch_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = 5;
        let d = 6;
        let v = random_matrix(&mut rng, b, d);
        let t = random_matrix(&mut rng, b, d);
        let base = gvtm_free(&v, &t, 1.0).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |m: &FeatureMatrix| {
            let mut data = Vec::new();
            for &p in &perm {
                data.extend_from_slice(m.row(p));
            }
            FeatureMatrix::new(b, d, data).unwrap()
        };
        let shuffled = gvtm_free(&permute(&v), &permute(&t), 1.0).unwrap();
        assert!((base.value - shuffled.value).abs() < 1e-9);
        for (g, m) in [(&base.grads[0], 0usize), (&base.grads[1], 1usize)] {
            for (new_row, &old_row) in perm.iter().enumerate() {
                for k in 0..d {
                    let a = g.get(old_row, k);
                    let b_ = shuffled.grads[m].get(new_row, k);
                    assert!((a - b_).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn lvwm_batch_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (b, n_l, d) = (4, 2, 5);
        let vis = random_matrix(&mut rng, b, d);
        let sig: Vec<f32> = (0..b * n_l * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let block = TokenBlock::new(b, n_l, d, sig.clone()).unwrap();
        let base = lvwm(&vis, &block, 1.0).unwrap();

        let perm = [2usize, 0, 3, 1];
        let mut vis_p = Vec::new();
        let mut sig_p = Vec::new();
        for &p in &perm {
            vis_p.extend_from_slice(vis.row(p));
            sig_p.extend_from_slice(&sig[p * n_l * d..(p + 1) * n_l * d]);
        }
        let shuffled = lvwm(
            &FeatureMatrix::new(b, d, vis_p).unwrap(),
            &TokenBlock::new(b, n_l, d, sig_p).unwrap(),
            1.0,
        )
        .unwrap();
        assert!((base.value - shuffled.value).abs() < 1e-9);
        for (new_row, &old_row) in perm.iter().enumerate() {
            for k in 0..d {
                let a = base.grads[0].get(old_row, k);
                let b_ = shuffled.grads[0].get(new_row, k);
                assert!((a - b_).abs() < 1e-5);
            }
            for l in 0..n_l {
                for k in 0..d {
                    let a = base.grads[1].get(old_row * n_l + l, k);
                    let b_ = shuffled.grads[1].get(new_row * n_l + l, k);
                    assert!((a - b_).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn gvtm_scored_identity_two_batch() {
        let scores = FeatureMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let result = gvtm_scored(&scores).unwrap();
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((result.value - expected).abs() < 1e-9);
    }

    #[test]
    fn gvtm_scored_single_is_zero_and_nonsquare_rejected() {
        let one = FeatureMatrix::new(1, 1, vec![4.2]).unwrap();
        assert_eq!(gvtm_scored(&one).unwrap().value, 0.0);
        let rect = FeatureMatrix::zeros(2, 3);
        assert!(matches!(gvtm_scored(&rect), Err(Error::Argument(_))));
    }

    #[test]
    fn gvtm_scored_decreases_as_diagonal_grows() {
        let base = FeatureMatrix::new(3, 3, vec![0.2, 0.1, -0.3, 0.0, 0.5, 0.1, 0.4, -0.2, 0.3])
            .unwrap();
        let mut last = f64::INFINITY;
        for c in [0.0f32, 1.0, 2.0] {
            let mut shifted = base.clone();
            for i in 0..3 {
                shifted.set(i, i, base.get(i, i) + c);
            }
            let value = gvtm_scored(&shifted).unwrap().value;
            assert!(value < last, "c={c}: {value} !< {last}");
            last = value;
        }
    }

    #[test]
    fn lvwm_single_batch_is_exactly_zero() {
        let v = FeatureMatrix::new(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        for n_l in [1, 2, 5] {
            let data: Vec<f32> = (0..n_l * 3).map(|i| (i as f32) * 0.3 - 1.0).collect();
            let block = TokenBlock::new(1, n_l, 3, data).unwrap();
            let result = lvwm(&v, &block, 1.0).unwrap();
            assert_eq!(result.value, 0.0, "n_l={n_l}");
        }
    }

    #[test]
    fn lvwm_with_one_token_equals_gvtm_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let b = rng.gen_range(2..6);
            let d = rng.gen_range(2..8);
            let v = random_matrix(&mut rng, b, d);
            let t = random_matrix(&mut rng, b, d);
            let block = TokenBlock::new(b, 1, d, t.data().to_vec()).unwrap();
            let a = lvwm(&v, &block, 1.0).unwrap();
            let g = gvtm_free(&v, &t, 1.0).unwrap();
            let rel = (a.value - g.value).abs() / g.value.abs().max(1e-12);
            assert!(rel < 1e-6, "rel {rel}");
        }
    }

    // Raw triple-loop transcription of the local matching objective.
    fn naive_lvwm(vis: &FeatureMatrix, block: &TokenBlock, scale: f64) -> f64 {
        let b = vis.rows();
        let d = vis.cols();
        let dot = |j: usize, i: usize, l: usize| -> f64 {
            (0..d)
                .map(|k| vis.get(j, k) as f64 * block.token(i, l)[k] as f64)
                .sum::<f64>()
                * scale
        };
        let mut total = 0.0;
        for i in 0..b {
            let mut numer = 0.0;
            let mut denom = 0.0;
            for l in 0..block.n_l() {
                numer += dot(i, i, l).exp();
                denom += dot(i, i, l).exp();
                for j in 0..b {
                    if j != i {
                        denom += dot(j, i, l).exp();
                    }
                }
            }
            total -= (numer / denom).ln();
        }
        total
    }

    #[test]
    fn lvwm_matches_naive_triple_loop() {
        let v = FeatureMatrix::new(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let block =
            TokenBlock::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 1.0, 2.0, 1.0]).unwrap();
        let result = lvwm(&v, &block, 1.0).unwrap();
        let reference = naive_lvwm(&v, &block, 1.0);
        assert!((result.value - reference).abs() / reference.abs().max(1.0) < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let b = rng.gen_range(2..5);
            let d = rng.gen_range(2..6);
            let n_l = rng.gen_range(1..4);
            let v = random_matrix(&mut rng, b, d);
            let data: Vec<f32> = (0..b * n_l * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let block = TokenBlock::new(b, n_l, d, data).unwrap();
            let result = lvwm(&v, &block, 1.0).unwrap();
            let reference = naive_lvwm(&v, &block, 1.0);
            assert!((result.value - reference).abs() / reference.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn kernels_stay_finite_at_extreme_inputs() {
        let d = 1024;
        let b = 3;
        let big: Vec<f32> = (0..b * d)
            .map(|i| if i % 2 == 0 { 50.0 } else { -50.0 })
            .collect();
        let v = FeatureMatrix::new(b, d, big.clone()).unwrap();
        let t = FeatureMatrix::new(b, d, big.iter().map(|x| -x).collect()).unwrap();
        let r = gvtm_free(&v, &t, 1.0).unwrap();
        assert!(r.value.is_finite());
        assert!(r.grads[0].data().iter().all(|g| g.is_finite()));

        let block = TokenBlock::new(b, 2, d, [big.clone(), big.clone()].concat()).unwrap();
        let r = lvwm(&v, &block, 1.0).unwrap();
        assert!(r.value.is_finite());

        let logits = FeatureMatrix::new(1, d, big[..d].to_vec()).unwrap();
        let r = masked_ce(&logits, &[3]).unwrap();
        assert!(r.value.is_finite());

        let scores = FeatureMatrix::new(b, b, vec![50.0, -50.0, 50.0, -50.0, 50.0, -50.0, 50.0, -50.0, 50.0]).unwrap();
        assert!(gvtm_scored(&scores).unwrap().value.is_finite());
    }

    #[test]
    fn values_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let b = rng.gen_range(1..6);
            let d = rng.gen_range(1..8);
            let v = random_matrix(&mut rng, b, d);
            let t = random_matrix(&mut rng, b, d);
            assert!(gvtm_free(&v, &t, 1.0).unwrap().value >= -1e-9);
            let s = random_matrix(&mut rng, b, b);
            assert!(gvtm_scored(&s).unwrap().value >= -1e-9);
            let n_l = rng.gen_range(1..4);
            let data: Vec<f32> = (0..b * n_l * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let block = TokenBlock::new(b, n_l, d, data).unwrap();
            assert!(lvwm(&v, &block, 1.0).unwrap().value >= -1e-9);
        }
    }

    #[test]
    fn total_loss_is_plain_sum() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0), 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 4.0, 5.0), 15.0);
        // An omitted term (empty mask) enters as zero.
        assert_eq!(total_loss(0.0, 2.0, 3.0, 4.0, 5.0), 14.0);
    }

    #[test]
    fn grad_check_validates_eps_domain() {
        let f = |_: &[Vec<f64>]| Ok((0.0, vec![vec![]]));
        assert!(matches!(
            grad_check(f, &[vec![]], 1e-7),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            grad_check(f, &[vec![]], 0.5),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn grad_check_passes_for_all_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = 4;
        let d = 8;
        let vis: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let txt: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let err = grad_check(
            |p| {
                let (v, gv, gt) = gvtm_free_f64(&p[0], &p[1], b, d, 1.0)?;
                Ok((v, vec![gv, gt]))
            },
            &[vis.clone(), txt],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "gvtm_free err {err}");

        let scores: Vec<f64> = (0..b * b).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let err = grad_check(
            |p| {
                let (v, g) = gvtm_scored_f64(&p[0], b)?;
                Ok((v, vec![g]))
            },
            &[scores],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "gvtm_scored err {err}");

        let n_l = 3;
        let sig: Vec<f64> = (0..b * n_l * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let err = grad_check(
            |p| {
                let (v, gv, gs) = lvwm_f64(&p[0], b, d, &p[1], n_l, 1.0)?;
                Ok((v, vec![gv, gs]))
            },
            &[vis.clone(), sig],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "lvwm err {err}");

        let rows = 3;
        let cols = 6;
        let logits: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let labels: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..cols as u32)).collect();
        let err = grad_check(
            |p| {
                let (v, g) = masked_ce_f64(&p[0], rows, cols, &labels)?;
                Ok((v, vec![g]))
            },
            &[logits],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "masked_ce err {err}");
    }

    #[test]
    fn grad_check_reports_non_finite_with_coordinate() {
        let f = |p: &[Vec<f64>]| {
            let x = p[0][0];
            let v = if x > 1.0 { f64::INFINITY } else { x * x };
            Ok((v, vec![vec![2.0 * p[0][0]]]))
        };
        match grad_check(f, &[vec![1.0]], 1e-3) {
            Err(Error::NonFinite { input, coordinate }) => {
                assert_eq!(input, 0);
                assert_eq!(coordinate, 0);
            }
            other => panic!("expected non-finite report, got {other:?}"),
        }
    }

    #[test]
    fn matrix_constructor_rejects_bad_shapes_and_nan() {
        assert!(matches!(
            FeatureMatrix::new(2, 2, vec![0.0; 3]),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            FeatureMatrix::new(1, 2, vec![0.0, f32::NAN]),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            TokenBlock::new(1, 0, 2, vec![]),
            Err(Error::Argument(_))
        ));
    }
}
