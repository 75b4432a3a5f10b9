//! Two-layer MLP scorer for the parameter-employed matching objective.
//!
//! One hidden layer of the input width with a tanh nonlinearity, mapping
//! each row of pair features to a scalar score. Forward and
//! vector-Jacobian-product are available in 64-bit for gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::FeatureMatrix;

/// Parameters of the scoring MLP: `w1` is `dim x dim` (row = hidden unit),
/// `w2` maps the hidden layer to the scalar output.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: FeatureMatrix,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: f32,
}

impl MlpParams {
    /// Deterministic random initialization.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.2).expect("valid stddev");
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
        };
        MlpParams {
            w1: FeatureMatrix::new(dim, dim, draw(dim * dim)).expect("finite init"),
            b1: vec![0.0; dim],
            w2: draw(dim),
            b2: 0.0,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        MlpParams {
            w1: FeatureMatrix::zeros(dim, dim),
            b1: vec![0.0; dim],
            w2: vec![0.0; dim],
            b2: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.w1.rows() != dim
            || self.w1.cols() != dim
            || self.b1.len() != dim
            || self.w2.len() != dim
        {
            return Err(Error::Argument(format!(
                "MLP parameter shapes inconsistent with input width {dim}"
            )));
        }
        Ok(())
    }
}

/// 64-bit forward pass: one score per input row.
pub fn mlp_forward_f64(
    x: &[f64],
    rows: usize,
    dim: usize,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: f64,
) -> Result<Vec<f64>> {
    if x.len() != rows * dim || w1.len() != dim * dim || b1.len() != dim || w2.len() != dim {
        return Err(Error::Argument("MLP shape mismatch".to_string()));
    }
    let mut scores = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mut score = b2;
        for h in 0..dim {
            let pre: f64 = w1[h * dim..(h + 1) * dim]
                .iter()
                .zip(xr)
                .map(|(w, v)| w * v)
                .sum::<f64>()
                + b1[h];
            score += w2[h] * pre.tanh();
        }
        scores.push(score);
    }
    Ok(scores)
}

/// Gradients for (x, w1, b1, w2, b2) in that order.
pub type MlpVjp = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64);

/// 64-bit vector-Jacobian product for `upstream` gradients on the scores.
#[allow(clippy::too_many_arguments)]
pub fn mlp_vjp_f64(
    x: &[f64],
    rows: usize,
    dim: usize,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    _b2: f64,
    upstream: &[f64],
) -> Result<MlpVjp> {
    if upstream.len() != rows {
        return Err(Error::Argument(format!(
            "{rows} rows but {} upstream gradients",
            upstream.len()
        )));
    }
    let mut grad_x = vec![0.0; rows * dim];
    let mut grad_w1 = vec![0.0; dim * dim];
    let mut grad_b1 = vec![0.0; dim];
    let mut grad_w2 = vec![0.0; dim];
    let mut grad_b2 = 0.0;
    for r in 0..rows {
        let u = upstream[r];
        grad_b2 += u;
        let xr = &x[r * dim..(r + 1) * dim];
        for h in 0..dim {
            let w1_row = &w1[h * dim..(h + 1) * dim];
            let pre: f64 = w1_row.iter().zip(xr).map(|(w, v)| w * v).sum::<f64>() + b1[h];
            let act = pre.tanh();
            grad_w2[h] += u * act;
            let dh = u * w2[h] * (1.0 - act * act);
            grad_b1[h] += dh;
            for k in 0..dim {
                grad_w1[h * dim + k] += dh * xr[k];
                grad_x[r * dim + k] += dh * w1_row[k];
            }
        }
    }
    Ok((grad_x, grad_w1, grad_b1, grad_w2, grad_b2))
}

/// Score each row of `pair_features`, returning an `n x 1` matrix.
pub fn mlp_score(pair_features: &FeatureMatrix, params: &MlpParams) -> Result<FeatureMatrix> {
    params.check(pair_features.cols())?;
    let dim = pair_features.cols();
    let scores = mlp_forward_f64(
        &pair_features.to_f64(),
        pair_features.rows(),
        dim,
        &params.w1.to_f64(),
        &params.b1.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        &params.w2.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        params.b2 as f64,
    )?;
    FeatureMatrix::from_f64(pair_features.rows(), 1, &scores)
}

/// Gradients of a scalar objective through [`mlp_score`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub input: FeatureMatrix,
    pub w1: FeatureMatrix,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: f32,
}

/// Forward pass plus backward pass for `upstream` gradients on the scores.
pub fn mlp_score_with_grad(
    pair_features: &FeatureMatrix,
    params: &MlpParams,
    upstream: &[f64],
) -> Result<(FeatureMatrix, MlpGrads)> {
    params.check(pair_features.cols())?;
    let rows = pair_features.rows();
    let dim = pair_features.cols();
    let x = pair_features.to_f64();
    let w1 = params.w1.to_f64();
    let b1: Vec<f64> = params.b1.iter().map(|&v| v as f64).collect();
    let w2: Vec<f64> = params.w2.iter().map(|&v| v as f64).collect();
    let scores = mlp_forward_f64(&x, rows, dim, &w1, &b1, &w2, params.b2 as f64)?;
    let (gx, gw1, gb1, gw2, gb2) =
        mlp_vjp_f64(&x, rows, dim, &w1, &b1, &w2, params.b2 as f64, upstream)?;
    Ok((
        FeatureMatrix::from_f64(rows, 1, &scores)?,
        MlpGrads {
            input: FeatureMatrix::from_f64(rows, dim, &gx)?,
            w1: FeatureMatrix::from_f64(dim, dim, &gw1)?,
            b1: gb1.iter().map(|&v| v as f32).collect(),
            w2: gw2.iter().map(|&v| v as f32).collect(),
            b2: gb2 as f32,
        },
    ))
}
