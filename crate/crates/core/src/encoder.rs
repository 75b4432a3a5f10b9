//! Forward-only shared-encoder skeleton and parameter accounting.
//!
//! Two wiring variants of the same BERT-type stack: the shared variant runs
//! one stack for both the text pass and the cross-modal pass, while the
//! three-encoder variant adds a separate (typically 3-layer) cross-modal
//! stack. Visual tokens are appended to the embedded text with zero position
//! embeddings and segment id 1. No backpropagation: the testable claims at
//! desk scale are parameter sharing, shape contracts, determinism, and the
//! parameter-count reduction.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::FeatureMatrix;
use crate::tokenizer::TokenSeq;

const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One shared stack serves the text and cross-modal paths.
    Snp,
    /// Separate text and cross-modal stacks.
    P3e,
}

/// Architecture description for both variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub variant: Variant,
    /// Depth of the separate cross-modal stack (three-encoder variant only).
    pub cross_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            vocab_size: 30522,
            max_positions: 512,
            variant: Variant::Snp,
            cross_layers: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::Config(
                "hidden, heads, and layers must be positive".to_string(),
            ));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.variant == Variant::P3e && self.cross_layers == 0 {
            return Err(Error::Config(
                "three-encoder variant requires at least one cross-modal layer".to_string(),
            ));
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: EncoderConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(config)
    }
}

/// One transformer block: self-attention plus feed-forward, post-layernorm.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: FeatureMatrix,
    pub bq: Vec<f32>,
    pub wk: FeatureMatrix,
    pub bk: Vec<f32>,
    pub wv: FeatureMatrix,
    pub bv: Vec<f32>,
    pub wo: FeatureMatrix,
    pub bo: Vec<f32>,
    pub ln1_gamma: Vec<f32>,
    pub ln1_beta: Vec<f32>,
    pub ffn_w1: FeatureMatrix,
    pub ffn_b1: Vec<f32>,
    pub ffn_w2: FeatureMatrix,
    pub ffn_b2: Vec<f32>,
    pub ln2_gamma: Vec<f32>,
    pub ln2_beta: Vec<f32>,
}

impl LayerParams {
    fn element_count(&self) -> u64 {
        (self.wq.data().len()
            + self.bq.len()
            + self.wk.data().len()
            + self.bk.len()
            + self.wv.data().len()
            + self.bv.len()
            + self.wo.data().len()
            + self.bo.len()
            + self.ln1_gamma.len()
            + self.ln1_beta.len()
            + self.ffn_w1.data().len()
            + self.ffn_b1.len()
            + self.ffn_w2.data().len()
            + self.ffn_b2.len()
            + self.ln2_gamma.len()
            + self.ln2_beta.len()) as u64
    }
}

#[derive(Debug, Clone)]
pub struct StackParams {
    pub layers: Vec<LayerParams>,
}

impl StackParams {
    fn element_count(&self) -> u64 {
        self.layers.iter().map(|l| l.element_count()).sum()
    }
}

/// Embedding tables plus one or two transformer stacks.
///
/// For the shared variant `cross_stack` is `None` and both forward paths run
/// `stack`, so there is exactly one set of stack tensors by construction.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_emb: FeatureMatrix,
    pub pos_emb: FeatureMatrix,
    pub seg_emb: FeatureMatrix,
    pub emb_ln_gamma: Vec<f32>,
    pub emb_ln_beta: Vec<f32>,
    pub stack: StackParams,
    pub cross_stack: Option<StackParams>,
    pub seed: u64,
}

/// Visual tokens entering the cross-modal pass.
///
/// `zero_position` records that visual tokens take no position embedding;
/// the forward pass embeds them that way unconditionally.
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    pub tokens: FeatureMatrix,
    pub zero_position: bool,
}

impl VisualFeatures {
    pub fn new(tokens: FeatureMatrix) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::Argument(
                "visual features need at least one token".to_string(),
            ));
        }
        Ok(VisualFeatures {
            tokens,
            zero_position: true,
        })
    }

    pub fn count(&self) -> usize {
        self.tokens.rows()
    }
}

fn draw_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMatrix {
    let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| normal.sample(rng) as f32)
        .collect();
    FeatureMatrix::new(rows, cols, data).expect("finite init")
}

fn draw_stack(rng: &mut ChaCha8Rng, layers: usize, d: usize, ffn: usize) -> StackParams {
    let layers = (0..layers)
        .map(|_| LayerParams {
            wq: draw_matrix(rng, d, d),
            bq: vec![0.0; d],
            wk: draw_matrix(rng, d, d),
            bk: vec![0.0; d],
            wv: draw_matrix(rng, d, d),
            bv: vec![0.0; d],
            wo: draw_matrix(rng, d, d),
            bo: vec![0.0; d],
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            ffn_w1: draw_matrix(rng, ffn, d),
            ffn_b1: vec![0.0; ffn],
            ffn_w2: draw_matrix(rng, d, ffn),
            ffn_b2: vec![0.0; d],
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
        })
        .collect();
    StackParams { layers }
}

/// Deterministic pseudo-random initialization of all tensors.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.hidden;

    let token_emb = draw_matrix(&mut rng, config.vocab_size, d);
    let pos_emb = draw_matrix(&mut rng, config.max_positions, d);
    let seg_emb = draw_matrix(&mut rng, 2, d);
    let stack = draw_stack(&mut rng, config.layers, d, config.ffn);
    let cross_stack = match config.variant {
        Variant::Snp => None,
        Variant::P3e => Some(draw_stack(&mut rng, config.cross_layers, d, config.ffn)),
    };
    Ok(EncoderParams {
        config: *config,
        token_emb,
        pos_emb,
        seg_emb,
        emb_ln_gamma: vec![1.0; d],
        emb_ln_beta: vec![0.0; d],
        stack,
        cross_stack,
        seed,
    })
}

impl EncoderParams {
    /// Enumerated tensor-element counts: (embedder, text stack, cross stack).
    pub fn element_counts(&self) -> (u64, u64, u64) {
        let embedder = (self.token_emb.data().len()
            + self.pos_emb.data().len()
            + self.seg_emb.data().len()
            + self.emb_ln_gamma.len()
            + self.emb_ln_beta.len()) as u64;
        let text = self.stack.element_count();
        let cross = self.cross_stack.as_ref().map_or(0, |s| s.element_count());
        (embedder, text, cross)
    }
}

fn layer_norm(row: &mut [f64], gamma: &[f32], beta: &[f32]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (i, v) in row.iter_mut().enumerate() {
        *v = (*v - mean) * inv * gamma[i] as f64 + beta[i] as f64;
    }
}

fn gelu(x: f64) -> f64 {
    // tanh approximation; keeps the forward pass on std-only math.
    0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
}

/// y[r] = W * x[r] + b for row-major W of `out x in`.
fn affine(x: &[f64], rows: usize, w: &FeatureMatrix, b: &[f32]) -> Vec<f64> {
    let (out_dim, in_dim) = (w.rows(), w.cols());
    let wdata = w.data();
    let mut y = vec![0.0; rows * out_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let mut acc = b[o] as f64;
            let wrow = &wdata[o * in_dim..(o + 1) * in_dim];
            for k in 0..in_dim {
                acc += wrow[k] as f64 * xr[k];
            }
            y[r * out_dim + o] = acc;
        }
    }
    y
}

fn run_stack(stack: &StackParams, mut x: Vec<f64>, rows: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for layer in &stack.layers {
        let q = affine(&x, rows, &layer.wq, &layer.bq);
        let k = affine(&x, rows, &layer.wk, &layer.bk);
        let v = affine(&x, rows, &layer.wv, &layer.bv);

        let mut ctx = vec![0.0; rows * d];
        let mut scores = vec![0.0; rows];
        for h in 0..heads {
            let off = h * dh;
            for r in 0..rows {
                let qr = &q[r * d + off..r * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for (s, score) in scores.iter_mut().enumerate() {
                    let ks = &k[s * d + off..s * d + off + dh];
                    *score = scale * qr.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(*score);
                }
                let mut denom = 0.0;
                for score in scores.iter_mut() {
                    *score = (*score - max).exp();
                    denom += *score;
                }
                for (s, score) in scores.iter().enumerate() {
                    let p = score / denom;
                    let vs = &v[s * d + off..s * d + off + dh];
                    for i in 0..dh {
                        ctx[r * d + off + i] += p * vs[i];
                    }
                }
            }
        }

        let attn_out = affine(&ctx, rows, &layer.wo, &layer.bo);
        for r in 0..rows {
            let row = &mut x[r * d..(r + 1) * d];
            for i in 0..d {
                row[i] += attn_out[r * d + i];
            }
            layer_norm(row, &layer.ln1_gamma, &layer.ln1_beta);
        }

        let mut hidden = affine(&x, rows, &layer.ffn_w1, &layer.ffn_b1);
        for v in hidden.iter_mut() {
            *v = gelu(*v);
        }
        let ffn_out = affine(&hidden, rows, &layer.ffn_w2, &layer.ffn_b2);
        for r in 0..rows {
            let row = &mut x[r * d..(r + 1) * d];
            for i in 0..d {
                row[i] += ffn_out[r * d + i];
            }
            layer_norm(row, &layer.ln2_gamma, &layer.ln2_beta);
        }
    }
    x
}

fn embed_text(params: &EncoderParams, seq: &TokenSeq) -> Result<Vec<f64>> {
    let d = params.config.hidden;
    if seq.len() > params.config.max_positions {
        return Err(Error::Argument(format!(
            "sequence length {} exceeds max positions {}",
            seq.len(),
            params.config.max_positions
        )));
    }
    let mut x = vec![0.0; seq.len() * d];
    for (pos, &id) in seq.ids.iter().enumerate() {
        if id as usize >= params.config.vocab_size {
            return Err(Error::Argument(format!(
                "token id {id} out of range for vocab size {}",
                params.config.vocab_size
            )));
        }
        let tok = params.token_emb.row(id as usize);
        let pe = params.pos_emb.row(pos);
        let seg = params.seg_emb.row(0);
        let row = &mut x[pos * d..(pos + 1) * d];
        for i in 0..d {
            row[i] = tok[i] as f64 + pe[i] as f64 + seg[i] as f64;
        }
        layer_norm(row, &params.emb_ln_gamma, &params.emb_ln_beta);
    }
    Ok(x)
}

/// Text pass: embed, run the (shared) stack, return all token states.
pub fn forward_text(params: &EncoderParams, seq: &TokenSeq) -> Result<FeatureMatrix> {
    let d = params.config.hidden;
    let x = embed_text(params, seq)?;
    let y = run_stack(&params.stack, x, seq.len(), d, params.config.heads);
    FeatureMatrix::from_f64(seq.len(), d, &y)
}

/// Cross-modal pass: embedded text concatenated with visual tokens.
///
/// Visual rows take zero position embeddings and segment id 1, then the
/// shared stack (shared variant) or the separate cross stack (three-encoder
/// variant) runs over the concatenation. Row 0 is the cross-modal [CLS]
/// state.
pub fn forward_crossmodal(
    params: &EncoderParams,
    seq: &TokenSeq,
    visual: &VisualFeatures,
) -> Result<FeatureMatrix> {
    let d = params.config.hidden;
    if visual.tokens.cols() != d {
        return Err(Error::Argument(format!(
            "visual dimension {} does not match hidden width {d}",
            visual.tokens.cols()
        )));
    }
    let n_t = seq.len();
    let n_v = visual.count();
    let mut x = embed_text(params, seq)?;
    x.resize((n_t + n_v) * d, 0.0);
    for r in 0..n_v {
        let vr = visual.tokens.row(r);
        let seg = params.seg_emb.row(1);
        let row = &mut x[(n_t + r) * d..(n_t + r + 1) * d];
        for i in 0..d {
            row[i] = vr[i] as f64 + seg[i] as f64;
        }
        layer_norm(row, &params.emb_ln_gamma, &params.emb_ln_beta);
    }
    let stack = params.cross_stack.as_ref().unwrap_or(&params.stack);
    let y = run_stack(stack, x, n_t + n_v, d, params.config.heads);
    FeatureMatrix::from_f64(n_t + n_v, d, &y)
}

/// Itemized parameter counts under the documented counting model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamReport {
    pub variant: Variant,
    pub visual: u64,
    pub embedder: u64,
    pub text_stack: u64,
    pub cross_stack: u64,
    pub heads: u64,
    pub total: u64,
    pub assumptions: Vec<String>,
}

fn per_layer_count(d: u64, ffn: u64) -> u64 {
    // Attention q/k/v/o with biases, two layernorms, two FFN affines.
    4 * d * d + 4 * d + 2 * d + d * ffn + ffn + ffn * d + d + 2 * d
}

/// Closed-form parameter accounting for one variant.
///
/// The stack and embedder items equal the enumerated tensor-element totals
/// of [`init_params`]. Head-side components (pooler, masked-token prediction
/// head with an untied vocabulary decoder, matching MLP) follow the
/// documented assumptions; the separate cross-modal path duplicates the
/// pooler and prediction head while the shared variant keeps one of each.
/// `cross_layers == 0` is accepted as the degenerate case equal to the
/// shared variant.
pub fn count_params(config: &EncoderConfig, visual_constant: u64) -> ParamReport {
    let d = config.hidden as u64;
    let v = config.vocab_size as u64;
    let p = config.max_positions as u64;
    let ffn = config.ffn as u64;

    let embedder = v * d + p * d + 2 * d + 2 * d;
    let text_stack = config.layers as u64 * per_layer_count(d, ffn);
    let separate_cross = config.variant == Variant::P3e && config.cross_layers > 0;
    let cross_stack = if separate_cross {
        config.cross_layers as u64 * per_layer_count(d, ffn)
    } else {
        0
    };

    let pooler = d * d + d;
    let mlm_head = (d * d + d) + 2 * d + v * d + v;
    let match_mlp = (d * d + d) + (d + 1);
    let paths = if separate_cross { 2 } else { 1 };
    let heads = paths * (pooler + mlm_head) + match_mlp;

    let total = visual_constant + embedder + text_stack + cross_stack + heads;
    ParamReport {
        variant: config.variant,
        visual: visual_constant,
        embedder,
        text_stack,
        cross_stack,
        heads,
        total,
        assumptions: vec![
            "visual encoder enters as a fixed external constant, not enumerated".to_string(),
            "each prediction path carries a pooler and a masked-token head with an untied vocabulary decoder".to_string(),
            format!(
                "the separate cross-modal path ({} layers) duplicates the pooler and prediction head; the shared variant keeps one of each",
                config.cross_layers
            ),
            "one matching MLP (two affine layers, hidden width d) is counted for either variant".to_string(),
        ],
    }
}

/// Relative parameter reduction of `smaller` against `larger`.
pub fn reduction_fraction(larger: &ParamReport, smaller: &ParamReport) -> f64 {
    (larger.total as f64 - smaller.total as f64) / larger.total as f64
}

/// Fixed count for a ResNet-50-class visual backbone.
pub const R50_VISUAL_PARAMS: u64 = 25_600_000;
