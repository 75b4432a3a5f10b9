//! Synthetic paired corpus and toy alignment loop.
//!
//! Captions come from a small template grammar over a fixed concept
//! inventory; the paired visual vector is the multi-hot concept indicator
//! plus seeded noise. Two affine encoders (visual and bag-of-tokens) are
//! trained on the matching objectives with analytic gradients from the loss
//! kernels, and retrieval is scored with recall@K and median rank. Linear
//! encoders keep the run deterministic and fast while still exercising the
//! full mining -> sampling -> loss -> gradient path.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{gvtm_free, lvwm, FeatureMatrix, TokenBlock};
use crate::miner::{
    build_chosen_list, count_significant, lexicon_pos_tag, threshold_topk, ChosenList, PosCorpus,
    PosRecord, PosTag, SignificantVocab,
};
use crate::planner::sample_lvwm;
use crate::tokenizer::{split_words, wordpiece_tokenize, TokenSeq, Vocab};

const ADJECTIVES: [&str; 8] = [
    "red", "blue", "green", "yellow", "small", "large", "shiny", "fluffy",
];
const NOUNS: [&str; 10] = [
    "dog", "cat", "boy", "girl", "plane", "car", "bird", "horse", "boat", "train",
];
const VERBS: [&str; 8] = [
    "runs", "jumps", "plays", "flies", "sleeps", "swims", "rides", "spins",
];
const NOISE: f64 = 0.1;
const FILLERS: [(&str, PosTag); 8] = [
    ("a", PosTag::Det),
    ("the", PosTag::Det),
    ("is", PosTag::Aux),
    ("on", PosTag::Adp),
    ("in", PosTag::Adp),
    ("near", PosTag::Adp),
    ("with", PosTag::Adp),
    ("slowly", PosTag::Adv),
];

/// The concept inventory: adjectives, then nouns, then verbs.
/// Concept id = index into this list; the visual vector has one dimension
/// per concept.
pub fn concept_words() -> Vec<&'static str> {
    ADJECTIVES
        .iter()
        .chain(NOUNS.iter())
        .chain(VERBS.iter())
        .copied()
        .collect()
}

/// Dimension of the raw visual vectors.
pub fn visual_dim() -> usize {
    ADJECTIVES.len() + NOUNS.len() + VERBS.len()
}

/// A vocabulary covering the synthetic grammar (whole words only).
pub fn toy_vocab() -> Vocab {
    let mut tokens: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend(FILLERS.iter().map(|(w, _)| w.to_string()));
    tokens.extend(concept_words().iter().map(|w| w.to_string()));
    Vocab::from_tokens(tokens).expect("toy vocabulary is valid")
}

/// Ground-truth tags for every word the grammar can produce.
pub fn toy_lexicon() -> HashMap<String, PosTag> {
    let mut lexicon = HashMap::new();
    for w in ADJECTIVES {
        lexicon.insert(w.to_string(), PosTag::Adj);
    }
    for w in NOUNS {
        lexicon.insert(w.to_string(), PosTag::Noun);
    }
    for w in VERBS {
        lexicon.insert(w.to_string(), PosTag::Verb);
    }
    for (w, tag) in FILLERS {
        lexicon.insert(w.to_string(), tag);
    }
    lexicon
}

/// One synthetic image-caption pair.
#[derive(Debug, Clone, Serialize)]
pub struct SynthRecord {
    pub id: String,
    pub caption: String,
    #[serde(skip)]
    pub visual: Vec<f32>,
    pub concepts: Vec<usize>,
}

/// Generate a deterministic synthetic corpus.
///
/// Every significant word in a caption corresponds to exactly one active
/// dimension of the visual vector, on top of seeded Gaussian noise.
pub fn gen_corpus(seed: u64, size: usize, vocab: &Vocab) -> Result<Vec<SynthRecord>> {
    if size < 2 {
        return Err(Error::Argument("corpus size must be at least 2".to_string()));
    }
    for word in concept_words() {
        if vocab.id_of(word).is_none() {
            return Err(Error::Config(format!(
                "vocabulary lacks concept word {word:?}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, NOISE).expect("valid stddev");
    let n_adj = ADJECTIVES.len();
    let n_noun = NOUNS.len();
    let dim = visual_dim();

    let mut records = Vec::with_capacity(size);
    for i in 0..size {
        let adj = rng.gen_range(0..n_adj);
        let noun = rng.gen_range(0..n_noun);
        let verb = rng.gen_range(0..VERBS.len());
        let template = rng.gen_range(0..3);
        let (caption, mut concepts) = match template {
            0 => (
                format!("a {} {} {}", ADJECTIVES[adj], NOUNS[noun], VERBS[verb]),
                vec![adj, n_adj + noun, n_adj + n_noun + verb],
            ),
            1 => {
                let mut noun2 = rng.gen_range(0..n_noun);
                while noun2 == noun {
                    noun2 = rng.gen_range(0..n_noun);
                }
                (
                    format!(
                        "the {} {} {} near the {}",
                        ADJECTIVES[adj], NOUNS[noun], VERBS[verb], NOUNS[noun2]
                    ),
                    vec![adj, n_adj + noun, n_adj + n_noun + verb, n_adj + noun2],
                )
            }
            _ => {
                let mut adj2 = rng.gen_range(0..n_adj);
                while adj2 == adj {
                    adj2 = rng.gen_range(0..n_adj);
                }
                let mut noun2 = rng.gen_range(0..n_noun);
                while noun2 == noun {
                    noun2 = rng.gen_range(0..n_noun);
                }
                (
                    format!(
                        "a {} {} {} with the {} {}",
                        ADJECTIVES[adj], NOUNS[noun], VERBS[verb], ADJECTIVES[adj2], NOUNS[noun2]
                    ),
                    vec![
                        adj,
                        n_adj + noun,
                        n_adj + n_noun + verb,
                        adj2,
                        n_adj + noun2,
                    ],
                )
            }
        };
        concepts.sort_unstable();
        // Pad with filler words at random positions: they dilute pooled
        // bag-of-token features without touching the concept content.
        let mut words: Vec<String> = caption.split(' ').map(|w| w.to_string()).collect();
        for _ in 0..rng.gen_range(2..=6) {
            let (filler, _) = FILLERS[rng.gen_range(0..FILLERS.len())];
            let at = rng.gen_range(0..=words.len());
            words.insert(at, filler.to_string());
        }
        let caption = words.join(" ");
        let mut visual: Vec<f32> = (0..dim).map(|_| noise.sample(&mut rng) as f32).collect();
        for &c in &concepts {
            visual[c] += 1.0;
        }
        records.push(SynthRecord {
            id: format!("synth-{i:05}"),
            caption,
            visual,
            concepts,
        });
    }
    Ok(records)
}

/// POS-tag synthetic captions with the built-in lexicon.
pub fn tag_corpus(records: &[SynthRecord]) -> PosCorpus {
    let lexicon = toy_lexicon();
    let tagged = records
        .iter()
        .map(|r| {
            let words = split_words(&r.caption);
            let tags = lexicon_pos_tag(&words, &lexicon);
            PosRecord {
                id: r.id.clone(),
                words,
                tags,
            }
        })
        .collect();
    PosCorpus::new(tagged).expect("tagger emits one tag per word")
}

/// Which matching objectives the toy loop optimizes.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSet {
    /// Parameter-free global matching over pooled features.
    pub global_match: bool,
    /// Local matching against sampled significant-token features.
    pub local_match: bool,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Width of the shared embedding space.
    pub dim: usize,
    pub n_l: usize,
    pub k_ss: usize,
    pub max_len: usize,
    /// Similarity scale inside the matching objectives (toy-harness knob;
    /// the kernels themselves default to raw dot products).
    pub scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            lr: 0.001,
            batch_size: 64,
            dim: 32,
            n_l: 3,
            k_ss: 2000,
            max_len: 16,
            scale: 4.0,
            seed: 0,
        }
    }
}

/// Trained affine encoders: visual `raw -> dim`, textual `bag-of-tokens -> dim`.
#[derive(Debug, Clone)]
pub struct ToyEncoders {
    pub visual_w: FeatureMatrix,
    pub visual_b: Vec<f32>,
    pub text_w: FeatureMatrix,
    pub text_b: Vec<f32>,
}

impl ToyEncoders {
    fn init(dim: usize, d_raw: usize, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0f64, NOISE).expect("valid stddev");
        let mut draw = |rows: usize, cols: usize| {
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| normal.sample(rng) as f32)
                .collect();
            FeatureMatrix::new(rows, cols, data).expect("finite init")
        };
        ToyEncoders {
            visual_w: draw(dim, d_raw),
            visual_b: vec![0.0; dim],
            text_w: draw(dim, vocab_size),
            text_b: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.visual_w.rows()
    }

    pub fn encode_visual(&self, raw: &[f32]) -> Vec<f32> {
        let dim = self.dim();
        let d_raw = self.visual_w.cols();
        (0..dim)
            .map(|o| {
                let row = self.visual_w.row(o);
                let mut acc = self.visual_b[o] as f64;
                for k in 0..d_raw {
                    acc += row[k] as f64 * raw[k] as f64;
                }
                acc as f32
            })
            .collect()
    }

    /// Pooled sentence feature: affine map of the mean token indicator.
    ///
    /// Mean pooling dilutes each concept's contribution by caption length,
    /// which is the handicap of sentence-level features that word-level
    /// matching sidesteps.
    pub fn encode_text_bag(&self, seq: &TokenSeq) -> Vec<f32> {
        let dim = self.dim();
        let content = seq.content_positions();
        let mut out: Vec<f64> = vec![0.0; dim];
        for &pos in &content {
            let id = seq.ids[pos] as usize;
            for (o, acc) in out.iter_mut().enumerate() {
                *acc += self.text_w.get(o, id) as f64;
            }
        }
        let scale = 1.0 / content.len().max(1) as f64;
        (0..dim)
            .map(|o| (out[o] * scale + self.text_b[o] as f64) as f32)
            .collect()
    }

    /// Feature of one token: the matching column of the text map plus bias.
    pub fn encode_token(&self, id: u32) -> Vec<f32> {
        (0..self.dim())
            .map(|o| self.text_w.get(o, id as usize) + self.text_b[o])
            .collect()
    }
}

/// Batch-encode records into paired visual/text feature matrices.
pub fn encode_pairs(
    records: &[SynthRecord],
    seqs: &[TokenSeq],
    encoders: &ToyEncoders,
) -> (FeatureMatrix, FeatureMatrix) {
    let dim = encoders.dim();
    let mut vis = Vec::with_capacity(records.len() * dim);
    let mut txt = Vec::with_capacity(records.len() * dim);
    for (rec, seq) in records.iter().zip(seqs) {
        vis.extend(encoders.encode_visual(&rec.visual));
        txt.extend(encoders.encode_text_bag(seq));
    }
    (
        FeatureMatrix::new(records.len(), dim, vis).expect("finite encodings"),
        FeatureMatrix::new(records.len(), dim, txt).expect("finite encodings"),
    )
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub encoders: ToyEncoders,
    pub loss_curve: Vec<f64>,
    pub significant: SignificantVocab,
}

/// Train the toy encoders on the selected matching objectives.
///
/// Significant tokens are mined from the corpus itself (lexicon tags), the
/// loop is single-threaded, and all randomness flows from `cfg.seed`, so a
/// fixed seed reproduces the loss curve exactly. Diverging (non-finite)
/// losses abort with the offending step index.
pub fn train_toy(
    records: &[SynthRecord],
    vocab: &Vocab,
    objectives: ObjectiveSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !objectives.global_match && !objectives.local_match {
        return Err(Error::Argument(
            "at least one objective must be selected".to_string(),
        ));
    }
    if cfg.batch_size == 0 || cfg.batch_size > records.len() {
        return Err(Error::Argument(format!(
            "batch size {} must lie in 1..={}",
            cfg.batch_size,
            records.len()
        )));
    }

    let seqs: Vec<TokenSeq> = records
        .iter()
        .map(|r| wordpiece_tokenize(&r.caption, vocab, cfg.max_len))
        .collect::<Result<_>>()?;

    let significant = threshold_topk(&count_significant(&tag_corpus(records), vocab), cfg.k_ss)?;
    let chosen: Vec<ChosenList> = seqs
        .iter()
        .map(|seq| build_chosen_list(seq, &significant, vocab))
        .collect::<Result<_>>()?;

    let dim = cfg.dim;
    let d_raw = records[0].visual.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoders = ToyEncoders::init(dim, d_raw, vocab.len(), &mut rng);

    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut cursor = records.len(); // force an initial shuffle
    let mut loss_curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<usize> = order[cursor..cursor + cfg.batch_size].to_vec();
        cursor += cfg.batch_size;

        // Forward: per-record features for this batch.
        let vis_rows: Vec<Vec<f32>> = batch
            .iter()
            .map(|&r| encoders.encode_visual(&records[r].visual))
            .collect();
        let txt_rows: Vec<Vec<f32>> = batch
            .iter()
            .map(|&r| encoders.encode_text_bag(&seqs[r]))
            .collect();

        let mut total = 0.0;
        let mut grad_vis = vec![0.0f64; batch.len() * dim];
        // Text-side gradients chain straight into the affine parameters.
        let mut grad_text_w = vec![0.0f64; dim * vocab.len()];
        let mut grad_text_b = vec![0.0f64; dim];

        // Exploding parameters show up as non-finite features before the
        // loss itself does; both count as divergence at this step.
        let diverged = |_: Error| Error::Divergence { step };

        if objectives.global_match {
            let vis = FeatureMatrix::new(batch.len(), dim, vis_rows.concat()).map_err(diverged)?;
            let txt = FeatureMatrix::new(batch.len(), dim, txt_rows.concat()).map_err(diverged)?;
            let result = gvtm_free(&vis, &txt, cfg.scale)?;
            total += result.value;
            for (i, g) in result.grads[0].data().iter().enumerate() {
                grad_vis[i] += *g as f64;
            }
            // d txt_row[b] / d text_w[o][id] = count of id in the bag / len.
            for (b, &r) in batch.iter().enumerate() {
                let g_row = result.grads[1].row(b);
                let content = seqs[r].content_positions();
                let scale = 1.0 / content.len().max(1) as f64;
                for &pos in &content {
                    let id = seqs[r].ids[pos] as usize;
                    for o in 0..dim {
                        grad_text_w[o * vocab.len() + id] += g_row[o] as f64 * scale;
                    }
                }
                for o in 0..dim {
                    grad_text_b[o] += g_row[o] as f64;
                }
            }
        }

        if objectives.local_match {
            // Records without significant tokens are skipped; negatives
            // range over the remaining sub-batch.
            let mut sub: Vec<usize> = Vec::new(); // indices into `batch`
            let mut token_ids: Vec<Vec<u32>> = Vec::new();
            for (b, &r) in batch.iter().enumerate() {
                let sample_seed = rng.gen::<u64>();
                if let Some(sample) = sample_lvwm(&chosen[r], cfg.n_l, sample_seed)? {
                    sub.push(b);
                    token_ids.push(
                        sample
                            .indices
                            .iter()
                            .map(|&pos| seqs[r].ids[pos])
                            .collect(),
                    );
                }
            }
            if sub.len() >= 2 {
                let mut vis_data = Vec::with_capacity(sub.len() * dim);
                for &b in &sub {
                    vis_data.extend_from_slice(&vis_rows[b]);
                }
                let vis = FeatureMatrix::new(sub.len(), dim, vis_data).map_err(diverged)?;
                let mut block_data = Vec::with_capacity(sub.len() * cfg.n_l * dim);
                for ids in &token_ids {
                    for &id in ids {
                        block_data.extend(encoders.encode_token(id));
                    }
                }
                let block = TokenBlock::new(sub.len(), cfg.n_l, dim, block_data).map_err(diverged)?;
                let result = lvwm(&vis, &block, cfg.scale)?;
                total += result.value;
                for (s, &b) in sub.iter().enumerate() {
                    let g_row = result.grads[0].row(s);
                    for o in 0..dim {
                        grad_vis[b * dim + o] += g_row[o] as f64;
                    }
                    for (l, &id) in token_ids[s].iter().enumerate() {
                        let g_tok = result.grads[1].row(s * cfg.n_l + l);
                        for o in 0..dim {
                            grad_text_w[o * vocab.len() + id as usize] += g_tok[o] as f64;
                            grad_text_b[o] += g_tok[o] as f64;
                        }
                    }
                }
            }
        }

        if !total.is_finite() {
            return Err(Error::Divergence { step });
        }
        loss_curve.push(total);

        // Chain visual-feature gradients into the visual affine map and step.
        let lr = cfg.lr;
        for (b, &r) in batch.iter().enumerate() {
            let raw = &records[r].visual;
            for o in 0..dim {
                let g = grad_vis[b * dim + o];
                if g == 0.0 {
                    continue;
                }
                let row_start = o * encoders.visual_w.cols();
                let wdata = encoders.visual_w.data_mut();
                for (k, &xk) in raw.iter().enumerate() {
                    wdata[row_start + k] -= (lr * g * xk as f64) as f32;
                }
                encoders.visual_b[o] -= (lr * g) as f32;
            }
        }
        {
            let cols = encoders.text_w.cols();
            let wdata = encoders.text_w.data_mut();
            for (i, &g) in grad_text_w.iter().enumerate() {
                if g != 0.0 {
                    wdata[i] -= (lr * g) as f32;
                }
            }
            debug_assert_eq!(wdata.len(), dim * cols);
        }
        for (o, &g) in grad_text_b.iter().enumerate() {
            encoders.text_b[o] -= (lr * g) as f32;
        }
    }

    Ok(TrainOutcome {
        encoders,
        loss_curve,
        significant,
    })
}

/// Text-to-video retrieval quality of matched feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    /// Recall at K for K in {1, 5, 10}.
    pub r_at: Vec<(usize, f64)>,
    /// Median rank of the true pair (mean of the middle two for even n).
    pub mdr: f64,
}

impl RetrievalMetrics {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.r_at
            .iter()
            .find(|(kk, _)| *kk == k)
            .map(|(_, r)| *r)
            .unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "r1": self.recall_at(1),
            "r5": self.recall_at(5),
            "r10": self.recall_at(10),
            "mdr": self.mdr,
        })
        .to_string()
    }
}

/// Rank of each true pair under dot-product scoring, ties to lower index.
pub fn true_pair_ranks(vis: &FeatureMatrix, txt: &FeatureMatrix) -> Result<Vec<usize>> {
    if vis.rows() == 0 {
        return Err(Error::Argument("retrieval needs at least one pair".to_string()));
    }
    if vis.rows() != txt.rows() || vis.cols() != txt.cols() {
        return Err(Error::Argument(format!(
            "visual {}x{} and textual {}x{} shapes differ",
            vis.rows(),
            vis.cols(),
            txt.rows(),
            txt.cols()
        )));
    }
    let n = vis.rows();
    let d = vis.cols();
    let score = |i: usize, j: usize| -> f64 {
        let (t, v) = (txt.row(i), vis.row(j));
        (0..d).map(|k| t[k] as f64 * v[k] as f64).sum()
    };
    let mut ranks = Vec::with_capacity(n);
    for i in 0..n {
        let own = score(i, i);
        let mut ahead = 0usize;
        for j in 0..n {
            let s = score(i, j);
            if s > own || (s == own && j < i) {
                ahead += 1;
            }
        }
        ranks.push(ahead + 1);
    }
    Ok(ranks)
}

/// Score recall@{1,5,10} and median rank for matched rows.
pub fn eval_retrieval(vis: &FeatureMatrix, txt: &FeatureMatrix) -> Result<RetrievalMetrics> {
    let ranks = true_pair_ranks(vis, txt)?;
    let n = ranks.len();
    let r_at = [1usize, 5, 10]
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            (k, hits as f64 / n as f64)
        })
        .collect();
    let mut sorted = ranks;
    sorted.sort_unstable();
    let mdr = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    Ok(RetrievalMetrics { r_at, mdr })
}
