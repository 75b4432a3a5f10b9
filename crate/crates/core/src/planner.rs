//! Masking plans and significant-token sampling.
//!
//! Plans are pure functions of (sequence, candidate set, rate, per-record
//! seed): selected positions get the standard 80/10/10 replacement split,
//! and a sentence with candidates but no Bernoulli hit gets one forced mask
//! so no training sentence is a no-op. The significant-semantic variant only
//! narrows the candidate set to the chosen list.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::miner::ChosenList;
use crate::tokenizer::{TokenSeq, Vocab};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-position masking action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Keep,
    /// Replace with [MASK].
    ToMask,
    /// Replace with a uniformly random vocabulary token.
    ToRandom,
    /// Keep the original token but still predict it.
    ToSelf,
}

impl MaskAction {
    pub fn code(self) -> char {
        match self {
            MaskAction::Keep => 'K',
            MaskAction::ToMask => 'M',
            MaskAction::ToRandom => 'R',
            MaskAction::ToSelf => 'S',
        }
    }

    pub fn from_code(c: char) -> Result<Self> {
        match c {
            'K' => Ok(MaskAction::Keep),
            'M' => Ok(MaskAction::ToMask),
            'R' => Ok(MaskAction::ToRandom),
            'S' => Ok(MaskAction::ToSelf),
            other => Err(Error::Format(format!("unknown action code {other:?}"))),
        }
    }
}

/// Masking actions and prediction targets for one caption.
///
/// `labels[i]` is the original token id exactly where `actions[i]` is not
/// KEEP. `seed_trace` records the per-record RNG seed that produced the plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingPlan {
    pub actions: Vec<MaskAction>,
    pub labels: Vec<Option<u32>>,
    pub seed_trace: u64,
}

impl MaskingPlan {
    /// Positions with a non-KEEP action, ascending.
    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.actions.len())
            .filter(|&i| self.actions[i] != MaskAction::Keep)
            .collect()
    }

    pub fn action_string(&self) -> String {
        self.actions.iter().map(|a| a.code()).collect()
    }
}

/// One `plan.jsonl` record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanRecord {
    pub id: String,
    pub token_ids: Vec<u32>,
    pub actions: String,
    pub labels: Vec<Option<u32>>,
    pub seed_trace: u64,
}

impl PlanRecord {
    pub fn new(id: &str, seq: &TokenSeq, plan: &MaskingPlan) -> Self {
        PlanRecord {
            id: id.to_string(),
            token_ids: seq.ids.clone(),
            actions: plan.action_string(),
            labels: plan.labels.clone(),
            seed_trace: plan.seed_trace,
        }
    }

    pub fn plan(&self) -> Result<MaskingPlan> {
        let actions = self
            .actions
            .chars()
            .map(MaskAction::from_code)
            .collect::<Result<Vec<_>>>()?;
        if actions.len() != self.labels.len() {
            return Err(Error::Format(format!(
                "record {}: {} actions but {} labels",
                self.id,
                actions.len(),
                self.labels.len()
            )));
        }
        Ok(MaskingPlan {
            actions,
            labels: self.labels.clone(),
            seed_trace: self.seed_trace,
        })
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
        return Err(Error::Argument(format!(
            "mask rate must lie in [0, 1], got {rate}"
        )));
    }
    Ok(())
}

/// Bernoulli selection plus 80/10/10 split over an explicit candidate set.
fn plan_over_candidates(
    seq: &TokenSeq,
    candidates: &[usize],
    rate: f64,
    rng_seed: u64,
) -> MaskingPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut actions = vec![MaskAction::Keep; seq.len()];
    let mut labels = vec![None; seq.len()];
    let mut any_selected = false;
    for &pos in candidates {
        if rng.gen::<f64>() < rate {
            any_selected = true;
            let roll = rng.gen::<f64>();
            actions[pos] = if roll < 0.8 {
                MaskAction::ToMask
            } else if roll < 0.9 {
                MaskAction::ToRandom
            } else {
                MaskAction::ToSelf
            };
            labels[pos] = Some(seq.ids[pos]);
        }
    }
    if !any_selected && !candidates.is_empty() {
        let pos = candidates[rng.gen_range(0..candidates.len())];
        actions[pos] = MaskAction::ToMask;
        labels[pos] = Some(seq.ids[pos]);
    }
    MaskingPlan {
        actions,
        labels,
        seed_trace: rng_seed,
    }
}

/// Conventional masking plan over all content positions.
pub fn plan_mlm(seq: &TokenSeq, rate: f64, rng_seed: u64) -> Result<MaskingPlan> {
    check_rate(rate)?;
    let candidates = seq.content_positions();
    Ok(plan_over_candidates(seq, &candidates, rate, rng_seed))
}

/// Masking plan restricted to the significant chosen list.
///
/// The rate applies per candidate within the chosen list. An empty chosen
/// list falls back to the full-candidate plan under the same seed, so every
/// sentence stays usable.
pub fn plan_mssm(
    seq: &TokenSeq,
    chosen: &ChosenList,
    rate: f64,
    rng_seed: u64,
) -> Result<MaskingPlan> {
    check_rate(rate)?;
    if chosen.is_empty() {
        return plan_mlm(seq, rate, rng_seed);
    }
    for &pos in &chosen.positions {
        if pos >= seq.len() || seq.is_special[pos] {
            return Err(Error::Argument(format!(
                "chosen position {pos} is not a content position of the sequence"
            )));
        }
    }
    Ok(plan_over_candidates(seq, &chosen.positions, rate, rng_seed))
}

/// Token ids after applying a plan.
///
/// TO_MASK becomes [MASK]; TO_RANDOM draws a uniform vocabulary id from a
/// stream derived from the plan's seed trace (ascending position order), so
/// the realized input reproduces anywhere from the plan artifact alone.
pub fn masked_input_ids(seq: &TokenSeq, plan: &MaskingPlan, vocab: &Vocab) -> Result<Vec<u32>> {
    if plan.actions.len() != seq.len() {
        return Err(Error::Argument(format!(
            "plan length {} does not match sequence length {}",
            plan.actions.len(),
            seq.len()
        )));
    }
    let mut replace_rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed_trace, b"replace"));
    let mut out = seq.ids.clone();
    for (pos, action) in plan.actions.iter().enumerate() {
        match action {
            MaskAction::Keep | MaskAction::ToSelf => {}
            MaskAction::ToMask => out[pos] = vocab.special().mask,
            MaskAction::ToRandom => out[pos] = replace_rng.gen_range(0..vocab.len() as u32),
        }
    }
    Ok(out)
}

/// Indices sampled from a chosen list for local word matching.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LvwmSample {
    /// Exactly `n_l` positions; repetitions only under over-sampling.
    pub indices: Vec<usize>,
}

/// Sample exactly `n_l` significant positions.
///
/// More candidates than `n_l`: uniform sample without replacement. Exactly
/// `n_l`: take all. Fewer: every position at least once, remainder uniform
/// with replacement. Returns `None` for an empty chosen list; the caller
/// skips local matching for that record.
pub fn sample_lvwm(chosen: &ChosenList, n_l: usize, rng_seed: u64) -> Result<Option<LvwmSample>> {
    if n_l == 0 {
        return Err(Error::Argument("n_l must be at least 1".to_string()));
    }
    if chosen.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut indices = if chosen.len() > n_l {
        let mut pool = chosen.positions.clone();
        for i in 0..n_l {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(n_l);
        pool
    } else {
        let mut all = chosen.positions.clone();
        for _ in chosen.len()..n_l {
            all.push(chosen.positions[rng.gen_range(0..chosen.len())]);
        }
        all
    };
    indices.sort_unstable();
    Ok(Some(LvwmSample { indices }))
}
