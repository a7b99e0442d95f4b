//! Combined training objective: next-token prediction after the encoder
//! region plus masked-token prediction inside it.
//!
//! `L = (w1·L_ntp + w2·L_mlm) / (w1 + w2)`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::ObjectiveError;
use crate::tensor::{softmax_cross_entropy, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(rename = "ntp_scale")]
    pub w1: f64,
    #[serde(rename = "mlm_scale")]
    pub w2: f64,
    #[serde(rename = "mask_prob")]
    pub mask_prob: f64,
    #[serde(rename = "encoder_len")]
    pub encoder_len: usize,
    #[serde(default)]
    pub mask_token: u32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 0.25, mask_prob: 0.15, encoder_len: 0, mask_token: 0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0 && self.w1 + self.w2 > 0.0) {
            return Err(ObjectiveError::BadWeights);
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(ObjectiveError::BadProbability(self.mask_prob));
        }
        Ok(())
    }
}

/// Masked copy of `tokens` and the `(position, original token)` targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedTokens {
    pub tokens: Vec<u32>,
    pub targets: Vec<(usize, u32)>,
}

impl MaskedTokens {
    /// Per-position targets for a cross-entropy over the whole sequence.
    pub fn dense_targets(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.tokens.len()];
        for &(p, t) in &self.targets {
            out[p] = Some(t as usize);
        }
        out
    }
}

/// Replaces each of the first `encoder_len` tokens with `mask_token`
/// independently with probability `p`.
pub fn mlm_mask(tokens: &[u32], encoder_len: usize, p: f64, mask_token: u32, seed: u64) -> Result<MaskedTokens, ObjectiveError> {
    if encoder_len > tokens.len() {
        return Err(ObjectiveError::EncoderTooLong { encoder: encoder_len, len: tokens.len() });
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(ObjectiveError::BadProbability(p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = tokens.to_vec();
    let mut targets = Vec::new();
    for (i, tok) in out.iter_mut().enumerate().take(encoder_len) {
        if rng.gen_bool(p) {
            targets.push((i, *tok));
            *tok = mask_token;
        }
    }
    Ok(MaskedTokens { tokens: out, targets })
}

pub fn combined_loss(ntp: f64, mlm: f64, w: &LossWeights) -> Result<f64, ObjectiveError> {
    w.validate()?;
    if !ntp.is_finite() || !mlm.is_finite() {
        return Err(ObjectiveError::NonFinite);
    }
    Ok((w.w1 * ntp + w.w2 * mlm) / (w.w1 + w.w2))
}

fn region_targets(targets: &[u32], encoder_len: usize) -> Result<Vec<Option<usize>>, ObjectiveError> {
    if encoder_len >= targets.len() {
        return Err(ObjectiveError::EncoderTooLong { encoder: encoder_len, len: targets.len() });
    }
    Ok(targets.iter().enumerate().map(|(i, &t)| (i >= encoder_len).then_some(t as usize)).collect())
}

/// Mean cross-entropy over positions `i ≥ M`. `targets[i]` is the token
/// following position `i`.
pub fn ntp_region_loss<T: Real>(logits: &Tensor<T>, targets: &[u32], encoder_len: usize) -> Result<T, ObjectiveError> {
    let t = region_targets(targets, encoder_len)?;
    Ok(softmax_cross_entropy(logits, &t)?.0)
}

pub fn ntp_region_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    logits: NodeId,
    targets: &[u32],
    encoder_len: usize,
) -> Result<NodeId, ObjectiveError> {
    let t = region_targets(targets, encoder_len)?;
    Ok(tape.softmax_ce(logits, &t)?)
}

/// Masked-position loss read from the same logits (shared unembedding).
pub fn mlm_loss_tape<T: Real>(tape: &mut Tape<T>, logits: NodeId, masked: &MaskedTokens) -> Result<NodeId, ObjectiveError> {
    Ok(tape.softmax_ce(logits, &masked.dense_targets())?)
}

pub fn combined_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    ntp: NodeId,
    mlm: NodeId,
    w: &LossWeights,
) -> Result<NodeId, ObjectiveError> {
    w.validate()?;
    let a = tape.scale(ntp, T::lit(w.w1))?;
    let b = tape.scale(mlm, T::lit(w.w2))?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, T::lit(1.0 / (w.w1 + w.w2)))?)
}
