//! Synthetic set-disjointness sequences with exactly one shared token.
//!
//! Layout: `[prefix] A [sep_sets] B [sep_answer] [mask]`, with the shared
//! token `t` as the only label (final position). The four special ids sit at
//! the top of the vocabulary; the remaining ids split into halves `V_A`, `V_B`.

use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SdError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub prefix: u32,
    pub mask: u32,
    pub sep_sets: u32,
    pub sep_answer: u32,
}

impl SpecialTokens {
    pub const COUNT: usize = 4;

    pub fn for_vocab(vocab: usize) -> Self {
        let v = vocab as u32;
        Self { prefix: v - 4, mask: v - 3, sep_sets: v - 2, sep_answer: v - 1 }
    }

    pub fn contains(&self, id: u32) -> bool {
        [self.prefix, self.mask, self.sep_sets, self.sep_answer].contains(&id)
    }
}

/// Size of each of the two content halves.
pub fn half_vocab(vocab: usize) -> usize {
    vocab.saturating_sub(SpecialTokens::COUNT) / 2
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SdInstance {
    pub input_ids: Vec<u32>,
    /// `None` marks positions without a loss.
    pub labels: Vec<Option<u32>>,
    pub len_a: usize,
    pub len_b: usize,
    pub vocab: usize,
    pub target: u32,
    pub special: SpecialTokens,
}

impl SdInstance {
    pub fn set_a(&self) -> &[u32] {
        &self.input_ids[1..1 + self.len_a]
    }

    pub fn set_b(&self) -> &[u32] {
        &self.input_ids[2 + self.len_a..2 + self.len_a + self.len_b]
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn answer_position(&self) -> usize {
        self.input_ids.len() - 1
    }

    fn assemble(a: &[u32], b: &[u32], target: u32, vocab: usize) -> Self {
        let special = SpecialTokens::for_vocab(vocab);
        let mut ids = Vec::with_capacity(a.len() + b.len() + 4);
        ids.push(special.prefix);
        ids.extend_from_slice(a);
        ids.push(special.sep_sets);
        ids.extend_from_slice(b);
        ids.push(special.sep_answer);
        ids.push(special.mask);
        let mut labels = vec![None; ids.len()];
        *labels.last_mut().expect("non-empty") = Some(target);
        Self { input_ids: ids, labels, len_a: a.len(), len_b: b.len(), vocab, target, special }
    }
}

fn check_sizes(len_a: usize, len_b: usize, vocab: usize) -> Result<(), SdError> {
    if len_a == 0 || len_b == 0 {
        return Err(SdError::EmptySet);
    }
    let half = half_vocab(vocab);
    let size = len_a.max(len_b);
    if size > half {
        return Err(SdError::SetTooLarge { size, half });
    }
    Ok(())
}

fn generate(len_a: usize, len_b: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Result<SdInstance, SdError> {
    check_sizes(len_a, len_b, vocab)?;
    let half = half_vocab(vocab);
    let a: Vec<u32> = sample(rng, half, len_a).into_iter().map(|x| x as u32).collect();
    let mut b: Vec<u32> = sample(rng, half, len_b).into_iter().map(|x| (x + half) as u32).collect();
    let t = a[rng.gen_range(0..len_a)];
    let pos = rng.gen_range(0..len_b);
    b[pos] = t;
    Ok(SdInstance::assemble(&a, &b, t, vocab))
}

/// One instance; deterministic in `seed`.
pub fn gen_sd_instance(len_a: usize, len_b: usize, vocab: usize, seed: u64) -> Result<SdInstance, SdError> {
    generate(len_a, len_b, vocab, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Builds an instance from explicit sets sharing exactly one element.
pub fn from_sets(a: &[u32], b: &[u32], vocab: usize) -> Result<SdInstance, SdError> {
    check_sizes(a.len(), b.len(), vocab)?;
    let content = (vocab - SpecialTokens::COUNT) as u32;
    if let Some(&x) = a.iter().chain(b).find(|&&x| x >= content) {
        return Err(crate::error::FeatureMapError::OutOfVocab { elem: x, vocab: content as usize }.into());
    }
    let shared: Vec<u32> = a.iter().copied().filter(|x| b.contains(x)).collect();
    if shared.len() != 1 {
        return Err(SdError::IntersectionSize { found: shared.len() });
    }
    Ok(SdInstance::assemble(a, b, shared[0], vocab))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full tuple lists and `V = 2048`.
    Paper,
    /// Tuple sizes clamped to 64 and `V = 256`.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

const TRAIN_TUPLES: [(usize, usize); 12] =
    [(4, 16), (16, 4), (8, 32), (32, 8), (64, 16), (16, 64), (4, 128), (128, 4), (16, 256), (256, 16), (4, 256), (256, 4)];

const EVAL_TUPLES: [(usize, usize); 20] = [
    (1, 32),
    (32, 1),
    (4, 32),
    (32, 4),
    (4, 128),
    (128, 4),
    (16, 256),
    (256, 16),
    (4, 256),
    (256, 4),
    (16, 512),
    (512, 16),
    (4, 512),
    (512, 4),
    (8, 768),
    (768, 8),
    (16, 768),
    (768, 16),
    (4, 768),
    (768, 4),
];

pub const DESK_MAX_SET: usize = 64;

impl Profile {
    pub fn vocab(self) -> usize {
        match self {
            Profile::Paper => 2048,
            Profile::Desk => 256,
        }
    }

    pub fn tuples(self, split: Split) -> Vec<(usize, usize)> {
        let base: &[(usize, usize)] = match split {
            Split::Train => &TRAIN_TUPLES,
            Split::Eval => &EVAL_TUPLES,
        };
        match self {
            Profile::Paper => base.to_vec(),
            Profile::Desk => base.iter().map(|&(a, b)| (a.min(DESK_MAX_SET), b.min(DESK_MAX_SET))).collect(),
        }
    }
}

impl Split {
    pub fn base_count(self) -> usize {
        match self {
            Split::Train => 20_000,
            Split::Eval => 1_000,
        }
    }
}

/// Instances per tuple after scaling; at least one.
pub fn scaled_count(split: Split, scale: f64) -> Result<usize, SdError> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(SdError::InvalidScale(scale));
    }
    Ok(((split.base_count() as f64 * scale).round() as usize).max(1))
}

/// The tuple mixture for a split, `count` instances per tuple, in tuple order.
/// Instance `i` of tuple `k` draws from its own ChaCha stream, so shards with
/// the same seed agree.
pub fn gen_mixture(
    profile: Profile,
    split: Split,
    scale: f64,
    vocab: Option<usize>,
    seed: u64,
) -> Result<Vec<SdInstance>, SdError> {
    let count = scaled_count(split, scale)?;
    gen_tuples(&profile.tuples(split), count, vocab.unwrap_or(profile.vocab()), split, seed)
}

pub fn gen_tuples(
    tuples: &[(usize, usize)],
    count: usize,
    vocab: usize,
    split: Split,
    seed: u64,
) -> Result<Vec<SdInstance>, SdError> {
    let split_id: u64 = match split {
        Split::Train => 1,
        Split::Eval => 2,
    };
    let mut out = Vec::with_capacity(tuples.len() * count);
    for (k, &(a, b)) in tuples.iter().enumerate() {
        check_sizes(a, b, vocab)?;
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((split_id << 48) | ((k as u64) << 32) | i as u64);
            out.push(generate(a, b, vocab, &mut rng)?);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Record {
    input_ids: Vec<u32>,
    labels: Vec<Option<u32>>,
    len_a: usize,
    len_b: usize,
    vocab: usize,
}

impl SdInstance {
    pub fn to_json(&self) -> String {
        let r = Record {
            input_ids: self.input_ids.clone(),
            labels: self.labels.clone(),
            len_a: self.len_a,
            len_b: self.len_b,
            vocab: self.vocab,
        };
        serde_json::to_string(&r).expect("plain record serializes")
    }

    pub fn from_json(line: &str) -> Result<Self, SdError> {
        let r: Record = serde_json::from_str(line).map_err(|e| SdError::Dataset(e.to_string()))?;
        let bad = |m: &str| SdError::Dataset(m.to_string());
        if r.input_ids.len() != r.len_a + r.len_b + 4 || r.labels.len() != r.input_ids.len() {
            return Err(bad("lengths do not match len_a/len_b"));
        }
        if r.labels[..r.labels.len() - 1].iter().any(Option::is_some) {
            return Err(bad("labels must be null except at the final position"));
        }
        let target = r.labels.last().copied().flatten().ok_or_else(|| bad("missing final label"))?;
        let inst =
            SdInstance::assemble(&r.input_ids[1..1 + r.len_a], &r.input_ids[2 + r.len_a..2 + r.len_a + r.len_b], target, r.vocab);
        if inst.input_ids != r.input_ids {
            return Err(bad("special tokens out of place"));
        }
        Ok(inst)
    }
}

pub fn write_jsonl<W: Write>(mut w: W, data: &[SdInstance]) -> std::io::Result<()> {
    for inst in data {
        writeln!(w, "{}", inst.to_json())?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<SdInstance>, SdError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| SdError::Dataset(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(SdInstance::from_json(&line).map_err(|e| SdError::Dataset(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn example_from_sets() {
        let inst = from_sets(&[7, 11, 17, 16, 4, 6, 9], &[8, 1, 5, 6], 64).unwrap();
        assert_eq!(inst.target, 6);
        assert_eq!(inst.labels.last(), Some(&Some(6)));
        assert!(from_sets(&[1, 2], &[3, 4], 64).is_err());
        assert!(from_sets(&[1, 2], &[1, 2], 64).is_err());
    }

    #[test]
    fn layout_and_labels() {
        let inst = gen_sd_instance(5, 3, 64, 9).unwrap();
        let sp = SpecialTokens::for_vocab(64);
        assert_eq!(inst.len(), 12);
        assert_eq!(inst.input_ids[0], sp.prefix);
        assert_eq!(inst.input_ids[6], sp.sep_sets);
        assert_eq!(inst.input_ids[10], sp.sep_answer);
        assert_eq!(inst.input_ids[11], sp.mask);
        assert!(inst.labels[..11].iter().all(Option::is_none));
        assert_eq!(inst.labels[11], Some(inst.target));
        let half = half_vocab(64) as u32;
        assert!(inst.set_a().iter().all(|&x| x < half));
        assert_eq!(inst.set_b().iter().filter(|&&x| x < half).count(), 1);
    }

    #[test]
    fn singleton_sets_share_their_element() {
        let inst = gen_sd_instance(1, 1, 16, 3).unwrap();
        assert_eq!(inst.set_a(), inst.set_b());
        assert_eq!(inst.target, inst.set_a()[0]);
    }

    #[test]
    fn exactly_one_shared_token() {
        for seed in 0..300 {
            let inst = gen_sd_instance(1 + seed as usize % 20, 1 + (seed as usize * 7) % 30, 70, seed).unwrap();
            let a: BTreeSet<_> = inst.set_a().iter().collect();
            let b: BTreeSet<_> = inst.set_b().iter().collect();
            assert_eq!(a.len(), inst.len_a);
            assert_eq!(b.len(), inst.len_b);
            let shared: Vec<_> = a.intersection(&b).collect();
            assert_eq!(shared, vec![&&inst.target]);
            assert_eq!(inst.set_a().iter().filter(|&&x| x == inst.target).count(), 1);
            assert_eq!(inst.set_b().iter().filter(|&&x| x == inst.target).count(), 1);
        }
    }

    #[test]
    fn deterministic_and_validated() {
        assert_eq!(gen_sd_instance(4, 6, 64, 1).unwrap(), gen_sd_instance(4, 6, 64, 1).unwrap());
        assert_ne!(gen_sd_instance(4, 6, 64, 1).unwrap(), gen_sd_instance(4, 6, 64, 2).unwrap());
        assert_eq!(gen_sd_instance(31, 1, 64, 0).unwrap_err(), SdError::SetTooLarge { size: 31, half: 30 });
        assert_eq!(gen_sd_instance(0, 1, 64, 0).unwrap_err(), SdError::EmptySet);
    }

    #[test]
    fn mixture_counts() {
        assert_eq!(scaled_count(Split::Train, 1.0).unwrap(), 20_000);
        assert_eq!(scaled_count(Split::Train, 0.01).unwrap(), 200);
        assert_eq!(scaled_count(Split::Eval, 1.0).unwrap(), 1_000);
        assert!(scaled_count(Split::Eval, 0.0).is_err());
        assert!(scaled_count(Split::Eval, 1.5).is_err());
        assert_eq!(Profile::Paper.tuples(Split::Train).len(), 12);
        let eval = Profile::Paper.tuples(Split::Eval);
        assert!(eval.contains(&(1, 32)) && eval.contains(&(768, 4)));
        assert!(Profile::Desk.tuples(Split::Eval).iter().all(|&(a, b)| a <= 64 && b <= 64));
        let data = gen_mixture(Profile::Desk, Split::Train, 0.0005, None, 5).unwrap();
        assert_eq!(data.len(), 12 * 10);
        assert!(data.iter().all(|d| d.vocab == 256));
        assert_eq!(data[0].len_a, 4);
        assert_eq!(data[0].len_b, 16);
    }

    #[test]
    fn jsonl_round_trip() {
        let data = gen_mixture(Profile::Desk, Split::Eval, 0.002, None, 1).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &data).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"labels\":[null,"));
        assert_eq!(read_jsonl(&buf[..]).unwrap(), data);
        assert!(read_jsonl(&b"{\"input_ids\":[1]}\n"[..]).is_err());
    }
}
