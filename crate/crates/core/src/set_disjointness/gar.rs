//! General associative recall and its two reductions to and from
//! set disjointness.

use std::collections::{BTreeMap, BTreeSet};

use super::linatt::linatt_sd_solve;
use super::streaming::{bit_width, encode_jrt, streaming_sd_solve};
use crate::error::SdError;
use crate::feature_map::DataDependentKernel;

/// Key-value pairs followed by queries. Each query should match at most one key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GarInstance {
    pub pairs: Vec<(u32, u32)>,
    pub queries: Vec<u32>,
    /// Values are drawn from `1..=vocab`; the all-zero code stands for Null.
    pub vocab: usize,
}

impl GarInstance {
    /// `d = ⌈log₂(c + 1)⌉`.
    pub fn value_bits(&self) -> u32 {
        usize::BITS - self.vocab.leading_zeros()
    }

    /// Distinct keys with their values; conflicting duplicates are an error.
    pub fn table(&self) -> Result<BTreeMap<u32, u32>, SdError> {
        let mut map = BTreeMap::new();
        for &(k, v) in &self.pairs {
            if let Some(&prev) = map.get(&k) {
                if prev != v {
                    return Err(SdError::ConflictingKey { key: k, first: prev, second: v });
                }
            }
            map.insert(k, v);
        }
        Ok(map)
    }
}

pub trait SdOracle {
    fn intersect(&mut self, a: &[u32], b: &[u32]) -> Result<BTreeSet<u32>, SdError>;
}

pub trait GarOracle {
    fn solve(&mut self, g: &GarInstance) -> Result<Vec<Option<u32>>, SdError>;
}

pub struct BruteForceSd;

impl SdOracle for BruteForceSd {
    fn intersect(&mut self, a: &[u32], b: &[u32]) -> Result<BTreeSet<u32>, SdError> {
        Ok(super::streaming::brute_force_intersection(a, b))
    }
}

/// Runs the streaming solver on the twice-repeated row encoding.
pub struct StreamingSd;

impl SdOracle for StreamingSd {
    fn intersect(&mut self, a: &[u32], b: &[u32]) -> Result<BTreeSet<u32>, SdError> {
        let wide = |s: &[u32]| s.iter().map(|&x| x as u64).collect::<Vec<_>>();
        let (a, b) = (wide(a), wide(b));
        let bits = bit_width(a.iter().chain(&b).copied());
        let r = streaming_sd_solve(&encode_jrt(&a, &b, bits)?, bits)?;
        Ok(r.intersection.into_iter().map(|x| x as u32).collect())
    }
}

/// Linear attention + MLP with the data-dependent kernel built on `A`.
pub struct LinAttSd {
    pub vocab: usize,
}

impl SdOracle for LinAttSd {
    fn intersect(&mut self, a: &[u32], b: &[u32]) -> Result<BTreeSet<u32>, SdError> {
        let kernel = DataDependentKernel::new(a, self.vocab)?;
        let out = linatt_sd_solve(a, b, &kernel)?;
        Ok(b.iter().zip(&out.flags).filter(|(_, &f)| f).map(|(&x, _)| x).collect())
    }
}

/// Counts calls made to the wrapped oracle.
pub struct Counting<O> {
    pub inner: O,
    pub calls: usize,
}

impl<O> Counting<O> {
    pub fn new(inner: O) -> Self {
        Self { inner, calls: 0 }
    }
}

impl<O: SdOracle> SdOracle for Counting<O> {
    fn intersect(&mut self, a: &[u32], b: &[u32]) -> Result<BTreeSet<u32>, SdError> {
        self.calls += 1;
        self.inner.intersect(a, b)
    }
}

impl<O: GarOracle> GarOracle for Counting<O> {
    fn solve(&mut self, g: &GarInstance) -> Result<Vec<Option<u32>>, SdError> {
        self.calls += 1;
        self.inner.solve(g)
    }
}

/// Direct table lookup.
pub struct DictionaryGar;

impl GarOracle for DictionaryGar {
    fn solve(&mut self, g: &GarInstance) -> Result<Vec<Option<u32>>, SdError> {
        let table = g.table()?;
        Ok(g.queries.iter().map(|q| table.get(q).copied()).collect())
    }
}

/// Bit `ℓ` of every answer comes from one SD call on `(Q, K_ℓ)` where
/// `K_ℓ` holds the keys whose value has bit `ℓ` set. Makes exactly `d` calls.
pub fn gar_solve_via_sd(g: &GarInstance, sd: &mut dyn SdOracle) -> Result<Vec<Option<u32>>, SdError> {
    let bits = g.value_bits();
    let table = g.table()?;
    if let Some((_, &v)) = table.iter().find(|(_, &v)| v == 0 || v as usize > g.vocab) {
        return Err(SdError::ValueOutOfRange { value: v, bits });
    }
    let queries: Vec<u32> = g.queries.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut code: BTreeMap<u32, u32> = BTreeMap::new();
    for l in 0..bits {
        let k_l: Vec<u32> = table.iter().filter(|(_, &v)| v >> l & 1 == 1).map(|(&k, _)| k).collect();
        for q in sd.intersect(&queries, &k_l)? {
            *code.entry(q).or_insert(0) |= 1 << l;
        }
    }
    Ok(g.queries.iter().map(|q| code.get(q).copied()).collect())
}

/// Self-keyed instance `(a_i, a_i)` with the elements of `B` as queries;
/// the sets are disjoint iff every query comes back Null. One GAR call.
pub fn sd_solve_via_gar(a: &[u32], b: &[u32], gar: &mut dyn GarOracle) -> Result<bool, SdError> {
    let vocab = a.iter().chain(b).map(|&x| x as usize + 1).max().unwrap_or(1);
    let g = GarInstance { pairs: a.iter().map(|&x| (x, x)).collect(), queries: b.to_vec(), vocab };
    Ok(gar.solve(&g)?.iter().all(Option::is_none))
}
