//! Kernel feature maps φ.
//!
//! Two families live here. Vector maps lift query/key rows for linear
//! attention (the second-order Taylor map, plus the identity map as a
//! baseline). Token kernels map vocabulary elements so that distinct elements
//! are approximately orthogonal and each element has unit self inner product.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::FeatureMapError;
use crate::tensor::{Real, Tensor};

/// Feature maps applied row-wise to query and key vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VectorMap {
    /// `φ(x) = [1, x, vec(x ⊗ x)/√2]`, so `⟨φ(q), φ(k)⟩ = 1 + qᵀk + (qᵀk)²/2`.
    Taylor2,
    /// `φ(x) = x`. Denominators can vanish or go negative.
    Identity,
}

impl VectorMap {
    pub fn output_dim(self, input_dim: usize) -> usize {
        match self {
            VectorMap::Taylor2 => 1 + input_dim + input_dim * input_dim,
            VectorMap::Identity => input_dim,
        }
    }

    /// Denominator guard used when the caller does not pick one.
    pub fn default_denom_eps(self) -> f64 {
        match self {
            VectorMap::Taylor2 => 0.0,
            VectorMap::Identity => 1e-6,
        }
    }

    pub fn apply_into<T: Real>(self, x: &[T], out: &mut [T]) {
        match self {
            VectorMap::Taylor2 => taylor2_into(x, out),
            VectorMap::Identity => out.copy_from_slice(x),
        }
    }

    pub fn apply<T: Real>(self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.output_dim(x.len())];
        self.apply_into(x, &mut out);
        out
    }

    /// Applies the map to every row of an `N × d` tensor.
    pub fn apply_rows<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        let (n, d) = x.dims2().expect("rank-2 input");
        let f = self.output_dim(d);
        let mut out = Tensor::zeros(&[n, f]);
        for i in 0..n {
            self.apply_into(x.row(i), out.row_mut(i));
        }
        out
    }

    /// Inner product `⟨φ(x), φ(y)⟩` evaluated in closed form.
    pub fn kernel(self, x: &[f64], y: &[f64]) -> f64 {
        let s: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        match self {
            VectorMap::Taylor2 => 1.0 + s + s * s / 2.0,
            VectorMap::Identity => s,
        }
    }
}

pub fn taylor2_map<T: Real>(x: &[T]) -> Vec<T> {
    VectorMap::Taylor2.apply(x)
}

fn taylor2_into<T: Real>(x: &[T], out: &mut [T]) {
    let d = x.len();
    let r = T::lit(std::f64::consts::FRAC_1_SQRT_2);
    out[0] = T::one();
    out[1..=d].copy_from_slice(x);
    let second = &mut out[1 + d..];
    for a in 0..d {
        let xa = x[a] * r;
        for b in 0..d {
            second[a * d + b] = xa * x[b];
        }
    }
}

/// Accumulates `∂L/∂x` given `∂L/∂φ(x)` for the Taylor map.
pub fn taylor2_backward<T: Real>(x: &[T], g_out: &[T], g_x: &mut [T]) {
    let d = x.len();
    let r = T::lit(std::f64::consts::FRAC_1_SQRT_2);
    let second = &g_out[1 + d..];
    for a in 0..d {
        let mut acc = g_out[1 + a];
        for b in 0..d {
            acc = acc + (second[a * d + b] + second[b * d + a]) * x[b] * r;
        }
        g_x[a] = g_x[a] + acc;
    }
}

/// A kernel over vocabulary elements `[0, vocab)`.
pub trait TokenKernel {
    fn vocab(&self) -> usize;

    /// `⟨φ(x), φ(y)⟩`.
    fn kernel(&self, x: u32, y: u32) -> Result<f64, FeatureMapError>;

    /// Explicit feature vector, when the map has a finite one.
    fn features(&self, x: u32) -> Result<Option<Vec<f64>>, FeatureMapError>;

    fn feature_dim(&self) -> Option<usize>;

    fn check(&self, x: u32) -> Result<(), FeatureMapError> {
        if (x as usize) < self.vocab() {
            Ok(())
        } else {
            Err(FeatureMapError::OutOfVocab { elem: x, vocab: self.vocab() })
        }
    }
}

fn bits_for(c: usize) -> usize {
    // ⌈log₂ c⌉
    if c <= 1 {
        0
    } else {
        (usize::BITS - (c - 1).leading_zeros()) as usize
    }
}

/// One-hot on a roster `A`, natural binary encoding elsewhere.
///
/// Feature dimension is `|A| + ⌈log₂ c⌉`; roster elements are exactly
/// orthogonal to everything else.
#[derive(Clone, Debug)]
pub struct DataDependentKernel {
    roster: Vec<u32>,
    slot: HashMap<u32, usize>,
    vocab: usize,
    bits: usize,
}

impl DataDependentKernel {
    pub fn new(roster: &[u32], vocab: usize) -> Result<Self, FeatureMapError> {
        let mut slot = HashMap::with_capacity(roster.len());
        for (i, &a) in roster.iter().enumerate() {
            if a as usize >= vocab {
                return Err(FeatureMapError::OutOfVocab { elem: a, vocab });
            }
            if slot.insert(a, i).is_some() {
                return Err(FeatureMapError::DuplicateRoster(a));
            }
        }
        Ok(Self { roster: roster.to_vec(), slot, vocab, bits: bits_for(vocab) })
    }

    pub fn roster(&self) -> &[u32] {
        &self.roster
    }
}

impl TokenKernel for DataDependentKernel {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn feature_dim(&self) -> Option<usize> {
        Some(self.roster.len() + self.bits)
    }

    fn features(&self, x: u32) -> Result<Option<Vec<f64>>, FeatureMapError> {
        self.check(x)?;
        let mut v = vec![0.0; self.roster.len() + self.bits];
        match self.slot.get(&x) {
            Some(&i) => v[i] = 1.0,
            None => {
                for b in 0..self.bits {
                    if (x >> b) & 1 == 1 {
                        v[self.roster.len() + b] = 1.0;
                    }
                }
            }
        }
        Ok(Some(v))
    }

    fn kernel(&self, x: u32, y: u32) -> Result<f64, FeatureMapError> {
        self.check(x)?;
        self.check(y)?;
        Ok(match (self.slot.contains_key(&x), self.slot.contains_key(&y)) {
            (true, true) => f64::from(u8::from(x == y)),
            (false, false) => f64::from((x & y).count_ones()),
            _ => 0.0,
        })
    }
}

/// Each element maps to an independent uniform `±1/√f` vector.
#[derive(Clone, Debug)]
pub struct RandomizedKernel {
    vocab: usize,
    dim: usize,
    codes: Vec<f64>,
}

impl RandomizedKernel {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Result<Self, FeatureMapError> {
        if dim == 0 {
            return Err(FeatureMapError::Invalid("feature dimension must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let codes = (0..vocab * dim).map(|_| if rng.gen::<bool>() { scale } else { -scale }).collect();
        Ok(Self { vocab, dim, codes })
    }

    /// `⌈9·m²·ln c⌉`, a width at which cross-talk against an `m`-element roster
    /// is small with high probability.
    pub fn sd_width(roster_len: usize, vocab: usize) -> usize {
        (9.0 * (roster_len * roster_len) as f64 * (vocab as f64).ln()).ceil() as usize
    }

    fn code(&self, x: u32) -> &[f64] {
        let i = x as usize;
        &self.codes[i * self.dim..(i + 1) * self.dim]
    }
}

impl TokenKernel for RandomizedKernel {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn feature_dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn features(&self, x: u32) -> Result<Option<Vec<f64>>, FeatureMapError> {
        self.check(x)?;
        Ok(Some(self.code(x).to_vec()))
    }

    fn kernel(&self, x: u32, y: u32) -> Result<f64, FeatureMapError> {
        self.check(x)?;
        self.check(y)?;
        if x == y {
            // Exact: f terms of 1/f each.
            return Ok(1.0);
        }
        Ok(self.code(x).iter().zip(self.code(y)).map(|(a, b)| a * b).sum())
    }
}

/// `⟨φ(x), φ(y)⟩ = exp(⟨x, y⟩ − d)` over random `±1` codes of length `d`.
///
/// The `−d` shift normalizes self products to 1. The feature space is
/// infinite-dimensional, so only kernel evaluations are available.
#[derive(Clone, Debug)]
pub struct ExponentialKernel {
    vocab: usize,
    code_len: usize,
    codes: Vec<i8>,
}

impl ExponentialKernel {
    pub const DEFAULT_ALPHA: f64 = 12.0;

    /// Codes of length `⌈alpha · ln c⌉`.
    pub fn new(vocab: usize, alpha: f64, seed: u64) -> Result<Self, FeatureMapError> {
        if alpha.is_nan() || alpha <= 0.0 {
            return Err(FeatureMapError::Invalid("alpha must be positive".into()));
        }
        let code_len = ((alpha * (vocab.max(2) as f64).ln()).ceil() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = (0..vocab * code_len).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        Ok(Self { vocab, code_len, codes })
    }

    pub fn code_len(&self) -> usize {
        self.code_len
    }

    fn dot(&self, x: u32, y: u32) -> i64 {
        let (a, b) = (x as usize * self.code_len, y as usize * self.code_len);
        self.codes[a..a + self.code_len]
            .iter()
            .zip(&self.codes[b..b + self.code_len])
            .map(|(&p, &q)| i64::from(p) * i64::from(q))
            .sum()
    }

    /// Largest normalized cross correlation `γ = max ⟨x,y⟩/d` over distinct pairs.
    pub fn gamma(&self, elems: &[u32]) -> f64 {
        let mut best = i64::MIN;
        for (i, &x) in elems.iter().enumerate() {
            for &y in &elems[i + 1..] {
                best = best.max(self.dot(x, y));
            }
        }
        best as f64 / self.code_len as f64
    }

    /// `exp(d) / exp(γ d)` over the given elements.
    pub fn relative_gap(&self, elems: &[u32]) -> f64 {
        ((1.0 - self.gamma(elems)) * self.code_len as f64).exp()
    }
}

impl TokenKernel for ExponentialKernel {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn feature_dim(&self) -> Option<usize> {
        None
    }

    fn features(&self, x: u32) -> Result<Option<Vec<f64>>, FeatureMapError> {
        self.check(x)?;
        Ok(None)
    }

    fn kernel(&self, x: u32, y: u32) -> Result<f64, FeatureMapError> {
        self.check(x)?;
        self.check(y)?;
        Ok(((self.dot(x, y) - self.code_len as i64) as f64).exp())
    }
}

/// Configuration-level description of any feature map in this module.
#[derive(Clone, Debug)]
pub enum FeatureMapSpec {
    Taylor2 { input_dim: usize },
    IpDataDependent(DataDependentKernel),
    IpRandomized(RandomizedKernel),
    IpExponential(ExponentialKernel),
}

impl FeatureMapSpec {
    pub fn feature_dim(&self) -> Option<usize> {
        match self {
            FeatureMapSpec::Taylor2 { input_dim } => Some(VectorMap::Taylor2.output_dim(*input_dim)),
            FeatureMapSpec::IpDataDependent(k) => k.feature_dim(),
            FeatureMapSpec::IpRandomized(k) => k.feature_dim(),
            FeatureMapSpec::IpExponential(k) => k.feature_dim(),
        }
    }

    pub fn as_token_kernel(&self) -> Option<&dyn TokenKernel> {
        match self {
            FeatureMapSpec::Taylor2 { .. } => None,
            FeatureMapSpec::IpDataDependent(k) => Some(k),
            FeatureMapSpec::IpRandomized(k) => Some(k),
            FeatureMapSpec::IpExponential(k) => Some(k),
        }
    }
}

/// Largest off-diagonal inner product, normalized by the diagonal.
///
/// Each pair contributes `|k(x,y)| / √(k(x,x)·k(y,y))`; when a diagonal entry
/// vanishes the raw value is used instead.
pub fn measure_epsilon<X>(elems: &[X], kernel: impl Fn(&X, &X) -> f64) -> Result<f64, FeatureMapError> {
    if elems.len() < 2 {
        return Err(FeatureMapError::Invalid("need at least two elements".into()));
    }
    let diag: Vec<f64> = elems.iter().map(|x| kernel(x, x)).collect();
    let mut eps = 0.0f64;
    for i in 0..elems.len() {
        for j in i + 1..elems.len() {
            let raw = kernel(&elems[i], &elems[j]).abs();
            let norm = diag[i] * diag[j];
            let v = if norm > 0.0 { raw / norm.sqrt() } else { raw };
            eps = eps.max(v);
        }
    }
    Ok(eps)
}

/// [`measure_epsilon`] for a token kernel.
pub fn measure_token_epsilon(map: &dyn TokenKernel, elems: &[u32]) -> Result<f64, FeatureMapError> {
    for &x in elems {
        map.check(x)?;
    }
    measure_epsilon(elems, |&x, &y| map.kernel(x, y).expect("checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn taylor2_dimension_273() {
        let x = vec![0.1f64; 16];
        assert_eq!(taylor2_map(&x).len(), 273);
        assert_eq!(VectorMap::Taylor2.output_dim(16), 273);
    }

    #[test]
    fn taylor2_orthogonal_inputs_give_one() {
        let q = [1.0, 0.0, 0.0];
        let k = [0.0, 2.0, 0.0];
        assert_eq!(dot(&taylor2_map(&q), &taylor2_map(&k)), 1.0);
    }

    #[test]
    fn taylor2_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let d = rng.gen_range(1..9);
            let (q, k) = (rand_vec(&mut rng, d), rand_vec(&mut rng, d));
            let s = dot(&q, &k);
            let want = 1.0 + s + s * s / 2.0;
            let got = dot(&taylor2_map(&q), &taylor2_map(&k));
            assert!((got - want).abs() <= 1e-12 * want.abs());
            assert!(got >= 0.5);
            assert_eq!(VectorMap::Taylor2.kernel(&q, &k), want);
        }
    }

    #[test]
    fn taylor2_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_vec(&mut rng, 4);
        let g = rand_vec(&mut rng, 21);
        let f = |x: &[f64]| dot(&taylor2_map(x), &g);
        let mut grad = vec![0.0; 4];
        taylor2_backward(&x, &g, &mut grad);
        for i in 0..4 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let fd = (f(&p) - f(&m)) / 2e-5;
            assert!((fd - grad[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn taylor2_epsilon_on_orthonormal_inputs() {
        let basis: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let eps = measure_epsilon(&basis, |a, b| VectorMap::Taylor2.kernel(a, b)).unwrap();
        assert!((eps - 1.0 / 2.5).abs() < 1e-15);
    }

    #[test]
    fn data_dependent_layout_and_orthogonality() {
        let roster = [3u32, 9, 14];
        let k = DataDependentKernel::new(&roster, 16).unwrap();
        assert_eq!(k.feature_dim(), Some(3 + 4));
        assert_eq!(k.features(9).unwrap().unwrap(), vec![0., 1., 0., 0., 0., 0., 0.]);
        // 6 = 0b0110, outside the roster
        assert_eq!(k.features(6).unwrap().unwrap(), vec![0., 0., 0., 0., 1., 1., 0.]);
        assert_eq!(k.kernel(14, 14).unwrap(), 1.0);
        assert_eq!(k.kernel(3, 6).unwrap(), 0.0);
        assert_eq!(measure_token_epsilon(&k, &roster).unwrap(), 0.0);
        for a in roster {
            for b in 0..16 {
                let fa = k.features(a).unwrap().unwrap();
                let fb = k.features(b).unwrap().unwrap();
                assert_eq!(dot(&fa, &fb), k.kernel(a, b).unwrap());
                assert_eq!(k.kernel(a, b).unwrap(), f64::from(u8::from(a == b)));
            }
        }
    }

    #[test]
    fn data_dependent_rejects_bad_rosters() {
        assert!(matches!(DataDependentKernel::new(&[1, 20], 16), Err(FeatureMapError::OutOfVocab { elem: 20, .. })));
        assert!(matches!(DataDependentKernel::new(&[1, 1], 16), Err(FeatureMapError::DuplicateRoster(1))));
        let k = DataDependentKernel::new(&[1], 16).unwrap();
        assert!(k.features(16).is_err());
    }

    #[test]
    fn randomized_self_products_are_one() {
        let k = RandomizedKernel::new(64, 37, 2).unwrap();
        for x in 0..64 {
            let f = k.features(x).unwrap().unwrap();
            assert!((dot(&f, &f) - 1.0).abs() < 1e-12);
            assert_eq!(k.kernel(x, x).unwrap(), 1.0);
        }
    }

    #[test]
    fn randomized_degenerate_dimension_collides() {
        // With f = 1 there are only two codes; some seed maps both elements to the same sign.
        let collided = (0..64).any(|seed| {
            let k = RandomizedKernel::new(2, 1, seed).unwrap();
            measure_token_epsilon(&k, &[0, 1]).unwrap() == 1.0
        });
        assert!(collided);
    }

    #[test]
    fn randomized_epsilon_within_union_bound() {
        // ε ≤ t/√f with t = √(2 ln(100 c²)) over all c² pairs.
        let c = 256usize;
        let f = RandomizedKernel::sd_width(8, c);
        let t = (2.0 * (100.0 * (c * c) as f64).ln()).sqrt();
        let all: Vec<u32> = (0..c as u32).collect();
        let ok = (0..20)
            .filter(|&seed| {
                let k = RandomizedKernel::new(c, f, seed).unwrap();
                measure_token_epsilon(&k, &all).unwrap() <= t / (f as f64).sqrt()
            })
            .count();
        assert!(ok >= 19, "{ok}/20");
    }

    #[test]
    fn randomized_aggregate_crosstalk_below_third() {
        // What the LinAtt construction consumes: Σ over the roster of |cross terms| < 1/3.
        let c = 256usize;
        let m = 8;
        let f = RandomizedKernel::sd_width(m, c);
        let mut ok = 0;
        for seed in 0..100u64 {
            let k = RandomizedKernel::new(c, f, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let mut pool: Vec<u32> = (0..c as u32).collect();
            pool.shuffle(&mut rng);
            let (roster, others) = pool.split_at(m);
            let worst = others[..m]
                .iter()
                .chain(roster)
                .map(|&x| roster.iter().filter(|&&a| a != x).map(|&a| k.kernel(a, x).unwrap().abs()).sum::<f64>())
                .fold(0.0, f64::max);
            if worst < 1.0 / 3.0 {
                ok += 1;
            }
        }
        assert!(ok >= 95, "{ok}/100");
    }

    #[test]
    #[ignore = "unattainable at this width: P(|z| > 2.36) ≈ 0.018 per pair, so ≥ 95% success needs ≤ 2 pairs"]
    fn randomized_pairwise_epsilon_at_sd_width() {
        let c = 256usize;
        let m = 8;
        let f = RandomizedKernel::sd_width(m, c);
        let mut ok = 0;
        for seed in 0..100u64 {
            let k = RandomizedKernel::new(c, f, seed).unwrap();
            let roster: Vec<u32> = (0..m as u32).map(|i| i * 31 % c as u32).collect();
            if measure_token_epsilon(&k, &roster).unwrap() < 1.0 / (3.0 * m as f64) {
                ok += 1;
            }
        }
        assert!(ok >= 95, "{ok}/100");
    }

    #[test]
    fn randomized_epsilon_shrinks_with_width() {
        let elems: Vec<u32> = (0..16).collect();
        let eps = |f| measure_token_epsilon(&RandomizedKernel::new(16, f, 9).unwrap(), &elems).unwrap();
        let (small, huge) = (eps(16), eps(1 << 16));
        assert!(huge < small);
        assert!(huge < 0.03);
    }

    #[test]
    fn exponential_kernel_gap_exceeds_hundred_c() {
        let c = 256usize;
        let k = ExponentialKernel::new(c, ExponentialKernel::DEFAULT_ALPHA, 4).unwrap();
        let all: Vec<u32> = (0..c as u32).collect();
        assert!(k.relative_gap(&all) > 100.0 * c as f64);
        assert_eq!(k.kernel(17, 17).unwrap(), 1.0);
        let eps = measure_token_epsilon(&k, &all).unwrap();
        assert!(eps < 1.0 / (100.0 * c as f64));
        assert!(k.features(3).unwrap().is_none());
    }

    #[test]
    fn spec_reports_feature_dims() {
        assert_eq!(FeatureMapSpec::Taylor2 { input_dim: 16 }.feature_dim(), Some(273));
        let dd = DataDependentKernel::new(&[0, 1, 2], 256).unwrap();
        assert_eq!(FeatureMapSpec::IpDataDependent(dd).feature_dim(), Some(3 + 8));
        let ex = ExponentialKernel::new(16, 2.0, 0).unwrap();
        assert!(FeatureMapSpec::IpExponential(ex).feature_dim().is_none());
    }
}
