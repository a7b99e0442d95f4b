//! One linear-attention layer plus a ReLU MLP deciding, for each element of
//! `B`, whether it occurs in `A`.
//!
//! `Q = K = φ(u)` over the rows `u = A, B`; `V` is one on the first `|A|` rows
//! and zero elsewhere, so row `i` of `(QKᵀ)V` is `ρ_i = Σ_{k<|A|} ⟨φ(u_i), φ(a_k)⟩`.
//! The MLP computes `ReLU(ρ − 1/3)`: matched rows land in `[1/3, 1]`,
//! unmatched rows are zero, provided the summed cross-talk
//! `Σ_{a_k ≠ u_i} |⟨φ(u_i), φ(a_k)⟩|` stays within `1/3` for every row.

use std::collections::BTreeSet;

use crate::error::{FeatureMapError, SdError};
use crate::feature_map::TokenKernel;
use crate::tensor::Tensor;

pub const THRESHOLD: f64 = 1.0 / 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LinAttSdOutput {
    /// MLP output, one row per input row (`|A| + |B|` rows).
    pub z: Tensor<f64>,
    /// Membership of each element of `B` in `A`.
    pub flags: Vec<bool>,
    /// Largest summed cross-talk over all rows.
    pub cross_talk: f64,
}

impl LinAttSdOutput {
    pub fn disjoint(&self) -> bool {
        !self.flags.iter().any(|&f| f)
    }
}

/// Output width: element bits plus a flag column.
pub fn row_width(vocab: usize) -> usize {
    (usize::BITS - vocab.saturating_sub(1).leading_zeros()) as usize + 1
}

fn gram(rows: &[u32], kernel: &dyn TokenKernel) -> Result<Tensor<f64>, SdError> {
    let feats: Option<Vec<Vec<f64>>> = rows.iter().map(|&x| kernel.features(x)).collect::<Result<_, _>>()?;
    if let Some(f) = feats {
        let q = Tensor::from_rows(&f).map_err(|e| SdError::Dataset(e.to_string()))?;
        return q.matmul_nt(&q).map_err(|e| SdError::Dataset(e.to_string()));
    }
    let n = rows.len();
    let mut g = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            g.row_mut(i)[j] = kernel.kernel(rows[i], rows[j])?;
        }
    }
    Ok(g)
}

pub fn linatt_sd_solve(a: &[u32], b: &[u32], kernel: &dyn TokenKernel) -> Result<LinAttSdOutput, SdError> {
    let mut seen = BTreeSet::new();
    if let Some(&dup) = a.iter().find(|&&x| !seen.insert(x)) {
        return Err(FeatureMapError::DuplicateRoster(dup).into());
    }
    let rows: Vec<u32> = a.iter().chain(b).copied().collect();
    let n = rows.len();
    let g = gram(&rows, kernel)?;

    let mut cross_talk: f64 = 0.0;
    for i in 0..n {
        let row: f64 = (0..a.len()).filter(|&k| rows[k] != rows[i]).map(|k| g.at(i, k).abs()).sum();
        cross_talk = cross_talk.max(row);
    }
    if cross_talk > THRESHOLD {
        return Err(SdError::EpsilonTooLarge { measured: cross_talk });
    }

    let width = row_width(kernel.vocab());
    let mut v = Tensor::zeros(&[n, width]);
    for k in 0..a.len() {
        v.row_mut(k).iter_mut().for_each(|x| *x = 1.0);
    }
    let rho = g.matmul(&v).map_err(|e| SdError::Dataset(e.to_string()))?;
    let z = rho.map(|x| (x - THRESHOLD).max(0.0));
    let flags = (a.len()..n).map(|i| z.at(i, 0) > 0.0).collect();
    Ok(LinAttSdOutput { z, flags, cross_talk })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_map::{DataDependentKernel, ExponentialKernel, RandomizedKernel};
    use crate::set_disjointness::brute_force_intersection;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_kernel_values() {
        let (a, b) = ([7, 11, 17, 16, 4, 6, 9], [8, 1, 5, 6]);
        let k = DataDependentKernel::new(&a, 32).unwrap();
        let out = linatt_sd_solve(&a, &b, &k).unwrap();
        assert_eq!(out.cross_talk, 0.0);
        assert_eq!(out.flags, vec![false, false, false, true]);
        assert_eq!(out.z.cols(), 6);
        assert!(out.z.row(10).iter().all(|&x| x == 1.0 - 1.0 / 3.0));
        for i in 7..10 {
            assert!(out.z.row(i).iter().all(|&x| x == 0.0));
        }
        assert!(!out.disjoint());
    }

    #[test]
    fn exponential_kernel_gram_path() {
        let k = ExponentialKernel::new(64, ExponentialKernel::DEFAULT_ALPHA, 3).unwrap();
        let out = linatt_sd_solve(&[1, 2, 3], &[3, 9, 2], &k).unwrap();
        assert_eq!(out.flags, vec![true, false, true]);
    }

    #[test]
    fn too_much_cross_talk_is_reported() {
        let k = RandomizedKernel::new(16, 1, 0).unwrap();
        let err = linatt_sd_solve(&[0, 1, 2, 3], &[4], &k).unwrap_err();
        assert!(matches!(err, SdError::EpsilonTooLarge { .. }));
        let k = DataDependentKernel::new(&[1, 2], 16).unwrap();
        assert!(linatt_sd_solve(&[1, 1], &[2], &k).is_err());
    }

    #[test]
    fn randomized_kernel_agrees_with_brute_force() {
        let (c, la) = (256, 8);
        let f = RandomizedKernel::sd_width(la, c);
        let mut ok = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lb = rng.gen_range(1..=16);
            let pool: Vec<u32> = sample(&mut rng, c, la + lb).into_iter().map(|x| x as u32).collect();
            let a = &pool[..la];
            let mut b = pool[la..].to_vec();
            if rng.gen_bool(0.5) {
                b[0] = a[rng.gen_range(0..la)];
            }
            let k = RandomizedKernel::new(c, f, 1000 + seed).unwrap();
            let want = brute_force_intersection(a, &b);
            if let Ok(out) = linatt_sd_solve(a, &b, &k) {
                let got: BTreeSet<u32> = b.iter().zip(&out.flags).filter(|(_, &f)| f).map(|(&x, _)| x).collect();
                ok += usize::from(got == want);
            }
        }
        assert!(ok >= 95, "{ok}/100");
    }
}
