//! Randomized agreement checks between the parallel and recurrent views,
//! shared by the `equiv-check` command and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::AttentionError;
use crate::feature_map::VectorMap;
use crate::linear_attention::{la_parallel, la_recurrent};
use crate::prefix_attention::{pla_init_state, pla_parallel, two_pass_prefill, PlaInputs};
use crate::tensor::Tensor;

/// Values smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-8;

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR))
        .fold(if a.len() == b.len() { 0.0 } else { f64::INFINITY }, f64::max)
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivReport {
    pub instances: usize,
    pub max_rel_err: f64,
    /// PLA only: every `M = 0` instance was bit-identical to causal LA.
    pub exact_at_m0: bool,
}

/// Causal parallel vs recurrent LA with the Taylor map on random shapes
/// `N ≤ max_n`, `d ≤ max_d`.
pub fn la_equivalence(instances: usize, max_n: usize, max_d: usize, seed: u64) -> Result<EquivReport, AttentionError> {
    let map = VectorMap::Taylor2;
    let eps = map.default_denom_eps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.gen_range(1..=max_n);
        let (d, dv) = (rng.gen_range(1..=max_d), rng.gen_range(1..=max_d));
        let (q, k, v) = (random(&mut rng, n, d), random(&mut rng, n, d), random(&mut rng, n, dv));
        let par = la_parallel(&q, &k, &v, map, true, eps)?;
        let rec = la_recurrent(&q, &k, &v, map, eps)?;
        worst = worst.max(rel_err(par.data(), rec.data()));
    }
    Ok(EquivReport { instances, max_rel_err: worst, exact_at_m0: true })
}

/// PLA parallel vs init-state + decode vs two-pass prefill, with random
/// encoder length and pad mask; every fourth instance uses `M = 0` and is
/// also compared bit for bit with causal LA.
pub fn pla_equivalence(instances: usize, max_n: usize, max_d: usize, seed: u64) -> Result<EquivReport, AttentionError> {
    let map = VectorMap::Taylor2;
    let eps = map.default_denom_eps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut exact = true;
    for t in 0..instances {
        let n = rng.gen_range(1..=max_n);
        let m = if t % 4 == 0 { 0 } else { rng.gen_range(0..=n) };
        let (d, dv) = (rng.gen_range(1..=max_d), rng.gen_range(1..=max_d));
        let x = PlaInputs {
            q_dec: random(&mut rng, n, d),
            k_dec: random(&mut rng, n, d),
            v_dec: random(&mut rng, n, dv),
            k_enc: random(&mut rng, m, d),
            v_enc: random(&mut rng, m, dv),
            pad_mask: (0..m).map(|_| rng.gen_bool(0.8)).collect(),
        };
        let par = pla_parallel(&x, map)?;
        let (two, _) = two_pass_prefill(&x, map)?;
        worst = worst.max(rel_err(two.data(), par.data()));
        let mut st = pla_init_state(&x, map)?;
        for i in m..n {
            let y = st.decode_step(x.q_dec.row(i), x.k_dec.row(i), x.v_dec.row(i), map, eps)?;
            worst = worst.max(rel_err(&y, par.row(i)));
        }
        if m == 0 {
            let la = la_parallel(&x.q_dec, &x.k_dec, &x.v_dec, map, true, eps)?;
            exact &= la.data() == par.data();
        }
    }
    Ok(EquivReport { instances, max_rel_err: worst, exact_at_m0: exact })
}
