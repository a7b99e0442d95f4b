//! Causal and non-causal linear attention in parallel and recurrent form.
//!
//! ```text
//! y_i = φ(q_i)·S_i / φ(q_i)·Z_i,   S_i = Σ_{j≤i} φ(k_j)ᵀ v_j,   Z_i = Σ_{j≤i} φ(k_j)
//! ```
//!
//! The non-causal variant replaces the prefix sums with full-sequence sums.
//! Everything here works on a single head; [`MultiHead`] loops heads with
//! independent states.

use crate::error::AttentionError;
use crate::feature_map::VectorMap;
use crate::tensor::{Real, Tensor};

/// Recurrent state of one head: KV-state `s` (`D × d_v`), K-state `z` (`D`)
/// and the number of tokens consumed so far.
#[derive(Clone, Debug, PartialEq)]
pub struct LaState<T = f64> {
    pub s: Tensor<T>,
    pub z: Vec<T>,
    pub position: usize,
}

impl<T: Real> LaState<T> {
    pub fn new(feature_dim: usize, value_dim: usize) -> Self {
        Self { s: Tensor::zeros(&[feature_dim, value_dim]), z: vec![T::zero(); feature_dim], position: 0 }
    }

    pub fn feature_dim(&self) -> usize {
        self.z.len()
    }

    pub fn value_dim(&self) -> usize {
        self.s.cols()
    }

    /// Number of scalars held; independent of how many tokens were consumed.
    pub fn footprint(&self) -> usize {
        self.s.len() + self.z.len()
    }

    pub fn footprint_bytes(&self) -> usize {
        self.footprint() * T::BYTES
    }

    /// `s += φ(k)ᵀ v`, `z += φ(k)`.
    pub fn absorb(&mut self, phi_k: &[T], v: &[T]) {
        accumulate(self.s.data_mut(), &mut self.z, phi_k, v);
        self.position += 1;
    }

    /// Adds another state's sums into this one without advancing the position.
    pub fn merge_sums(&mut self, other: &LaState<T>) -> Result<(), AttentionError> {
        self.s.add_assign(&other.s)?;
        for (a, &b) in self.z.iter_mut().zip(&other.z) {
            *a = *a + b;
        }
        Ok(())
    }

    /// One recurrent step: absorb `(k_i, v_i)` then read out with `q_i`.
    pub fn decode_step(&mut self, q: &[T], k: &[T], v: &[T], map: VectorMap, denom_eps: T) -> Result<Vec<T>, AttentionError> {
        let fd = self.feature_dim();
        let (phi_q, phi_k) = (map.apply(q), map.apply(k));
        check_width("phi(q)", fd, phi_q.len())?;
        check_width("phi(k)", fd, phi_k.len())?;
        check_width("v", self.value_dim(), v.len())?;
        let position = self.position;
        self.absorb(&phi_k, v);
        let mut y = vec![T::zero(); v.len()];
        readout(&phi_q, self.s.data(), &self.z, denom_eps, position, &mut y)?;
        Ok(y)
    }
}

fn check_width(what: &'static str, expected: usize, got: usize) -> Result<(), AttentionError> {
    if expected == got {
        Ok(())
    } else {
        Err(AttentionError::Width { what, expected, got })
    }
}

pub(crate) fn accumulate<T: Real>(s: &mut [T], z: &mut [T], phi_k: &[T], v: &[T]) {
    let dv = v.len();
    for (a, &ka) in phi_k.iter().enumerate() {
        z[a] = z[a] + ka;
        let srow = &mut s[a * dv..(a + 1) * dv];
        for (sv, &vb) in srow.iter_mut().zip(v) {
            *sv = *sv + ka * vb;
        }
    }
}

/// `y = φ(q)·s / (φ(q)·z + eps)`. Returns the denominator.
pub(crate) fn readout<T: Real>(phi_q: &[T], s: &[T], z: &[T], eps: T, position: usize, y: &mut [T]) -> Result<T, AttentionError> {
    let dv = y.len();
    y.iter_mut().for_each(|x| *x = T::zero());
    let mut den = T::zero();
    for (a, &qa) in phi_q.iter().enumerate() {
        den = den + qa * z[a];
        let srow = &s[a * dv..(a + 1) * dv];
        for (yv, &sv) in y.iter_mut().zip(srow) {
            *yv = *yv + qa * sv;
        }
    }
    let den = den + eps;
    if den == T::zero() || !den.is_finite() {
        return Err(AttentionError::ZeroDenominator { position });
    }
    let inv = T::one() / den;
    for yv in y.iter_mut() {
        *yv = *yv * inv;
    }
    Ok(den)
}

fn check_qkv<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize), AttentionError> {
    let (n, dq) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, dv) = v.dims2()?;
    check_width("k", dq, dk)?;
    if nk != n {
        return Err(AttentionError::Length { what: "k", expected: n, got: nk });
    }
    if nv != n {
        return Err(AttentionError::Length { what: "v", expected: n, got: nv });
    }
    Ok((n, dq, dv))
}

/// Parallel view on already-featurized queries and keys.
///
/// Materializes the per-token outer products `φ(k_j)ᵀ v_j` as an
/// `N × (D·d_v)` matrix and takes prefix sums (or full sums) down its rows.
/// `init`, when given, is added to every position's sums.
pub fn attend_featurized<T: Real>(
    phi_q: &Tensor<T>,
    phi_k: &Tensor<T>,
    v: &Tensor<T>,
    causal: bool,
    denom_eps: T,
    init: Option<&LaState<T>>,
) -> Result<Tensor<T>, AttentionError> {
    let (n, fd, dv) = check_qkv(phi_q, phi_k, v)?;
    let mut kv = Tensor::zeros(&[n, fd * dv]);
    let mut ks = phi_k.clone();
    for i in 0..n {
        let row = kv.row_mut(i);
        for (a, &ka) in phi_k.row(i).iter().enumerate() {
            for (o, &vb) in row[a * dv..(a + 1) * dv].iter_mut().zip(v.row(i)) {
                *o = ka * vb;
            }
        }
    }
    if let Some(st) = init {
        check_width("init state", fd, st.feature_dim())?;
        check_width("init state", dv, st.value_dim())?;
        if n > 0 {
            for (o, &s) in kv.row_mut(0).iter_mut().zip(st.s.data()) {
                *o = s + *o;
            }
            for (o, &z) in ks.row_mut(0).iter_mut().zip(&st.z) {
                *o = z + *o;
            }
        }
    }
    let (kv, ks) = if causal {
        (kv.cumsum_rows()?, ks.cumsum_rows()?)
    } else {
        let (kv_tot, k_tot) = (kv.sum_rows()?, ks.sum_rows()?);
        let bcast = |row: &[T]| Tensor::new(&[n, row.len()], row.repeat(n));
        (bcast(&kv_tot)?, bcast(&k_tot)?)
    };
    let mut y = Tensor::zeros(&[n, dv]);
    for i in 0..n {
        readout(phi_q.row(i), kv.row(i), ks.row(i), denom_eps, i, y.row_mut(i))?;
    }
    Ok(y)
}

/// Parallel view: `φ` applied to `q` and `k`, then [`attend_featurized`].
pub fn la_parallel<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    map: VectorMap,
    causal: bool,
    denom_eps: T,
) -> Result<Tensor<T>, AttentionError> {
    check_qkv(q, k, v)?;
    if denom_eps < T::zero() {
        return Err(AttentionError::Invalid("denom_eps must be non-negative".into()));
    }
    attend_featurized(&map.apply_rows(q), &map.apply_rows(k), v, causal, denom_eps, None)
}

/// Causal scan from `state`: absorbs each `(k_i, v_i)` and reads out `q_i`.
pub fn scan_featurized<T: Real>(
    phi_q: &Tensor<T>,
    phi_k: &Tensor<T>,
    v: &Tensor<T>,
    denom_eps: T,
    state: &mut LaState<T>,
) -> Result<Tensor<T>, AttentionError> {
    let (n, fd, dv) = check_qkv(phi_q, phi_k, v)?;
    check_width("state", fd, state.feature_dim())?;
    check_width("state", dv, state.value_dim())?;
    let mut y = Tensor::zeros(&[n, dv]);
    for i in 0..n {
        let position = state.position;
        state.absorb(phi_k.row(i), v.row(i));
        readout(phi_q.row(i), state.s.data(), &state.z, denom_eps, position, y.row_mut(i))?;
    }
    Ok(y)
}

/// Processes a length-`P` prompt and returns its outputs together with the
/// state `(s_P, z_P)` ready for decoding.
pub fn la_prefill<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    map: VectorMap,
) -> Result<(Tensor<T>, LaState<T>), AttentionError> {
    let (_, dk, dv) = check_qkv(q, k, v)?;
    let (phi_q, phi_k) = (map.apply_rows(q), map.apply_rows(k));
    let eps = T::lit(map.default_denom_eps());
    let y = attend_featurized(&phi_q, &phi_k, v, true, eps, None)?;
    let mut state = LaState::new(map.output_dim(dk), dv);
    for i in 0..phi_k.rows() {
        state.absorb(phi_k.row(i), v.row(i));
    }
    Ok((y, state))
}

/// Rolls out [`LaState::decode_step`] over every row, starting from empty.
pub fn la_recurrent<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    map: VectorMap,
    denom_eps: T,
) -> Result<Tensor<T>, AttentionError> {
    let (n, dk, dv) = check_qkv(q, k, v)?;
    let mut state = LaState::new(map.output_dim(dk), dv);
    let mut y = Tensor::zeros(&[n, dv]);
    for i in 0..n {
        let out = state.decode_step(q.row(i), k.row(i), v.row(i), map, denom_eps)?;
        y.row_mut(i).copy_from_slice(&out);
    }
    Ok(y)
}

/// Gradients of [`attend_featurized`] (no initial state) with respect to its
/// three inputs, given the upstream gradient `g_y`.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn attend_backward<T: Real>(
    phi_q: &[T],
    phi_k: &[T],
    v: &[T],
    g_y: &[T],
    n: usize,
    fd: usize,
    dv: usize,
    causal: bool,
    denom_eps: T,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), AttentionError> {
    let mut g_q = vec![T::zero(); n * fd];
    let mut g_k = vec![T::zero(); n * fd];
    let mut g_v = vec![T::zero(); n * dv];
    let mut g_num = vec![T::zero(); n * dv];
    let mut g_den = vec![T::zero(); n];

    let mut s = vec![T::zero(); fd * dv];
    let mut z = vec![T::zero(); fd];
    if !causal {
        for j in 0..n {
            accumulate(&mut s, &mut z, &phi_k[j * fd..(j + 1) * fd], &v[j * dv..(j + 1) * dv]);
        }
    }
    let mut y = vec![T::zero(); dv];
    for i in 0..n {
        let a = &phi_q[i * fd..(i + 1) * fd];
        if causal {
            accumulate(&mut s, &mut z, &phi_k[i * fd..(i + 1) * fd], &v[i * dv..(i + 1) * dv]);
        }
        let den = readout(a, &s, &z, denom_eps, i, &mut y)?;
        let gy = &g_y[i * dv..(i + 1) * dv];
        let inv = T::one() / den;
        let mut gd = T::zero();
        for b in 0..dv {
            g_num[i * dv + b] = gy[b] * inv;
            gd = gd - gy[b] * y[b];
        }
        let gd = gd * inv;
        g_den[i] = gd;
        let gq = &mut g_q[i * fd..(i + 1) * fd];
        for (ai, gqa) in gq.iter_mut().enumerate() {
            let srow = &s[ai * dv..(ai + 1) * dv];
            let mut acc = z[ai] * gd;
            for (&sv, &gn) in srow.iter().zip(&g_num[i * dv..(i + 1) * dv]) {
                acc = acc + sv * gn;
            }
            *gqa = acc;
        }
    }

    // R = Σ a_i ⊗ g_num_i, r = Σ a_i g_den_i over i ≥ j (causal) or all i.
    let mut r_kv = vec![T::zero(); fd * dv];
    let mut r_k = vec![T::zero(); fd];
    if !causal {
        for i in 0..n {
            accumulate(&mut r_kv, &mut r_k, &phi_q[i * fd..(i + 1) * fd], &g_num[i * dv..(i + 1) * dv]);
        }
        // accumulate adds a_i into r_k; we need a_i·g_den_i instead.
        r_k.iter_mut().for_each(|x| *x = T::zero());
        for i in 0..n {
            for (rk, &qa) in r_k.iter_mut().zip(&phi_q[i * fd..(i + 1) * fd]) {
                *rk = *rk + qa * g_den[i];
            }
        }
    }
    for j in (0..n).rev() {
        if causal {
            let a = &phi_q[j * fd..(j + 1) * fd];
            let gn = &g_num[j * dv..(j + 1) * dv];
            for (ai, &qa) in a.iter().enumerate() {
                r_k[ai] = r_k[ai] + qa * g_den[j];
                for (rv, &g) in r_kv[ai * dv..(ai + 1) * dv].iter_mut().zip(gn) {
                    *rv = *rv + qa * g;
                }
            }
        }
        let vj = &v[j * dv..(j + 1) * dv];
        let bj = &phi_k[j * fd..(j + 1) * fd];
        let gk = &mut g_k[j * fd..(j + 1) * fd];
        for ai in 0..fd {
            let rrow = &r_kv[ai * dv..(ai + 1) * dv];
            let mut acc = r_k[ai];
            for (&rv, &vb) in rrow.iter().zip(vj) {
                acc = acc + rv * vb;
            }
            gk[ai] = acc;
        }
        let gv = &mut g_v[j * dv..(j + 1) * dv];
        for (ai, &ba) in bj.iter().enumerate() {
            for (g, &rv) in gv.iter_mut().zip(&r_kv[ai * dv..(ai + 1) * dv]) {
                *g = *g + ba * rv;
            }
        }
    }
    Ok((g_q, g_k, g_v))
}

/// Loops heads laid out side by side in the columns of `q`, `k`, `v`.
#[derive(Clone, Copy, Debug)]
pub struct MultiHead {
    pub heads: usize,
    pub map: VectorMap,
    pub causal: bool,
}

impl MultiHead {
    fn split<T: Real>(&self, x: &Tensor<T>, h: usize) -> Result<Tensor<T>, AttentionError> {
        let (n, w) = x.dims2()?;
        if w % self.heads != 0 {
            return Err(AttentionError::Invalid(format!("width {w} not divisible by {} heads", self.heads)));
        }
        let hw = w / self.heads;
        let mut out = Tensor::zeros(&[n, hw]);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&x.row(i)[h * hw..(h + 1) * hw]);
        }
        Ok(out)
    }

    pub fn forward<T: Real>(&self, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>, AttentionError> {
        let (n, _, dv) = check_qkv(q, k, v)?;
        let mut out = Tensor::zeros(&[n, dv]);
        let hv = dv / self.heads;
        let eps = T::lit(self.map.default_denom_eps());
        for h in 0..self.heads {
            let y = la_parallel(&self.split(q, h)?, &self.split(k, h)?, &self.split(v, h)?, self.map, self.causal, eps)?;
            for i in 0..n {
                out.row_mut(i)[h * hv..(h + 1) * hv].copy_from_slice(y.row(i));
            }
        }
        Ok(out)
    }

    /// Independent empty states, one per head.
    pub fn empty_states<T: Real>(&self, head_qk_dim: usize, head_v_dim: usize) -> Vec<LaState<T>> {
        (0..self.heads).map(|_| LaState::new(self.map.output_dim(head_qk_dim), head_v_dim)).collect()
    }
}

/// Symbols of the FLOP accounting: batch, sequence length, encoder length,
/// heads, head dimension and feature dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopParams {
    pub batch: u64,
    pub seq_len: u64,
    pub encoder_len: u64,
    pub heads: u64,
    pub head_dim: u64,
    pub feature_dim: u64,
}

impl FlopParams {
    fn validate(&self) -> Result<(), AttentionError> {
        let all = [self.batch, self.seq_len, self.heads, self.head_dim, self.feature_dim];
        if all.contains(&0) {
            return Err(AttentionError::Invalid("FLOP parameters must be ≥ 1".into()));
        }
        if self.encoder_len > self.seq_len {
            return Err(AttentionError::Invalid("encoder length exceeds sequence length".into()));
        }
        Ok(())
    }
}

/// `(2·B·N·H·D, 4·B·N·H·d·D)`: feature map on `q`, `k`, then the `k·v`
/// product, cumulative sum, `q` product and reduction over `D`.
pub fn flops_causal_la(p: &FlopParams) -> Result<(u64, u64), AttentionError> {
    p.validate()?;
    let bnh = p.batch * p.seq_len * p.heads;
    Ok((2 * bnh * p.feature_dim, 4 * bnh * p.head_dim * p.feature_dim))
}
