//! Prefix linear attention: the first `M` positions are read non-causally
//! through separate encoder keys/values, the rest causally.
//!
//! ```text
//! y_i = φ(q_i)(Σ_{j≤i} φ(kd_j)ᵀvd_j + Σ_{j<M} φ(ke_j)ᵀve_j)
//!     / φ(q_i)(Σ_{j≤i} φ(kd_j)ᵀ     + Σ_{j<M} φ(ke_j)ᵀ)
//! ```

use crate::error::AttentionError;
use crate::feature_map::VectorMap;
use crate::linear_attention::{attend_featurized, scan_featurized, FlopParams, LaState};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadStrategy {
    /// Prepend pad tokens up to length `M`.
    LeftPad,
    /// Prepend the prompt's own tail up to length `M`.
    ReadTwice,
    /// Treat everything seen so far as the encoder region and re-run the
    /// parallel view for every emitted token.
    Iterative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaConfig {
    pub encoder_len: usize,
    pub map: VectorMap,
    pub pad_token: u32,
    pub pad_strategy: PadStrategy,
}

impl PlaConfig {
    pub fn new(encoder_len: usize, pad_strategy: PadStrategy) -> Self {
        Self { encoder_len, map: VectorMap::Taylor2, pad_token: 0, pad_strategy }
    }
}

/// Decoder projections over all `N` positions and encoder projections over
/// the first `M`. `pad_mask[j]` is true for real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaInputs<T = f64> {
    pub q_dec: Tensor<T>,
    pub k_dec: Tensor<T>,
    pub v_dec: Tensor<T>,
    pub k_enc: Tensor<T>,
    pub v_enc: Tensor<T>,
    pub pad_mask: Vec<bool>,
}

impl<T: Real> PlaInputs<T> {
    pub fn encoder_len(&self) -> usize {
        self.pad_mask.len()
    }

    fn validate(&self) -> Result<(usize, usize, usize), AttentionError> {
        let (n, d) = self.q_dec.dims2()?;
        let dv = self.v_dec.cols();
        let m = self.pad_mask.len();
        let rows = |what, t: &Tensor<T>, want: usize| -> Result<(), AttentionError> {
            let (r, _) = t.dims2()?;
            if r == want {
                Ok(())
            } else {
                Err(AttentionError::Length { what, expected: want, got: r })
            }
        };
        let cols = |what, t: &Tensor<T>, want: usize| {
            if t.cols() == want || t.rows() == 0 {
                Ok(())
            } else {
                Err(AttentionError::Width { what, expected: want, got: t.cols() })
            }
        };
        rows("k_dec", &self.k_dec, n)?;
        rows("v_dec", &self.v_dec, n)?;
        rows("k_enc", &self.k_enc, m)?;
        rows("v_enc", &self.v_enc, m)?;
        cols("k_dec", &self.k_dec, d)?;
        cols("k_enc", &self.k_enc, d)?;
        cols("v_enc", &self.v_enc, dv)?;
        if m > n {
            return Err(AttentionError::Invalid(format!("encoder length {m} exceeds sequence length {n}")));
        }
        Ok((n, d, dv))
    }
}

/// Pass one: encoder KV/K sums over unmasked positions, no queries involved.
pub fn encoder_state<T: Real>(inputs: &PlaInputs<T>, map: VectorMap) -> Result<LaState<T>, AttentionError> {
    let (_, d, dv) = inputs.validate()?;
    let mut st = LaState::new(map.output_dim(d), dv);
    for (j, &real) in inputs.pad_mask.iter().enumerate() {
        if real {
            st.absorb(&map.apply(inputs.k_enc.row(j)), inputs.v_enc.row(j));
        }
    }
    st.position = 0;
    Ok(st)
}

/// Parallel view. With `M = 0` this is exactly causal [`crate::linear_attention::la_parallel`].
pub fn pla_parallel<T: Real>(inputs: &PlaInputs<T>, map: VectorMap) -> Result<Tensor<T>, AttentionError> {
    inputs.validate()?;
    let eps = T::lit(map.default_denom_eps());
    let (phi_q, phi_k) = (map.apply_rows(&inputs.q_dec), map.apply_rows(&inputs.k_dec));
    if inputs.encoder_len() == 0 {
        return attend_featurized(&phi_q, &phi_k, &inputs.v_dec, true, eps, None);
    }
    let enc = encoder_state(inputs, map)?;
    attend_featurized(&phi_q, &phi_k, &inputs.v_dec, true, eps, Some(&enc))
}

/// State after the first `M` positions: encoder terms (masked positions
/// excluded) plus the decoder's own causal terms. Decoding continues from
/// position `M`.
pub fn pla_init_state<T: Real>(inputs: &PlaInputs<T>, map: VectorMap) -> Result<LaState<T>, AttentionError> {
    let mut st = encoder_state(inputs, map)?;
    for j in 0..inputs.encoder_len() {
        st.absorb(&map.apply(inputs.k_dec.row(j)), inputs.v_dec.row(j));
    }
    Ok(st)
}

/// Pass one builds the encoder state; pass two runs the causal scan over all
/// `N` decoder positions seeded with it.
pub fn two_pass_prefill<T: Real>(inputs: &PlaInputs<T>, map: VectorMap) -> Result<(Tensor<T>, LaState<T>), AttentionError> {
    let mut st = encoder_state(inputs, map)?;
    let eps = T::lit(map.default_denom_eps());
    let (phi_q, phi_k) = (map.apply_rows(&inputs.q_dec), map.apply_rows(&inputs.k_dec));
    let y = scan_featurized(&phi_q, &phi_k, &inputs.v_dec, eps, &mut st)?;
    Ok((y, st))
}

/// Brings a prompt up to the encoder length. Returns the tokens and the pad
/// mask (true for real tokens).
pub fn prepare_prompt(tokens: &[u32], cfg: &PlaConfig) -> (Vec<u32>, Vec<bool>) {
    let (len, m) = (tokens.len(), cfg.encoder_len);
    if len >= m || cfg.pad_strategy == PadStrategy::Iterative {
        return (tokens.to_vec(), vec![true; len]);
    }
    let fill = m - len;
    match cfg.pad_strategy {
        PadStrategy::ReadTwice if len > 0 => {
            let mut out: Vec<u32> = (0..fill).map(|i| tokens[(i + len - fill % len) % len]).collect();
            out.extend_from_slice(tokens);
            (out, vec![true; m])
        }
        _ => {
            let mut out = vec![cfg.pad_token; fill];
            out.extend_from_slice(tokens);
            let mut mask = vec![false; fill];
            mask.extend(std::iter::repeat_n(true, len));
            (out, mask)
        }
    }
}

/// Output of [`iterative_decode`]: generated tokens and the total number of
/// token positions processed across all parallel passes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IterativeOutput {
    pub tokens: Vec<u32>,
    pub pass_tokens: usize,
}

/// Greedy decoding that re-runs a full parallel pass (encoder = everything
/// seen so far) for each emitted token. `forward` returns the logits for the
/// next token given the whole sequence.
pub fn iterative_decode<T: Real, E>(
    mut forward: impl FnMut(&[u32]) -> Result<Vec<T>, E>,
    prefill: &[u32],
    n_tokens: usize,
) -> Result<IterativeOutput, E> {
    let mut seq = prefill.to_vec();
    let mut out = IterativeOutput { tokens: Vec::with_capacity(n_tokens), pass_tokens: 0 };
    for _ in 0..n_tokens {
        out.pass_tokens += seq.len();
        let logits = forward(&seq)?;
        let next = argmax(&logits) as u32;
        out.tokens.push(next);
        seq.push(next);
    }
    Ok(out)
}

pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Extra cost over causal linear attention: `(B·M·H·D, 3·B·M·H·d·D)`.
pub fn flops_pla(p: &FlopParams) -> Result<(u64, u64), AttentionError> {
    crate::linear_attention::flops_causal_la(p)?;
    let bmh = p.batch * p.encoder_len * p.heads;
    Ok((bmh * p.feature_dim, 3 * bmh * p.head_dim * p.feature_dim))
}

/// Single-layer prefix linear-attention language model used to compare
/// recurrent decoding with iterative re-encoding.
#[derive(Clone, Debug)]
pub struct PlaLm {
    pub embed: Tensor<f64>,
    pub w_q: Tensor<f64>,
    pub w_k: Tensor<f64>,
    pub w_v: Tensor<f64>,
    pub w_ke: Tensor<f64>,
    pub w_ve: Tensor<f64>,
    pub unembed: Tensor<f64>,
}

impl PlaLm {
    pub fn random(vocab: usize, dim: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mat =
            |r: usize, c: usize, s: f64| Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-s..s)).collect()).expect("shape");
        let s = 1.0 / (dim as f64).sqrt();
        Self {
            embed: mat(vocab, dim, 1.0),
            w_q: mat(dim, dim, s),
            w_k: mat(dim, dim, s),
            w_v: mat(dim, dim, s),
            w_ke: mat(dim, dim, s),
            w_ve: mat(dim, dim, s),
            unembed: mat(dim, vocab, 3.0),
        }
    }

    fn embed(&self, tokens: &[u32]) -> Result<Tensor<f64>, AttentionError> {
        let rows: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.embed.rows() {
                    Ok(self.embed.row(t as usize).to_vec())
                } else {
                    Err(AttentionError::Invalid(format!("token {t} out of vocabulary")))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Tensor::from_rows(&rows)?)
    }

    fn inputs(&self, tokens: &[u32], mask: &[bool]) -> Result<PlaInputs<f64>, AttentionError> {
        let x = self.embed(tokens)?;
        let m = mask.len();
        let head = Tensor::new(&[m, x.cols()], x.data()[..m * x.cols()].to_vec())?;
        Ok(PlaInputs {
            q_dec: x.matmul(&self.w_q)?,
            k_dec: x.matmul(&self.w_k)?,
            v_dec: x.matmul(&self.w_v)?,
            k_enc: head.matmul(&self.w_ke)?,
            v_enc: head.matmul(&self.w_ve)?,
            pad_mask: mask.to_vec(),
        })
    }

    fn logits(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
        let v = self.unembed.cols();
        (0..v).map(|c| h.iter().enumerate().map(|(r, &hr)| hr * self.unembed.at(r, c)).sum()).collect()
    }

    /// Next-token logits from one parallel pass with encoder region `mask.len()`.
    pub fn parallel_next_logits(&self, tokens: &[u32], mask: &[bool]) -> Result<Vec<f64>, AttentionError> {
        let inputs = self.inputs(tokens, mask)?;
        let y = pla_parallel(&inputs, VectorMap::Taylor2)?;
        let last = tokens.len() - 1;
        Ok(self.logits(self.embed.row(tokens[last] as usize), y.row(last)))
    }

    /// Greedy decoding: one two-pass prefill over the prompt, then recurrent steps.
    pub fn generate_recurrent(&self, prompt: &[u32], n_tokens: usize) -> Result<Vec<u32>, AttentionError> {
        let mask = vec![true; prompt.len()];
        let inputs = self.inputs(prompt, &mask)?;
        let (y, mut st) = two_pass_prefill(&inputs, VectorMap::Taylor2)?;
        let last = prompt.len() - 1;
        let mut next = argmax(&self.logits(self.embed.row(prompt[last] as usize), y.row(last))) as u32;
        let mut out = vec![next];
        while out.len() < n_tokens {
            let x = self.embed(&[next])?;
            let (q, k, v) = (x.matmul(&self.w_q)?, x.matmul(&self.w_k)?, x.matmul(&self.w_v)?);
            let y = st.decode_step(q.row(0), k.row(0), v.row(0), VectorMap::Taylor2, 0.0)?;
            next = argmax(&self.logits(x.row(0), &y)) as u32;
            out.push(next);
        }
        Ok(out)
    }

    /// Greedy decoding with the whole running sequence as the encoder region.
    pub fn generate_iterative(&self, prompt: &[u32], n_tokens: usize) -> Result<IterativeOutput, AttentionError> {
        iterative_decode(|seq| self.parallel_next_logits(seq, &vec![true; seq.len()]), prompt, n_tokens)
    }
}
