//! Four-layer toy model: two blocks of
//! `gated conv → MLP → linear attention → MLP`, each sublayer residual.
//!
//! The gated convolution computes `(xW + B) ⊙ (K ∗ x + B_K)` with a depthwise
//! width-3 filter, causal or circular. Linear attention uses the Taylor map on
//! per-head projections of width `feature_dim`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::ToyError;
use crate::feature_map::VectorMap;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub d_model: usize,
    pub feature_dim: usize,
    pub n_heads: usize,
    pub conv_filter: usize,
    pub causal: bool,
    pub vocab: usize,
}

pub const N_LAYERS: usize = 4;
const BLOCKS: usize = N_LAYERS / 2;
const PER_BLOCK: usize = 16;

impl ToyConfig {
    pub fn new(d_model: usize, feature_dim: usize, causal: bool, vocab: usize) -> Self {
        Self { d_model, feature_dim, n_heads: 2, conv_filter: 3, causal, vocab }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: String| Err(ToyError::Config(m));
        if self.d_model == 0 || self.feature_dim == 0 || self.n_heads == 0 || self.conv_filter == 0 || self.vocab == 0 {
            return bad("all sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Taylor feature dimension `1 + f + f²` per head.
    pub fn expanded_dim(&self) -> usize {
        VectorMap::Taylor2.output_dim(self.feature_dim)
    }

    pub fn mlp_hidden(&self) -> usize {
        2 * self.d_model
    }

    /// Recurrent state carried while decoding: per attention layer
    /// `H·(D·d_head + D)` elements, per convolution `(filter − 1)·d_model`.
    pub fn state_size_bytes(&self, bytes_per_elem: usize) -> usize {
        let d = self.expanded_dim();
        let attn = self.n_heads * (d * self.head_dim() + d);
        let conv = (self.conv_filter - 1) * self.d_model;
        BLOCKS * (attn + conv) * bytes_per_elem
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (d, h, v) = (self.d_model, self.mlp_hidden(), self.vocab);
        let hf = self.n_heads * self.feature_dim;
        let mut out = vec![("embed".to_string(), vec![v, d], 1)];
        for b in 0..BLOCKS {
            let p = |n: &str| format!("block{b}.{n}");
            let mut push = |n: &str, shape: Vec<usize>, fan_in: usize| out.push((p(n), shape, fan_in));
            push("conv.w", vec![d, d], d);
            push("conv.b", vec![d], 0);
            push("conv.k", vec![self.conv_filter, d], self.conv_filter);
            push("conv.bk", vec![d], 0);
            for m in ["mlp1", "attn", "mlp2"] {
                if m == "attn" {
                    push("attn.wq", vec![d, hf], d);
                    push("attn.wk", vec![d, hf], d);
                    push("attn.wv", vec![d, d], d);
                    push("attn.wo", vec![d, d], d);
                } else {
                    push(&format!("{m}.w1"), vec![d, h], d);
                    push(&format!("{m}.b1"), vec![h], 0);
                    push(&format!("{m}.w2"), vec![h, d], h);
                    push(&format!("{m}.b2"), vec![d], 0);
                }
            }
        }
        out.push(("unembed".to_string(), vec![d, v], d));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel<T = f32> {
    pub config: ToyConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
}

/// One batch: token sequences stacked end to end.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub segments: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl Batch {
    /// Stacks sequences; each contributes its final position with `target`.
    pub fn new<'a>(seqs: impl IntoIterator<Item = (&'a [u32], Option<u32>)>) -> Self {
        let mut b = Batch::default();
        for (s, t) in seqs {
            b.tokens.extend_from_slice(s);
            b.segments.push(s.len());
            b.targets.push(t.map(|x| x as usize));
        }
        b
    }

    pub fn last_rows(&self) -> Vec<usize> {
        let mut acc = 0;
        self.segments
            .iter()
            .map(|&l| {
                acc += l;
                acc - 1
            })
            .collect()
    }
}

impl<T: Real> ToyModel<T> {
    /// Weights uniform in `±1/√fan_in` (embedding rows in `±1`), biases zero.
    pub fn init(config: ToyConfig, seed: u64) -> Result<Self, ToyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, fan_in) in config.shapes() {
            let n: usize = shape.iter().product();
            let data = if fan_in == 0 {
                vec![T::zero(); n]
            } else {
                let a = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| T::lit(rng.gen_range(-a..a))).collect()
            };
            names.push(name);
            params.push(Tensor::new(&shape, data)?);
        }
        Ok(Self { config, names, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ToyModel<U> {
        ToyModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ToyError> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            Some(&token) => Err(ToyError::OutOfVocab { token, vocab: self.config.vocab }),
            None => Ok(()),
        }
    }

    /// Hidden states (`rows × d_model`) for stacked sequences. `p` holds the
    /// parameter nodes in `names` order.
    pub fn hidden(&self, tape: &mut Tape<T>, p: &[NodeId], tokens: &[u32], segments: &[usize]) -> Result<NodeId, ToyError> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut x = tape.gather(p[0], &idx)?;
        for b in 0..BLOCKS {
            let w = &p[1 + b * PER_BLOCK..1 + (b + 1) * PER_BLOCK];
            // gated convolution
            let lin = tape.matmul(x, w[0])?;
            let lin = tape.add_bias(lin, w[1])?;
            let conv = tape.conv1d(x, w[2], segments, cfg.causal)?;
            let conv = tape.add_bias(conv, w[3])?;
            let gated = tape.mul(lin, conv)?;
            x = tape.add(x, gated)?;
            x = self.mlp(tape, x, &w[4..8])?;
            // linear attention
            let q = tape.matmul(x, w[8])?;
            let k = tape.matmul(x, w[9])?;
            let v = tape.matmul(x, w[10])?;
            let fq = tape.taylor2(q, cfg.n_heads)?;
            let fk = tape.taylor2(k, cfg.n_heads)?;
            let y = tape.linear_attention(fq, fk, v, cfg.n_heads, cfg.causal, segments)?;
            let y = tape.matmul(y, w[11])?;
            x = tape.add(x, y)?;
            x = self.mlp(tape, x, &w[12..16])?;
        }
        Ok(x)
    }

    fn mlp(&self, tape: &mut Tape<T>, x: NodeId, w: &[NodeId]) -> Result<NodeId, ToyError> {
        let h = tape.matmul(x, w[0])?;
        let h = tape.add_bias(h, w[1])?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, w[2])?;
        let h = tape.add_bias(h, w[3])?;
        Ok(tape.add(x, h)?)
    }

    fn unembed_node(&self, p: &[NodeId]) -> NodeId {
        p[p.len() - 1]
    }

    /// Logits at the final position of each sequence (`batch × V`).
    pub fn last_logits(&self, tape: &mut Tape<T>, p: &[NodeId], batch: &Batch) -> Result<NodeId, ToyError> {
        let h = self.hidden(tape, p, &batch.tokens, &batch.segments)?;
        let last = tape.gather(h, &batch.last_rows())?;
        Ok(tape.matmul(last, self.unembed_node(p))?)
    }

    /// Mean cross-entropy at the answer positions.
    pub fn loss(&self, tape: &mut Tape<T>, p: &[NodeId], batch: &Batch) -> Result<NodeId, ToyError> {
        let logits = self.last_logits(tape, p, batch)?;
        Ok(tape.softmax_ce(logits, &batch.targets)?)
    }

    pub fn constants(&self, tape: &mut Tape<T>) -> Vec<NodeId> {
        self.params.iter().map(|t| tape.constant(t.clone())).collect()
    }

    pub fn tracked(&self, tape: &mut Tape<T>) -> Vec<NodeId> {
        self.params.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Logits at every position of one sequence (`N × V`).
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>, ToyError> {
        let mut tape = Tape::new();
        let p = self.constants(&mut tape);
        let h = self.hidden(&mut tape, &p, tokens, &[tokens.len()])?;
        let logits = tape.matmul(h, self.unembed_node(&p))?;
        Ok(tape.value(logits)?.clone())
    }

    /// Answer-position logits for a batch of sequences.
    pub fn predict_last(&self, batch: &Batch) -> Result<Tensor<T>, ToyError> {
        let mut tape = Tape::new();
        let p = self.constants(&mut tape);
        let logits = self.last_logits(&mut tape, &p, batch)?;
        Ok(tape.value(logits)?.clone())
    }
}
