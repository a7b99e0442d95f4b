//! Token-level prompt transforms: context repetition and `p`-fold repetition.

use crate::error::PromptError;

/// Context `C`, question `Q` and a token budget. The question is never
/// truncated. `answer_span` marks `C[start..end]`, which must survive
/// truncation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPair {
    pub context: Vec<u32>,
    pub question: Vec<u32>,
    pub budget: usize,
    pub answer_span: Option<(usize, usize)>,
}

impl PromptPair {
    pub fn new(context: Vec<u32>, question: Vec<u32>, budget: usize) -> Self {
        Self { context, question, budget, answer_span: None }
    }

    /// Keeps `keep` context tokens: a prefix of `C`, shifted right only as
    /// far as needed to contain the answer span.
    fn truncated_context(&self, keep: usize) -> Result<&[u32], PromptError> {
        let keep = keep.min(self.context.len());
        let mut start = 0;
        if let Some((s, e)) = self.answer_span {
            if e > self.context.len() || s > e || e - s > keep {
                return Err(PromptError::SpanDoesNotFit { start: s, end: e, keep });
            }
            start = e.saturating_sub(keep);
        }
        Ok(&self.context[start..start + keep])
    }
}

/// `C', Q, C', Q` with `C'` cut from the right so the total fits the budget.
pub fn jrt_transform(p: &PromptPair) -> Result<Vec<u32>, PromptError> {
    let q = p.question.len();
    let needed = 2 * q + 2;
    if p.budget < needed {
        return Err(PromptError::BudgetTooSmall { budget: p.budget, question: q, needed });
    }
    let c = p.truncated_context((p.budget - 2 * q) / 2)?;
    let mut out = Vec::with_capacity(2 * (c.len() + q));
    for _ in 0..2 {
        out.extend_from_slice(c);
        out.extend_from_slice(&p.question);
    }
    Ok(out)
}

/// `C', Q` with `C'` cut from the right so the total fits the budget.
pub fn default_prompt(p: &PromptPair) -> Result<Vec<u32>, PromptError> {
    let q = p.question.len();
    if p.budget < q {
        return Err(PromptError::BudgetTooSmall { budget: p.budget, question: q, needed: q });
    }
    let mut out = p.truncated_context(p.budget - q)?.to_vec();
    out.extend_from_slice(&p.question);
    Ok(out)
}

/// The input repeated `p` times end to end: `out[i] = u[i mod N]`.
pub fn jrp_repeat<X: Copy>(u: &[X], p: usize) -> Result<Vec<X>, PromptError> {
    if p == 0 {
        return Err(PromptError::ZeroRepeats);
    }
    Ok(u.repeat(p))
}
