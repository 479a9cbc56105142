//! Autoregressive decoding from an encoder context: greedy and beam search.

use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape};
use super::transformer::RuleCapModel;
use crate::error::{Error, Result};
use crate::text::{BOS_ID, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Eos,
    MaxLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    /// Generated ids, without BOS and without the final EOS.
    pub tokens: Vec<usize>,
    /// Log-probability of each emitted token, EOS included.
    pub step_log_probs: Vec<f64>,
    /// Total probability mass of each step's distribution before the log.
    pub step_prob_mass: Vec<f64>,
    pub stop: StopReason,
}

impl GenerationOutput {
    /// Mean log-probability per emitted step.
    pub fn normalized_score(&self) -> f64 {
        if self.step_log_probs.is_empty() {
            return f64::NEG_INFINITY;
        }
        self.step_log_probs.iter().sum::<f64>() / self.step_log_probs.len() as f64
    }
}

/// Next-token log-probabilities after `prefix` (which starts with BOS),
/// plus the probability mass of the distribution they came from.
pub fn next_token_log_probs(
    model: &RuleCapModel,
    context: &Mat,
    prefix: &[usize],
) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new(&model.params);
    let ctx = tape.constant(context.clone());
    let logits = model.decode_logits(&mut tape, ctx, prefix, &mut Vec::new())?;
    let row = tape.value(logits).row(prefix.len() - 1).to_owned();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let mass: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
    let lse = max + z.ln();
    Ok((row.iter().map(|v| v - lse).collect(), mass))
}

fn check_max_len(model: &RuleCapModel, max_len: usize) -> Result<()> {
    if max_len == 0 || max_len > model.config().max_tgt_len + 1 {
        return Err(Error::InvalidInput(format!(
            "max_len {max_len} outside 1..={}",
            model.config().max_tgt_len + 1
        )));
    }
    Ok(())
}

/// Lowest index wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Picks the most likely token at every step until EOS or `max_len` steps.
pub fn decode_greedy(
    model: &RuleCapModel,
    context: &Mat,
    max_len: usize,
) -> Result<GenerationOutput> {
    check_max_len(model, max_len)?;
    let mut prefix = vec![BOS_ID];
    let mut out = GenerationOutput {
        tokens: Vec::new(),
        step_log_probs: Vec::new(),
        step_prob_mass: Vec::new(),
        stop: StopReason::MaxLength,
    };
    for _ in 0..max_len {
        let (lp, mass) = next_token_log_probs(model, context, &prefix)?;
        let tok = argmax(&lp);
        out.step_log_probs.push(lp[tok]);
        out.step_prob_mass.push(mass);
        if tok == EOS_ID {
            out.stop = StopReason::Eos;
            return Ok(out);
        }
        out.tokens.push(tok);
        prefix.push(tok);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    log_probs: Vec<f64>,
    mass: Vec<f64>,
    sum: f64,
}

impl Hyp {
    fn normalized(&self) -> f64 {
        self.sum / self.log_probs.len().max(1) as f64
    }

    fn into_output(self, stop: StopReason) -> GenerationOutput {
        let mut tokens = self.tokens;
        if stop == StopReason::Eos {
            tokens.pop();
        }
        GenerationOutput {
            tokens,
            step_log_probs: self.log_probs,
            step_prob_mass: self.mass,
            stop,
        }
    }
}

/// Beam search ranked by summed log-probability during expansion and by
/// length-normalized log-probability for the final pick. With
/// `beam_size == 1` it reproduces [`decode_greedy`].
pub fn decode_beam(
    model: &RuleCapModel,
    context: &Mat,
    beam_size: usize,
    max_len: usize,
) -> Result<GenerationOutput> {
    check_max_len(model, max_len)?;
    if beam_size == 0 {
        return Err(Error::InvalidInput("beam_size must be >= 1".into()));
    }
    let mut alive = vec![Hyp {
        tokens: Vec::new(),
        log_probs: Vec::new(),
        mass: Vec::new(),
        sum: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..max_len {
        // (hyp index, token, new sum, token log-prob, mass)
        let mut cands: Vec<(usize, usize, f64, f64, f64)> = Vec::new();
        for (h, hyp) in alive.iter().enumerate() {
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(BOS_ID);
            prefix.extend_from_slice(&hyp.tokens);
            let (lp, mass) = next_token_log_probs(model, context, &prefix)?;
            for (tok, &l) in lp.iter().enumerate() {
                cands.push((h, tok, hyp.sum + l, l, mass));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut next = Vec::with_capacity(beam_size);
        for &(h, tok, sum, l, mass) in cands.iter().take(beam_size) {
            let mut hyp = alive[h].clone();
            hyp.tokens.push(tok);
            hyp.log_probs.push(l);
            hyp.mass.push(mass);
            hyp.sum = sum;
            if tok == EOS_ID {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    let best_finished = finished
        .into_iter()
        .map(|h| (h, StopReason::Eos))
        .chain(alive.into_iter().map(|h| (h, StopReason::MaxLength)))
        .reduce(|a, b| {
            if b.0.normalized() > a.0.normalized() {
                b
            } else {
                a
            }
        })
        .expect("beam search always keeps a hypothesis");
    Ok(best_finished.0.into_output(best_finished.1))
}
