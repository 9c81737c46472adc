//! Decoder language model conditioned on a soft-token prefix.
//!
//! The input sequence is `[m̃₁..m̃_k, prompt, targets[..T−1]]`: soft tokens
//! enter as layer-0 hidden states (no embedding lookup), discrete tokens are
//! embedded, and positions run `0, 1, …` across the whole sequence. Only the
//! `T` rows that predict a target token are projected to logits.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{stack_forward, KvCache};
use crate::tensor::Tensor;
use crate::tokenizer::AE_INS;

/// What follows the soft prefix.
#[derive(Clone, Debug, PartialEq)]
pub enum Prompt {
    /// Autoencoding: the instruction tokens, `[AE_INS]` by default.
    Instruction(Vec<u32>),
    /// Knowledge extraction: the question tokens, no instruction.
    Question(Vec<u32>),
    /// Ordinary language modelling, used to pretrain the decoder.
    Plain(Vec<u32>),
}

impl Prompt {
    pub fn restore() -> Self {
        Prompt::Instruction(vec![AE_INS])
    }

    pub fn tokens(&self) -> &[u32] {
        match self {
            Prompt::Instruction(t) | Prompt::Question(t) | Prompt::Plain(t) => t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderInput {
    pub soft: Option<Tensor>,
    pub prompt: Prompt,
    pub targets: Vec<u32>,
}

fn to_ids(model: &Model, tokens: &[u32]) -> Result<Vec<usize>> {
    let vocab = model.config.vocab_size;
    tokens
        .iter()
        .map(|&t| {
            if (t as usize) < vocab {
                Ok(t as usize)
            } else {
                Err(Error::Index {
                    index: t as usize,
                    bound: vocab,
                })
            }
        })
        .collect()
}

/// Final normalized hidden states of `[soft; embed(tokens)]` placed at
/// positions `start..`. Keys and values are appended to `cache` when given.
pub fn decoder_hidden(
    tape: &mut Tape,
    model: &Model,
    soft: Option<Var>,
    tokens: &[u32],
    start: usize,
    cache: Option<&mut KvCache>,
) -> Result<Var> {
    let store = &model.store;
    let dec = &model.decoder;
    let d = model.config.hidden_size;
    let mut parts = Vec::with_capacity(2);
    if let Some(s) = soft {
        let w = tape.value(s).cols();
        if w != d {
            return Err(Error::Config(format!("soft token width {w} does not match hidden size {d}")));
        }
        parts.push(s);
    }
    if !tokens.is_empty() {
        let ids = to_ids(model, tokens)?;
        let table = store.bind(tape, dec.embed);
        parts.push(tape.gather(table, &ids)?);
    }
    let h = match parts.as_slice() {
        [] => return Err(Error::Usage("decoder input is empty".into())),
        [one] => *one,
        _ => tape.concat_rows(&parts)?,
    };
    let n = tape.value(h).rows();
    let positions: Vec<usize> = (start..start + n).collect();
    let cfg = model.config.block();
    let h = stack_forward(tape, store, &dec.blocks, &cfg, h, &positions, cache)?;
    let norm = store.bind(tape, dec.norm);
    tape.rmsnorm(h, norm, cfg.norm_eps)
}

/// Logits `[rows × V]` for hidden `rows`.
pub fn project_logits(tape: &mut Tape, model: &Model, hidden: Var) -> Result<Var> {
    let head = model.store.bind(tape, model.decoder.head);
    tape.matmul(hidden, head)
}

/// Teacher-forced logits for the `targets` rows only.
pub fn forward_on_tape(
    tape: &mut Tape,
    model: &Model,
    soft: Option<Var>,
    prompt: &[u32],
    targets: &[u32],
) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Usage("no target tokens".into()));
    }
    to_ids(model, targets)?;
    let k = soft.map_or(0, |s| tape.value(s).rows());
    if k + prompt.len() == 0 {
        return Err(Error::Usage("the first target needs a soft prefix or prompt to condition on".into()));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(&targets[..targets.len() - 1]);
    let hidden = decoder_hidden(tape, model, soft, &tokens, 0, None)?;
    let start = k + prompt.len() - 1;
    let rows = tape.slice_rows(hidden, start, start + targets.len())?;
    project_logits(tape, model, rows)
}

/// Teacher-forced mean token cross-entropy of the targets.
pub fn loss_on_tape(tape: &mut Tape, model: &Model, soft: Option<Var>, prompt: &[u32], targets: &[u32]) -> Result<Var> {
    let logits = forward_on_tape(tape, model, soft, prompt, targets)?;
    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    tape.cross_entropy(logits, &ids)
}

fn soft_var(tape: &mut Tape, soft: Option<&Tensor>) -> Option<Var> {
    soft.map(|s| tape.constant(s.clone()))
}

pub fn forward_with_soft_prefix(model: &Model, input: &DecoderInput) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let soft = soft_var(&mut tape, input.soft.as_ref());
    let logits = forward_on_tape(&mut tape, model, soft, input.prompt.tokens(), &input.targets)?;
    Ok(tape.value(logits).clone())
}

/// Per-token negative log-likelihood of the targets and its sum.
pub fn sequence_nll(model: &Model, input: &DecoderInput) -> Result<(f64, Vec<f64>)> {
    let logits = forward_with_soft_prefix(model, input)?;
    let per_token: Vec<f64> = input
        .targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            lse - row[t as usize]
        })
        .collect();
    Ok((per_token.iter().sum(), per_token))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding with a KV cache until `eos` (included) or `max_len` tokens.
pub fn greedy_generate(model: &Model, soft: Option<&Tensor>, prompt: &[u32], max_len: usize, eos: u32) -> Result<Vec<u32>> {
    if max_len == 0 {
        return Err(Error::Usage("max_len must be at least 1".into()));
    }
    let mut cache = KvCache::new(model.decoder.blocks.len());
    let mut tape = Tape::inference();
    let sv = soft_var(&mut tape, soft);
    let hidden = decoder_hidden(&mut tape, model, sv, prompt, 0, Some(&mut cache))?;
    let mut pos = tape.value(hidden).rows();
    let last = tape.slice_rows(hidden, pos - 1, pos)?;
    let logits = project_logits(&mut tape, model, last)?;
    let mut next = argmax(tape.value(logits).data()) as u32;
    let mut out = vec![next];
    while next != eos && out.len() < max_len {
        let mut tape = Tape::inference();
        let hidden = decoder_hidden(&mut tape, model, None, &[next], pos, Some(&mut cache))?;
        let logits = project_logits(&mut tape, model, hidden)?;
        next = argmax(tape.value(logits).data()) as u32;
        out.push(next);
        pos += 1;
    }
    Ok(out)
}

/// Greedy decoding that recomputes the whole sequence at every step.
pub fn greedy_generate_uncached(
    model: &Model,
    soft: Option<&Tensor>,
    prompt: &[u32],
    max_len: usize,
    eos: u32,
) -> Result<Vec<u32>> {
    if max_len == 0 {
        return Err(Error::Usage("max_len must be at least 1".into()));
    }
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    loop {
        let mut tape = Tape::inference();
        let sv = soft_var(&mut tape, soft);
        let hidden = decoder_hidden(&mut tape, model, sv, &tokens, 0, None)?;
        let n = tape.value(hidden).rows();
        let last = tape.slice_rows(hidden, n - 1, n)?;
        let logits = project_logits(&mut tape, model, last)?;
        let next = argmax(tape.value(logits).data()) as u32;
        out.push(next);
        tokens.push(next);
        if next == eos || out.len() >= max_len {
            return Ok(out);
        }
    }
}

/// Greedy decoding of several independent requests, each with its own cache.
pub fn generate_batch(
    model: &Model,
    requests: &[(Option<Tensor>, Vec<u32>)],
    max_len: usize,
    eos: u32,
) -> Result<Vec<Vec<u32>>> {
    requests
        .iter()
        .map(|(soft, prompt)| greedy_generate(model, soft.as_ref(), prompt, max_len, eos))
        .collect()
}
