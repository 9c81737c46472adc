//! End-to-end helpers shared by the command line and the experiments.

use std::io::Write;

use serde_json::Map;

use crate::compressor::{compress, CompressionArtifact};
use crate::config::{Stage, TrainConfig};
use crate::data::SampleRecord;
use crate::decoder::{greedy_generate, sequence_nll, DecoderInput, Prompt};
use crate::error::{Error, Result};
use crate::metrics::{bleu, perplexity, prefix_exact_match, qa_scores, Prediction};
use crate::model::Model;
use crate::tokenizer::{decode, encode, until_eos, AE_INS, EOS};
use crate::train::{Example, StepLog, Trainer};

/// Trains `model` for one stage, writing each step as a JSON line to `log`.
pub fn run_stage<W: Write>(
    model: &mut Model,
    stage: Stage,
    config: TrainConfig,
    rates: Vec<usize>,
    data: &[Example],
    mut log: Option<&mut W>,
) -> Result<(Trainer, Vec<StepLog>)> {
    let mut trainer = Trainer::new(model, stage, config, rates)?;
    let mut io_err = None;
    let logs = trainer.run(model, data, |l| {
        if let Some(w) = log.as_deref_mut() {
            let res = serde_json::to_writer(&mut *w, l)
                .map_err(Error::from)
                .and_then(|_| w.write_all(b"\n").map_err(|e| Error::io("<step log>", e)));
            if let Err(e) = res {
                io_err.get_or_insert(e);
            }
        }
    })?;
    match io_err {
        Some(e) => Err(e),
        None => Ok((trainer, logs)),
    }
}

/// Greedy restoration of one artifact, stopping at EOS.
pub fn restore_artifact(model: &Model, artifact: &CompressionArtifact, max_len: usize) -> Result<Vec<u32>> {
    let out = greedy_generate(model, Some(&artifact.soft_tokens), &[AE_INS], max_len, EOS)?;
    Ok(until_eos(&out).to_vec())
}

/// Compresses a context and answers the record's question from it.
pub fn answer_record(model: &Model, record: &SampleRecord, rate: usize, max_len: usize) -> Result<String> {
    let q = record
        .question
        .as_deref()
        .ok_or_else(|| Error::Data(format!("record {} has no question", record.id)))?;
    let art = compress(model, &encode(&record.context), rate)?;
    let out = greedy_generate(model, Some(&art.soft_tokens), &encode(q), max_len, EOS)?;
    Ok(decode(until_eos(&out)))
}

pub fn prediction(id: &str, text: String) -> Prediction {
    Prediction {
        id: id.to_string(),
        prediction: text,
        extra: Map::new(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RestorationSummary {
    pub prefix_em: f64,
    pub bleu: f64,
    /// Perplexity of the reference text given the soft tokens.
    pub perplexity: f64,
}

/// Restores every record at `rate` and averages the metrics.
pub fn evaluate_restoration(model: &Model, records: &[SampleRecord], rate: usize) -> Result<RestorationSummary> {
    if records.is_empty() {
        return Err(Error::Data("no records to evaluate".into()));
    }
    let mut s = RestorationSummary::default();
    let mut nll = Vec::new();
    for r in records {
        let x = encode(&r.context);
        let art = compress(model, &x, rate)?;
        let out = restore_artifact(model, &art, x.len() + 1)?;
        s.prefix_em += prefix_exact_match(&out, &x);
        s.bleu += bleu(&out, &x, 4);
        let mut targets = x.clone();
        targets.push(EOS);
        let (_, per) = sequence_nll(
            model,
            &DecoderInput {
                soft: Some(art.soft_tokens),
                prompt: Prompt::restore(),
                targets,
            },
        )?;
        nll.extend(per);
    }
    let n = records.len() as f64;
    s.prefix_em /= n;
    s.bleu /= n;
    s.perplexity = perplexity(&nll)?;
    Ok(s)
}

/// Mean QA exact match and F1 at `rate`.
pub fn evaluate_qa(model: &Model, records: &[SampleRecord], rate: usize, max_len: usize) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::Data("no records to evaluate".into()));
    }
    let (mut em, mut f1) = (0.0, 0.0);
    for r in records {
        let (_, gold) = r.qa()?;
        let pred = answer_record(model, r, rate, max_len)?;
        let s = qa_scores(&pred, &[gold.to_string()]);
        em += s.em;
        f1 += s.f1;
    }
    let n = records.len() as f64;
    Ok((em / n, f1 / n))
}
