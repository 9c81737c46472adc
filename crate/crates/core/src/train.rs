//! Training: decoder pretraining, autoencoder training of the compressor and
//! attention-only fine-tuning of the decoder.
//!
//! Every stage minimizes the mean token cross-entropy of `targets` given an
//! optional soft prefix (the compressed context) and a prompt. Gradients are
//! averaged over the batch, clipped by global norm and applied with AdamW on
//! a linearly decaying learning rate.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::compressor::compress_on_tape;
use crate::config::{DataConfig, Stage, TrainConfig, Variant};
use crate::data::SampleRecord;
use crate::decoder::loss_on_tape;
use crate::error::{Error, Result};
use crate::model::{Compressor, Model};
use crate::params::{ParamId, ParameterStore};
use crate::tokenizer::{encode, AE_INS, BOS, EOS};

/// One training sequence. With a non-empty `context` the context is
/// compressed into soft tokens that precede the prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub context: Vec<u32>,
    pub prompt: Vec<u32>,
    pub targets: Vec<u32>,
}

fn with_eos(text: &str) -> Vec<u32> {
    let mut t = encode(text);
    t.push(EOS);
    t
}

impl Example {
    /// Restoration: `[m̃, AE_INS] → context, EOS`.
    pub fn ae(record: &SampleRecord) -> Self {
        Example {
            context: encode(&record.context),
            prompt: vec![AE_INS],
            targets: with_eos(&record.context),
        }
    }

    /// Question answering: `[m̃, question] → answer, EOS`.
    pub fn keft(record: &SampleRecord) -> Result<Self> {
        let (q, a) = record.qa()?;
        Ok(Example {
            context: encode(&record.context),
            prompt: encode(q),
            targets: with_eos(a),
        })
    }

    pub fn lm(prompt: Vec<u32>, targets: Vec<u32>) -> Self {
        Example {
            context: Vec::new(),
            prompt,
            targets,
        }
    }
}

/// Decoder pretraining sequences: `[BOS] → x, EOS` for every context, and
/// optionally the copy format `x, AE_INS → x, EOS` and the in-context QA
/// format `x, question → answer, EOS`.
pub fn pretrain_examples(records: &[SampleRecord], data: &DataConfig) -> Vec<Example> {
    let mut out = Vec::new();
    for r in records {
        let x = encode(&r.context);
        out.push(Example::lm(vec![BOS], with_eos(&r.context)));
        if data.pretrain_copy {
            let mut prompt = x.clone();
            prompt.push(AE_INS);
            out.push(Example::lm(prompt, with_eos(&r.context)));
        }
        if data.pretrain_qa {
            if let Ok((q, a)) = r.qa() {
                let mut prompt = x.clone();
                prompt.extend(encode(q));
                out.push(Example::lm(prompt, with_eos(a)));
            }
        }
    }
    out
}

/// Mean cross-entropy of one example, compressing its context at `rate`.
pub fn example_loss(tape: &mut Tape, model: &Model, ex: &Example, rate: Option<usize>) -> Result<Var> {
    let soft = match (ex.context.is_empty(), rate) {
        (false, Some(r)) => Some(compress_on_tape(tape, model, &ex.context, r)?),
        (false, None) => return Err(Error::Usage("a context needs a compression rate".into())),
        (true, _) => None,
    };
    loss_on_tape(tape, model, soft, &ex.prompt, &ex.targets)
}

/// Which parameters a stage updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableMask {
    pub stage: Stage,
    flags: Vec<bool>,
}

impl TrainableMask {
    /// Pretraining trains the whole decoder. AE trains the encoder LoRA
    /// adapters plus the LSA blocks (GMSA) or the appended tokens and MLP
    /// (TCP), and the decoder too when `unfreeze_decoder` is set. KEFT trains
    /// only the decoder's `W_Q`, `W_K`, `W_V`.
    pub fn for_stage(model: &Model, stage: Stage, unfreeze_decoder: bool) -> Result<Self> {
        let mut flags = vec![false; model.store.len()];
        let mut set = |ids: &[ParamId]| ids.iter().for_each(|id| flags[id.index()] = true);
        let decoder_all = || {
            let d = &model.decoder;
            let mut ids = vec![d.embed, d.norm, d.head];
            ids.extend(d.blocks.iter().flat_map(|b| b.base_params()));
            ids
        };
        match stage {
            Stage::Pretrain => set(&decoder_all()),
            Stage::Ae => {
                match model.compressor.as_ref() {
                    Some(Compressor::Gmsa(g)) => {
                        set(&g.encoder.lora_params());
                        let lsa: Vec<_> = g.lsa.iter().flat_map(|b| b.base_params()).collect();
                        set(&lsa);
                    }
                    Some(Compressor::Tcp(t)) => {
                        set(&t.encoder.lora_params());
                        set(&[t.tokens, t.mlp_w1, t.mlp_w2]);
                    }
                    None => return Err(Error::State("AE training needs a compressor".into())),
                }
                if unfreeze_decoder {
                    set(&decoder_all());
                }
            }
            Stage::Keft => {
                if model.compressor.is_none() {
                    return Err(Error::State("KEFT needs a trained compressor".into()));
                }
                set(&model.decoder.qkv_params());
            }
        }
        Ok(TrainableMask { stage, flags })
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.flags.get(id.index()).copied().unwrap_or(false)
    }

    pub fn apply(&self, store: &mut ParameterStore) -> Result<()> {
        if store.len() != self.flags.len() {
            return Err(Error::State(format!(
                "mask covers {} parameters, store has {}",
                self.flags.len(),
                store.len()
            )));
        }
        for id in store.ids().collect::<Vec<_>>() {
            store.set_trainable(id, self.is_trainable(id));
        }
        Ok(())
    }

    pub fn trainable_names<'a>(&self, store: &'a ParameterStore) -> Vec<&'a str> {
        store
            .iter()
            .filter(|(id, _)| self.is_trainable(*id))
            .map(|(_, p)| p.name.as_str())
            .collect()
    }
}

/// Uniform draw from the allowed rates.
pub fn sample_rate<R: Rng>(rng: &mut R, allowed: &[usize]) -> Result<usize> {
    allowed
        .choose(rng)
        .copied()
        .ok_or_else(|| Error::Config("allowed_rates is empty".into()))
}

/// `lr · (1 − step/total)` for the 0-based step about to be taken.
pub fn scheduled_lr(cfg: &TrainConfig, step: usize) -> f64 {
    cfg.learning_rate * (1.0 - step as f64 / cfg.total_steps as f64)
}

/// AdamW moments for every trainable parameter seen so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub t: u64,
    moments: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &[f64], &[f64])> {
        self.moments.iter().map(|(&i, (m, v))| (ParamId(i), m.as_slice(), v.as_slice()))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>) {
        self.moments.insert(id.index(), (m, v));
    }

    /// Clips the stored gradients of trainable parameters to `clip_norm`
    /// and applies one AdamW step at learning rate `lr`.
    pub fn update(&mut self, store: &mut ParameterStore, cfg: &TrainConfig, lr: f64) -> Result<UpdateStats> {
        for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
            let bad = p.grad.iter().filter(|g| !g.is_finite()).count();
            if bad > 0 {
                return Err(Error::NonFinite {
                    param: p.name.clone(),
                    count: bad,
                });
            }
        }
        let grad_norm = store.grad_norm();
        let scale = if grad_norm > cfg.clip_norm {
            cfg.clip_norm / grad_norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
        for id in ids {
            let p = store.get_mut(id);
            let n = p.grad.len();
            let (m, v) = self
                .moments
                .entry(id.index())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let w = p.value.data_mut();
            for j in 0..n {
                let g = p.grad[j] * scale;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * w[j]);
            }
        }
        Ok(UpdateStats {
            grad_norm,
            clipped_norm: grad_norm * scale,
            lr,
        })
    }
}

/// One line of the step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub rate_histogram: BTreeMap<usize, usize>,
}

/// Resumable trainer bookkeeping, excluding optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub stage: Stage,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub adam_t: u64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub rates: Vec<usize>,
    pub mask: TrainableMask,
    pub opt: AdamW,
    pub step: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    /// Builds the stage mask and applies it to the model.
    pub fn new(model: &mut Model, stage: Stage, config: TrainConfig, rates: Vec<usize>) -> Result<Self> {
        config.validate()?;
        if stage != Stage::Pretrain && rates.is_empty() {
            return Err(Error::Config("allowed_rates is empty".into()));
        }
        if stage == Stage::Keft && model.variant() == Some(Variant::Gmsa) && !model.lsa_initialized {
            return Err(Error::State("LSA blocks were never initialized".into()));
        }
        let mask = TrainableMask::for_stage(model, stage, stage == Stage::Ae && config.unfreeze_decoder)?;
        mask.apply(&mut model.store)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            config,
            rates,
            mask,
            opt: AdamW::new(),
            step: 0,
            rng,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn stage(&self) -> Stage {
        self.mask.stage
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            stage: self.stage(),
            step: self.step,
            rng: self.rng.clone(),
            order: self.order.clone(),
            cursor: self.cursor,
            adam_t: self.opt.t,
        }
    }

    pub fn restore_state(&mut self, state: TrainerState) -> Result<()> {
        if state.stage != self.stage() {
            return Err(Error::State(format!(
                "checkpoint trainer is for stage {}, not {}",
                state.stage,
                self.stage()
            )));
        }
        self.step = state.step;
        self.rng = state.rng;
        self.order = state.order;
        self.cursor = state.cursor;
        self.opt.t = state.adam_t;
        Ok(())
    }

    /// Next batch of indices, reshuffling at each epoch boundary.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        (0..self.config.batch_size)
            .map(|_| {
                if self.cursor >= self.order.len() || self.order.len() != n {
                    self.order = (0..n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// One optimizer step on the next batch drawn from `data`.
    pub fn step(&mut self, model: &mut Model, data: &[Example]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let batch = self.next_batch(data.len());
        let items: Vec<&Example> = batch.iter().map(|&i| &data[i]).collect();
        self.step_on(model, &items)
    }

    /// One optimizer step on exactly the given examples.
    pub fn step_on(&mut self, model: &mut Model, batch: &[&Example]) -> Result<StepLog> {
        if self.is_done() {
            return Err(Error::State(format!("all {} steps already taken", self.config.total_steps)));
        }
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let uses_context = self.stage() != Stage::Pretrain;
        let mut histogram = BTreeMap::new();
        model.store.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for ex in batch {
            let rate = if uses_context {
                let r = sample_rate(&mut self.rng, &self.rates)?;
                *histogram.entry(r).or_insert(0) += 1;
                Some(r)
            } else {
                None
            };
            let mut tape = Tape::new();
            let loss = example_loss(&mut tape, model, ex, rate)?;
            total += tape.value(loss).item();
            tape.backward(loss)?;
            model.store.accumulate_grads(&tape, scale);
        }
        let lr = scheduled_lr(&self.config, self.step);
        let stats = self.opt.update(&mut model.store, &self.config, lr)?;
        let log = StepLog {
            step: self.step,
            stage: self.stage(),
            loss: total * scale,
            lr,
            grad_norm: stats.grad_norm,
            rate_histogram: histogram,
        };
        self.step += 1;
        Ok(log)
    }

    /// Runs until `total_steps`, calling `on_step` after every step.
    pub fn run<F: FnMut(&StepLog)>(&mut self, model: &mut Model, data: &[Example], mut on_step: F) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while !self.is_done() {
            let log = self.step(model, data)?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

fn expect_stage(trainer: &Trainer, stage: Stage) -> Result<()> {
    if trainer.stage() != stage {
        return Err(Error::Usage(format!(
            "trainer mask is for stage {}, not {stage}",
            trainer.stage()
        )));
    }
    Ok(())
}

/// One autoencoder step on a batch of records.
pub fn ae_train_step(trainer: &mut Trainer, model: &mut Model, batch: &[SampleRecord]) -> Result<StepLog> {
    expect_stage(trainer, Stage::Ae)?;
    let ex: Vec<Example> = batch.iter().map(Example::ae).collect();
    trainer.step_on(model, &ex.iter().collect::<Vec<_>>())
}

/// One knowledge-extraction step on a batch of question-answer records.
pub fn keft_train_step(trainer: &mut Trainer, model: &mut Model, batch: &[SampleRecord]) -> Result<StepLog> {
    expect_stage(trainer, Stage::Keft)?;
    let ex = batch.iter().map(Example::keft).collect::<Result<Vec<_>>>()?;
    trainer.step_on(model, &ex.iter().collect::<Vec<_>>())
}

/// One next-token step on plain sequences, each `[BOS] → tokens`.
pub fn pretrain_lm_step(trainer: &mut Trainer, model: &mut Model, batch: &[Vec<u32>]) -> Result<StepLog> {
    expect_stage(trainer, Stage::Pretrain)?;
    let ex: Vec<Example> = batch.iter().map(|t| Example::lm(vec![BOS], t.clone())).collect();
    trainer.step_on(model, &ex.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::tensor::Tensor;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden_size: 16,
            num_heads: 2,
            num_kv_heads: 2,
            intermediate_size: 32,
            decoder_layers: 2,
            encoder_layers: 2,
            lsa_layers: 1,
            init_std: 0.1,
            ..ModelConfig::default()
        }
    }

    fn gmsa() -> Model {
        let mut m = Model::new(tiny()).unwrap();
        m.attach_compressor(Variant::Gmsa).unwrap();
        m
    }

    fn cfg(lr: f64, steps: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            batch_size: 1,
            total_steps: steps,
            ..TrainConfig::for_stage(Stage::Ae)
        }
    }

    fn scalar_store(x: f64) -> (ParameterStore, ParamId) {
        let mut s = ParameterStore::new();
        let id = s.insert("x", Tensor::new(vec![1], vec![x]).unwrap()).unwrap();
        s.set_trainable(id, true);
        (s, id)
    }

    #[test]
    fn rate_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        assert!((0..50).all(|_| sample_rate(&mut rng, &[4]).unwrap() == 4));
        let draws: Vec<usize> = (0..10_000).map(|_| sample_rate(&mut rng, &[4, 8]).unwrap()).collect();
        let fours = draws.iter().filter(|&&r| r == 4).count() as f64 / 1e4;
        assert!((0.47..=0.53).contains(&fours), "{fours}");
        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            (0..20).map(|_| sample_rate(&mut r, &[4, 8]).unwrap()).collect()
        };
        let mut r = ChaCha8Rng::seed_from_u64(3);
        assert!(a.iter().all(|&x| x == sample_rate(&mut r, &[4, 8]).unwrap()));
        assert!(matches!(sample_rate(&mut r, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_is_linear_to_zero() {
        let c = cfg(0.25, 7);
        for s in 0..7 {
            assert_eq!(scheduled_lr(&c, s) / scheduled_lr(&c, 0), 1.0 - s as f64 / 7.0);
        }
        assert_eq!(scheduled_lr(&cfg(1e-4, 10), 10), 0.0);
    }

    #[test]
    fn adamw_hand_trace_on_quadratic() {
        // f(x) = x², x₀ = 1, lr 0.1 over 3 scheduled steps, decay 0.01.
        // Values from stepping the AdamW recurrences by hand.
        let c = TrainConfig {
            learning_rate: 0.1,
            total_steps: 3,
            clip_norm: 100.0,
            ..TrainConfig::for_stage(Stage::Ae)
        };
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamW::new();
        let expected = [0.899_000_000_5, 0.832_012_684_945_681, 0.798_709_699_363_159_9];
        for (step, want) in expected.iter().enumerate() {
            let x = s.value(id).data()[0];
            s.get_mut(id).grad[0] = 2.0 * x;
            opt.update(&mut s, &c, scheduled_lr(&c, step)).unwrap();
            assert!((s.value(id).data()[0] - want).abs() < 1e-12, "step {step}: {}", s.value(id).data()[0]);
        }
    }

    #[test]
    fn zero_grad_without_decay_is_bitwise_noop() {
        let (mut s, id) = scalar_store(0.123_456_789);
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg(0.1, 10)
        };
        AdamW::new().update(&mut s, &c, 0.1).unwrap();
        assert_eq!(s.value(id).data()[0], 0.123_456_789);
        let c = TrainConfig {
            weight_decay: 0.5,
            ..c
        };
        AdamW::new().update(&mut s, &c, 0.1).unwrap();
        assert_eq!(s.value(id).data()[0], 0.123_456_789 - 0.1 * (0.5 * 0.123_456_789));
    }

    #[test]
    fn clipping_scales_to_clip_norm() {
        let mut s = ParameterStore::new();
        let id = s.insert("w", Tensor::zeros(&[2])).unwrap();
        s.set_trainable(id, true);
        s.get_mut(id).grad.copy_from_slice(&[6.0, 8.0]);
        let stats = AdamW::new().update(&mut s, &cfg(0.1, 10), 0.1).unwrap();
        assert_eq!(stats.grad_norm, 10.0);
        assert!(stats.clipped_norm <= 2.0 + 1e-9);
        assert!((stats.clipped_norm - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = scalar_store(1.0);
        s.get_mut(id).grad[0] = f64::NAN;
        match AdamW::new().update(&mut s, &cfg(0.1, 10), 0.1) {
            Err(Error::NonFinite { param, count }) => {
                assert_eq!(param, "x");
                assert_eq!(count, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn masks_follow_stage_contract() {
        let m = gmsa();
        let ae = TrainableMask::for_stage(&m, Stage::Ae, false).unwrap();
        let names = ae.trainable_names(&m.store);
        assert!(names.iter().all(|n| n.contains("lora") || n.starts_with("lsa.")));
        assert_eq!(names.iter().filter(|n| n.contains("lora")).count(), 8);
        let keft = TrainableMask::for_stage(&m, Stage::Keft, false).unwrap();
        let names = keft.trainable_names(&m.store);
        assert_eq!(names.len(), 6);
        assert!(names
            .iter()
            .all(|n| n.starts_with("decoder.layers.") && (n.ends_with("wq") || n.ends_with("wk") || n.ends_with("wv"))));
        assert!(TrainableMask::for_stage(&Model::new(tiny()).unwrap(), Stage::Ae, false).is_err());
    }

    #[test]
    fn ae_step_leaves_frozen_weights_bitwise_identical() {
        let mut m = gmsa();
        let before = m.store.clone();
        let mut tr = Trainer::new(&mut m, Stage::Ae, cfg(1e-2, 5), vec![2, 4]).unwrap();
        let batch = [SampleRecord::restoration("a", "hello world")];
        for _ in 0..3 {
            ae_train_step(&mut tr, &mut m, &batch).unwrap();
        }
        let mut changed = 0;
        for (id, p) in m.store.iter() {
            if tr.mask.is_trainable(id) {
                changed += usize::from(p.value != *before.value(id));
            } else {
                assert_eq!(p.value, *before.value(id), "{} moved", p.name);
            }
        }
        assert!(changed > 0);
        assert!(matches!(keft_train_step(&mut tr, &mut m, &batch), Err(Error::Usage(_))));
    }

    #[test]
    fn keft_step_touches_only_qkv() {
        let mut m = gmsa();
        let before = m.store.clone();
        let mut tr = Trainer::new(&mut m, Stage::Keft, cfg(1e-2, 5), vec![4]).unwrap();
        let mut rec = SampleRecord::restoration("q", "ab=123;cd=456");
        rec.question = Some("cd?".into());
        rec.answers = Some(vec!["456".into()]);
        let log = keft_train_step(&mut tr, &mut m, &[rec.clone()]).unwrap();
        assert!(log.loss > 0.0);
        for (id, p) in m.store.iter() {
            let qkv = m.decoder.qkv_params().contains(&id);
            if !qkv {
                assert_eq!(p.value, *before.value(id), "{} moved", p.name);
            }
        }
        let wq = m.decoder.blocks[0].wq;
        assert_ne!(m.store.value(wq), before.value(wq));
        rec.answers = None;
        assert!(matches!(keft_train_step(&mut tr, &mut m, &[rec]), Err(Error::Data(_))));
    }

    #[test]
    fn pretrain_loss_starts_near_ln_v() {
        let mut m = Model::new(ModelConfig {
            init_std: 0.02,
            ..tiny()
        })
        .unwrap();
        let mut tr = Trainer::new(&mut m, Stage::Pretrain, cfg(1e-3, 10), vec![]).unwrap();
        let log = pretrain_lm_step(&mut tr, &mut m, &[encode("some text here")]).unwrap();
        let ln_v = (260f64).ln();
        assert!((log.loss - ln_v).abs() < 0.05 * ln_v, "{}", log.loss);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let run = || {
            let mut m = gmsa();
            let mut tr = Trainer::new(&mut m, Stage::Ae, cfg(1e-2, 6), vec![2, 4]).unwrap();
            let data: Vec<Example> = ["abc def", "ghi jkl mno", "pq"]
                .iter()
                .map(|t| Example::ae(&SampleRecord::restoration("x", *t)))
                .collect();
            tr.run(&mut m, &data, |_| {}).unwrap().iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trainer_stops_after_total_steps() {
        let mut m = gmsa();
        let mut tr = Trainer::new(&mut m, Stage::Ae, cfg(1e-3, 1), vec![2]).unwrap();
        let data = [Example::ae(&SampleRecord::restoration("x", "abcd"))];
        tr.step(&mut m, &data).unwrap();
        assert!(matches!(tr.step(&mut m, &data), Err(Error::State(_))));
    }
}
