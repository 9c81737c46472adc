//! Analytic inference cost model.
//!
//! One transformer layer over `n` new tokens attending to `m` keys costs
//! projections, scores, softmax, value mixing and the output projection for
//! attention, plus `6·n·D·I` for the gated FFN. With `n = m = L_in` this is
//! the usual square-attention count. Normalization and residual additions
//! are not counted.
//!
//! Generation uses KV-cached accounting: a one-time prefill of the
//! `P = ⌈L/r⌉ + L_q` prefix, then `L_a` steps where step `i` runs one token
//! against `P + i` keys. The LM head (`2·D·V` per generated token) is
//! reported as its own line and included in the generation total.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsConfig {
    pub context_length: u64,
    pub question_length: u64,
    pub answer_length: u64,
    pub rate: f64,
    pub encoder_layers: u64,
    pub lsa_layers: u64,
    pub decoder_layers: u64,
    pub hidden_size: u64,
    pub head_dim: u64,
    pub query_heads: u64,
    pub kv_heads: u64,
    pub intermediate_size: u64,
    pub vocab_size: u64,
    /// Count every decoding step as a full recompute of the sequence.
    pub full_recompute: bool,
}

impl Default for FlopsConfig {
    /// 7B-class decoder dimensions with an 8-layer encoder and one LSA layer.
    fn default() -> Self {
        FlopsConfig {
            context_length: 3072,
            question_length: 32,
            answer_length: 100,
            rate: 8.0,
            encoder_layers: 8,
            lsa_layers: 1,
            decoder_layers: 32,
            hidden_size: 4096,
            head_dim: 128,
            query_heads: 32,
            kv_heads: 32,
            intermediate_size: 11008,
            vocab_size: 32000,
            full_recompute: false,
        }
    }
}

impl FlopsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("context_length", self.context_length),
            ("answer_length", self.answer_length),
            ("decoder_layers", self.decoder_layers),
            ("hidden_size", self.hidden_size),
            ("head_dim", self.head_dim),
            ("query_heads", self.query_heads),
            ("kv_heads", self.kv_heads),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("flops: {name} must be at least 1")));
        }
        if !self.rate.is_finite() || self.rate < 1.0 {
            return Err(Error::Config(format!("flops: rate {} must be a finite value >= 1", self.rate)));
        }
        Ok(())
    }

    /// `⌈L/r⌉`.
    pub fn compressed_length(&self) -> u64 {
        (self.context_length as f64 / self.rate).ceil() as u64
    }

    /// The same model without compression: rate 1, no encoder or LSA.
    pub fn baseline(&self) -> Self {
        FlopsConfig {
            rate: 1.0,
            encoder_layers: 0,
            lsa_layers: 0,
            ..self.clone()
        }
    }
}

/// Attention terms for `n` query rows over `m` keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionTerms {
    pub qkv: u64,
    pub qk: u64,
    pub softmax: u64,
    pub av: u64,
    pub out: u64,
}

impl AttentionTerms {
    pub fn total(&self) -> u64 {
        self.qkv + self.qk + self.softmax + self.av + self.out
    }

    /// The matmul-derived part, excluding softmax.
    pub fn matmul(&self) -> u64 {
        self.total() - self.softmax
    }
}

pub fn attention_terms(n: u64, m: u64, cfg: &FlopsConfig) -> AttentionTerms {
    let (dm, d, hq, hk) = (cfg.hidden_size, cfg.head_dim, cfg.query_heads, cfg.kv_heads);
    AttentionTerms {
        qkv: 2 * n * dm * d * hq + 4 * n * dm * d * hk,
        qk: 2 * hq * n * m * d,
        softmax: hq * n * m,
        av: 2 * hq * n * m * d,
        out: 2 * n * d * hq * dm,
    }
}

/// Attention cost of one layer over `l_in` tokens.
pub fn attention_flops(l_in: u64, cfg: &FlopsConfig) -> u64 {
    attention_terms(l_in, l_in, cfg).total()
}

/// FFN cost of one layer: `F^up = 2·L·D·2I` plus `F^down = 2·L·D·I`.
pub fn ffn_flops(l_in: u64, cfg: &FlopsConfig) -> Result<u64> {
    if l_in == 0 {
        return Err(Error::Usage("ffn_flops needs at least one token".into()));
    }
    Ok(6 * l_in * cfg.hidden_size * cfg.intermediate_size)
}

fn ffn(n: u64, cfg: &FlopsConfig) -> u64 {
    6 * n * cfg.hidden_size * cfg.intermediate_size
}

/// One layer: `n` new tokens attending to `m` keys (including themselves).
pub fn layer_flops(n: u64, m: u64, cfg: &FlopsConfig) -> u64 {
    attention_terms(n, m, cfg).total() + ffn(n, cfg)
}

/// `F^Encoder(L) + F^LSA(⌈L/r⌉)`.
pub fn compression_flops(cfg: &FlopsConfig) -> u64 {
    let l = cfg.context_length;
    let g = cfg.compressed_length();
    cfg.encoder_layers * layer_flops(l, l, cfg) + cfg.lsa_layers * layer_flops(g, g, cfg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct GenerationFlops {
    pub prefill: u64,
    pub decode: u64,
    pub lm_head: u64,
}

impl GenerationFlops {
    pub fn total(&self) -> u64 {
        self.prefill + self.decode + self.lm_head
    }
}

/// Decoder cost of generating `L_a` tokens after the compressed prefix.
pub fn generation_breakdown(cfg: &FlopsConfig) -> GenerationFlops {
    let p = cfg.compressed_length() + cfg.question_length;
    let n_dec = cfg.decoder_layers;
    let lm_head = cfg.answer_length * 2 * cfg.hidden_size * cfg.vocab_size;
    if cfg.full_recompute {
        let decode = (1..=cfg.answer_length).map(|i| layer_flops(p + i, p + i, cfg)).sum::<u64>() * n_dec;
        return GenerationFlops {
            prefill: 0,
            decode,
            lm_head,
        };
    }
    let prefill = if p == 0 { 0 } else { n_dec * layer_flops(p, p, cfg) };
    let decode = (1..=cfg.answer_length).map(|i| layer_flops(1, p + i, cfg)).sum::<u64>() * n_dec;
    GenerationFlops {
        prefill,
        decode,
        lm_head,
    }
}

pub fn generation_flops(cfg: &FlopsConfig) -> u64 {
    generation_breakdown(cfg).total()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub compression_flops: u64,
    pub generation: GenerationFlops,
    pub generation_flops: u64,
    pub total_flops: u64,
    pub baseline_total: u64,
    pub speedup_ratio: f64,
    pub accounting: &'static str,
    pub note: &'static str,
}

pub fn speedup_report(cfg: &FlopsConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let compression = compression_flops(cfg);
    let generation = generation_breakdown(cfg);
    let total = compression + generation.total();
    let base = cfg.baseline();
    let baseline_total = compression_flops(&base) + generation_flops(&base);
    Ok(FlopsReport {
        compression_flops: compression,
        generation,
        generation_flops: generation.total(),
        total_flops: total,
        baseline_total,
        speedup_ratio: baseline_total as f64 / total as f64,
        accounting: if cfg.full_recompute { "full-recompute" } else { "kv-cached" },
        note: "normalization and residual additions excluded; embedding lookup counted as zero",
    })
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accounting        {}", self.accounting)?;
        writeln!(f, "compression       {}", self.compression_flops)?;
        writeln!(f, "prefill           {}", self.generation.prefill)?;
        writeln!(f, "decode            {}", self.generation.decode)?;
        writeln!(f, "lm_head           {}", self.generation.lm_head)?;
        writeln!(f, "generation        {}", self.generation_flops)?;
        writeln!(f, "total             {}", self.total_flops)?;
        writeln!(f, "baseline_total    {}", self.baseline_total)?;
        writeln!(f, "speedup_ratio     {:.4}", self.speedup_ratio)?;
        write!(f, "note              {}", self.note)
    }
}

/// Writes one CSV row per `(L, r)` pair.
pub fn write_sweep<W: Write>(out: &mut W, base: &FlopsConfig, lengths: &[u64], rates: &[f64]) -> Result<()> {
    let io = |e| Error::io("<sweep>", e);
    writeln!(out, "context_length,rate,compression_flops,generation_flops,total_flops,baseline_total,speedup_ratio")
        .map_err(io)?;
    for &l in lengths {
        for &r in rates {
            let cfg = FlopsConfig {
                context_length: l,
                rate: r,
                ..base.clone()
            };
            let rep = speedup_report(&cfg)?;
            writeln!(
                out,
                "{l},{r},{},{},{},{},{:.6}",
                rep.compression_flops, rep.generation_flops, rep.total_flops, rep.baseline_total, rep.speedup_ratio
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::config::BlockConfig;
    use crate::nn::{causal_attention, stack_forward, swiglu_ffn, TransformerBlock};
    use crate::params::ParameterStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> FlopsConfig {
        FlopsConfig {
            context_length: 4,
            question_length: 0,
            answer_length: 1,
            rate: 4.0,
            encoder_layers: 2,
            lsa_layers: 1,
            decoder_layers: 1,
            hidden_size: 16,
            head_dim: 8,
            query_heads: 2,
            kv_heads: 2,
            intermediate_size: 32,
            vocab_size: 10,
            full_recompute: false,
        }
    }

    #[test]
    fn hand_evaluated_layer() {
        let t = attention_terms(4, 4, &toy());
        assert_eq!(
            t,
            AttentionTerms {
                qkv: 6144,
                qk: 512,
                softmax: 32,
                av: 512,
                out: 2048
            }
        );
        assert_eq!(attention_flops(4, &toy()), 9248);
        assert_eq!(ffn_flops(4, &toy()).unwrap(), 12288);
        assert!(ffn_flops(0, &toy()).is_err());
        assert_eq!(ffn_flops(8, &toy()).unwrap(), 2 * ffn_flops(4, &toy()).unwrap());
    }

    #[test]
    fn quadratic_terms() {
        let c = toy();
        let one = attention_terms(1, 1, &c);
        assert_eq!(one.qk, 2 * 2 * 8);
        assert_eq!(one.softmax, 2);
        assert_eq!(attention_terms(8, 8, &c).qk, 4 * attention_terms(4, 4, &c).qk);
    }

    #[test]
    fn compression_composes_layers() {
        let c = toy();
        let one_at_1 = attention_flops(1, &c) + ffn_flops(1, &c).unwrap();
        assert_eq!(compression_flops(&c), 2 * 21536 + one_at_1);
        let single = FlopsConfig {
            encoder_layers: 1,
            lsa_layers: 0,
            ..c.clone()
        };
        assert_eq!(compression_flops(&single), 21536);
        let mut prev = 0;
        for l in 1..40 {
            let v = compression_flops(&FlopsConfig {
                context_length: l,
                ..c.clone()
            });
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn single_step_generation_by_hand() {
        // L=4, r=4, L_q=0: a one-token prefix, then one step over two keys.
        let g = generation_breakdown(&toy());
        // qkv 1536, qk 32, softmax 2, av 32, out 512, ffn 3072
        assert_eq!(g.prefill, 5186);
        // qk 64, softmax 4, av 64 against two keys
        assert_eq!(g.decode, 5252);
        assert_eq!(g.lm_head, 320);
    }

    #[test]
    fn generation_decreases_with_rate() {
        let c = FlopsConfig {
            context_length: 256,
            question_length: 8,
            answer_length: 5,
            ..toy()
        };
        let mut prev = u64::MAX;
        for r in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let g = generation_flops(&FlopsConfig { rate: r, ..c.clone() });
            assert!(g < prev);
            prev = g;
        }
    }

    #[test]
    fn baseline_and_overhead() {
        let c = FlopsConfig {
            context_length: 64,
            question_length: 4,
            answer_length: 3,
            ..toy()
        };
        let base = c.baseline();
        let rep = speedup_report(&base).unwrap();
        assert_eq!(rep.total_flops, rep.baseline_total);
        assert_eq!(rep.speedup_ratio, 1.0);
        let overhead = speedup_report(&FlopsConfig { rate: 1.0, ..c.clone() }).unwrap();
        assert!(overhead.speedup_ratio < 1.0);
        let rep = speedup_report(&c).unwrap();
        assert_eq!(rep.total_flops, rep.compression_flops + rep.generation_flops);
        assert_eq!(rep.generation_flops, rep.generation.prefill + rep.generation.decode + rep.generation.lm_head);
    }

    #[test]
    fn full_recompute_costs_more() {
        let c = FlopsConfig {
            context_length: 64,
            question_length: 4,
            answer_length: 6,
            ..toy()
        };
        let cached = generation_flops(&c);
        let full = generation_flops(&FlopsConfig {
            full_recompute: true,
            ..c
        });
        assert!(full > cached);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(FlopsConfig { rate: 0.5, ..toy() }.validate().is_err());
        assert!(FlopsConfig { decoder_layers: 0, ..toy() }.validate().is_err());
        assert!(FlopsConfig { rate: f64::NAN, ..toy() }.validate().is_err());
    }

    #[test]
    fn sweep_csv_has_one_row_per_pair() {
        let mut buf = Vec::new();
        write_sweep(&mut buf, &toy(), &[16, 32], &[2.0, 4.0, 8.0]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
    }

    fn random_block(rng: &mut ChaCha8Rng) -> (FlopsConfig, BlockConfig) {
        let d = 2 * rng.gen_range(1..=4);
        let hk = rng.gen_range(1..=2);
        let hq = hk * rng.gen_range(1..=2);
        let i = rng.gen_range(4..=24);
        let block = BlockConfig {
            hidden_size: hq * d,
            head_dim: d,
            num_query_heads: hq,
            num_kv_heads: hk,
            intermediate_size: i,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        };
        let flops = FlopsConfig {
            hidden_size: (hq * d) as u64,
            head_dim: d as u64,
            query_heads: hq as u64,
            kv_heads: hk as u64,
            intermediate_size: i as u64,
            ..toy()
        };
        (flops, block)
    }

    #[test]
    fn instrumented_counter_matches_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let (fc, bc) = random_block(&mut rng);
            let mut store = ParameterStore::new();
            let blocks: Vec<_> = (0..2)
                .map(|l| TransformerBlock::create(&mut store, &format!("b{l}"), &bc, 0.1, &mut rng).unwrap())
                .collect();
            let n = rng.gen_range(1..=9);
            let positions: Vec<usize> = (0..n).collect();
            let x = store.insert_normal("x", &[n, bc.hidden_size], 1.0, &mut rng).unwrap();

            let mut tape = Tape::inference();
            let xv = store.bind(&mut tape, x);
            causal_attention(&mut tape, &store, &blocks[0], &bc, xv, &positions, None).unwrap();
            let counted = tape.flops();
            let terms = attention_terms(n as u64, n as u64, &fc);
            assert_eq!(counted.matmul, terms.matmul());
            assert_eq!(counted.softmax, terms.softmax);
            assert_eq!(counted.total(), attention_flops(n as u64, &fc));

            tape.reset_flops();
            swiglu_ffn(&mut tape, &store, &blocks[0], xv).unwrap();
            assert_eq!(tape.flops().total(), ffn_flops(n as u64, &fc).unwrap());

            tape.reset_flops();
            stack_forward(&mut tape, &store, &blocks, &bc, xv, &positions, None).unwrap();
            assert_eq!(tape.flops().total(), 2 * layer_flops(n as u64, n as u64, &fc));
        }
    }
}
