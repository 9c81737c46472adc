//! LLaMA-style transformer blocks recorded on the tape: RMSNorm, rotary
//! embeddings, grouped-query causal attention with an optional KV cache,
//! SwiGLU feed-forward, and LoRA adapters on linear maps.
//!
//! Weights are stored `[in × out]` so a linear map is `x · W`.

use rand::Rng;

use crate::autodiff::{AttentionShape, Tape, Var};
use crate::config::BlockConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

/// Low-rank update `scale · (x·A)·B` attached to a base weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

impl LoraAdapter {
    /// `A` is normal with std `1/√in`; `B` starts at zero so the adapted map
    /// equals the base map until `B` is trained.
    pub fn create<R: Rng>(
        store: &mut ParameterStore,
        target: &str,
        base: ParamId,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = store.value(base).shape().to_vec();
        let (din, dout) = (shape[0], shape[1]);
        let a = store.insert_normal(&format!("{target}.lora_a"), &[din, rank], 1.0 / (din as f64).sqrt(), rng)?;
        let b = store.insert(&format!("{target}.lora_b"), Tensor::zeros(&[rank, dout]))?;
        Ok(LoraAdapter {
            a,
            b,
            scale: alpha / rank as f64,
        })
    }

    pub fn lookup(store: &ParameterStore, target: &str, rank: usize, alpha: f64) -> Result<Option<Self>> {
        let name_a = format!("{target}.lora_a");
        if !store.contains(&name_a) {
            return Ok(None);
        }
        Ok(Some(LoraAdapter {
            a: store.id(&name_a)?,
            b: store.id(&format!("{target}.lora_b"))?,
            scale: alpha / rank as f64,
        }))
    }
}

/// Parameter handles of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub prefix: String,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
    pub attn_norm: ParamId,
    pub ffn_norm: ParamId,
    pub lora_q: Option<LoraAdapter>,
    pub lora_v: Option<LoraAdapter>,
}

const BASE_NAMES: [&str; 9] = [
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ffn.w_gate",
    "ffn.w_up",
    "ffn.w_down",
    "attn_norm",
    "ffn_norm",
];

impl TransformerBlock {
    pub fn create<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        cfg: &BlockConfig,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_size;
        let qw = cfg.num_query_heads * cfg.head_dim;
        let kw = cfg.kv_width();
        let i = cfg.intermediate_size;
        let shapes: [Vec<usize>; 7] = [
            vec![d, qw],
            vec![d, kw],
            vec![d, kw],
            vec![qw, d],
            vec![d, i],
            vec![d, i],
            vec![i, d],
        ];
        for (name, shape) in BASE_NAMES.iter().zip(&shapes) {
            store.insert_normal(&format!("{prefix}.{name}"), shape, std, rng)?;
        }
        store.insert(&format!("{prefix}.attn_norm"), Tensor::filled(&[d], 1.0))?;
        store.insert(&format!("{prefix}.ffn_norm"), Tensor::filled(&[d], 1.0))?;
        Self::lookup(store, prefix, 1, 1.0)
    }

    /// Resolves a block by name; LoRA adapters are picked up when present.
    pub fn lookup(store: &ParameterStore, prefix: &str, lora_rank: usize, lora_alpha: f64) -> Result<Self> {
        let id = |n: &str| store.id(&format!("{prefix}.{n}"));
        Ok(TransformerBlock {
            prefix: prefix.to_string(),
            wq: id("attn.wq")?,
            wk: id("attn.wk")?,
            wv: id("attn.wv")?,
            wo: id("attn.wo")?,
            w_gate: id("ffn.w_gate")?,
            w_up: id("ffn.w_up")?,
            w_down: id("ffn.w_down")?,
            attn_norm: id("attn_norm")?,
            ffn_norm: id("ffn_norm")?,
            lora_q: LoraAdapter::lookup(store, &format!("{prefix}.attn.wq"), lora_rank, lora_alpha)?,
            lora_v: LoraAdapter::lookup(store, &format!("{prefix}.attn.wv"), lora_rank, lora_alpha)?,
        })
    }

    /// Attaches fresh adapters to `W_Q` and `W_V`.
    pub fn attach_lora<R: Rng>(&mut self, store: &mut ParameterStore, rank: usize, alpha: f64, rng: &mut R) -> Result<()> {
        self.lora_q = Some(LoraAdapter::create(store, &format!("{}.attn.wq", self.prefix), self.wq, rank, alpha, rng)?);
        self.lora_v = Some(LoraAdapter::create(store, &format!("{}.attn.wv", self.prefix), self.wv, rank, alpha, rng)?);
        Ok(())
    }

    pub fn base_params(&self) -> [ParamId; 9] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.w_gate,
            self.w_up,
            self.w_down,
            self.attn_norm,
            self.ffn_norm,
        ]
    }

    pub fn lora_params(&self) -> Vec<ParamId> {
        [self.lora_q, self.lora_v]
            .into_iter()
            .flatten()
            .flat_map(|l| [l.a, l.b])
            .collect()
    }

    /// Overwrites this block's base weights with `src`'s.
    pub fn copy_from(&self, store: &mut ParameterStore, src: &TransformerBlock) -> Result<()> {
        for (from, to) in src.base_params().into_iter().zip(self.base_params()) {
            store.copy_value(from, to)?;
        }
        Ok(())
    }
}

/// Post-rotary keys and values of earlier positions for one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    pub keys: Option<Tensor>,
    pub values: Option<Tensor>,
    pub last_position: Option<usize>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.keys.as_ref().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        KvCache {
            layers: vec![LayerCache::default(); layers],
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn rmsnorm(tape: &mut Tape, x: Var, scale: Var, eps: f64) -> Result<Var> {
    tape.rmsnorm(x, scale, eps)
}

/// Rotary embedding of a `[n × heads·head_dim]` matrix outside any tape.
pub fn rope_apply(x: &Tensor, positions: &[usize], heads: usize, head_dim: usize, base: f64) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    let out = tape.rope(v, &pos, heads, head_dim, base)?;
    Ok(tape.value(out).clone())
}

/// `x·W + scale·(x·A)·B`, or plain `x·W` without an adapter.
pub fn lora_linear(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    base: ParamId,
    adapter: Option<&LoraAdapter>,
) -> Result<Var> {
    let w = store.bind(tape, base);
    let y = tape.matmul(x, w)?;
    let Some(adapter) = adapter else {
        return Ok(y);
    };
    let (wa, wb) = (store.value(adapter.a), store.value(adapter.b));
    let wt = store.value(base);
    if wa.rows() != wt.rows() || wb.cols() != wt.cols() || wa.cols() != wb.rows() {
        return Err(Error::Config(format!(
            "adapter shapes {:?}/{:?} do not fit base weight {:?}",
            wa.shape(),
            wb.shape(),
            wt.shape()
        )));
    }
    let a = store.bind(tape, adapter.a);
    let b = store.bind(tape, adapter.b);
    let xa = tape.matmul(x, a)?;
    let xab = tape.matmul(xa, b)?;
    let delta = tape.scale(xab, adapter.scale);
    tape.add(y, delta)
}

fn check_positions(positions: &[usize], cache: Option<&LayerCache>) -> Result<()> {
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage("positions must be strictly increasing".into()));
    }
    if let (Some(last), Some(&first)) = (cache.and_then(|c| c.last_position), positions.first()) {
        if first <= last {
            return Err(Error::Usage(format!(
                "new position {first} does not follow cached position {last}"
            )));
        }
    }
    Ok(())
}

/// Causal self-attention of already-normalized hidden states, including the
/// output projection. New keys/values are appended to `cache` when given.
pub fn causal_attention(
    tape: &mut Tape,
    store: &ParameterStore,
    block: &TransformerBlock,
    cfg: &BlockConfig,
    x: Var,
    positions: &[usize],
    cache: Option<&mut LayerCache>,
) -> Result<Var> {
    check_positions(positions, cache.as_deref())?;
    let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    let q = lora_linear(tape, store, x, block.wq, block.lora_q.as_ref())?;
    let k = lora_linear(tape, store, x, block.wk, None)?;
    let v = lora_linear(tape, store, x, block.wv, block.lora_v.as_ref())?;
    let q = tape.rope(q, &pos, cfg.num_query_heads, cfg.head_dim, cfg.rope_base)?;
    let mut k = tape.rope(k, &pos, cfg.num_kv_heads, cfg.head_dim, cfg.rope_base)?;
    let mut v = v;
    let shape = AttentionShape {
        q_heads: cfg.num_query_heads,
        kv_heads: cfg.num_kv_heads,
        head_dim: cfg.head_dim,
    };
    if let Some(cache) = cache {
        if let (Some(ck), Some(cv)) = (&cache.keys, &cache.values) {
            if ck.cols() != cfg.kv_width() || cv.cols() != cfg.kv_width() {
                return Err(Error::Config(format!(
                    "cached key width {} does not match {} kv heads of dim {}",
                    ck.cols(),
                    cfg.num_kv_heads,
                    cfg.head_dim
                )));
            }
            let (ck, cv) = (tape.constant(ck.clone()), tape.constant(cv.clone()));
            k = tape.concat_rows(&[ck, k])?;
            v = tape.concat_rows(&[cv, v])?;
        }
        cache.keys = Some(tape.value(k).clone());
        cache.values = Some(tape.value(v).clone());
        cache.last_position = positions.last().copied().or(cache.last_position);
    }
    let attn = tape.causal_attention(q, k, v, shape)?;
    let wo = store.bind(tape, block.wo);
    tape.matmul(attn, wo)
}

/// `W_down·(silu(x·W_gate) ∘ (x·W_up))` on already-normalized input.
pub fn swiglu_ffn(tape: &mut Tape, store: &ParameterStore, block: &TransformerBlock, x: Var) -> Result<Var> {
    let (wg, wu, wd) = (
        store.bind(tape, block.w_gate),
        store.bind(tape, block.w_up),
        store.bind(tape, block.w_down),
    );
    let gate = tape.matmul(x, wg)?;
    let gate = tape.silu(gate);
    let up = tape.matmul(x, wu)?;
    let h = tape.mul(gate, up)?;
    tape.matmul(h, wd)
}

/// One pre-norm residual block.
pub fn block_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    block: &TransformerBlock,
    cfg: &BlockConfig,
    h: Var,
    positions: &[usize],
    cache: Option<&mut LayerCache>,
) -> Result<Var> {
    let an = store.bind(tape, block.attn_norm);
    let x = tape.rmsnorm(h, an, cfg.norm_eps)?;
    let a = causal_attention(tape, store, block, cfg, x, positions, cache)?;
    let h = tape.add(h, a)?;
    let fnorm = store.bind(tape, block.ffn_norm);
    let x = tape.rmsnorm(h, fnorm, cfg.norm_eps)?;
    let f = swiglu_ffn(tape, store, block, x)?;
    tape.add(h, f)
}

/// Runs `h` through `blocks` in order.
pub fn stack_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    blocks: &[TransformerBlock],
    cfg: &BlockConfig,
    mut h: Var,
    positions: &[usize],
    mut cache: Option<&mut KvCache>,
) -> Result<Var> {
    if let Some(c) = cache.as_deref() {
        if c.layers.len() != blocks.len() {
            return Err(Error::Config(format!(
                "cache has {} layers, stack has {}",
                c.layers.len(),
                blocks.len()
            )));
        }
    }
    for (i, block) in blocks.iter().enumerate() {
        let layer_cache = cache.as_deref_mut().map(|c| &mut c.layers[i]);
        h = block_forward(tape, store, block, cfg, h, positions, layer_cache)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> BlockConfig {
        BlockConfig {
            hidden_size: 8,
            head_dim: 4,
            num_query_heads: 2,
            num_kv_heads: 1,
            intermediate_size: 12,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = store.insert_normal("x", shape, 1.0, &mut rng).unwrap();
        store.value(id).clone()
    }

    #[test]
    fn rmsnorm_cases() {
        let mut t = Tape::new();
        let ones = t.constant(Tensor::filled(&[4], 1.0));
        let x = t.constant(Tensor::filled(&[1, 4], 1.0));
        let y = rmsnorm(&mut t, x, ones, 1e-12).unwrap();
        assert!(t.value(y).data().iter().all(|v| (v - 1.0).abs() < 1e-9));

        let s2 = t.constant(Tensor::filled(&[2], 1.0));
        let x = t.constant(Tensor::filled(&[1, 2], 2.0));
        let y = rmsnorm(&mut t, x, s2, 1e-12).unwrap();
        assert!(t.value(y).data().iter().all(|v| (v - 1.0).abs() < 1e-9));

        let x = t.constant(Tensor::zeros(&[1, 2]));
        let y = rmsnorm(&mut t, x, s2, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = random(&[1, 8], 1);
        let y = rope_apply(&x, &[0], 2, 4, 10000.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rope_quarter_turn() {
        // The second frequency pair of a 4-dim head rotates by base^(-1/2)
        // per position; base = 4/π² makes that a quarter turn at position 1.
        let base = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
        let x = Tensor::new(vec![1, 4], vec![0.0, 3.0, 0.0, 5.0]).unwrap();
        let y = rope_apply(&x, &[1], 1, 4, base).unwrap();
        // pair (x[1], x[3]) = (3, 5) -> (-5, 3)
        assert!((y.data()[1] + 5.0).abs() < 1e-12);
        assert!((y.data()[3] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rope_odd_dim_is_config_error() {
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(rope_apply(&x, &[0], 1, 3, 10000.0), Err(Error::Config(_))));
    }

    #[test]
    fn fresh_lora_is_neutral() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = store.insert_normal("w", &[8, 6], 0.5, &mut rng).unwrap();
        let lora = LoraAdapter::create(&mut store, "w", w, 2, 4.0, &mut rng).unwrap();
        let x = random(&[3, 8], 2);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let plain = lora_linear(&mut t, &store, xv, w, None).unwrap();
        let adapted = lora_linear(&mut t, &store, xv, w, Some(&lora)).unwrap();
        assert_eq!(t.value(plain), t.value(adapted));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let c = cfg();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = TransformerBlock::create(&mut store, "b", &c, 0.3, &mut rng).unwrap();
        let mut t = Tape::new();
        let x = t.constant(random(&[1, 8], 3));
        causal_attention(&mut t, &store, &block, &c, x, &[0], None).unwrap();
        let att = (0..t.len()).rev().find_map(|i| t.attention_probs(Var(i))).unwrap();
        assert_eq!(att, &[1.0, 1.0]);
    }

    #[test]
    fn swiglu_zero_input_is_zero() {
        let c = cfg();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = TransformerBlock::create(&mut store, "b", &c, 0.3, &mut rng).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 8]));
        let y = swiglu_ffn(&mut t, &store, &block, x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positions_must_increase() {
        let c = cfg();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = TransformerBlock::create(&mut store, "b", &c, 0.3, &mut rng).unwrap();
        let mut t = Tape::new();
        let x = t.constant(random(&[2, 8], 3));
        assert!(causal_attention(&mut t, &store, &block, &c, x, &[1, 1], None).is_err());
        let mut cache = LayerCache::default();
        causal_attention(&mut t, &store, &block, &c, x, &[0, 1], Some(&mut cache)).unwrap();
        assert_eq!(cache.len(), 2);
        assert!(causal_attention(&mut t, &store, &block, &c, x, &[1, 2], Some(&mut cache)).is_err());
    }
}
