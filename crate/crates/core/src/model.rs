//! Parameter layout of the decoder and the two compressor variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderInit, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::TransformerBlock;
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: ParamId,
    pub head: ParamId,
}

impl Decoder {
    /// The `W_Q`, `W_K`, `W_V` projections of every layer.
    pub fn qkv_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| [b.wq, b.wk, b.wv]).collect()
    }
}

/// Causal encoder with LoRA adapters, used by both compressor variants.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: ParamId,
}

impl Encoder {
    pub fn lora_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(TransformerBlock::lora_params).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmsaCompressor {
    pub encoder: Encoder,
    pub lsa: Vec<TransformerBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TcpCompressor {
    pub encoder: Encoder,
    /// Learnable appended tokens `[M_max × D]`, one row per slot.
    pub tokens: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_w2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Compressor {
    Gmsa(GmsaCompressor),
    Tcp(TcpCompressor),
}

impl Compressor {
    pub fn variant(&self) -> Variant {
        match self {
            Compressor::Gmsa(_) => Variant::Gmsa,
            Compressor::Tcp(_) => Variant::Tcp,
        }
    }

    pub fn encoder(&self) -> &Encoder {
        match self {
            Compressor::Gmsa(g) => &g.encoder,
            Compressor::Tcp(t) => &t.encoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub decoder: Decoder,
    pub compressor: Option<Compressor>,
    /// Set once the LSA blocks have been copied from the decoder.
    pub lsa_initialized: bool,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Model {
    /// A randomly initialized decoder without compressor.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed, 0);
        let mut store = ParameterStore::new();
        let (v, d, std) = (config.vocab_size, config.hidden_size, config.init_std);
        let block_cfg = config.block();
        let embed = store.insert_normal("decoder.embed", &[v, d], std, &mut rng)?;
        let blocks = (0..config.decoder_layers)
            .map(|i| TransformerBlock::create(&mut store, &format!("decoder.layers.{i}"), &block_cfg, std, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = store.insert("decoder.norm", Tensor::filled(&[d], 1.0))?;
        let head = store.insert_normal("decoder.head", &[d, v], std, &mut rng)?;
        Ok(Model {
            config,
            store,
            decoder: Decoder {
                embed,
                blocks,
                norm,
                head,
            },
            compressor: None,
            lsa_initialized: false,
        })
    }

    pub fn variant(&self) -> Option<Variant> {
        self.compressor.as_ref().map(Compressor::variant)
    }

    pub fn gmsa(&self) -> Result<&GmsaCompressor> {
        match &self.compressor {
            Some(Compressor::Gmsa(g)) => Ok(g),
            _ => Err(Error::State("model has no GMSA compressor".into())),
        }
    }

    pub fn tcp(&self) -> Result<&TcpCompressor> {
        match &self.compressor {
            Some(Compressor::Tcp(t)) => Ok(t),
            _ => Err(Error::State("model has no TCP compressor".into())),
        }
    }

    /// Adds a compressor of the given variant. Encoder blocks are copied from
    /// the decoder's lowest layers (unless configured random), and GMSA's LSA
    /// blocks from the decoder's first `lsa_layers` layers.
    pub fn attach_compressor(&mut self, variant: Variant) -> Result<()> {
        self.attach_compressor_with(variant, true)
    }

    /// As [`Model::attach_compressor`], optionally leaving the LSA blocks
    /// randomly initialized and marked uninitialized.
    pub fn attach_compressor_with(&mut self, variant: Variant, copy_lsa: bool) -> Result<()> {
        if self.compressor.is_some() {
            return Err(Error::State("model already has a compressor".into()));
        }
        let cfg = self.config.clone();
        let mut rng = seeded(cfg.seed, 1);
        let prefix = match variant {
            Variant::Gmsa => "encoder",
            Variant::Tcp => "tcp.encoder",
        };
        let encoder = self.build_encoder(prefix, &mut rng)?;
        let store = &mut self.store;
        match variant {
            Variant::Gmsa => {
                let block_cfg = cfg.block();
                let lsa = (0..cfg.lsa_layers)
                    .map(|i| TransformerBlock::create(store, &format!("lsa.layers.{i}"), &block_cfg, cfg.init_std, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                self.compressor = Some(Compressor::Gmsa(GmsaCompressor { encoder, lsa }));
                if copy_lsa {
                    self.init_lsa_from_decoder()?;
                }
            }
            Variant::Tcp => {
                let d = cfg.hidden_size;
                let tokens = store.insert_normal("tcp.tokens", &[cfg.tcp_max_tokens, d], cfg.init_std, &mut rng)?;
                let mlp_w1 = store.insert_normal("tcp.mlp.w1", &[d, d], cfg.init_std, &mut rng)?;
                let mlp_w2 = store.insert_normal("tcp.mlp.w2", &[d, d], cfg.init_std, &mut rng)?;
                self.compressor = Some(Compressor::Tcp(TcpCompressor {
                    encoder,
                    tokens,
                    mlp_w1,
                    mlp_w2,
                }));
            }
        }
        Ok(())
    }

    fn build_encoder(&mut self, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Encoder> {
        let cfg = &self.config;
        let block_cfg = cfg.block();
        let store = &mut self.store;
        let embed = store.insert_normal(&format!("{prefix}.embed"), &[cfg.vocab_size, cfg.hidden_size], cfg.init_std, rng)?;
        let mut blocks = Vec::with_capacity(cfg.encoder_layers);
        for i in 0..cfg.encoder_layers {
            blocks.push(TransformerBlock::create(
                store,
                &format!("{prefix}.layers.{i}"),
                &block_cfg,
                cfg.init_std,
                rng,
            )?);
        }
        let norm = store.insert(&format!("{prefix}.norm"), Tensor::filled(&[cfg.hidden_size], 1.0))?;
        if cfg.encoder_init == EncoderInit::CopyDecoder {
            store.copy_value(self.decoder.embed, embed)?;
            store.copy_value(self.decoder.norm, norm)?;
            for (dst, src) in blocks.iter().zip(&self.decoder.blocks) {
                dst.copy_from(store, src)?;
            }
        }
        for block in &mut blocks {
            block.attach_lora(store, cfg.lora_rank, cfg.lora_alpha, rng)?;
        }
        Ok(Encoder { embed, blocks, norm })
    }

    /// Copies decoder layers `0..k` into the `k` LSA blocks.
    pub fn init_lsa_from_decoder(&mut self) -> Result<()> {
        let lsa = self.gmsa()?.lsa.clone();
        for (dst, src) in lsa.iter().zip(&self.decoder.blocks) {
            dst.copy_from(&mut self.store, src)?;
        }
        self.lsa_initialized = true;
        Ok(())
    }

    /// Rebuilds the handle layout of a model from a parameter store.
    pub fn from_store(config: ModelConfig, store: ParameterStore, lsa_initialized: bool) -> Result<Self> {
        config.validate()?;
        let (rank, alpha) = (config.lora_rank, config.lora_alpha);
        let blocks = |store: &ParameterStore, prefix: &str, n: usize| {
            (0..n)
                .map(|i| TransformerBlock::lookup(store, &format!("{prefix}.{i}"), rank, alpha))
                .collect::<Result<Vec<_>>>()
        };
        let decoder = Decoder {
            embed: store.id("decoder.embed")?,
            blocks: blocks(&store, "decoder.layers", config.decoder_layers)?,
            norm: store.id("decoder.norm")?,
            head: store.id("decoder.head")?,
        };
        let encoder = |store: &ParameterStore, prefix: &str| -> Result<Encoder> {
            Ok(Encoder {
                embed: store.id(&format!("{prefix}.embed"))?,
                blocks: blocks(store, &format!("{prefix}.layers"), config.encoder_layers)?,
                norm: store.id(&format!("{prefix}.norm"))?,
            })
        };
        let compressor = if store.contains("encoder.embed") {
            Some(Compressor::Gmsa(GmsaCompressor {
                encoder: encoder(&store, "encoder")?,
                lsa: blocks(&store, "lsa.layers", config.lsa_layers)?,
            }))
        } else if store.contains("tcp.encoder.embed") {
            Some(Compressor::Tcp(TcpCompressor {
                encoder: encoder(&store, "tcp.encoder")?,
                tokens: store.id("tcp.tokens")?,
                mlp_w1: store.id("tcp.mlp.w1")?,
                mlp_w2: store.id("tcp.mlp.w2")?,
            }))
        } else {
            None
        };
        Ok(Model {
            config,
            store,
            decoder,
            compressor,
            lsa_initialized,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden_size: 16,
            num_heads: 2,
            num_kv_heads: 2,
            intermediate_size: 32,
            decoder_layers: 2,
            encoder_layers: 2,
            lsa_layers: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn lsa_starts_as_copy_of_first_decoder_layer() {
        let mut m = Model::new(tiny()).unwrap();
        m.attach_compressor(Variant::Gmsa).unwrap();
        let g = m.gmsa().unwrap().clone();
        for (a, b) in g.lsa[0].base_params().iter().zip(m.decoder.blocks[0].base_params()) {
            assert_eq!(m.store.value(*a), m.store.value(b));
        }
        assert!(m.lsa_initialized);
        assert_eq!(g.encoder.lora_params().len(), 8);
    }

    #[test]
    fn from_store_recovers_layout() {
        let mut m = Model::new(tiny()).unwrap();
        m.attach_compressor(Variant::Tcp).unwrap();
        let rebuilt = Model::from_store(m.config.clone(), m.store.clone(), m.lsa_initialized).unwrap();
        assert_eq!(rebuilt, m);
    }

    #[test]
    fn second_compressor_is_rejected() {
        let mut m = Model::new(tiny()).unwrap();
        m.attach_compressor(Variant::Gmsa).unwrap();
        assert!(m.attach_compressor(Variant::Tcp).is_err());
    }
}
