//! The compression path: a causal encoder produces the last hidden state
//! `H`, group merging averages consecutive groups of `L_G = rate` rows into
//! `H̃`, and the layer semantic alignment (LSA) blocks map `H̃` to the soft
//! tokens `m̃` that the decoder consumes as layer-0 hidden states.
//!
//! Groups never overlap: when `L_G` does not divide `N_d`, the last group
//! holds the `N_d mod L_G` remaining rows and is averaged over that count.

use crate::autodiff::{Tape, Var};
use crate::config::Variant;
use crate::error::{Error, Result};
use crate::model::{Compressor, Encoder, Model};
use crate::nn::stack_forward;
use crate::tcp;
use crate::tensor::Tensor;

pub const ARTIFACT_VERSION: u16 = 1;

/// Soft tokens plus the provenance needed to interpret them.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressionArtifact {
    pub soft_tokens: Tensor,
    pub rate: usize,
    pub source_length: usize,
    pub group_length: usize,
    pub variant: Variant,
}

impl CompressionArtifact {
    pub fn num_soft_tokens(&self) -> usize {
        self.soft_tokens.rows()
    }

    fn magic(variant: Variant) -> &'static [u8; 4] {
        match variant {
            Variant::Gmsa => b"GMSA",
            Variant::Tcp => b"TCPA",
        }
    }

    /// `magic, version u16, rate u16, N_d u32, N_g u32, D u32`, then the
    /// row-major matrix as little-endian `f32`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let rate = u16::try_from(self.rate).map_err(|_| Error::Data(format!("rate {} exceeds u16", self.rate)))?;
        let as_u32 = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} exceeds u32")));
        let mut out = Vec::with_capacity(20 + 4 * self.soft_tokens.numel());
        out.extend_from_slice(Self::magic(self.variant));
        out.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&as_u32(self.source_length, "source length")?.to_le_bytes());
        out.extend_from_slice(&as_u32(self.soft_tokens.rows(), "soft token count")?.to_le_bytes());
        out.extend_from_slice(&as_u32(self.soft_tokens.cols(), "width")?.to_le_bytes());
        for &v in self.soft_tokens.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    /// Parses one record from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 20 {
            return Err(Error::Integrity(format!("artifact header truncated at {} bytes", bytes.len())));
        }
        let variant = match &bytes[0..4] {
            b"GMSA" => Variant::Gmsa,
            b"TCPA" => Variant::Tcp,
            other => return Err(Error::Integrity(format!("bad artifact magic {other:?}"))),
        };
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let version = u16_at(4);
        if version != ARTIFACT_VERSION {
            return Err(Error::Version {
                found: version as u32,
                expected: ARTIFACT_VERSION as u32,
            });
        }
        let rate = u16_at(6) as usize;
        let (source_length, rows, cols) = (u32_at(8), u32_at(12), u32_at(16));
        let end = 20 + 4 * rows * cols;
        if bytes.len() < end {
            return Err(Error::Integrity(format!(
                "artifact payload truncated: need {end} bytes, have {}",
                bytes.len()
            )));
        }
        let data = bytes[20..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let artifact = CompressionArtifact {
            soft_tokens: Tensor::new(vec![rows, cols], data)?,
            rate,
            source_length,
            group_length: rate,
            variant,
        };
        Ok((artifact, end))
    }
}

/// Several artifacts keyed by sample id: per entry a `u32` id length, the
/// UTF-8 id, then one artifact record.
pub fn bundle_to_bytes(entries: &[(String, CompressionArtifact)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (id, art) in entries {
        let len = u32::try_from(id.len()).map_err(|_| Error::Data(format!("id of {} bytes too long", id.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&art.to_bytes()?);
    }
    Ok(out)
}

pub fn bundle_from_bytes(mut bytes: &[u8]) -> Result<Vec<(String, CompressionArtifact)>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 4 {
            return Err(Error::Integrity("bundle entry truncated".into()));
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let id = bytes
            .get(4..4 + len)
            .ok_or_else(|| Error::Integrity("bundle id truncated".into()))?;
        let id = String::from_utf8(id.to_vec()).map_err(|e| Error::Integrity(e.to_string()))?;
        let (art, used) = CompressionArtifact::from_bytes(&bytes[4 + len..])?;
        out.push((id, art));
        bytes = &bytes[4 + len + used..];
    }
    Ok(out)
}

pub fn num_groups(source_length: usize, group_length: usize) -> usize {
    source_length.div_ceil(group_length)
}

pub(crate) fn check_tokens(model: &Model, tokens: &[u32]) -> Result<Vec<usize>> {
    if tokens.is_empty() {
        return Err(Error::Usage("cannot compress an empty input".into()));
    }
    tokens
        .iter()
        .map(|&t| {
            let t = t as usize;
            if t >= model.config.vocab_size {
                Err(Error::Index {
                    index: t,
                    bound: model.config.vocab_size,
                })
            } else {
                Ok(t)
            }
        })
        .collect()
}

/// Embeds `ids`, appends `extra` rows when given, and returns the final
/// normalized hidden state of the encoder stack.
pub(crate) fn encoder_forward(
    tape: &mut Tape,
    model: &Model,
    encoder: &Encoder,
    ids: &[usize],
    extra: Option<Var>,
) -> Result<Var> {
    let store = &model.store;
    let table = store.bind(tape, encoder.embed);
    let mut h = tape.gather(table, ids)?;
    if let Some(extra) = extra {
        h = tape.concat_rows(&[h, extra])?;
    }
    let positions: Vec<usize> = (0..tape.value(h).rows()).collect();
    let cfg = model.config.block();
    let h = stack_forward(tape, store, &encoder.blocks, &cfg, h, &positions, None)?;
    let norm = store.bind(tape, encoder.norm);
    tape.rmsnorm(h, norm, cfg.norm_eps)
}

/// `H = Encoder(X)`: last hidden state of the GMSA encoder, `[N_d × D]`.
pub fn encode(tape: &mut Tape, model: &Model, tokens: &[u32]) -> Result<Var> {
    let ids = check_tokens(model, tokens)?;
    encoder_forward(tape, model, &model.gmsa()?.encoder, &ids, None)
}

pub fn group_merge(tape: &mut Tape, h: Var, group_length: usize) -> Result<Var> {
    tape.group_mean(h, group_length)
}

/// Group merging of a plain matrix.
pub fn group_merge_tensor(h: &Tensor, group_length: usize) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let v = tape.constant(h.clone());
    let out = group_merge(&mut tape, v, group_length)?;
    Ok(tape.value(out).clone())
}

/// `m̃ = F_LSA(H̃)` with `H̃` as input hidden states at positions `0..N_g`.
pub fn lsa_align(tape: &mut Tape, model: &Model, merged: Var) -> Result<Var> {
    if !model.lsa_initialized {
        return Err(Error::State("LSA blocks were never initialized from the decoder".into()));
    }
    let gmsa = model.gmsa()?;
    let positions: Vec<usize> = (0..tape.value(merged).rows()).collect();
    stack_forward(tape, &model.store, &gmsa.lsa, &model.config.block(), merged, &positions, None)
}

/// Records the full compression of `tokens` at `rate` on `tape`, dispatching
/// on the model's compressor variant. Returns the soft-token matrix.
pub fn compress_on_tape(tape: &mut Tape, model: &Model, tokens: &[u32], rate: usize) -> Result<Var> {
    if rate == 0 {
        return Err(Error::Config("compression rate must be at least 1".into()));
    }
    match &model.compressor {
        Some(Compressor::Gmsa(_)) => {
            let h = encode(tape, model, tokens)?;
            let merged = group_merge(tape, h, rate)?;
            lsa_align(tape, model, merged)
        }
        Some(Compressor::Tcp(_)) => tcp::tcp_compress_on_tape(tape, model, tokens, rate),
        None => Err(Error::State("model has no compressor".into())),
    }
}

/// Compresses `tokens` at `rate` into an artifact of `⌈N_d/rate⌉` soft tokens.
pub fn compress(model: &Model, tokens: &[u32], rate: usize) -> Result<CompressionArtifact> {
    let mut tape = Tape::inference();
    let soft = compress_on_tape(&mut tape, model, tokens, rate)?;
    Ok(CompressionArtifact {
        soft_tokens: tape.value(soft).clone(),
        rate,
        source_length: tokens.len(),
        group_length: rate,
        variant: model.variant().expect("compress_on_tape checked the compressor"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            hidden_size: 16,
            num_heads: 2,
            num_kv_heads: 2,
            intermediate_size: 32,
            decoder_layers: 2,
            encoder_layers: 2,
            lsa_layers: 1,
            ..ModelConfig::default()
        };
        let mut m = Model::new(cfg).unwrap();
        m.attach_compressor(Variant::Gmsa).unwrap();
        m
    }

    #[test]
    fn group_merge_examples() {
        let h = Tensor::from_rows(&[vec![2.0, 4.0], vec![6.0, 8.0]]).unwrap();
        assert_eq!(group_merge_tensor(&h, 2).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(group_merge_tensor(&h, 1).unwrap(), h);
        assert!(matches!(group_merge_tensor(&h, 0), Err(Error::Config(_))));
    }

    #[test]
    fn soft_token_counts() {
        let m = tiny_model();
        let tokens: Vec<u32> = (0..510).map(|i| 4 + (i % 200) as u32).collect();
        let a = compress(&m, &tokens, 4).unwrap();
        assert_eq!(a.num_soft_tokens(), 128);
        let a = compress(&m, &tokens[..1], 4).unwrap();
        assert_eq!(a.num_soft_tokens(), 1);
        let a = compress(&m, &tokens[..7], 1).unwrap();
        assert_eq!(a.num_soft_tokens(), 7);
    }

    #[test]
    fn empty_input_and_bad_ids_rejected() {
        let m = tiny_model();
        assert!(matches!(compress(&m, &[], 4), Err(Error::Usage(_))));
        assert!(matches!(compress(&m, &[999], 4), Err(Error::Index { .. })));
    }

    #[test]
    fn uninitialized_lsa_is_a_state_error() {
        let mut m = Model::new(tiny_model().config).unwrap();
        m.attach_compressor_with(Variant::Gmsa, false).unwrap();
        assert!(matches!(compress(&m, &[5, 6, 7], 2), Err(Error::State(_))));
    }

    #[test]
    fn artifact_bytes_layout() {
        let m = tiny_model();
        let a = compress(&m, &[5, 6, 7, 8, 9], 2).unwrap();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"GMSA");
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 20 + 4 * 3 * 16);
        let (back, used) = CompressionArtifact::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back.source_length, 5);
        assert!(back.soft_tokens.max_abs_diff(&a.soft_tokens) < 1e-6);
        assert!(CompressionArtifact::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn bundle_roundtrip() {
        let m = tiny_model();
        let a = compress(&m, &[5, 6, 7, 8, 9], 2).unwrap();
        let b = compress(&m, &[10, 11], 4).unwrap();
        let bytes = bundle_to_bytes(&[("x".into(), a.clone()), ("yz".into(), b.clone())]).unwrap();
        let back = bundle_from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, "yz");
        assert_eq!(back[1].1.source_length, 2);
        assert!(back[0].1.soft_tokens.max_abs_diff(&a.soft_tokens) < 1e-6);
        assert!(bundle_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
