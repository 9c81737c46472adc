//! Traditional compression paradigm autoencoder (TCP-AE) baseline.
//!
//! `m = ⌈N_d/rate⌉` learnable tokens are appended after the context, the
//! encoder runs causally over `[x₁..x_N, CT₁..CT_m]`, and the final hidden
//! states at the appended positions go through a `D→D→D` SiLU MLP.

use crate::autodiff::{Tape, Var};
use crate::compressor::{check_tokens, encoder_forward, num_groups, CompressionArtifact};
use crate::config::Variant;
use crate::error::{Error, Result};
use crate::model::Model;

/// Final hidden states at the appended positions, before the MLP.
pub fn tcp_hidden_states(tape: &mut Tape, model: &Model, tokens: &[u32], rate: usize) -> Result<Var> {
    if rate == 0 {
        return Err(Error::Config("compression rate must be at least 1".into()));
    }
    let tcp = model.tcp()?;
    let ids = check_tokens(model, tokens)?;
    let m = num_groups(ids.len(), rate);
    let capacity = model.config.tcp_max_tokens;
    if m > capacity {
        return Err(Error::Config(format!(
            "{m} appended tokens needed for {} inputs at rate {rate}, capacity is {capacity}",
            ids.len()
        )));
    }
    let table = model.store.bind(tape, tcp.tokens);
    let appended = tape.slice_rows(table, 0, m)?;
    let h = encoder_forward(tape, model, &tcp.encoder, &ids, Some(appended))?;
    tape.slice_rows(h, ids.len(), ids.len() + m)
}

pub fn tcp_compress_on_tape(tape: &mut Tape, model: &Model, tokens: &[u32], rate: usize) -> Result<Var> {
    let h = tcp_hidden_states(tape, model, tokens, rate)?;
    if model.config.tcp_mlp_identity {
        return Ok(h);
    }
    let tcp = model.tcp()?;
    let w1 = model.store.bind(tape, tcp.mlp_w1);
    let w2 = model.store.bind(tape, tcp.mlp_w2);
    let x = tape.matmul(h, w1)?;
    let x = tape.silu(x);
    tape.matmul(x, w2)
}

pub fn tcp_compress(model: &Model, tokens: &[u32], rate: usize) -> Result<CompressionArtifact> {
    let mut tape = Tape::inference();
    let soft = tcp_compress_on_tape(&mut tape, model, tokens, rate)?;
    Ok(CompressionArtifact {
        soft_tokens: tape.value(soft).clone(),
        rate,
        source_length: tokens.len(),
        group_length: rate,
        variant: Variant::Tcp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tcp_model(identity: bool) -> Model {
        let cfg = ModelConfig {
            hidden_size: 16,
            num_heads: 2,
            num_kv_heads: 2,
            intermediate_size: 32,
            decoder_layers: 2,
            encoder_layers: 2,
            tcp_max_tokens: 130,
            tcp_mlp_identity: identity,
            ..ModelConfig::default()
        };
        let mut m = Model::new(cfg).unwrap();
        m.attach_compressor(Variant::Tcp).unwrap();
        m
    }

    #[test]
    fn length_contract() {
        let m = tcp_model(false);
        let tokens: Vec<u32> = (0..512).map(|i| 4 + (i % 97) as u32).collect();
        assert_eq!(tcp_compress(&m, &tokens, 4).unwrap().num_soft_tokens(), 128);
        assert!(matches!(tcp_compress(&m, &tokens, 2), Err(Error::Config(_))));
    }

    #[test]
    fn identity_mlp_passes_hidden_states_through() {
        let m = tcp_model(true);
        let tokens = [10, 20, 30, 40, 50];
        let art = tcp_compress(&m, &tokens, 2).unwrap();
        let mut tape = Tape::inference();
        let h = tcp_hidden_states(&mut tape, &m, &tokens, 2).unwrap();
        assert_eq!(&art.soft_tokens, tape.value(h));
    }

    #[test]
    fn appended_tokens_see_the_whole_context() {
        let m = tcp_model(false);
        let a = tcp_compress(&m, &[10, 20, 30, 40], 4).unwrap();
        let b = tcp_compress(&m, &[11, 20, 30, 40], 4).unwrap();
        assert!(a.soft_tokens.max_abs_diff(&b.soft_tokens) > 0.0);
        assert_eq!(a, tcp_compress(&m, &[10, 20, 30, 40], 4).unwrap());
    }
}
