//! Byte-level tokenizer: four reserved ids followed by the 256 byte values.

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Instruction token that asks the decoder to restore the compressed context.
pub const AE_INS: u32 = 3;
pub const BYTE_OFFSET: u32 = 4;
pub const VOCAB_SIZE: usize = 260;

pub fn is_special(id: u32) -> bool {
    id < BYTE_OFFSET
}

pub fn encode(text: &str) -> Vec<u32> {
    encode_bytes(text.as_bytes())
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32 + BYTE_OFFSET).collect()
}

/// Bytes of the non-special ids; special ids and out-of-range ids are dropped.
pub fn decode_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| id >= BYTE_OFFSET && (id as usize) < VOCAB_SIZE)
        .map(|&id| (id - BYTE_OFFSET) as u8)
        .collect()
}

pub fn decode(ids: &[u32]) -> String {
    String::from_utf8_lossy(&decode_bytes(ids)).into_owned()
}

/// Ids up to (not including) the first EOS.
pub fn until_eos(ids: &[u32]) -> &[u32] {
    let end = ids.iter().position(|&t| t == EOS).unwrap_or(ids.len());
    &ids[..end]
}
