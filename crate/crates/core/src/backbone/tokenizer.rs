//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three specials.

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;

/// Unit type for the fixed byte vocabulary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn encode(&self, text: &str) -> Vec<usize> {
        encode(text)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        decode(ids)
    }
}

pub fn encode(text: &str) -> Vec<usize> {
    encode_bytes(text.as_bytes())
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Byte tokens back to bytes; special tokens are skipped.
pub fn decode_bytes(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
}

pub fn decode(ids: &[usize]) -> String {
    String::from_utf8_lossy(&decode_bytes(ids)).into_owned()
}

pub fn is_special(id: usize) -> bool {
    (256..VOCAB_SIZE).contains(&id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_sit_above_the_bytes() {
        assert!(is_special(BOS) && is_special(EOS) && is_special(PAD));
        assert!(!is_special(255));
        assert_eq!(decode(&[BOS, 104, 105, EOS, PAD]), "hi");
    }

    proptest! {
        #[test]
        fn every_byte_string_round_trips(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            prop_assert_eq!(decode_bytes(&encode_bytes(&bytes)), bytes);
        }

        #[test]
        fn every_utf8_string_round_trips(s in ".*") {
            prop_assert_eq!(decode(&encode(&s)), s);
        }
    }
}
