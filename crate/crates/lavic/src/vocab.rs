//! Byte-level vocabulary: 256 byte tokens plus PAD/BOS/EOS/IMG.

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 260;
pub const PAD: u16 = 256;
pub const BOS: u16 = 257;
pub const EOS: u16 = 258;
/// Marks visual-embedding positions in serialized token streams.
pub const IMG: u16 = 259;

pub fn tokenize(text: &str) -> Vec<u16> {
    text.bytes().map(u16::from).collect()
}

/// Inverse of [`tokenize`] for byte tokens. Special tokens are rejected;
/// byte sequences that are not valid UTF-8 are decoded lossily (they can
/// only arise from free-running generation, where the raw string is data).
pub fn detokenize(ids: &[u16]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id >= 256 {
            return Err(Error::Schema(format!(
                "token id {id} is not a byte token"
            )));
        }
        bytes.push(id as u8);
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Byte tokens only, dropping any special tokens (used on decoder output).
pub fn detokenize_lossy(ids: &[u16]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_round_trip() {
        assert_eq!(tokenize(""), Vec::<u16>::new());
        assert_eq!(detokenize(&[]).unwrap(), "");
    }

    #[test]
    fn ascii_bytes() {
        assert_eq!(tokenize("ab"), vec![97, 98]);
        assert_eq!(detokenize(&[97, 98]).unwrap(), "ab");
    }

    #[test]
    fn special_ids_rejected() {
        assert!(detokenize(&[97, BOS]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_any_utf8(s in "\\PC{0,64}") {
            prop_assert_eq!(detokenize(&tokenize(&s)).unwrap(), s);
        }
    }
}
