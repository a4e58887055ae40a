//! Text ↔ token id conversion.

mod bpe;

pub use bpe::{byte_encoder, load_bpe, parse_bpe, BpeVocab};

use crate::error::{Error, Result};

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, ids: &[u32]) -> Result<String>;
    fn vocab_size(&self) -> usize;
}

/// One token per UTF-8 byte; id = byte value.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = ids
            .iter()
            .map(|&id| u8::try_from(id).map_err(|_| Error::Tokenizer(format!("id {id} is not a byte"))))
            .collect::<Result<Vec<u8>>>()?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn vocab_size(&self) -> usize {
        256
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_tokenizer_basics() {
        let t = ByteTokenizer;
        assert_eq!(t.encode(""), Vec::<u32>::new());
        assert_eq!(t.encode("é"), vec![0xc3, 0xa9]);
        assert_eq!(t.decode(&[104, 105]).unwrap(), "hi");
        assert!(t.decode(&[256]).is_err());
    }

    proptest! {
        #[test]
        fn byte_round_trip(s in any::<String>()) {
            prop_assert_eq!(ByteTokenizer.decode(&ByteTokenizer.encode(&s)).unwrap(), s);
        }
    }
}
