//! Byte-level tokenizer: every UTF-8 byte is one token, vocab 256.

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BYTE_VOCAB: usize = 256;

pub fn tokenize(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

pub fn detokenize(tokens: &[TokenId]) -> Result<String> {
    let bytes = tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::InvalidValue(format!("token {t} is not a byte")))
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidValue(format!("tokens are not UTF-8: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_and_ascii() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("AB"), vec![65, 66]);
    }

    #[test]
    fn non_byte_token_is_rejected() {
        assert!(detokenize(&[300]).is_err());
        assert!(detokenize(&[0xff]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(s in any::<String>()) {
            prop_assert_eq!(detokenize(&tokenize(&s)).unwrap(), s);
        }
    }
}
