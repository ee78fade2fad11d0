use serde::{Deserialize, Serialize};

use super::{TokenId, PAD, TEXT_SIZE};
use crate::error::{Error, Result};

/// Byte-level codec for the instruction slot. Only 7-bit bytes are encodable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextCodec {
    pub offset: u32,
    pub max_len: usize,
}

impl TextCodec {
    pub fn new(offset: u32, max_len: usize) -> Self {
        TextCodec { offset, max_len }
    }

    /// Encodes `s`, truncating to `max_len` and right-padding with PAD.
    pub fn encode(&self, s: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::with_capacity(self.max_len);
        for (position, &byte) in s.as_bytes().iter().enumerate() {
            if byte >= TEXT_SIZE as u8 {
                return Err(Error::NonAsciiByte { position, byte });
            }
            if out.len() < self.max_len {
                out.push(self.offset + byte as u32);
            }
        }
        out.resize(self.max_len, PAD);
        Ok(out)
    }

    /// Decodes until the first PAD.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        let mut s = String::new();
        for &t in tokens {
            if t == PAD {
                break;
            }
            if t < self.offset || t >= self.offset + TEXT_SIZE {
                return Err(Error::OutOfRangeToken { token: t, expected: "text" });
            }
            s.push((t - self.offset) as u8 as char);
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OFF: u32 = 8;

    #[test]
    fn encode_pads_and_truncates() {
        let c4 = TextCodec::new(OFF, 4);
        assert_eq!(c4.encode("ok").unwrap(), vec![OFF + 111, OFF + 107, PAD, PAD]);
        assert_eq!(TextCodec::new(OFF, 2).encode("").unwrap(), vec![PAD, PAD]);
        assert_eq!(TextCodec::new(OFF, 2).encode("abc").unwrap(), vec![OFF + 97, OFF + 98]);
    }

    #[test]
    fn rejects_high_bytes() {
        let err = TextCodec::new(OFF, 8).encode("caf\u{e9}").unwrap_err();
        assert!(matches!(err, Error::NonAsciiByte { position: 3, .. }));
    }

    #[test]
    fn decode_inverse() {
        let c = TextCodec::new(OFF, 32);
        assert_eq!(c.decode(&[OFF + 104, OFF + 105, PAD]).unwrap(), "hi");
        assert_eq!(c.decode(&[PAD]).unwrap(), "");
        let s = "move red block";
        assert_eq!(c.decode(&c.encode(s).unwrap()).unwrap(), s);
        assert!(matches!(c.decode(&[OFF + 200]), Err(Error::OutOfRangeToken { .. })));
    }
}
