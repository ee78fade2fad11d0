//! Unified discrete token space.
//!
//! Every modality lives in one vocabulary laid out as contiguous id ranges:
//!
//! ```text
//! [0, 8)                          special tokens (PAD, MASK, delimiters)
//! [8, 8 + text)                   7-bit text bytes
//! [.., .. + image)                image patch codes
//! [.., .. + action)               action bins, shared by all dimensions
//! ```

mod action;
mod image;
mod text;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use action::ActionBinner;
pub use image::{ImageCodec, RgbImage};
pub use text::TextCodec;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
/// Start of observation.
pub const SOO: TokenId = 2;
/// End of observation.
pub const EOO: TokenId = 3;
/// Start of language.
pub const SOL: TokenId = 4;
/// End of language.
pub const EOL: TokenId = 5;
/// Start of action.
pub const SOA: TokenId = 6;
/// End of action.
pub const EOA: TokenId = 7;

pub const NUM_SPECIAL: u32 = 8;
pub const TEXT_SIZE: u32 = 128;
pub const ACTION_BINS: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Special,
    Text,
    Image,
    Action,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Special => "special",
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Action => "action",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub text_offset: u32,
    pub text_size: u32,
    pub image_offset: u32,
    pub image_size: u32,
    pub action_offset: u32,
    pub action_size: u32,
    pub total_size: u32,
}

impl VocabLayout {
    /// Lays out special, text, image and action ranges in that order.
    pub fn new(text_size: u32, image_size: u32, action_size: u32) -> Self {
        assert!(text_size >= 1 && image_size >= 1 && action_size >= 1);
        let text_offset = NUM_SPECIAL;
        let image_offset = text_offset + text_size;
        let action_offset = image_offset + image_size;
        VocabLayout {
            text_offset,
            text_size,
            image_offset,
            image_size,
            action_offset,
            action_size,
            total_size: action_offset + action_size,
        }
    }

    /// Default layout for a codebook of `image_size` entries.
    pub fn with_codebook(image_size: u32) -> Self {
        Self::new(TEXT_SIZE, image_size, ACTION_BINS)
    }

    pub fn size(&self) -> usize {
        self.total_size as usize
    }

    pub fn range(&self, modality: Modality) -> Range<TokenId> {
        match modality {
            Modality::Special => 0..NUM_SPECIAL,
            Modality::Text => self.text_offset..self.text_offset + self.text_size,
            Modality::Image => self.image_offset..self.image_offset + self.image_size,
            Modality::Action => self.action_offset..self.action_offset + self.action_size,
        }
    }

    pub fn modality_of(&self, token: TokenId) -> Option<Modality> {
        [Modality::Special, Modality::Text, Modality::Image, Modality::Action]
            .into_iter()
            .find(|&m| self.range(m).contains(&token))
    }

    pub fn text_codec(&self, max_len: usize) -> TextCodec {
        TextCodec::new(self.text_offset, max_len)
    }
}
