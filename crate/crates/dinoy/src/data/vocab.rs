//! Closed caption vocabulary: specials, colors, shapes, size words.

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta",
];
pub const SHAPES: [&str; 5] = ["triangle", "square", "circle", "star", "cross"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Total token count: 4 specials + 8 colors + 5 shapes + 3 sizes.
pub const VOCAB_SIZE: usize = 20;

pub fn color_token(color_idx: usize) -> u32 {
    assert!(color_idx < COLORS.len());
    (SPECIALS.len() + color_idx) as u32
}

pub fn shape_token(shape_idx: usize) -> u32 {
    assert!(shape_idx < SHAPES.len());
    (SPECIALS.len() + COLORS.len() + shape_idx) as u32
}

pub fn size_token(size_idx: usize) -> u32 {
    assert!(size_idx < SIZES.len());
    (SPECIALS.len() + COLORS.len() + SHAPES.len() + size_idx) as u32
}

pub fn token_str(id: u32) -> &'static str {
    let id = id as usize;
    if id < 4 {
        SPECIALS[id]
    } else if id < 4 + COLORS.len() {
        COLORS[id - 4]
    } else if id < 4 + COLORS.len() + SHAPES.len() {
        SHAPES[id - 4 - COLORS.len()]
    } else if id < VOCAB_SIZE {
        SIZES[id - 4 - COLORS.len() - SHAPES.len()]
    } else {
        "<unk>"
    }
}

pub fn token_of(word: &str) -> Option<u32> {
    if let Some(i) = COLORS.iter().position(|&c| c == word) {
        return Some(color_token(i));
    }
    if let Some(i) = SHAPES.iter().position(|&s| s == word) {
        return Some(shape_token(i));
    }
    if let Some(i) = SIZES.iter().position(|&s| s == word) {
        return Some(size_token(i));
    }
    match word {
        "<pad>" => Some(PAD),
        "<bos>" => Some(BOS),
        "<eos>" => Some(EOS),
        "<unk>" => Some(UNK),
        _ => None,
    }
}

/// Tokenize a whitespace-separated phrase over the closed vocabulary.
pub fn encode(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|w| token_of(w).ok_or_else(|| Error::Data(format!("word not in vocabulary: {w}"))))
        .collect()
}

/// Render token ids back to text, skipping specials.
pub fn decode(ids: &[u32]) -> String {
    ids.iter()
        .filter(|&&id| id > UNK && (id as usize) < VOCAB_SIZE)
        .map(|&id| token_str(id))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_every_word() {
        for w in COLORS.iter().chain(SHAPES.iter()).chain(SIZES.iter()) {
            let id = token_of(w).unwrap();
            assert_eq!(token_str(id), *w);
        }
    }

    #[test]
    fn encode_decode_phrase() {
        let ids = encode("red small triangle").unwrap();
        assert_eq!(decode(&ids), "red small triangle");
        assert!(encode("banana").is_err());
    }

    #[test]
    fn token_ids_are_disjoint_and_in_range() {
        let mut seen = std::collections::HashSet::new();
        for id in 0..VOCAB_SIZE as u32 {
            assert!(seen.insert(token_str(id).to_string() + &id.to_string()));
        }
        assert_eq!(color_token(0), 4);
        assert_eq!(shape_token(0), 12);
        assert_eq!(size_token(2), 19);
    }
}
