//! Built-in 5×7 bitmap glyphs. Each row is five bits, most significant bit
//! on the left.

use crate::error::{Error, Result};

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

/// Class order: digits, then lowercase letters; the blank is the last class.
pub const CHARSET: &str = "0123456789abcdefghijklmnopqrstuvwxyz";
pub const BLANK: usize = 36;

#[rustfmt::skip]
const ROWS: [[u8; GLYPH_H]; 36] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
    [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
    [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
    [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
    [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
    [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
    [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
    [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
    [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
    [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
    [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
    [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
    [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
    [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
];

/// Class index of a character; uppercase letters fold to lowercase.
pub fn class_of(ch: char) -> Result<usize> {
    let lower = ch.to_ascii_lowercase();
    CHARSET.find(lower).ok_or(Error::Alphabet(ch))
}

pub fn char_of(class: usize) -> Option<char> {
    CHARSET.chars().nth(class)
}

pub fn encode_label(label: &str) -> Result<Vec<usize>> {
    label.chars().map(class_of).collect()
}

/// Concatenates non-blank classes.
pub fn decode_classes(classes: &[usize]) -> String {
    classes.iter().filter_map(|&c| char_of(c)).collect()
}

pub fn glyph_pixel(class: usize, row: usize, col: usize) -> bool {
    ROWS[class][row] >> (GLYPH_W - 1 - col) & 1 == 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_classes() {
        let c = encode_label("a0Z9").unwrap();
        assert_eq!(c, vec![10, 0, 35, 9]);
        assert_eq!(decode_classes(&[10, BLANK, 0, 35, 9]), "a0z9");
        assert!(matches!(encode_label("a-b"), Err(Error::Alphabet('-'))));
    }

    #[test]
    fn glyphs_are_distinct_and_nonempty() {
        for a in 0..36 {
            assert!(ROWS[a].iter().any(|&r| r != 0));
            for b in a + 1..36 {
                assert_ne!(ROWS[a], ROWS[b], "{a} vs {b}");
            }
        }
    }
}
