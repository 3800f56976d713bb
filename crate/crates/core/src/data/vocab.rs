//! Fixed 64-symbol character vocabulary.

use alloc::string::String;
use alloc::vec::Vec;

/// Symbol for token id `i` is `ALPHABET[i]`.
pub const ALPHABET: &str = "^=+0123456789abcdefghijklmnopqrstuvwxyzACRSBDEFGHIJKLMNOPQTUVWXY";

pub const BOS: char = '^';
pub const EQUALS: char = '=';
pub const PLUS: char = '+';

pub fn id_of(c: char) -> Option<u32> {
    ALPHABET.chars().position(|a| a == c).map(|p| p as u32)
}

pub fn symbol(id: u32) -> Option<char> {
    ALPHABET.chars().nth(id as usize)
}

pub fn encode(text: &str) -> Option<Vec<u32>> {
    text.chars().map(id_of).collect()
}

/// Unknown ids render as `?`.
pub fn decode(ids: &[u32]) -> String {
    ids.iter().map(|&i| symbol(i).unwrap_or('?')).collect()
}

pub fn letter(i: usize) -> char {
    (b'a' + i as u8) as char
}

pub fn digit(i: usize) -> char {
    (b'0' + i as u8) as char
}
