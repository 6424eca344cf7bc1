//! The 96-symbol alphabet and its stroke glyphs.
//!
//! Every glyph is a subset of a 16-segment display laid out on a unit box
//! (x right, y down). Digits use the classic seven segments, upper-case
//! letters follow the usual 16-segment forms, and the remaining symbols get
//! deterministic pseudo-random masks. All 96 masks are distinct.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const ALPHABET_SIZE: usize = 96;

/// Segment end points on the unit glyph box.
pub const SEGMENTS: [[[f64; 2]; 2]; 16] = [
    [[0.0, 0.0], [0.5, 0.0]], // a1
    [[0.5, 0.0], [1.0, 0.0]], // a2
    [[1.0, 0.0], [1.0, 0.5]], // b
    [[1.0, 0.5], [1.0, 1.0]], // c
    [[1.0, 1.0], [0.5, 1.0]], // d2
    [[0.5, 1.0], [0.0, 1.0]], // d1
    [[0.0, 1.0], [0.0, 0.5]], // e
    [[0.0, 0.5], [0.0, 0.0]], // f
    [[0.0, 0.5], [0.5, 0.5]], // g1
    [[0.5, 0.5], [1.0, 0.5]], // g2
    [[0.0, 0.0], [0.5, 0.5]], // h
    [[0.5, 0.0], [0.5, 0.5]], // i
    [[1.0, 0.0], [0.5, 0.5]], // j
    [[0.5, 0.5], [0.0, 1.0]], // k
    [[0.5, 0.5], [0.5, 1.0]], // l
    [[0.5, 0.5], [1.0, 1.0]], // m
];

const fn bits(list: &[u8]) -> u16 {
    let mut m = 0u16;
    let mut i = 0;
    while i < list.len() {
        m |= 1 << list[i];
        i += 1;
    }
    m
}

// Segment indices, for readability of the tables below.
const A1: u8 = 0;
const A2: u8 = 1;
const B: u8 = 2;
const C: u8 = 3;
const D2: u8 = 4;
const D1: u8 = 5;
const E: u8 = 6;
const F: u8 = 7;
const G1: u8 = 8;
const G2: u8 = 9;
const H: u8 = 10;
const I: u8 = 11;
const J: u8 = 12;
const K: u8 = 13;
const L: u8 = 14;
const M: u8 = 15;

const DIGITS: [u16; 10] = [
    bits(&[A1, A2, B, C, D2, D1, E, F]),
    bits(&[B, C]),
    bits(&[A1, A2, B, G1, G2, E, D1, D2]),
    bits(&[A1, A2, B, G1, G2, C, D1, D2]),
    bits(&[F, G1, G2, B, C]),
    bits(&[A1, A2, F, G1, G2, C, D1, D2]),
    bits(&[A1, A2, F, G1, G2, E, D1, D2, C]),
    bits(&[A1, A2, B, C]),
    bits(&[A1, A2, B, C, D1, D2, E, F, G1, G2]),
    bits(&[A1, A2, B, C, D1, D2, F, G1, G2]),
];

const UPPER: [u16; 26] = [
    bits(&[A1, A2, B, C, E, F, G1, G2]),
    bits(&[A1, A2, B, C, D1, D2, G2, I, L]),
    bits(&[A1, A2, D1, D2, E, F]),
    bits(&[A1, A2, B, C, D1, D2, I, L]),
    bits(&[A1, A2, D1, D2, E, F, G1]),
    bits(&[A1, A2, E, F, G1]),
    bits(&[A1, A2, C, D1, D2, E, F, G2]),
    bits(&[B, C, E, F, G1, G2]),
    bits(&[A1, A2, D1, D2, I, L]),
    bits(&[B, C, D1, D2, E]),
    bits(&[E, F, G1, J, M]),
    bits(&[D1, D2, E, F]),
    bits(&[B, C, E, F, H, J]),
    bits(&[B, C, E, F, H, M]),
    bits(&[A1, A2, B, C, D1, D2, E, F, I, L]),
    bits(&[A1, A2, B, E, F, G1, G2]),
    bits(&[A1, A2, B, C, D1, D2, E, F, M]),
    bits(&[A1, A2, B, E, F, G1, G2, M]),
    bits(&[A1, A2, H, G2, C, D1, D2]),
    bits(&[A1, A2, I, L]),
    bits(&[B, C, D1, D2, E, F]),
    bits(&[E, F, K, J]),
    bits(&[B, C, E, F, K, M]),
    bits(&[H, J, K, M]),
    bits(&[H, J, L]),
    bits(&[A1, A2, D1, D2, J, K]),
];

/// Digits, upper case, lower case, the 32 ASCII punctuation marks, `°`, `±`.
pub fn alphabet() -> &'static [char] {
    static CHARS: OnceLock<Vec<char>> = OnceLock::new();
    CHARS.get_or_init(|| {
        let mut v: Vec<char> = ('0'..='9').chain('A'..='Z').chain('a'..='z').collect();
        v.extend(
            (33u8..127)
                .map(char::from)
                .filter(|c| c.is_ascii_punctuation()),
        );
        v.extend(['°', '±']);
        v
    })
}

/// Class index of `c`, or `None` when outside the alphabet.
pub fn class_of(c: char) -> Option<usize> {
    alphabet().iter().position(|&a| a == c)
}

pub fn encode_text(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            class_of(c).ok_or_else(|| {
                Error::InvalidArgument(format!("character {c:?} is not in the alphabet"))
            })
        })
        .collect()
}

/// Segment mask for each alphabet entry.
pub fn glyph_masks() -> &'static [u16] {
    static MASKS: OnceLock<Vec<u16>> = OnceLock::new();
    MASKS.get_or_init(|| {
        let mut masks: Vec<u16> = DIGITS.iter().chain(&UPPER).copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0x61_6c_70_68);
        while masks.len() < ALPHABET_SIZE {
            let count = rng.gen_range(3..=6);
            let mut m = 0u16;
            while m.count_ones() < count {
                m |= 1 << rng.gen_range(0..16);
            }
            if !masks.contains(&m) {
                masks.push(m);
            }
        }
        masks
    })
}

/// Stroke segments of glyph `class` on the unit box.
pub fn glyph_strokes(class: usize) -> Vec<[[f64; 2]; 2]> {
    let mask = glyph_masks()[class];
    (0..16)
        .filter(|s| mask & (1 << s) != 0)
        .map(|s| SEGMENTS[s])
        .collect()
}
