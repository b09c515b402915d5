//! Seeded toy corpus with a small fixed grammar of tasks of varying
//! difficulty: colour lookup, addition, word reversal, upper-casing and
//! letter counting.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PreferenceRecord, SftRecord};

const NOUNS: [(&str, &str); 12] = [
    ("sky", "blue"),
    ("grass", "green"),
    ("snow", "white"),
    ("coal", "black"),
    ("lemon", "yellow"),
    ("cherry", "red"),
    ("orange", "orange"),
    ("plum", "purple"),
    ("sand", "beige"),
    ("ash", "grey"),
    ("rose", "pink"),
    ("sea", "teal"),
];

const WORDS: [&str; 16] = [
    "apple", "river", "stone", "cloud", "tiger", "piano", "glass", "maple", "robot", "candle",
    "forest", "planet", "bridge", "garden", "rocket", "window",
];

const COLORS: [&str; 12] = [
    "blue", "green", "white", "black", "yellow", "red", "orange", "purple", "beige", "grey", "pink",
    "teal",
];

/// Answers restate the question around the result so they run to a few
/// dozen bytes; the rejected answer uses the same template with a wrong
/// result.
fn task(rng: &mut ChaCha8Rng) -> (String, String, String) {
    match rng.random_range(0..5) {
        0 => {
            let (noun, color) = *NOUNS.choose(rng).expect("non-empty");
            let wrong = loop {
                let c = *COLORS.choose(rng).expect("non-empty");
                if c != color {
                    break c;
                }
            };
            let say = |c: &str| format!("the {noun} is {c}. so the colour of the {noun} is {c}.");
            (format!("color of {noun}?"), say(color), say(wrong))
        }
        1 => {
            let a = rng.random_range(0..50);
            let b = rng.random_range(0..50);
            let off = rng.random_range(1..10);
            let say = |s: u32| format!("{a} plus {b} equals {s}. the sum of {a} and {b} is {s}.");
            (format!("add {a} {b}"), say(a + b), say(a + b + off))
        }
        2 => {
            let w = *WORDS.choose(rng).expect("non-empty");
            let say = |r: &str| format!("{w} reversed is {r}. read backwards, {w} becomes {r}.");
            let rev: String = w.chars().rev().collect();
            (format!("reverse {w}"), say(&rev), say(w))
        }
        3 => {
            let w = *WORDS.choose(rng).expect("non-empty");
            let say = |u: &str| format!("{w} in upper case is {u}. so {w} becomes {u}.");
            (format!("upper {w}"), say(&w.to_uppercase()), say(w))
        }
        _ => {
            let w = *WORDS.choose(rng).expect("non-empty");
            let say = |n: usize| format!("{w} has {n} letters. counting {w} gives {n} letters.");
            (format!("count {w}"), say(w.len()), say(w.len() + 1))
        }
    }
}

pub fn sft_records(n: usize, seed: u64) -> Vec<SftRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (prompt, answer, _) = task(&mut rng);
            SftRecord { prompt, answer }
        })
        .collect()
}

pub fn preference_records(n: usize, seed: u64) -> Vec<PreferenceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (prompt, chosen, rejected) = task(&mut rng);
            PreferenceRecord {
                prompt,
                chosen,
                rejected,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenizeOptions;

    #[test]
    fn deterministic_and_valid() {
        assert_eq!(sft_records(50, 1), sft_records(50, 1));
        assert_ne!(sft_records(50, 1), sft_records(50, 2));
        let opts = TokenizeOptions::default();
        for r in sft_records(500, 3) {
            r.to_sample(&opts).unwrap();
        }
        for r in preference_records(500, 3) {
            assert_ne!(r.chosen, r.rejected);
            r.to_pair(&opts).unwrap();
        }
    }
}
