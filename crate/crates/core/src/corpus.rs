//! Deterministic English-like text for training runs when no natural corpus
//! is at hand.
//!
//! Sentences follow a handful of templates over word classes; content words
//! are invented from syllables and drawn with Zipf frequencies, so the text
//! has short- and mid-range structure a byte-level model can learn.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every", "some", "no", "its", "their", "our"];
const PREPOSITIONS: &[&str] = &["of", "in", "on", "with", "from", "under", "near", "after", "before", "across"];
const CONJUNCTIONS: &[&str] = &["and", "but", "so", "while", "because", "although"];
const PRONOUNS: &[&str] = &["it", "she", "he", "they", "we", "someone"];
const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "cl", "dr", "gr", "pl", "st",
    "tr", "sh", "th", "ch",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai", "io"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "s", "t", "nd", "st", "ck", "m"];

struct Lexicon {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
    adverbs: Vec<String>,
    zipf: Zipf<f64>,
}

fn invent_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    w.push_str(CODAS.choose(rng).unwrap());
    w
}

impl Lexicon {
    const SIZE: usize = 400;

    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut class = |suffix: &str| -> Vec<String> {
            (0..Self::SIZE).map(|_| format!("{}{}", invent_word(rng), suffix)).collect()
        };
        let nouns = class("");
        let verbs = class("s");
        let adjectives = class("y");
        let adverbs = class("ly");
        Self { nouns, verbs, adjectives, adverbs, zipf: Zipf::new(Self::SIZE as f64, 1.1).unwrap() }
    }

    fn pick<'a>(&self, words: &'a [String], rng: &mut ChaCha8Rng) -> &'a str {
        let rank = self.zipf.sample(rng) as usize;
        &words[rank.clamp(1, words.len()) - 1]
    }

    fn noun_phrase(&self, rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
        out.push(DETERMINERS.choose(rng).unwrap().to_string());
        if rng.random_bool(0.4) {
            out.push(self.pick(&self.adjectives, rng).to_string());
        }
        out.push(self.pick(&self.nouns, rng).to_string());
        if rng.random_bool(0.25) {
            out.push(PREPOSITIONS.choose(rng).unwrap().to_string());
            out.push(DETERMINERS.choose(rng).unwrap().to_string());
            out.push(self.pick(&self.nouns, rng).to_string());
        }
    }

    fn clause(&self, rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
        if rng.random_bool(0.3) {
            out.push(PRONOUNS.choose(rng).unwrap().to_string());
        } else {
            self.noun_phrase(rng, out);
        }
        if rng.random_bool(0.2) {
            out.push(self.pick(&self.adverbs, rng).to_string());
        }
        out.push(self.pick(&self.verbs, rng).to_string());
        if rng.random_bool(0.7) {
            self.noun_phrase(rng, out);
        }
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> String {
        let mut words = Vec::new();
        self.clause(rng, &mut words);
        let mut comma = None;
        if rng.random_bool(0.3) {
            comma = Some(words.len() - 1);
            words.push(CONJUNCTIONS.choose(rng).unwrap().to_string());
            self.clause(rng, &mut words);
        }
        let mut s = String::new();
        for (i, w) in words.iter().enumerate() {
            if i == 0 {
                let mut c = w.chars();
                if let Some(f) = c.next() {
                    s.extend(f.to_uppercase());
                    s.push_str(c.as_str());
                }
            } else {
                s.push(' ');
                s.push_str(w);
            }
            if comma == Some(i) {
                s.push(',');
            }
        }
        s.push(if rng.random_bool(0.1) { '?' } else { '.' });
        s
    }
}

/// About `bytes` bytes of text (never less), deterministic in `seed`.
/// Paragraphs of 3–8 sentences are separated by blank lines.
pub fn synthetic_text(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lex = Lexicon::new(&mut rng);
    let mut text = String::with_capacity(bytes + 256);
    while text.len() < bytes {
        let sentences = rng.random_range(3..=8);
        for k in 0..sentences {
            if k > 0 {
                text.push(' ');
            }
            text.push_str(&lex.sentence(&mut rng));
        }
        text.push_str("\n\n");
    }
    text
}
