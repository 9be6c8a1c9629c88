//! Deterministic synthetic assembly-instruction corpora shared by the integration tests.
#![allow(dead_code)]

use fsponer_core::corpus::{Corpus, EntitySpan, EntityType, TagScheme, TaggedSentence};
use fsponer_core::stratify::StratifiedDataset;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub const TYPES: [&str; 4] = ["PART", "OPER", "TOOL", "QTY"];

const LEXICON: [&[&str]; 4] = [
    &["bolt", "washer", "bracket", "hinge", "panel", "shaft", "gear", "spring", "housing", "flange", "rail", "clip", "nut", "frame"],
    &["insert", "tighten", "align", "attach", "press", "rotate", "mount", "fasten", "slide", "secure", "lift", "clamp"],
    &["wrench", "screwdriver", "hammer", "pliers", "drill", "mallet", "jig", "torque", "socket", "riveter"],
    &["two", "three", "four", "six", "eight", "twelve", "several", "both", "pair", "dozen"],
];

const FILLER: &[&str] = &[
    "the", "then", "with", "and", "into", "for", "on", "carefully", "until", "slowly", "each", "at", "from", "next",
    "using", "left", "right", "upper", "lower", "side", "firmly", "gently", "after", "before", "is", "seated",
];

pub fn label(name: &str) -> EntityType {
    EntityType::new(name).unwrap()
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str], used: &mut Vec<&'a str>) -> &'a str {
    loop {
        let w = words[(rng.next_u64() % words.len() as u64) as usize];
        if !used.contains(&w) {
            used.push(w);
            return w;
        }
    }
}

/// Sentences with 1 to 3 entities (1 or 2 tokens each) separated by filler.
/// No token repeats within a sentence, so every surface aligns unambiguously.
pub fn synthetic_sentences(n: usize, seed: u64) -> Vec<TaggedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let mut used = Vec::new();
            let mut tokens: Vec<String> = Vec::new();
            let mut spans = Vec::new();
            let n_entities = 1 + (rng.next_u64() % 3) as usize;
            for _ in 0..n_entities {
                for _ in 0..1 + rng.next_u64() % 3 {
                    tokens.push(pick(&mut rng, FILLER, &mut used).to_string());
                }
                let t = (rng.next_u64() % TYPES.len() as u64) as usize;
                let len = 1 + (rng.next_u64() % 2) as usize;
                let start = tokens.len();
                for _ in 0..len {
                    tokens.push(pick(&mut rng, LEXICON[t], &mut used).to_string());
                }
                spans.push(EntitySpan::new(start, start + len, label(TYPES[t])));
            }
            tokens.push(pick(&mut rng, FILLER, &mut used).to_string());
            TaggedSentence::new(id, tokens, spans).unwrap()
        })
        .collect()
}

pub fn synthetic_corpus(n: usize, seed: u64) -> Corpus {
    Corpus::from_sentences(synthetic_sentences(n, seed), TagScheme::Bio).unwrap()
}

pub fn synthetic_pool(n: usize, seed: u64) -> StratifiedDataset {
    StratifiedDataset::from_corpus(synthetic_corpus(n, seed))
}
