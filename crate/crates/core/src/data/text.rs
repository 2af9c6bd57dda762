//! Template captions and a frozen bag-of-tokens text embedder.
//!
//! A caption is `<det> <shape> <verb> <direction>` with every slot drawn
//! from a small synonym list. The embedder maps each token to a fixed random
//! vector made of a shared concept direction (synonyms agree) plus a smaller
//! token-specific part, and averages over the caption. Nothing in it trains.

use rand::seq::IndexedRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TurboError};
use crate::rng::{derive_seed, rng_from};

use super::render::{Primitive, NUM_PRIMITIVES};

const DETERMINERS: [&str; 3] = ["a", "the", "one"];
const VERBS: [&str; 4] = ["moving", "going", "sliding", "drifting"];
const SHAPE_WORDS: [[&str; 3]; 4] =
    [["square", "box", "block"], ["circle", "ball", "disc"], ["triangle", "wedge", "pyramid"], ["cross", "plus", "star"]];
const DIRECTION_WORDS: [[&str; 3]; 4] =
    [["right", "rightward", "east"], ["left", "leftward", "west"], ["down", "downward", "south"], ["up", "upward", "north"]];

/// Concept of each slot: determiner, verb, 4 shapes, 4 directions.
const NUM_CONCEPTS: usize = 10;

/// Weight of the token-specific part relative to the concept part.
const TOKEN_NOISE: f64 = 0.25;

/// `(word, concept)` for every token id.
pub fn vocabulary() -> Vec<(&'static str, usize)> {
    let mut v: Vec<(&str, usize)> = DETERMINERS.iter().map(|&w| (w, 0)).collect();
    v.extend(VERBS.iter().map(|&w| (w, 1)));
    for (i, words) in SHAPE_WORDS.iter().enumerate() {
        v.extend(words.iter().map(|&w| (w, 2 + i)));
    }
    for (i, words) in DIRECTION_WORDS.iter().enumerate() {
        v.extend(words.iter().map(|&w| (w, 6 + i)));
    }
    v
}

fn token_id(word: &str) -> usize {
    vocabulary().iter().position(|&(w, _)| w == word).unwrap()
}

pub fn gen_caption(class_id: usize, seed: u64) -> Result<Vec<usize>> {
    let p = Primitive::from_id(class_id)
        .ok_or_else(|| TurboError::Data(format!("class {class_id} out of range [0,{NUM_PRIMITIVES})")))?;
    let mut rng = rng_from(seed);
    let (s, d) = (p.id() / 4, p.id() % 4);
    Ok(vec![
        token_id(DETERMINERS.choose(&mut rng).unwrap()),
        token_id(SHAPE_WORDS[s].choose(&mut rng).unwrap()),
        token_id(VERBS.choose(&mut rng).unwrap()),
        token_id(DIRECTION_WORDS[d].choose(&mut rng).unwrap()),
    ])
}

pub fn caption_text(tokens: &[usize]) -> String {
    let vocab = vocabulary();
    tokens.iter().map(|&t| vocab.get(t).map_or("<unk>", |v| v.0)).collect::<Vec<_>>().join(" ")
}

/// Frozen text encoder; a pure function of `(seed, dim)`.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    pub dim: usize,
    table: Vec<Vec<f32>>,
}

impl TextEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = rng_from(derive_seed(&[seed, 0x7e47]));
        let scale = 1.0 / (dim as f64).sqrt();
        let mut gauss = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect()
        };
        let concepts: Vec<Vec<f64>> = (0..NUM_CONCEPTS).map(|_| gauss(dim)).collect();
        let table = vocabulary()
            .iter()
            .map(|&(_, c)| {
                let own = gauss(dim);
                concepts[c].iter().zip(&own).map(|(a, b)| (a + TOKEN_NOISE * b) as f32).collect()
            })
            .collect();
        Self { dim, table }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.len()
    }

    /// Mean of the token vectors.
    pub fn embed(&self, tokens: &[usize]) -> Result<Vec<f32>> {
        let mut out = vec![0f32; self.dim];
        for &t in tokens {
            let row = self.table.get(t).ok_or_else(|| TurboError::Data(format!("token {t} not in vocabulary")))?;
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let n = tokens.len().max(1) as f32;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(out)
    }
}
