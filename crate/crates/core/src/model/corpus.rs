use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::dataset::TokenId;
use crate::error::{Error, Result};

/// Token sequences drawn from a Zipfian unigram distribution.
/// Token id `r - 1` is the rank-`r` token of the generating distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub sequences: Vec<Vec<TokenId>>,
    /// Occurrence counts of every token that appears at least once.
    pub token_frequencies: BTreeMap<TokenId, u64>,
    pub zipf_exponent: f64,
    pub seed: u64,
    #[serde(default)]
    pub successor_rule: Option<SuccessorRule>,
}

/// Planted bigram structure: every token with id `>= first_token` is followed,
/// with probability `probability`, by its designated successor
/// `token % n_groups`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessorRule {
    pub first_token: TokenId,
    pub n_groups: usize,
    pub probability: f64,
}

impl SuccessorRule {
    pub fn applies(&self, token: TokenId) -> bool {
        token >= self.first_token
    }

    pub fn group(&self, token: TokenId) -> usize {
        token as usize % self.n_groups
    }

    pub fn successor(&self, token: TokenId) -> TokenId {
        self.group(token) as TokenId
    }
}

pub fn generate_corpus(
    vocab_size: usize,
    n_sequences: usize,
    seq_len: usize,
    zipf_exponent: f64,
    seed: u64,
) -> Result<SyntheticCorpus> {
    generate_corpus_with(vocab_size, n_sequences, seq_len, zipf_exponent, seed, None)
}

pub fn generate_corpus_with(
    vocab_size: usize,
    n_sequences: usize,
    seq_len: usize,
    zipf_exponent: f64,
    seed: u64,
    rule: Option<SuccessorRule>,
) -> Result<SyntheticCorpus> {
    if vocab_size == 0 || n_sequences == 0 || seq_len == 0 {
        return Err(Error::invalid("corpus request with zero vocabulary, sequences or length"));
    }
    if !(zipf_exponent > 0.0) || !zipf_exponent.is_finite() {
        return Err(Error::invalid(format!("zipf exponent must be positive, got {zipf_exponent}")));
    }
    if let Some(r) = &rule {
        if r.n_groups == 0 || r.n_groups > vocab_size || !(0.0..=1.0).contains(&r.probability) {
            return Err(Error::invalid("invalid successor rule"));
        }
    }
    let zipf = Zipf::new(vocab_size as u64, zipf_exponent)
        .map_err(|e| Error::invalid(format!("zipf distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut token_frequencies = BTreeMap::new();
    let mut sequences = Vec::with_capacity(n_sequences);
    for _ in 0..n_sequences {
        let mut seq = Vec::with_capacity(seq_len);
        for _ in 0..seq_len {
            let forced = match (&rule, seq.last()) {
                (Some(r), Some(&prev)) if r.applies(prev) && rng.gen::<f64>() < r.probability => Some(r.successor(prev)),
                _ => None,
            };
            let tok = forced.unwrap_or_else(|| (zipf.sample(&mut rng) as u64 - 1) as TokenId);
            *token_frequencies.entry(tok).or_insert(0) += 1;
            seq.push(tok);
        }
        sequences.push(seq);
    }
    Ok(SyntheticCorpus {
        sequences,
        token_frequencies,
        zipf_exponent,
        seed,
        successor_rule: rule,
    })
}

impl SyntheticCorpus {
    /// Pseudo-word surface form of a token: 1 to 8 lowercase letters,
    /// a deterministic function of the token id and the corpus seed.
    pub fn surface(&self, token: TokenId) -> String {
        let mut state = splitmix(self.seed ^ (token as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let len = 1 + (state % 8) as usize;
        (0..len)
            .map(|_| {
                state = splitmix(state);
                (b'a' + (state % 26) as u8) as char
            })
            .collect()
    }

    /// Counts sorted in descending order (the frequency-rank curve).
    pub fn rank_frequency(&self) -> Vec<u64> {
        let mut counts: Vec<u64> = self.token_frequencies.values().copied().collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        counts
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
