//! Rare/common token groups and feature-matched token pairs.

use std::collections::{BTreeMap, BTreeSet};

use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::dataset::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TokenGroupSpec {
    /// Rank split of the vocabulary at a frequency percentile.
    Percentile { percentile: f64 },
    /// Counts below `rare_max` are rare, above `common_min` common; the band between is dropped.
    Absolute { rare_max: u64, common_min: u64 },
}

impl Default for TokenGroupSpec {
    fn default() -> Self {
        TokenGroupSpec::Percentile { percentile: 50.0 }
    }
}

impl TokenGroupSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TokenGroupSpec::Percentile { percentile } => {
                if !(percentile > 0.0 && percentile < 100.0) {
                    return Err(Error::config(format!("percentile {percentile} outside (0, 100)")));
                }
            }
            TokenGroupSpec::Absolute { rare_max, common_min } => {
                if rare_max == 0 || common_min == 0 {
                    return Err(Error::config("absolute thresholds must be positive"));
                }
                if rare_max > common_min {
                    return Err(Error::config(format!(
                        "rare_max {rare_max} above common_min {common_min}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSplit {
    pub rare: BTreeSet<TokenId>,
    pub common: BTreeSet<TokenId>,
}

/// Splits a frequency table into rare and common tokens.
///
/// In percentile mode tokens are ordered by count, ties by id, and the
/// lowest `round(n * percentile / 100)` (at least one, at most `n - 1`) are
/// rare; every other token is common.
pub fn split_tokens(frequencies: &BTreeMap<TokenId, u64>, spec: &TokenGroupSpec) -> Result<TokenSplit> {
    spec.validate()?;
    if frequencies.is_empty() {
        return Err(Error::invalid("empty token frequency table"));
    }
    let split = match *spec {
        TokenGroupSpec::Percentile { percentile } => {
            let n = frequencies.len();
            if n < 2 {
                return Err(Error::invalid("a percentile split needs at least two tokens"));
            }
            let mut order: Vec<(u64, TokenId)> = frequencies.iter().map(|(t, c)| (*c, *t)).collect();
            order.sort_unstable();
            let n_rare = ((n as f64 * percentile / 100.0).round() as usize).clamp(1, n - 1);
            TokenSplit {
                rare: order[..n_rare].iter().map(|x| x.1).collect(),
                common: order[n_rare..].iter().map(|x| x.1).collect(),
            }
        }
        TokenGroupSpec::Absolute { rare_max, common_min } => TokenSplit {
            rare: frequencies.iter().filter(|(_, c)| **c < rare_max).map(|(t, _)| *t).collect(),
            common: frequencies.iter().filter(|(_, c)| **c > common_min).map(|(t, _)| *t).collect(),
        },
    };
    if split.rare.is_empty() || split.common.is_empty() {
        return Err(Error::invalid(format!(
            "token split leaves {} rare and {} common tokens",
            split.rare.len(),
            split.common.len()
        )));
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionBucket {
    Beginning,
    Middle,
    End,
}

/// Third of a sequence of `len` tokens that `position` falls in.
pub fn position_bucket(position: usize, len: usize) -> PositionBucket {
    let len = len.max(1);
    match 3 * position / len {
        0 => PositionBucket::Beginning,
        1 => PositionBucket::Middle,
        _ => PositionBucket::End,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAnnotation {
    /// Surface length in characters.
    pub length: usize,
    pub pos_tag: Option<String>,
    pub position: PositionBucket,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub rare: TokenId,
    pub common: TokenId,
    pub length_delta: usize,
    pub same_pos: bool,
    pub same_position: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMatching {
    pub pairs: Vec<MatchedPair>,
    pub unmatched: Vec<TokenId>,
}

/// One-to-one matching of rare to common tokens.
///
/// Pairs must differ in length by at most one character. Among matchings
/// with the most pairs, the one with the most equal part-of-speech tags and
/// position buckets is chosen (optimal assignment, cubic in the set sizes).
/// Missing tags never count as equal.
pub fn match_tokens(
    rare: &BTreeSet<TokenId>,
    common: &BTreeSet<TokenId>,
    annotations: &BTreeMap<TokenId, TokenAnnotation>,
) -> Result<TokenMatching> {
    if rare.is_empty() || common.is_empty() {
        return Err(Error::invalid("token matching needs non-empty rare and common sets"));
    }
    let lookup = |t: &TokenId| {
        annotations
            .get(t)
            .ok_or_else(|| Error::invalid(format!("token {t} has no annotation")))
    };
    let rare_ann: Vec<(TokenId, &TokenAnnotation)> = rare.iter().map(|t| Ok((*t, lookup(t)?))).collect::<Result<_>>()?;
    let common_ann: Vec<(TokenId, &TokenAnnotation)> =
        common.iter().map(|t| Ok((*t, lookup(t)?))).collect::<Result<_>>()?;

    let features = |a: &TokenAnnotation, b: &TokenAnnotation| -> Option<(usize, bool, bool)> {
        let delta = a.length.abs_diff(b.length);
        (delta <= 1).then(|| (delta, a.pos_tag.is_some() && a.pos_tag == b.pos_tag, a.position == b.position))
    };
    // Pair count dominates: a pair is worth more than all preference points combined.
    let big = 2 * rare_ann.len().min(common_ann.len()) as i64 + 1;
    let weight = |a: &TokenAnnotation, b: &TokenAnnotation| match features(a, b) {
        Some((_, pos, bucket)) => big + pos as i64 + bucket as i64,
        None => 0,
    };
    let transpose = rare_ann.len() > common_ann.len();
    let (rows, cols) = if transpose {
        (&common_ann, &rare_ann)
    } else {
        (&rare_ann, &common_ann)
    };
    let w = Matrix::from_fn(rows.len(), cols.len(), |(i, j)| {
        if transpose {
            weight(cols[j].1, rows[i].1)
        } else {
            weight(rows[i].1, cols[j].1)
        }
    });
    let (_, assignment) = kuhn_munkres(&w);

    let mut pairs = Vec::new();
    let mut matched = BTreeSet::new();
    for (i, &j) in assignment.iter().enumerate() {
        let ((r, ra), (c, ca)) = if transpose { (cols[j], rows[i]) } else { (rows[i], cols[j]) };
        if let Some((length_delta, same_pos, same_position)) = features(ra, ca) {
            matched.insert(r);
            pairs.push(MatchedPair {
                rare: r,
                common: c,
                length_delta,
                same_pos,
                same_position,
            });
        }
    }
    pairs.sort_by_key(|p| p.rare);
    Ok(TokenMatching {
        pairs,
        unmatched: rare.iter().filter(|t| !matched.contains(t)).copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_are_thirds() {
        let b: Vec<PositionBucket> = (0..6).map(|p| position_bucket(p, 6)).collect();
        assert_eq!(
            b,
            vec![
                PositionBucket::Beginning,
                PositionBucket::Beginning,
                PositionBucket::Middle,
                PositionBucket::Middle,
                PositionBucket::End,
                PositionBucket::End
            ]
        );
        assert_eq!(position_bucket(0, 1), PositionBucket::Beginning);
    }

    #[test]
    fn spec_validation() {
        assert!(TokenGroupSpec::Percentile { percentile: 0.0 }.validate().is_err());
        assert!(TokenGroupSpec::Percentile { percentile: 100.0 }.validate().is_err());
        assert!(TokenGroupSpec::Absolute {
            rare_max: 200,
            common_min: 100
        }
        .validate()
        .is_err());
        assert!(TokenGroupSpec::default().validate().is_ok());
    }
}
