//! Positive and negative pairs for one batch.
//!
//! A batch holds `B` images with `K` sampled captions each; caption `k` of
//! image `j` is written `j_k`. Text-conditioned pairs are triples
//! `(image, condition caption, target caption)`: the image is pooled with the
//! condition caption as query and compared to the target caption. Each image
//! gets its `K` positives and one negative per other image in the batch,
//! `B·(K+B−1)` triples in total.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CaptionRef {
    pub image: usize,
    pub caption: usize,
}

impl CaptionRef {
    pub fn new(image: usize, caption: usize) -> Self {
        Self { image, caption }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub image: usize,
    pub condition: CaptionRef,
    pub target: CaptionRef,
    /// `+1` or `−1`.
    pub label: i8,
}

impl Triple {
    /// Builds a triple with its label derived from the index pattern: positive
    /// only when the image, the condition and the target all belong to the
    /// same image and the condition caption is the target caption.
    pub fn new(image: usize, condition: CaptionRef, target: CaptionRef) -> Self {
        let positive = condition.image == image && target.image == image && condition == target;
        Self {
            image,
            condition,
            target,
            label: if positive { 1 } else { -1 },
        }
    }
}

/// Global-embedding pair `(image, caption)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GlobalPair {
    pub image: usize,
    pub caption: CaptionRef,
    pub label: i8,
}

impl GlobalPair {
    pub fn new(image: usize, caption: CaptionRef) -> Self {
        Self {
            image,
            caption,
            label: if caption.image == image { 1 } else { -1 },
        }
    }
}

/// Index pattern `(condition, target)` of the negative triple for image `i`
/// against another image `j`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NegativeType {
    /// `(i, j_k, j_k)`
    #[default]
    #[serde(rename = "vtc_jk_t_jk")]
    JkJk,
    /// `(i, j_k, i_k)`
    #[serde(rename = "vtc_jk_t_ik")]
    JkIk,
    /// `(i, i_k, j_k)`
    #[serde(rename = "vtc_ik_t_jk")]
    IkJk,
    /// `(i, j_k, l_k)` with a third image `l`
    #[serde(rename = "vtc_jk_t_lk")]
    JkLk,
    /// `(i, i_k, i_m)` with `m ≠ k`
    #[serde(rename = "vtc_ik_t_im")]
    IkIm,
}

impl NegativeType {
    pub const ALL: [NegativeType; 5] = [Self::JkJk, Self::JkIk, Self::IkJk, Self::JkLk, Self::IkIm];

    pub fn name(self) -> &'static str {
        match self {
            Self::JkJk => "vtc_jk_t_jk",
            Self::JkIk => "vtc_jk_t_ik",
            Self::IkJk => "vtc_ik_t_jk",
            Self::JkLk => "vtc_jk_t_lk",
            Self::IkIm => "vtc_ik_t_im",
        }
    }
}

impl fmt::Display for NegativeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NegativeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|t| t.name() == key || t.name().trim_start_matches("vtc_") == key)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|t| t.name()).collect();
                Error::Config(format!("unknown negative type {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub triples: Vec<Triple>,
    pub global_pairs: Vec<GlobalPair>,
}

impl PairSet {
    pub fn positives(&self) -> usize {
        self.triples.iter().filter(|t| t.label > 0).count()
    }

    pub fn negatives(&self) -> usize {
        self.triples.len() - self.positives()
    }

    /// Distinct `(image, condition)` pairs, i.e. the pooling calls needed, in
    /// first-use order.
    pub fn conditioned_keys(&self) -> Vec<(usize, CaptionRef)> {
        let mut seen = std::collections::HashSet::new();
        self.triples
            .iter()
            .map(|t| (t.image, t.condition))
            .filter(|k| seen.insert(*k))
            .collect()
    }
}

/// Builds the pairs of one step. For every ordered pair of distinct images
/// `(i, j)` one caption index `k` is drawn uniformly; the global pairs reuse
/// the same `j_k`.
pub fn build_pairs<R: Rng + ?Sized>(b: usize, k: usize, negative: NegativeType, rng: &mut R) -> Result<PairSet> {
    if b < 2 || k < 1 {
        return Err(Error::Config(format!("pairing needs B >= 2 and K >= 1, got B={b}, K={k}")));
    }
    match negative {
        NegativeType::JkLk if b < 3 => {
            return Err(Error::Config(format!("{negative} needs at least 3 images per batch, got {b}")))
        }
        NegativeType::IkIm if k < 2 => {
            return Err(Error::Config(format!("{negative} needs at least 2 captions per image, got {k}")))
        }
        _ => {}
    }
    let mut triples = Vec::with_capacity(b * (k + b - 1));
    let mut global_pairs = Vec::with_capacity(b * (k + b - 1));
    for i in 0..b {
        for c in 0..k {
            let ik = CaptionRef::new(i, c);
            triples.push(Triple::new(i, ik, ik));
            global_pairs.push(GlobalPair::new(i, ik));
        }
        for j in (0..b).filter(|&j| j != i) {
            let c = rng.gen_range(0..k);
            let (jk, ik) = (CaptionRef::new(j, c), CaptionRef::new(i, c));
            let (condition, target) = match negative {
                NegativeType::JkJk => (jk, jk),
                NegativeType::JkIk => (jk, ik),
                NegativeType::IkJk => (ik, jk),
                NegativeType::JkLk => {
                    // uniform over the b-2 images other than i and j
                    let mut l = rng.gen_range(0..b - 2);
                    for skip in [i.min(j), i.max(j)] {
                        if l >= skip {
                            l += 1;
                        }
                    }
                    (jk, CaptionRef::new(l, c))
                }
                NegativeType::IkIm => {
                    let mut m = rng.gen_range(0..k - 1);
                    if m >= c {
                        m += 1;
                    }
                    (ik, CaptionRef::new(i, m))
                }
            };
            triples.push(Triple::new(i, condition, target));
            global_pairs.push(GlobalPair::new(i, jk));
        }
    }
    Ok(PairSet { triples, global_pairs })
}
