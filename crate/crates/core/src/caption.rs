//! Sentence splitting and diverse sub-caption sampling.
//!
//! A long caption is a list of sentences. Each training iteration draws `K`
//! sub-captions per image; every sub-caption uses `s` sentences with `s`
//! uniform in `1..=min(S, sentence_count)`, taken either as a consecutive
//! run or as `s` distinct positions joined in ascending order.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::word_pieces;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongCaption {
    pub image_id: String,
    pub sentences: Vec<String>,
}

impl LongCaption {
    pub fn new(image_id: impl Into<String>, sentences: Vec<String>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Input("caption needs at least one sentence".into()));
        }
        if let Some(bad) = sentences.iter().find(|s| s.trim().is_empty()) {
            return Err(Error::Input(format!("empty sentence {bad:?}")));
        }
        Ok(Self {
            image_id: image_id.into(),
            sentences,
        })
    }

    pub fn from_text(image_id: impl Into<String>, text: &str) -> Result<Self> {
        Self::new(image_id, split_sentences(text))
    }

    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    Consecutive,
    RandomPositions,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubCaption {
    pub text: String,
    pub source_indices: Vec<usize>,
    pub merge_mode: MergeMode,
}

impl SubCaption {
    /// Number of source sentences.
    pub fn sentence_count(&self) -> usize {
        self.source_indices.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Sub-captions per image.
    pub k: usize,
    /// Maximum sentences merged into one sub-caption.
    pub s: usize,
    /// Token budget including the start and end tokens.
    pub token_limit: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 8,
            s: 3,
            token_limit: 77,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.s == 0 {
            return Err(Error::Config(format!("K and S must be positive (K={}, S={})", self.k, self.s)));
        }
        if self.token_limit < 3 {
            return Err(Error::Config(format!(
                "token_limit {} leaves no room between start and end tokens",
                self.token_limit
            )));
        }
        Ok(())
    }
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_break = match chars.peek() {
                None => true,
                Some((_, next)) => next.is_whitespace(),
            };
            if at_break {
                let end = i + c.len_utf8();
                push_trimmed(&mut out, &text[start..end]);
                start = end;
            }
        }
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, piece: &str) {
    let t = piece.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

/// Keeps at most `max_pieces` word pieces of `text`.
fn truncate_pieces(text: &str, max_pieces: usize) -> String {
    let pieces = word_pieces(text);
    if pieces.len() <= max_pieces {
        return text.to_string();
    }
    let mut out = String::new();
    for p in &pieces[..max_pieces] {
        let is_punct = p.chars().all(|c| c.is_ascii_punctuation());
        if !out.is_empty() && !is_punct {
            out.push(' ');
        }
        out.push_str(p);
    }
    out
}

/// Draws `cfg.k` sub-captions from `caption`.
pub fn sample_subcaptions<R: Rng + ?Sized>(
    caption: &LongCaption,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Vec<SubCaption> {
    let n = caption.sentences.len();
    let s_max = cfg.s.min(n).max(1);
    let content_budget = cfg.token_limit.saturating_sub(2).max(1);
    (0..cfg.k)
        .map(|_| {
            let s = rng.gen_range(1..=s_max);
            let merge_mode = if rng.gen_bool(0.5) {
                MergeMode::Consecutive
            } else {
                MergeMode::RandomPositions
            };
            let source_indices: Vec<usize> = match merge_mode {
                MergeMode::Consecutive => {
                    let start = rng.gen_range(0..=n - s);
                    (start..start + s).collect()
                }
                MergeMode::RandomPositions => {
                    let mut idx = sample(rng, n, s).into_vec();
                    idx.sort_unstable();
                    idx
                }
            };
            let joined = source_indices
                .iter()
                .map(|&i| caption.sentences[i].as_str())
                .collect::<Vec<_>>()
                .join(" ");
            SubCaption {
                text: truncate_pieces(&joined, content_budget),
                source_indices,
                merge_mode,
            }
        })
        .collect()
}

/// One benchmark entry per sentence; each sentence is a positive only for
/// the image it came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub image_index: usize,
    pub image_id: String,
    pub sentence: String,
}

pub fn build_finegrained_benchmark(corpus: &[LongCaption]) -> Result<Vec<BenchmarkEntry>> {
    if corpus.is_empty() {
        return Err(Error::Input("fine-grained benchmark needs a non-empty corpus".into()));
    }
    Ok(corpus
        .iter()
        .enumerate()
        .flat_map(|(i, cap)| {
            cap.sentences.iter().map(move |s| BenchmarkEntry {
                image_index: i,
                image_id: cap.image_id.clone(),
                sentence: s.clone(),
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn caption(n: usize) -> LongCaption {
        let sentences = (0..n).map(|i| format!("Sentence number {i} is here.")).collect();
        LongCaption::new("img", sentences).unwrap()
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_sentences("A dog. A cat."), vec!["A dog.", "A cat."]);
        assert_eq!(split_sentences("One sentence"), vec!["One sentence"]);
        assert_eq!(
            split_sentences("  Wow!  Really?  Yes.  "),
            vec!["Wow!", "Really?", "Yes."]
        );
        assert_eq!(split_sentences("Version 1.5 is out. Done."), vec!["Version 1.5 is out.", "Done."]);
    }

    #[test]
    fn sampled_postconditions() {
        let cap = caption(5);
        let cfg = SamplerConfig { k: 3, s: 2, token_limit: 77 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let subs = sample_subcaptions(&cap, &cfg, &mut rng);
            assert_eq!(subs.len(), 3);
            for sub in &subs {
                assert!((1..=2).contains(&sub.sentence_count()));
                assert!(sub.source_indices.windows(2).all(|w| w[0] < w[1]));
                if sub.merge_mode == MergeMode::Consecutive {
                    assert!(sub.source_indices.windows(2).all(|w| w[1] == w[0] + 1));
                }
                for &i in &sub.source_indices {
                    assert!(sub.text.contains(&cap.sentences[i]));
                }
            }
        }
    }

    #[test]
    fn single_sentence_caption_is_clamped() {
        let cap = LongCaption::new("x", vec!["Only this.".into()]).unwrap();
        let cfg = SamplerConfig { k: 8, s: 3, token_limit: 77 };
        let subs = sample_subcaptions(&cap, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(subs.len(), 8);
        assert!(subs.iter().all(|s| s.text == "Only this." && s.source_indices == vec![0]));
    }

    #[test]
    fn sentence_count_is_uniform() {
        // Monte-Carlo check against the uniform law on {1, 2, 3}.
        let cap = caption(10);
        let cfg = SamplerConfig { k: 1, s: 3, token_limit: 200 };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let sub = &sample_subcaptions(&cap, &cfg, &mut rng)[0];
            counts[sub.sentence_count()] += 1;
        }
        for &c in &counts[1..] {
            let p = c as f64 / draws as f64;
            assert!((p - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn truncation_respects_token_limit() {
        let cap = caption(6);
        let cfg = SamplerConfig { k: 16, s: 6, token_limit: 9 };
        let subs = sample_subcaptions(&cap, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        for sub in subs {
            assert!(word_pieces(&sub.text).len() + 2 <= 9, "{}", sub.text);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cap = caption(7);
        let cfg = SamplerConfig::default();
        let a = sample_subcaptions(&cap, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_subcaptions(&cap, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn benchmark_counts() {
        let corpus = vec![caption(3), caption(3)];
        let bench = build_finegrained_benchmark(&corpus).unwrap();
        assert_eq!(bench.len(), 6);
        assert_eq!(bench.iter().filter(|e| e.image_index == 1).count(), 3);
        assert!(build_finegrained_benchmark(&[]).is_err());
    }

    #[test]
    fn invalid_sampler_config() {
        assert!(SamplerConfig { k: 0, s: 3, token_limit: 77 }.validate().is_err());
        assert!(SamplerConfig { k: 1, s: 0, token_limit: 77 }.validate().is_err());
        assert!(SamplerConfig { k: 1, s: 1, token_limit: 2 }.validate().is_err());
        assert!(SamplerConfig::default().validate().is_ok());
    }
}
