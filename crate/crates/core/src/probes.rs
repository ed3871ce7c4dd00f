// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trait probes `φ(o) ∈ [0, 1]`.
//!
//! Logit mode scores the softmax mass on positive versus negative marker
//! tokens. Text mode counts marker hits in a token or word sequence. Both use
//! a normalized difference centred on 0.5, so swapping marker sets maps a
//! score `s` to `1 − s`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Smoothing constant in the logit-mode denominator.
pub const KAPPA: f64 = 1e-6;
/// Token count at which the length feature saturates.
pub const LENGTH_NORM: f64 = 40.0;

/// One marker as written in a marker file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Marker {
    Token(usize),
    Word(String),
    WeightedToken { token: usize, weight: f64 },
    WeightedWord { word: String, weight: f64 },
}

/// On-disk marker file: `{trait, positive, negative, length_weight}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerFile {
    #[serde(rename = "trait")]
    pub trait_label: String,
    pub positive: Vec<Marker>,
    pub negative: Vec<Marker>,
    #[serde(default)]
    pub length_weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct MarkerSet {
    tokens: BTreeMap<usize, f64>,
    words: BTreeMap<String, f64>,
}

impl MarkerSet {
    fn build(markers: &[Marker]) -> Result<Self> {
        let mut set = MarkerSet::default();
        for m in markers {
            let (weight, inserted) = match m {
                Marker::Token(t) => (1.0, set.tokens.insert(*t, 1.0)),
                Marker::WeightedToken { token, weight } => (*weight, set.tokens.insert(*token, *weight)),
                Marker::Word(w) => (1.0, set.words.insert(normalize_word(w), 1.0)),
                Marker::WeightedWord { word, weight } => (*weight, set.words.insert(normalize_word(word), *weight)),
            };
            if !(weight.is_finite() && weight >= 0.0) {
                return Err(Error::InvalidArgument(format!("marker weight {weight} must be finite and nonnegative")));
            }
            if inserted.is_some() {
                return Err(Error::InvalidArgument(format!("duplicate marker {m:?}")));
            }
        }
        Ok(set)
    }

    fn to_markers(&self) -> Vec<Marker> {
        let tokens = self.tokens.iter().map(|(&token, &weight)| {
            if weight == 1.0 {
                Marker::Token(token)
            } else {
                Marker::WeightedToken { token, weight }
            }
        });
        let words = self.words.iter().map(|(word, &weight)| {
            if weight == 1.0 {
                Marker::Word(word.clone())
            } else {
                Marker::WeightedWord {
                    word: word.clone(),
                    weight,
                }
            }
        });
        tokens.chain(words).collect()
    }
}

fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraitProbe {
    pub trait_label: String,
    positive: MarkerSet,
    negative: MarkerSet,
    pub length_weight: f64,
}

impl TraitProbe {
    pub fn new(trait_label: &str, positive: &[Marker], negative: &[Marker], length_weight: f64) -> Result<Self> {
        let positive = MarkerSet::build(positive)?;
        let negative = MarkerSet::build(negative)?;
        if positive.tokens.keys().any(|t| negative.tokens.contains_key(t))
            || positive.words.keys().any(|w| negative.words.contains_key(w))
        {
            return Err(Error::InvalidArgument("positive and negative markers overlap".into()));
        }
        if !length_weight.is_finite() {
            return Err(Error::InvalidArgument("length_weight must be finite".into()));
        }
        Ok(Self {
            trait_label: trait_label.to_string(),
            positive,
            negative,
            length_weight,
        })
    }

    pub fn from_file(file: &MarkerFile) -> Result<Self> {
        Self::new(&file.trait_label, &file.positive, &file.negative, file.length_weight)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file(&serde_json::from_str(&text)?)
    }

    pub fn to_file(&self) -> MarkerFile {
        MarkerFile {
            trait_label: self.trait_label.clone(),
            positive: self.positive.to_markers(),
            negative: self.negative.to_markers(),
            length_weight: self.length_weight,
        }
    }

    /// The same probe with positive and negative roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            trait_label: self.trait_label.clone(),
            positive: self.negative.clone(),
            negative: self.positive.clone(),
            length_weight: self.length_weight,
        }
    }

    /// Markers derived from a per-token trait response: the `k` tokens with
    /// the largest response become positive markers, the `k` smallest negative.
    pub fn planted(trait_label: &str, response: &[f64], k: usize) -> Result<Self> {
        if k == 0 || 2 * k > response.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot plant {k} markers per side among {} tokens",
                response.len()
            )));
        }
        let mut order: Vec<usize> = (0..response.len()).collect();
        order.sort_by(|&a, &b| response[b].total_cmp(&response[a]).then(a.cmp(&b)));
        let pos: Vec<Marker> = order[..k].iter().map(|&t| Marker::Token(t)).collect();
        let neg: Vec<Marker> = order[order.len() - k..].iter().map(|&t| Marker::Token(t)).collect();
        Self::new(trait_label, &pos, &neg, 0.0)
    }

    /// Logit-mode score.
    pub fn score_logits<T: Real>(&self, logits: &[T]) -> T {
        let probs = softmax(logits);
        let mass = |set: &MarkerSet| {
            set.tokens
                .iter()
                .filter(|(&t, _)| t < probs.len())
                .fold(T::zero(), |acc, (&t, &w)| acc + probs[t] * T::lit(w))
        };
        let (sp, sn) = (mass(&self.positive), mass(&self.negative));
        let half = T::lit(0.5);
        let score = half + half * (sp - sn) / (sp + sn + T::lit(KAPPA));
        score.clamp(T::zero(), T::one())
    }

    fn count_score(&self, c_pos: f64, c_neg: f64, len: usize) -> f64 {
        let length_feature = (len as f64 / LENGTH_NORM).min(1.0);
        let score = 0.5 + 0.5 * (c_pos - c_neg) / (c_pos + c_neg + 1.0) + self.length_weight * length_feature;
        score.clamp(0.0, 1.0)
    }

    /// Text-mode score over sampled token indices (toy generations).
    pub fn score_tokens(&self, tokens: &[usize]) -> f64 {
        let hits = |set: &MarkerSet| tokens.iter().filter_map(|t| set.tokens.get(t)).sum::<f64>();
        self.count_score(hits(&self.positive), hits(&self.negative), tokens.len())
    }

    /// Text-mode score over words; punctuation is stripped and case folded.
    pub fn score_text<S: AsRef<str>>(&self, words: &[S]) -> f64 {
        let normalized: Vec<String> = words.iter().map(|w| normalize_word(w.as_ref())).collect();
        let hits = |set: &MarkerSet| normalized.iter().filter_map(|w| set.words.get(w)).sum::<f64>();
        self.count_score(hits(&self.positive), hits(&self.negative), normalized.len())
    }

    pub fn score_str(&self, text: &str) -> f64 {
        let words: Vec<&str> = text.split_whitespace().collect();
        self.score_text(&words)
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::min_value().expect("bounded"), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn token_probe() -> TraitProbe {
        TraitProbe::new("synthetic", &[Marker::Token(0)], &[Marker::Token(1)], 0.0).unwrap()
    }

    #[test]
    fn large_gap_saturates_towards_one() {
        let p = token_probe();
        assert!(p.score_logits(&[20.0, 0.0, 0.0, 0.0]) >= 0.999);
    }

    #[test]
    fn symmetric_markers_on_uniform_logits_are_neutral() {
        let p = TraitProbe::new("s", &[Marker::Token(0), Marker::Token(2)], &[Marker::Token(1), Marker::Token(3)], 0.0)
            .unwrap();
        assert!((p.score_logits(&[0.0f64; 4]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn swap_antisymmetry_logits() {
        let p = token_probe();
        let l = [0.3f64, -1.2, 2.0, 0.1];
        let s = p.score_logits(&l) + p.swapped().score_logits(&l);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn text_formula_examples() {
        let p = TraitProbe::new(
            "formality",
            &[Marker::Word("furthermore".into()), Marker::Word("regards".into()), Marker::Word("sincerely".into())],
            &[Marker::Word("hey".into()), Marker::Word("gonna".into())],
            0.0,
        )
        .unwrap();
        assert!((p.score_str("Furthermore, kind regards and sincerely yours.") - 0.875).abs() < 1e-12);
        assert_eq!(p.score_str("the cat sat"), 0.5);
        let s = p.score_str("hey furthermore gonna");
        assert!((s + p.swapped().score_str("hey furthermore gonna") - 1.0).abs() < 1e-12);
    }

    #[test]
    fn length_feature_is_capped() {
        let mut p = token_probe();
        p.length_weight = 0.1;
        let long = vec![5usize; 200];
        assert!((p.score_tokens(&long) - 0.6).abs() < 1e-12);
        assert!((p.score_tokens(&[5; 20]) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn invalid_marker_sets() {
        assert!(TraitProbe::new("s", &[Marker::Token(0)], &[Marker::Token(0)], 0.0).is_err());
        let neg = Marker::WeightedToken { token: 1, weight: -1.0 };
        assert!(TraitProbe::new("s", &[Marker::Token(0)], &[neg], 0.0).is_err());
        assert!(TraitProbe::planted("s", &[0.1, 0.2], 2).is_err());
    }

    #[test]
    fn planted_markers_follow_response() {
        let p = TraitProbe::planted("s", &[0.5, -2.0, 3.0, 0.0, -0.1], 2).unwrap();
        let f = p.to_file();
        assert_eq!(f.positive, vec![Marker::Token(0), Marker::Token(2)]);
        assert_eq!(f.negative, vec![Marker::Token(1), Marker::Token(4)]);
    }

    #[test]
    fn marker_file_json_shape() {
        let json = r#"{"trait":"politeness","positive":["please",{"word":"kindly","weight":2.0}],"negative":["shut"],"length_weight":0.0}"#;
        let f: MarkerFile = serde_json::from_str(json).unwrap();
        let p = TraitProbe::from_file(&f).unwrap();
        assert!((p.score_str("please kindly") - (0.5 + 0.5 * 3.0 / 4.0)).abs() < 1e-12);
    }
}
