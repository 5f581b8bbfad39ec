//! The latent score space: six linguistic dimensions on `[0, 1]`, the uniform
//! prior over them, the ten topic labels, and the verbal bins used in prompts.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_DIMS: usize = 6;
pub const NUM_TOPICS: usize = 10;

/// The six latent dimensions, in the fixed order used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Valence,
    Arousal,
    Dominance,
    Subjectivity,
    Certainty,
    Formality,
}

impl Dimension {
    pub const ALL: [Dimension; NUM_DIMS] = [
        Dimension::Valence,
        Dimension::Arousal,
        Dimension::Dominance,
        Dimension::Subjectivity,
        Dimension::Certainty,
        Dimension::Formality,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Lowercase key, as used in JSON responses and CSV headers.
    pub fn key(self) -> &'static str {
        match self {
            Dimension::Valence => "valence",
            Dimension::Arousal => "arousal",
            Dimension::Dominance => "dominance",
            Dimension::Subjectivity => "subjectivity",
            Dimension::Certainty => "certainty",
            Dimension::Formality => "formality",
        }
    }

    /// Capitalized label, as used in the forward user prompt.
    pub fn label(self) -> &'static str {
        match self {
            Dimension::Valence => "Valence",
            Dimension::Arousal => "Arousal",
            Dimension::Dominance => "Dominance",
            Dimension::Subjectivity => "Subjectivity",
            Dimension::Certainty => "Certainty",
            Dimension::Formality => "Formality",
        }
    }
}

/// A point in the latent score space. Every component lies in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; NUM_DIMS]", into = "[f64; NUM_DIMS]")]
pub struct ScoreVector([f64; NUM_DIMS]);

impl ScoreVector {
    pub fn new(values: [f64; NUM_DIMS]) -> Result<Self> {
        for &v in &values {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain {
                    value: v,
                    domain: "[0, 1]",
                });
            }
        }
        Ok(ScoreVector(values))
    }

    pub fn splat(value: f64) -> Result<Self> {
        Self::new([value; NUM_DIMS])
    }

    pub fn values(&self) -> &[f64; NUM_DIMS] {
        &self.0
    }

    pub fn get(&self, dim: Dimension) -> f64 {
        self.0[dim.index()]
    }
}

impl TryFrom<[f64; NUM_DIMS]> for ScoreVector {
    type Error = Error;

    fn try_from(values: [f64; NUM_DIMS]) -> Result<Self> {
        ScoreVector::new(values)
    }
}

impl From<ScoreVector> for [f64; NUM_DIMS] {
    fn from(s: ScoreVector) -> Self {
        s.0
    }
}

/// Topic label `c_n`. Treated as a known conditioning variable, never inferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Topic {
    Weather,
    Sports,
    Infrastructure,
    Science,
    Culture,
    CivicLife,
    Business,
    Hazards,
    Technology,
    Health,
}

impl Topic {
    pub const ALL: [Topic; NUM_TOPICS] = [
        Topic::Weather,
        Topic::Sports,
        Topic::Infrastructure,
        Topic::Science,
        Topic::Culture,
        Topic::CivicLife,
        Topic::Business,
        Topic::Hazards,
        Topic::Technology,
        Topic::Health,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Topic::Weather => "weather",
            Topic::Sports => "sports",
            Topic::Infrastructure => "infrastructure",
            Topic::Science => "science",
            Topic::Culture => "culture",
            Topic::CivicLife => "civic life",
            Topic::Business => "business",
            Topic::Hazards => "hazards",
            Topic::Technology => "technology",
            Topic::Health => "health",
        }
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Topic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Topic::ALL
            .iter()
            .copied()
            .find(|t| t.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown topic `{s}`")))
    }
}

impl From<Topic> for String {
    fn from(t: Topic) -> Self {
        t.label().to_string()
    }
}

impl TryFrom<String> for Topic {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Verbal bin of a score: low `[0, 1/3)`, mid `[1/3, 2/3)`, high `[2/3, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreBin {
    Low,
    Mid,
    High,
}

impl ScoreBin {
    pub const ALL: [ScoreBin; 3] = [ScoreBin::Low, ScoreBin::Mid, ScoreBin::High];

    pub fn name(self) -> &'static str {
        match self {
            ScoreBin::Low => "low",
            ScoreBin::Mid => "mid",
            ScoreBin::High => "high",
        }
    }

    /// Half-open range `[lo, hi)`; the high bin also contains 1.0.
    pub fn range(self) -> (f64, f64) {
        match self {
            ScoreBin::Low => (0.0, 1.0 / 3.0),
            ScoreBin::Mid => (1.0 / 3.0, 2.0 / 3.0),
            ScoreBin::High => (2.0 / 3.0, 1.0),
        }
    }

    pub fn midpoint(self) -> f64 {
        match self {
            ScoreBin::Low => 1.0 / 6.0,
            ScoreBin::Mid => 0.5,
            ScoreBin::High => 5.0 / 6.0,
        }
    }
}

impl fmt::Display for ScoreBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn bin_of(score: f64) -> Result<ScoreBin> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::Domain {
            value: score,
            domain: "[0, 1]",
        });
    }
    Ok(if score < 1.0 / 3.0 {
        ScoreBin::Low
    } else if score < 2.0 / 3.0 {
        ScoreBin::Mid
    } else {
        ScoreBin::High
    })
}

/// Draws `count` score vectors from the uniform prior on `[0, 1]^6`.
pub fn sample_prior<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Result<Vec<ScoreVector>> {
    if count == 0 {
        return Err(Error::EmptyRequest("sample_prior requires count >= 1"));
    }
    Ok((0..count)
        .map(|_| {
            let mut v = [0.0; NUM_DIMS];
            for x in &mut v {
                *x = rng.random::<f64>();
            }
            ScoreVector(v)
        })
        .collect())
}

/// Topic-balanced design: each of the ten topics appears exactly
/// `files_per_topic` times, with scores from the prior. Entries are grouped
/// by topic in the fixed topic order.
pub fn balanced_assignment<R: Rng + ?Sized>(
    files_per_topic: usize,
    rng: &mut R,
) -> Result<Vec<(Topic, ScoreVector)>> {
    if files_per_topic == 0 {
        return Err(Error::EmptyRequest("balanced_assignment requires files_per_topic >= 1"));
    }
    let scores = sample_prior(files_per_topic * NUM_TOPICS, rng)?;
    Ok(Topic::ALL
        .iter()
        .flat_map(|&t| std::iter::repeat_n(t, files_per_topic))
        .zip(scores)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn prior_draws_lie_in_unit_cube() {
        let draws = sample_prior(2, &mut stream(3)).unwrap();
        assert_eq!(draws.len(), 2);
        assert!(draws.iter().flat_map(|s| s.values()).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn prior_is_reproducible() {
        let a = sample_prior(5, &mut stream(11)).unwrap();
        let b = sample_prior(5, &mut stream(11)).unwrap();
        let bits = |v: &[ScoreVector]| -> Vec<u64> {
            v.iter().flat_map(|s| s.values().map(f64::to_bits)).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn prior_mean_is_one_half() {
        let draws = sample_prior(10_000, &mut stream(5)).unwrap();
        for d in 0..NUM_DIMS {
            let mean = draws.iter().map(|s| s.values()[d]).sum::<f64>() / draws.len() as f64;
            assert!((mean - 0.5).abs() < 0.02, "dim {d} mean {mean}");
        }
    }

    #[test]
    fn empty_prior_request_fails() {
        assert!(matches!(sample_prior(0, &mut stream(0)), Err(Error::EmptyRequest(_))));
    }

    #[test]
    fn bins_at_boundaries() {
        assert_eq!(bin_of(0.0).unwrap(), ScoreBin::Low);
        assert_eq!(bin_of(1.0 / 3.0).unwrap(), ScoreBin::Mid);
        assert_eq!(bin_of(2.0 / 3.0).unwrap(), ScoreBin::High);
        assert_eq!(bin_of(0.99).unwrap(), ScoreBin::High);
        assert_eq!(bin_of(1.0).unwrap(), ScoreBin::High);
        assert!(bin_of(-0.01).is_err());
        assert!(bin_of(1.01).is_err());
        assert!(bin_of(f64::NAN).is_err());
    }

    #[test]
    fn balanced_design_sizes() {
        for (per, total) in [(1, 10), (10, 100), (1000, 10_000)] {
            let a = balanced_assignment(per, &mut stream(1)).unwrap();
            assert_eq!(a.len(), total);
            for t in Topic::ALL {
                assert_eq!(a.iter().filter(|(x, _)| *x == t).count(), per);
            }
        }
        assert!(balanced_assignment(0, &mut stream(1)).is_err());
    }

    #[test]
    fn topic_labels_round_trip() {
        for t in Topic::ALL {
            assert_eq!(t.label().parse::<Topic>().unwrap(), t);
        }
        assert!("politics".parse::<Topic>().is_err());
    }

    #[test]
    fn score_vector_rejects_out_of_range() {
        assert!(ScoreVector::new([0.5, 0.5, 0.5, 0.5, 0.5, 1.5]).is_err());
        let json = serde_json::to_string(&ScoreVector::splat(0.25).unwrap()).unwrap();
        assert_eq!(json, "[0.25,0.25,0.25,0.25,0.25,0.25]");
        assert!(serde_json::from_str::<ScoreVector>("[0,0,0,0,0,2]").is_err());
    }

    proptest! {
        #[test]
        fn bins_partition_unit_interval(x in 0.0f64..=1.0) {
            let bin = bin_of(x).unwrap();
            let (lo, hi) = bin.range();
            prop_assert!(x >= lo);
            prop_assert!(x < hi || (bin == ScoreBin::High && x == 1.0));
            let hits = ScoreBin::ALL.iter().filter(|b| {
                let (l, h) = b.range();
                x >= l && (x < h || (**b == ScoreBin::High && x == 1.0))
            }).count();
            prop_assert_eq!(hits, 1);
        }
    }
}
