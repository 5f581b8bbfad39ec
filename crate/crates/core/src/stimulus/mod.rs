//! Stimulus generation `p(S | θ)` and text-level cycle consistency.
//!
//! Headline sets come either from an external chat-completion model driven by
//! the forward prompt, or from a deterministic lexicon-based mock. Inverse
//! evaluation recovers one score per dimension from a headline set.

mod external;
mod lexicon;
mod mock;
mod prompt;
mod uniqueness;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ScoreVector, Topic};

pub use external::{
    generate_external, invert_external, ChatEndpoint, ChatRequest, ChatTransport, HttpTransport,
    ResponseFormat,
};
pub use lexicon::{marker_bins, markers, FILLER_WORDS, TOPIC_WORDS};
pub use mock::{generate_mock, invert_mock, MOCK_GENERATOR_ID};
pub use prompt::{
    build_forward_prompt, build_inverse_prompt, recovered_scores_schema, ForwardOptions,
    PromptPair, FORWARD_SYSTEM_PROMPT, INVERSE_SYSTEM_PROMPT,
};
pub use uniqueness::{check_uniqueness, DuplicateHeadline, HeadlineLocation, UniquenessReport};

pub const HEADLINES_PER_SET: usize = 5;
pub const MIN_WORDS: usize = 10;
pub const MAX_WORDS: usize = 20;
/// Seconds of speech per word in the timing stub.
pub const SECONDS_PER_WORD: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    External,
    Mock,
}

/// One topic plus its generated headlines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSet {
    pub topic: Topic,
    pub headlines: Vec<String>,
    pub source: Source,
    pub generator_id: String,
}

impl StimulusSet {
    /// Checks the headline count and the per-headline word range.
    pub fn validate(&self, num_headlines: usize, min_words: usize, max_words: usize) -> Result<()> {
        if self.headlines.len() != num_headlines {
            return Err(Error::Format {
                reason: format!(
                    "expected {num_headlines} headlines, got {}",
                    self.headlines.len()
                ),
                raw: self.headlines.join("\n"),
            });
        }
        for h in &self.headlines {
            let n = word_count(h);
            if n < min_words || n > max_words {
                return Err(Error::Format {
                    reason: format!("headline has {n} words, expected {min_words}-{max_words}: {h}"),
                    raw: self.headlines.join("\n"),
                });
            }
        }
        Ok(())
    }

    pub fn speech_timing(&self) -> SpeechTiming {
        speech_timing(&self.headlines)
    }

    /// Line 1 `topic: <label>`, then one headline per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("topic: {}\n", self.topic);
        for h in &self.headlines {
            s.push_str(h);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, source: Source, generator_id: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines.next().unwrap_or_default();
        let label = first.strip_prefix("topic: ").ok_or_else(|| Error::Format {
            reason: "first line must be `topic: <label>`".into(),
            raw: text.to_string(),
        })?;
        let topic: Topic = label.parse()?;
        let headlines: Vec<String> = lines.map(str::to_string).collect();
        Ok(StimulusSet {
            topic,
            headlines,
            source,
            generator_id: generator_id.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path, source: Source, generator_id: &str) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?, source, generator_id)
    }
}

/// Scores recovered from a headline set by an inverse evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredScores {
    pub values: ScoreVector,
    pub evaluator_id: String,
}

/// Stand-in for synthesized speech: per-headline durations and a uniform
/// time slot for every word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechTiming {
    pub headline_seconds: Vec<f64>,
    /// `(start, end)` in seconds from the start of the block, per word.
    pub word_slots: Vec<Vec<(f64, f64)>>,
}

impl SpeechTiming {
    pub fn total_seconds(&self) -> f64 {
        self.headline_seconds.iter().sum()
    }
}

pub fn speech_timing(headlines: &[String]) -> SpeechTiming {
    let mut offset = 0.0;
    let mut headline_seconds = Vec::with_capacity(headlines.len());
    let mut word_slots = Vec::with_capacity(headlines.len());
    for h in headlines {
        let n = word_count(h);
        let slots = (0..n)
            .map(|i| {
                let start = offset + i as f64 * SECONDS_PER_WORD;
                (start, start + SECONDS_PER_WORD)
            })
            .collect();
        let dur = n as f64 * SECONDS_PER_WORD;
        offset += dur;
        headline_seconds.push(dur);
        word_slots.push(slots);
    }
    SpeechTiming {
        headline_seconds,
        word_slots,
    }
}

pub(crate) fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(headlines: &[&str]) -> StimulusSet {
        StimulusSet {
            topic: Topic::CivicLife,
            headlines: headlines.iter().map(|s| s.to_string()).collect(),
            source: Source::Mock,
            generator_id: "test".into(),
        }
    }

    #[test]
    fn text_file_layout() {
        let s = set(&["a b", "c d"]);
        assert_eq!(s.to_text(), "topic: civic life\na b\nc d\n");
        let back = StimulusSet::from_text(&s.to_text(), Source::Mock, "test").unwrap();
        assert_eq!(back, s);
        assert!(StimulusSet::from_text("civic life\nx", Source::Mock, "t").is_err());
    }

    #[test]
    fn timing_stub_is_word_count_times_step() {
        let t = speech_timing(&["one two three".to_string(), "four five".to_string()]);
        assert_eq!(t.headline_seconds.len(), 2);
        assert!((t.headline_seconds[0] - 1.2).abs() < 1e-12);
        assert!((t.headline_seconds[1] - 0.8).abs() < 1e-12);
        assert!((t.total_seconds() - 2.0).abs() < 1e-12);
        let (start, end) = t.word_slots[1][0];
        assert!((start - 1.2).abs() < 1e-12 && (end - 1.6).abs() < 1e-12);
    }

    #[test]
    fn validation_checks_count_and_length() {
        let ok = "one two three four five six seven eight nine ten";
        assert!(set(&[ok; 5]).validate(5, 10, 20).is_ok());
        assert!(set(&[ok; 4]).validate(5, 10, 20).is_err());
        let mut short = vec![ok; 5];
        short[2] = "too short";
        assert!(set(&short).validate(5, 10, 20).is_err());
    }
}
