use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::params::{bin_of, Dimension, ScoreBin, ScoreVector, Topic, NUM_DIMS};

use super::lexicon::{marker_bins, markers, topic_words, FILLER_WORDS};
use super::{RecoveredScores, Source, StimulusSet, HEADLINES_PER_SET, MAX_WORDS, MIN_WORDS};

pub const MOCK_GENERATOR_ID: &str = "mock-lexicon-v1";

/// Offline generator: every headline carries one marker word per dimension
/// from the lexicon of that dimension's bin, one topic noun, and filler words
/// up to a random length in `[MIN_WORDS, MAX_WORDS]`.
pub fn generate_mock<R: Rng + ?Sized>(theta: &ScoreVector, topic: Topic, rng: &mut R) -> StimulusSet {
    let bins: [ScoreBin; NUM_DIMS] =
        std::array::from_fn(|d| bin_of(theta.values()[d]).expect("score in [0, 1]"));
    let mut headlines: Vec<String> = Vec::with_capacity(HEADLINES_PER_SET);
    while headlines.len() < HEADLINES_PER_SET {
        let h = mock_headline(&bins, topic, rng);
        if !headlines.contains(&h) {
            headlines.push(h);
        }
    }
    StimulusSet {
        topic,
        headlines,
        source: Source::Mock,
        generator_id: MOCK_GENERATOR_ID.to_string(),
    }
}

fn mock_headline<R: Rng + ?Sized>(bins: &[ScoreBin; NUM_DIMS], topic: Topic, rng: &mut R) -> String {
    let len = rng.random_range(MIN_WORDS..=MAX_WORDS);
    let mut words: Vec<&str> = Vec::with_capacity(len);
    words.push(topic_words(topic).choose(rng).expect("nonempty"));
    for dim in Dimension::ALL {
        words.push(markers(dim, bins[dim.index()]).choose(rng).expect("nonempty"));
    }
    while words.len() < len {
        words.push(FILLER_WORDS.choose(rng).expect("nonempty"));
    }
    words.shuffle(rng);
    words
        .iter()
        .map(|w| capitalize(w))
        .collect::<Vec<_>>()
        .join(" ")
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Deterministic inverse of [`generate_mock`]: per dimension, the midpoint of
/// the bin with the most marker hits across all headlines. Ties go to mid;
/// a dimension without hits scores 0.5.
pub fn invert_mock(stimuli: &StimulusSet) -> RecoveredScores {
    let mut counts = [[0usize; 3]; NUM_DIMS];
    for h in &stimuli.headlines {
        for token in h.split_whitespace() {
            if let Some((dim, bin)) = marker_bins(token) {
                counts[dim.index()][bin as usize] += 1;
            }
        }
    }
    let values = std::array::from_fn(|d| majority_bin(&counts[d]).midpoint());
    RecoveredScores {
        values: ScoreVector::new(values).expect("bin midpoints lie in [0, 1]"),
        evaluator_id: MOCK_GENERATOR_ID.to_string(),
    }
}

fn majority_bin(counts: &[usize; 3]) -> ScoreBin {
    let best = counts.iter().copied().max().unwrap_or(0);
    let winners: Vec<ScoreBin> = ScoreBin::ALL
        .iter()
        .copied()
        .filter(|b| counts[*b as usize] == best)
        .collect();
    match winners.as_slice() {
        [single] if best > 0 => *single,
        _ => ScoreBin::Mid,
    }
}
