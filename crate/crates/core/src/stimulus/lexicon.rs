//! Marker vocabulary of the mock generator. Each dimension has a disjoint word
//! list per verbal bin; topic nouns and filler words never collide with a
//! marker, so every marker hit decodes to exactly one (dimension, bin).

use crate::params::{Dimension, ScoreBin, Topic, NUM_TOPICS};

type BinWords = [&'static [&'static str]; 3];

const VALENCE: BinWords = [
    &["crisis", "failure", "threat", "collapse", "setback", "danger"],
    &["update", "review", "outcome", "status", "shift", "adjustment"],
    &["benefit", "success", "growth", "triumph", "progress", "gain"],
];
const AROUSAL: BinWords = [
    &["remains", "exists", "continues", "persists", "stays", "lingers"],
    &["moves", "adjusts", "proceeds", "develops", "advances", "evolves"],
    &["blasts", "surges", "explodes", "slams", "sparks", "erupts"],
];
const DOMINANCE: BinWords = [
    &["affected", "hit", "struck", "impacted", "targeted", "overtaken"],
    &["involved", "linked", "tied", "connected", "associated", "included"],
    &["enforces", "drives", "commands", "leads", "orders", "launches"],
];
const SUBJECTIVITY: BinWords = [
    &["two", "three", "four", "five", "ten", "twelve"],
    &["notable", "modest", "sizable", "fair", "typical", "relevant"],
    &["shocking", "stunning", "astonishing", "incredible", "outrageous", "breathtaking"],
];
const CERTAINTY: BinWords = [
    &["might", "could", "possible", "rumored", "perhaps", "maybe"],
    &["likely", "expected", "probably", "reportedly", "apparently", "seemingly"],
    &["confirmed", "must", "will", "definitely", "certainly", "officially"],
];
const FORMALITY: BinWords = [
    &["fix", "whack", "way", "stuff", "deal", "bit"],
    &["plan", "effort", "measure", "project", "matter", "step"],
    &["implementation", "methodology", "mitigation", "administration", "optimization", "regulation"],
];

const TABLE: [BinWords; 6] = [VALENCE, AROUSAL, DOMINANCE, SUBJECTIVITY, CERTAINTY, FORMALITY];

/// Nouns anchoring a headline to its topic, in `Topic::ALL` order.
pub const TOPIC_WORDS: [&[&str]; NUM_TOPICS] = [
    &["storm", "rainfall", "forecast", "heatwave", "frost", "wind"],
    &["league", "match", "team", "season", "coach", "stadium"],
    &["bridge", "highway", "pipeline", "railway", "grid", "tunnel"],
    &["laboratory", "researchers", "telescope", "study", "experiment", "genome"],
    &["museum", "festival", "gallery", "theater", "exhibition", "orchestra"],
    &["council", "neighborhood", "library", "volunteers", "residents", "park"],
    &["market", "company", "investors", "startup", "retailer", "merger"],
    &["flood", "wildfire", "landslide", "earthquake", "drought", "spill"],
    &["software", "chip", "network", "robot", "platform", "app"],
    &["clinic", "hospital", "vaccine", "patients", "nurses", "therapy"],
];

/// Neutral padding words.
pub const FILLER_WORDS: &[&str] = &[
    "in", "for", "the", "across", "near", "after", "as", "over", "with", "amid", "at", "on",
    "under", "region", "city", "local", "officials", "new", "week", "county", "downtown",
    "northern", "southern", "coastal", "central", "weekend", "morning", "community", "area",
    "district",
];

pub fn markers(dim: Dimension, bin: ScoreBin) -> &'static [&'static str] {
    TABLE[dim.index()][bin as usize]
}

pub fn topic_words(topic: Topic) -> &'static [&'static str] {
    TOPIC_WORDS[topic.index()]
}

/// The (dimension, bin) a token marks, if any. Matching is on the lowercased
/// token with surrounding punctuation removed.
pub fn marker_bins(token: &str) -> Option<(Dimension, ScoreBin)> {
    let word = normalize(token);
    for dim in Dimension::ALL {
        for bin in ScoreBin::ALL {
            if markers(dim, bin).contains(&word.as_str()) {
                return Some((dim, bin));
            }
        }
    }
    None
}

pub(crate) fn normalize(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn vocabularies_are_disjoint() {
        let mut seen = HashSet::new();
        for dim in Dimension::ALL {
            for bin in ScoreBin::ALL {
                let words = markers(dim, bin);
                assert!(words.len() >= 6);
                for w in words {
                    assert!(seen.insert(*w), "marker `{w}` repeated");
                }
            }
        }
        for w in TOPIC_WORDS.iter().flat_map(|t| t.iter()).chain(FILLER_WORDS) {
            assert!(seen.insert(*w), "`{w}` collides with another vocabulary word");
        }
    }

    #[test]
    fn prompt_examples_are_markers() {
        use Dimension::*;
        assert_eq!(marker_bins("Crisis"), Some((Valence, ScoreBin::Low)));
        assert_eq!(marker_bins("Surges,"), Some((Arousal, ScoreBin::High)));
        assert_eq!(marker_bins("Enforces"), Some((Dominance, ScoreBin::High)));
        assert_eq!(marker_bins("\"Stunning\""), Some((Subjectivity, ScoreBin::High)));
        assert_eq!(marker_bins("Rumored"), Some((Certainty, ScoreBin::Low)));
        assert_eq!(marker_bins("Mitigation"), Some((Formality, ScoreBin::High)));
        assert_eq!(marker_bins("storm"), None);
    }
}
