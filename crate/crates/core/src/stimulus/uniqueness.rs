use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::StimulusSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadlineLocation {
    pub set: usize,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateHeadline {
    pub headline: String,
    pub locations: Vec<HeadlineLocation>,
}

/// Duplicated headlines across a dataset. Empty means every headline is unique.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub total_headlines: usize,
    pub duplicates: Vec<DuplicateHeadline>,
}

impl UniquenessReport {
    pub fn passed(&self) -> bool {
        self.duplicates.is_empty()
    }
}

/// Exact (byte-level) string matching; case and whitespace differences count
/// as distinct headlines.
pub fn check_uniqueness(dataset: &[StimulusSet]) -> UniquenessReport {
    let mut seen: BTreeMap<&str, Vec<HeadlineLocation>> = BTreeMap::new();
    let mut total = 0;
    for (set, s) in dataset.iter().enumerate() {
        for (line, h) in s.headlines.iter().enumerate() {
            total += 1;
            seen.entry(h.as_str()).or_default().push(HeadlineLocation { set, line });
        }
    }
    let mut duplicates: Vec<DuplicateHeadline> = seen
        .into_iter()
        .filter(|(_, locs)| locs.len() > 1)
        .map(|(h, locations)| DuplicateHeadline {
            headline: h.to_string(),
            locations,
        })
        .collect();
    duplicates.sort_by_key(|d| d.locations[0]);
    UniquenessReport {
        total_headlines: total,
        duplicates,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Topic;
    use crate::stimulus::Source;

    fn set(h: &[&str]) -> StimulusSet {
        StimulusSet {
            topic: Topic::Weather,
            headlines: h.iter().map(|s| s.to_string()).collect(),
            source: Source::Mock,
            generator_id: "t".into(),
        }
    }

    #[test]
    fn distinct_headlines_pass() {
        let r = check_uniqueness(&[set(&["a", "b"]), set(&["c", "d"])]);
        assert!(r.passed());
        assert_eq!(r.total_headlines, 4);
    }

    #[test]
    fn duplicate_across_sets_is_reported_once() {
        let r = check_uniqueness(&[set(&["Storm Hits", "b"]), set(&["c", "Storm Hits"])]);
        assert_eq!(r.duplicates.len(), 1);
        assert_eq!(
            r.duplicates[0].locations,
            vec![HeadlineLocation { set: 0, line: 0 }, HeadlineLocation { set: 1, line: 1 }]
        );
    }

    #[test]
    fn case_variants_are_not_duplicates() {
        assert!(check_uniqueness(&[set(&["Storm Hits"]), set(&["storm hits"])]).passed());
    }
}
