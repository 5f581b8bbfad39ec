use serde_json::{json, Value};

use crate::params::{bin_of, Dimension, ScoreVector, Topic};

use super::{HEADLINES_PER_SET, MAX_WORDS, MIN_WORDS};

pub const FORWARD_SYSTEM_PROMPT: &str = include_str!("prompts/forward_system.txt");
pub const INVERSE_SYSTEM_PROMPT: &str = include_str!("prompts/inverse_system.txt");
const FORWARD_USER_TEMPLATE: &str = include_str!("prompts/forward_user.txt");
const INVERSE_USER_TEMPLATE: &str = include_str!("prompts/inverse_user.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPair {
    pub system_text: String,
    pub user_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub min_words: usize,
    pub max_words: usize,
    pub num_headlines: usize,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            min_words: MIN_WORDS,
            max_words: MAX_WORDS,
            num_headlines: HEADLINES_PER_SET,
        }
    }
}

pub fn build_forward_prompt(theta: &ScoreVector, topic: Topic, opts: ForwardOptions) -> PromptPair {
    let mut user = FORWARD_USER_TEMPLATE.replace("{topic}", topic.label());
    for dim in Dimension::ALL {
        let v = theta.get(dim);
        // ScoreVector guarantees the domain.
        let bin = bin_of(v).expect("score in [0, 1]");
        user = user
            .replace(&format!("{{{}:.2f}}", dim.key()), &format!("{v:.2}"))
            .replace(&format!("{{{}_bin}}", dim.key()), bin.name());
    }
    let user = user
        .replace("{min_words}", &opts.min_words.to_string())
        .replace("{max_words}", &opts.max_words.to_string())
        .replace("{num_headlines}", &opts.num_headlines.to_string());
    PromptPair {
        system_text: FORWARD_SYSTEM_PROMPT.to_string(),
        user_text: user,
    }
}

pub fn build_inverse_prompt(headlines: &[String]) -> PromptPair {
    PromptPair {
        system_text: INVERSE_SYSTEM_PROMPT.to_string(),
        user_text: INVERSE_USER_TEMPLATE.replace("{headline_block}", &headlines.join("\n")),
    }
}

/// Response format restricting the inverse evaluator to six bounded scores.
pub fn recovered_scores_schema() -> Value {
    let bounded = json!({"type": "number", "minimum": 0.0, "maximum": 1.0});
    let mut properties = serde_json::Map::new();
    for dim in Dimension::ALL {
        properties.insert(dim.key().to_string(), bounded.clone());
    }
    json!({
        "type": "json_schema",
        "name": "recovered_scores",
        "schema": {
            "type": "object",
            "properties": properties,
            "required": Dimension::ALL.iter().map(|d| d.key()).collect::<Vec<_>>(),
            "additionalProperties": false,
        },
        "strict": true,
    })
}
