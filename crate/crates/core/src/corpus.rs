//! Bundled example scripts: a single-factor A/B test, a factorial design,
//! stratified assignment (two ways), a within-subjects design, a
//! goal-setting study, a social-cues study with list inputs, a voter
//! turnout experiment and a continuous encouragement design.
//!
//! Each script comes with a generator of plausible inputs so tests, the
//! simulator and the CLI can exercise it without hand-written fixtures.

use crate::interpreter::Inputs;
use crate::value::Value;

pub struct CorpusScript {
    pub name: &'static str,
    pub source: &'static str,
    /// Inputs for the `i`-th synthetic unit.
    pub sample_inputs: fn(u64) -> Inputs,
}

fn inputs<const N: usize>(pairs: [(&str, Value); N]) -> Inputs {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn id(i: u64) -> Value {
    Value::Int(i as i64)
}

pub const BUTTON_COLOR: CorpusScript = CorpusScript {
    name: "button_color",
    source: include_str!("../corpus/button_color.planout"),
    sample_inputs: |i| inputs([("cookieid", id(i))]),
};

pub const TWO_FACTOR: CorpusScript = CorpusScript {
    name: "two_factor",
    source: include_str!("../corpus/two_factor.planout"),
    sample_inputs: |i| inputs([("cookieid", id(i))]),
};

const COUNTRIES: [&str; 4] = ["US", "BR", "IN", "DE"];

pub const STRATA_IF: CorpusScript = CorpusScript {
    name: "strata_if",
    source: include_str!("../corpus/strata_if.planout"),
    sample_inputs: |i| {
        inputs([
            ("userid", id(i)),
            ("country", COUNTRIES[(i % 4) as usize].into()),
        ])
    },
};

pub const STRATA_INDEX: CorpusScript = CorpusScript {
    name: "strata_index",
    source: include_str!("../corpus/strata_index.planout"),
    sample_inputs: STRATA_IF.sample_inputs,
};

pub const COLLAPSE_STORY: CorpusScript = CorpusScript {
    name: "collapse_story",
    source: include_str!("../corpus/collapse_story.planout"),
    sample_inputs: |i| inputs([("viewerid", id(i / 10)), ("storyid", id(i % 10))]),
};

pub const GOAL_SETTING: CorpusScript = CorpusScript {
    name: "goal_setting",
    source: include_str!("../corpus/goal_setting.planout"),
    sample_inputs: |i| inputs([("userid", id(i))]),
};

pub const SOCIAL_CUES: CorpusScript = CorpusScript {
    name: "social_cues",
    source: include_str!("../corpus/social_cues.planout"),
    sample_inputs: |i| {
        let friends: Vec<Value> = (0..1 + i % 5).map(|f| format!("friend{f}").into()).collect();
        inputs([
            ("userid", id(i)),
            ("pageid", id(i % 7)),
            ("liking_friends", Value::List(friends)),
        ])
    },
};

pub const VOTER: CorpusScript = CorpusScript {
    name: "voter",
    source: include_str!("../corpus/voter.planout"),
    sample_inputs: |i| inputs([("userid", id(i))]),
};

pub const ENCOURAGEMENT: CorpusScript = CorpusScript {
    name: "encouragement",
    source: include_str!("../corpus/encouragement.planout"),
    sample_inputs: |i| {
        inputs([
            ("sourceid", id(i / 100)),
            ("storyid", id(i)),
            ("viewerid", id(i % 37)),
        ])
    },
};

pub const ALL: &[CorpusScript] = &[
    BUTTON_COLOR,
    TWO_FACTOR,
    STRATA_IF,
    STRATA_INDEX,
    COLLAPSE_STORY,
    GOAL_SETTING,
    SOCIAL_CUES,
    VOTER,
    ENCOURAGEMENT,
];

pub fn by_name(name: &str) -> Option<&'static CorpusScript> {
    ALL.iter().find(|s| s.name == name)
}
