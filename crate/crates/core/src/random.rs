//! Deterministic random assignment.
//!
//! Every draw hashes a salt string with SHA1:
//!
//! ```text
//! namespace.experiment.salt.unit1.unit2[.suffix]
//! ```
//!
//! and reads the first 15 hex digits (60 bits) of the digest as an integer.
//! Dividing by `16^15 - 1` gives a float in `[0, 1]`. This construction is
//! the cross-platform contract: any implementation that builds the same
//! string gets the same assignment.
//!
//! Units are stringified as follows: integers in decimal, booleans as `1`
//! and `0`, strings verbatim, floats only when they hold an integer value
//! (written as that integer). Strings containing `.` are rejected so that
//! `("a.b", "c")` and `("a", "b.c")` cannot collide.

use sha1::{Digest, Sha1};
use thiserror::Error;

use crate::value::Value;

/// `16^15 - 1`, the largest value a draw can take.
pub const HASH_MAX: u64 = (1 << 60) - 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RandomError {
    #[error("unit is empty or null; input data is missing")]
    EmptyUnit,
    #[error("unit {0:?} contains '.', which separates salt components")]
    UnitContainsSeparator(String),
    #[error("a {0} cannot be used as a unit")]
    UnitNotStringifiable(&'static str),
    #[error("salt component {0:?} must be non-empty and must not contain '.'")]
    InvalidSalt(String),
    #[error("choices must not be empty")]
    EmptyChoices,
    #[error("{choices} choices but {weights} weights")]
    LengthMismatch { choices: usize, weights: usize },
    #[error("weights must be finite and non-negative, got {0}")]
    InvalidWeight(f64),
    #[error("weights sum to zero")]
    ZeroTotalWeight,
    #[error("probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("min {min} is greater than max {max}")]
    InvertedRange { min: String, max: String },
    #[error("cannot draw {draws} items from {available} choices")]
    DrawsExceedChoices { draws: i64, available: usize },
}

/// Scopes randomness to one parameter of one experiment in one namespace.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SaltContext {
    namespace: String,
    experiment: String,
    salt: String,
}

fn check_component(s: &str) -> Result<(), RandomError> {
    if s.is_empty() || s.contains('.') {
        Err(RandomError::InvalidSalt(s.to_string()))
    } else {
        Ok(())
    }
}

impl SaltContext {
    pub fn new(namespace: &str, experiment: &str, salt: &str) -> Result<Self, RandomError> {
        check_component(namespace)?;
        check_component(experiment)?;
        check_component(salt)?;
        Ok(SaltContext {
            namespace: namespace.to_string(),
            experiment: experiment.to_string(),
            salt: salt.to_string(),
        })
    }

    /// Same namespace and experiment, different parameter salt.
    pub fn with_salt(&self, salt: &str) -> Result<Self, RandomError> {
        check_component(salt)?;
        Ok(SaltContext {
            salt: salt.to_string(),
            ..self.clone()
        })
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn experiment(&self) -> &str {
        &self.experiment
    }

    pub fn salt(&self) -> &str {
        &self.salt
    }

    pub fn full_salt(&self) -> String {
        format!("{}.{}.{}", self.namespace, self.experiment, self.salt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashDraw {
    /// Integer in `[0, 16^15)`.
    pub value: u64,
    /// `value / (16^15 - 1)`, in `[0, 1]`.
    pub unit_float: f64,
}

/// Text used for one unit inside the hashed string.
pub fn unit_text(unit: &Value) -> Result<String, RandomError> {
    match unit {
        Value::Null => Err(RandomError::EmptyUnit),
        Value::Int(i) => Ok(i.to_string()),
        Value::Bool(b) => Ok(if *b { "1" } else { "0" }.to_string()),
        Value::Float(f) => {
            // Exactly representable integers only; other floats would need
            // a '.' and be ambiguous with multi-unit tuples.
            if f.is_finite() && f.fract() == 0.0 && f.abs() < 9.007_199_254_740_992e15 {
                Ok((*f as i64).to_string())
            } else {
                Err(RandomError::UnitContainsSeparator(format!("{f:?}")))
            }
        }
        Value::Str(s) if s.contains('.') => Err(RandomError::UnitContainsSeparator(s.clone())),
        Value::Str(s) => Ok(s.clone()),
        other => Err(RandomError::UnitNotStringifiable(other.kind())),
    }
}

/// Flattens a `unit=` value: a list becomes a tuple, anything else a
/// single unit.
pub fn units_of(value: &Value) -> Vec<Value> {
    match value {
        Value::List(items) => items.clone(),
        other => vec![other.clone()],
    }
}

/// Hashes `units` under `ctx`, optionally with an extra positional suffix.
pub fn hash_draw(
    ctx: &SaltContext,
    units: &[Value],
    suffix: Option<&str>,
) -> Result<HashDraw, RandomError> {
    if units.is_empty() {
        return Err(RandomError::EmptyUnit);
    }
    let mut text = ctx.full_salt();
    for u in units {
        text.push('.');
        text.push_str(&unit_text(u)?);
    }
    if let Some(s) = suffix {
        text.push('.');
        text.push_str(s);
    }
    Ok(draw_from_text(&text))
}

pub(crate) fn draw_from_text(text: &str) -> HashDraw {
    let digest = Sha1::digest(text.as_bytes());
    // First 15 hex digits = first 60 bits of the digest.
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    let value = u64::from_be_bytes(head) >> 4;
    HashDraw {
        value,
        unit_float: value as f64 / HASH_MAX as f64,
    }
}

pub fn uniform_choice(
    choices: &[Value],
    ctx: &SaltContext,
    units: &[Value],
) -> Result<Value, RandomError> {
    if choices.is_empty() {
        return Err(RandomError::EmptyChoices);
    }
    let draw = hash_draw(ctx, units, None)?;
    Ok(choices[(draw.value % choices.len() as u64) as usize].clone())
}

pub fn weighted_choice(
    choices: &[Value],
    weights: &[f64],
    ctx: &SaltContext,
    units: &[Value],
) -> Result<Value, RandomError> {
    if choices.len() != weights.len() {
        return Err(RandomError::LengthMismatch {
            choices: choices.len(),
            weights: weights.len(),
        });
    }
    if choices.is_empty() {
        return Err(RandomError::EmptyChoices);
    }
    if let Some(&bad) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(RandomError::InvalidWeight(bad));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(RandomError::ZeroTotalWeight);
    }
    let target = hash_draw(ctx, units, None)?.unit_float * total;
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        cumulative += w;
        last_positive = i;
        if cumulative >= target {
            return Ok(choices[i].clone());
        }
    }
    // Rounding in the running sum can leave it a hair below `total`.
    Ok(choices[last_positive].clone())
}

/// Returns 1 with probability `p`, else 0.
pub fn bernoulli_trial(p: f64, ctx: &SaltContext, units: &[Value]) -> Result<i64, RandomError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(RandomError::ProbabilityOutOfRange(p));
    }
    let draw = hash_draw(ctx, units, None)?;
    if p >= 1.0 {
        return Ok(1);
    }
    Ok(i64::from(draw.unit_float < p))
}

/// Uniform integer in `[min, max]`, both ends inclusive.
pub fn random_integer(
    min: i64,
    max: i64,
    ctx: &SaltContext,
    units: &[Value],
) -> Result<i64, RandomError> {
    if min > max {
        return Err(RandomError::InvertedRange {
            min: min.to_string(),
            max: max.to_string(),
        });
    }
    let draw = hash_draw(ctx, units, None)?;
    let span = (max as i128 - min as i128 + 1) as u128;
    Ok((min as i128 + (draw.value as u128 % span) as i128) as i64)
}

pub fn random_float(
    min: f64,
    max: f64,
    ctx: &SaltContext,
    units: &[Value],
) -> Result<f64, RandomError> {
    if min > max || min.is_nan() || max.is_nan() {
        return Err(RandomError::InvertedRange {
            min: format!("{min:?}"),
            max: format!("{max:?}"),
        });
    }
    let draw = hash_draw(ctx, units, None)?;
    // Clamp guards against rounding past `max` for huge ranges.
    Ok((min + draw.unit_float * (max - min)).clamp(min, max))
}

/// Draws `draws` items without replacement.
///
/// Runs a Fisher-Yates shuffle over a copy of `choices`, from the last
/// position down; the swap partner of position `i` is the draw with suffix
/// `i`, modulo `i + 1`. Returns the first `draws` items of the result.
pub fn sample(
    choices: &[Value],
    draws: i64,
    ctx: &SaltContext,
    units: &[Value],
) -> Result<Vec<Value>, RandomError> {
    if draws < 0 || draws as u64 > choices.len() as u64 {
        return Err(RandomError::DrawsExceedChoices {
            draws,
            available: choices.len(),
        });
    }
    if units.is_empty() {
        return Err(RandomError::EmptyUnit);
    }
    let mut shuffled = choices.to_vec();
    for i in (1..shuffled.len()).rev() {
        let draw = hash_draw(ctx, units, Some(&i.to_string()))?;
        let j = (draw.value % (i as u64 + 1)) as usize;
        shuffled.swap(i, j);
    }
    shuffled.truncate(draws as usize);
    Ok(shuffled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn ctx(salt: &str) -> SaltContext {
        SaltContext::new("ns", "exp", salt).unwrap()
    }

    fn unit(i: i64) -> Vec<Value> {
        vec![Value::Int(i)]
    }

    // Expected values computed with Python's hashlib:
    //   int(hashlib.sha1(b"ns.exp.button_color.42").hexdigest()[:15], 16)
    #[test]
    fn draw_matches_reference_sha1() {
        let d = hash_draw(&ctx("button_color"), &unit(42), None).unwrap();
        assert_eq!(d.value, 466_459_311_706_049_706);
        assert!((d.unit_float - 0.404_588_959_302_233_76).abs() < 1e-15);

        let documented = SaltContext::new("user_signup", "my_exp", "button_color").unwrap();
        assert_eq!(
            hash_draw(&documented, &unit(42), None).unwrap().value,
            630_928_711_242_076_272
        );

        // Tuple plus positional suffix: "ns.exp.friends.7.3".
        let d = hash_draw(&ctx("friends"), &unit(7), Some("3")).unwrap();
        assert_eq!(d.value, 927_588_172_821_900_290);
    }

    #[test]
    fn draw_is_deterministic_and_canonicalizes_units() {
        let c = ctx("button_color");
        let a = hash_draw(&c, &unit(4), None).unwrap();
        assert_eq!(a, hash_draw(&c, &unit(4), None).unwrap());
        assert_eq!(a, hash_draw(&c, &["4".into()], None).unwrap());
        assert_eq!(a, hash_draw(&c, &[Value::Float(4.0)], None).unwrap());
        assert_eq!(
            hash_draw(&c, &[Value::Bool(true)], None).unwrap(),
            hash_draw(&c, &unit(1), None).unwrap()
        );
    }

    #[test]
    fn unit_errors() {
        let c = ctx("x");
        assert_eq!(hash_draw(&c, &[], None), Err(RandomError::EmptyUnit));
        assert_eq!(hash_draw(&c, &[Value::Null], None), Err(RandomError::EmptyUnit));
        assert!(matches!(
            hash_draw(&c, &["a.b".into()], None),
            Err(RandomError::UnitContainsSeparator(_))
        ));
        assert!(matches!(
            hash_draw(&c, &[Value::Float(1.5)], None),
            Err(RandomError::UnitContainsSeparator(_))
        ));
        assert!(matches!(
            hash_draw(&c, &[Value::List(vec![])], None),
            Err(RandomError::UnitNotStringifiable("list"))
        ));
    }

    #[test]
    fn salt_components_reject_dots() {
        assert!(SaltContext::new("a.b", "e", "s").is_err());
        assert!(SaltContext::new("a", "", "s").is_err());
        assert!(ctx("x").with_salt("y.z").is_err());
    }

    #[test]
    fn uniform_choice_follows_hash_mod_len() {
        let colors: Vec<Value> = vec!["#3c539a".into(), "#5f9647".into(), "#b33316".into()];
        // 466459311706049706 % 3 == 0.
        assert_eq!(
            uniform_choice(&colors, &ctx("button_color"), &unit(42)).unwrap(),
            colors[0]
        );
        assert_eq!(
            uniform_choice(&[], &ctx("x"), &unit(1)),
            Err(RandomError::EmptyChoices)
        );
        for i in 0..50 {
            assert_eq!(
                uniform_choice(&["only".into()], &ctx("x"), &unit(i)).unwrap(),
                Value::from("only")
            );
        }
    }

    fn frequencies(n: i64, f: impl Fn(i64) -> Value) -> BTreeMap<String, f64> {
        let mut counts = BTreeMap::new();
        for i in 0..n {
            *counts.entry(f(i).to_canonical()).or_insert(0.0) += 1.0;
        }
        counts.values_mut().for_each(|c| *c /= n as f64);
        counts
    }

    #[test]
    fn uniform_choice_thirds() {
        let colors: Vec<Value> = vec!["r".into(), "g".into(), "b".into()];
        let freq = frequencies(60_000, |i| {
            uniform_choice(&colors, &ctx("button_color"), &unit(i)).unwrap()
        });
        assert_eq!(freq.len(), 3);
        for f in freq.values() {
            assert!((f - 1.0 / 3.0).abs() < 0.01, "{freq:?}");
        }
    }

    #[test]
    fn weighted_choice_80_20() {
        let choices: Vec<Value> = vec!["Sign up".into(), "Join now".into()];
        let freq = frequencies(60_000, |i| {
            weighted_choice(&choices, &[0.8, 0.2], &ctx("button_text"), &unit(i)).unwrap()
        });
        assert!((freq["\"Sign up\""] - 0.8).abs() < 0.01, "{freq:?}");
    }

    #[test]
    fn weighted_choice_degenerate_and_errors() {
        let choices: Vec<Value> = vec![1.into(), 2.into()];
        for i in 0..200 {
            assert_eq!(
                weighted_choice(&choices, &[1.0, 0.0], &ctx("w"), &unit(i)).unwrap(),
                Value::Int(1)
            );
        }
        assert!(matches!(
            weighted_choice(&choices, &[1.0], &ctx("w"), &unit(1)),
            Err(RandomError::LengthMismatch { .. })
        ));
        assert_eq!(
            weighted_choice(&choices, &[0.0, 0.0], &ctx("w"), &unit(1)),
            Err(RandomError::ZeroTotalWeight)
        );
        assert!(matches!(
            weighted_choice(&choices, &[-1.0, 2.0], &ctx("w"), &unit(1)),
            Err(RandomError::InvalidWeight(_))
        ));
    }

    #[test]
    fn equal_weights_match_uniform_in_distribution() {
        let choices: Vec<Value> = vec!["a".into(), "b".into()];
        let w = frequencies(100_000, |i| {
            weighted_choice(&choices, &[2.0, 2.0], &ctx("w"), &unit(i)).unwrap()
        });
        let u = frequencies(100_000, |i| uniform_choice(&choices, &ctx("w"), &unit(i)).unwrap());
        for k in ["\"a\"", "\"b\""] {
            assert!((w[k] - u[k]).abs() < 0.01, "{w:?} vs {u:?}");
        }
    }

    #[test]
    fn bernoulli_boundaries() {
        for i in 0..500 {
            assert_eq!(bernoulli_trial(0.0, &ctx("b"), &unit(i)).unwrap(), 0);
            assert_eq!(bernoulli_trial(1.0, &ctx("b"), &unit(i)).unwrap(), 1);
        }
        assert!(bernoulli_trial(1.5, &ctx("b"), &unit(1)).is_err());
        assert!(bernoulli_trial(-0.1, &ctx("b"), &unit(1)).is_err());
        assert!(bernoulli_trial(f64::NAN, &ctx("b"), &unit(1)).is_err());
    }

    #[test]
    fn bernoulli_is_monotone_in_p() {
        for i in 0..2_000 {
            let low = bernoulli_trial(0.3, &ctx("b"), &unit(i)).unwrap();
            let high = bernoulli_trial(0.6, &ctx("b"), &unit(i)).unwrap();
            assert!(low <= high);
        }
    }

    #[test]
    fn bernoulli_tuple_rate() {
        let mut hits = 0;
        let n = 200_000;
        for v in 0..500 {
            for s in 0..400 {
                hits += bernoulli_trial(0.05, &ctx("collapse_story"), &[v.into(), s.into()])
                    .unwrap();
            }
        }
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.05).abs() < 0.005, "{rate}");
    }

    #[test]
    fn random_integer_range() {
        for i in 0..100 {
            assert_eq!(random_integer(7, 7, &ctx("r"), &unit(i)).unwrap(), 7);
        }
        let freq = frequencies(90_000, |i| {
            random_integer(1, 3, &ctx("r"), &unit(i)).unwrap().into()
        });
        assert_eq!(freq.len(), 3);
        for f in freq.values() {
            assert!((f - 1.0 / 3.0).abs() < 0.01, "{freq:?}");
        }
        assert!(matches!(
            random_integer(3, 1, &ctx("r"), &unit(1)),
            Err(RandomError::InvertedRange { .. })
        ));
        // Full i64 range does not overflow.
        random_integer(i64::MIN, i64::MAX, &ctx("r"), &unit(1)).unwrap();
    }

    #[test]
    fn random_float_moments() {
        assert_eq!(random_float(0.3, 0.3, &ctx("f"), &unit(1)).unwrap(), 0.3);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|i| random_float(0.0, 1.0, &ctx("prob_collapse"), &unit(i)).unwrap())
            .collect();
        assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.005, "{var}");
        assert!(random_float(1.0, 0.0, &ctx("f"), &unit(1)).is_err());
    }

    #[test]
    fn sample_edges() {
        let choices: Vec<Value> = vec!["a".into(), "b".into(), "c".into(), "d".into()];
        assert!(sample(&choices, 0, &ctx("s"), &unit(1)).unwrap().is_empty());
        let mut all = sample(&choices, 4, &ctx("s"), &unit(1)).unwrap();
        all.sort_by_key(|v| v.to_canonical());
        assert_eq!(all, choices);
        assert!(matches!(
            sample(&choices, 5, &ctx("s"), &unit(1)),
            Err(RandomError::DrawsExceedChoices { .. })
        ));
        assert!(sample(&choices, -1, &ctx("s"), &unit(1)).is_err());
    }

    #[test]
    fn sample_pairs_are_uniform() {
        // Oracle: the 3 unordered pairs of {a, b, c}, each expected 1/3.
        let choices: Vec<Value> = vec!["a".into(), "b".into(), "c".into()];
        let freq = frequencies(90_000, |i| {
            let mut pair = sample(&choices, 2, &ctx("s"), &unit(i)).unwrap();
            pair.sort_by_key(|v| v.to_canonical());
            Value::List(pair)
        });
        assert_eq!(freq.len(), 3);
        for f in freq.values() {
            assert!((f - 1.0 / 3.0).abs() < 0.01, "{freq:?}");
        }
    }

    #[test]
    fn salts_are_independent() {
        let n = 100_000;
        let mut joint = [[0u32; 2]; 2];
        for i in 0..n {
            let a = bernoulli_trial(0.5, &ctx("a"), &unit(i)).unwrap() as usize;
            let b = bernoulli_trial(0.5, &ctx("b"), &unit(i)).unwrap() as usize;
            joint[a][b] += 1;
        }
        let p = |a: usize, b: usize| joint[a][b] as f64 / n as f64;
        let pa = |a: usize| p(a, 0) + p(a, 1);
        let pb = |b: usize| p(0, b) + p(1, b);
        for a in 0..2 {
            for b in 0..2 {
                assert!((p(a, b) - pa(a) * pb(b)).abs() < 0.01);
            }
        }
    }

    #[test]
    fn changing_a_tuple_element_rerandomizes() {
        // Fixed first unit, varying second: results behave like fresh coins.
        let n = 100_000;
        let ones: i64 = (0..n)
            .map(|s| bernoulli_trial(0.5, &ctx("t"), &[Value::Int(12345), Value::Int(s)]).unwrap())
            .sum();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
    }
}
