//! Regular-expression tag rules.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::AnalyticsError;
use crate::store::{JobRecord, TagSet, TagValue};

/// Record fields a rule can match against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MatchField {
    JobName,
    Command,
    Path,
}

impl MatchField {
    fn of(self, record: &JobRecord) -> &str {
        match self {
            MatchField::JobName => &record.job_name,
            MatchField::Command => &record.command,
            MatchField::Path => &record.path,
        }
    }
}

fn all_fields() -> Vec<MatchField> {
    vec![MatchField::JobName, MatchField::Command, MatchField::Path]
}

/// A rule as written in the rules file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TagRuleSpec {
    pub name: String,
    pub pattern: String,
    /// Capture group name to tag key.
    pub captures: BTreeMap<String, String>,
    #[serde(default)]
    pub numeric_keys: Vec<String>,
    /// Fields tried in order; the first that matches is used.
    #[serde(default = "all_fields")]
    pub fields: Vec<MatchField>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    #[serde(default)]
    rules: Vec<TagRuleSpec>,
}

#[derive(Debug, Clone)]
pub struct TagRule {
    spec: TagRuleSpec,
    regex: Regex,
    numeric: BTreeSet<String>,
}

impl TagRule {
    pub fn new(spec: TagRuleSpec) -> Result<Self, AnalyticsError> {
        let bad = |msg: String| AnalyticsError::InvalidRule {
            rule: spec.name.clone(),
            message: msg,
        };
        let regex = Regex::new(&spec.pattern).map_err(|e| bad(e.to_string()))?;
        let groups: BTreeSet<&str> = regex.capture_names().flatten().collect();
        let mut keys = BTreeSet::new();
        for (group, key) in &spec.captures {
            if !groups.contains(group.as_str()) {
                return Err(bad(format!("pattern has no capture group named {group:?}")));
            }
            if key.is_empty() || !keys.insert(key.clone()) {
                return Err(bad(format!("tag key {key:?} is empty or used twice")));
            }
        }
        let numeric: BTreeSet<String> = spec.numeric_keys.iter().cloned().collect();
        if let Some(k) = numeric.iter().find(|k| !keys.contains(*k)) {
            return Err(bad(format!("numeric key {k:?} is not captured")));
        }
        if spec.fields.is_empty() {
            return Err(bad("no fields to match".into()));
        }
        Ok(Self { spec, regex, numeric })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn spec(&self) -> &TagRuleSpec {
        &self.spec
    }
}

/// Rules from a TOML file with one `[[rules]]` table per rule.
pub fn parse_rules(text: &str) -> Result<Vec<TagRule>, AnalyticsError> {
    let file: RuleFile = toml::from_str(text).map_err(|e| AnalyticsError::RuleFile(e.to_string()))?;
    file.rules.into_iter().map(TagRule::new).collect()
}

/// Parse a count such as `12.1M`. `K`, `M` and `G` multiply by 10^3, 10^6
/// and 10^9. The scaling is done in exact arithmetic so `12.1M` is exactly
/// 12100000.
pub fn parse_number(text: &str) -> Option<f64> {
    let text = text.trim();
    let (digits, scale) = match text.char_indices().last()? {
        (i, 'k' | 'K') => (&text[..i], 3),
        (i, 'm' | 'M') => (&text[..i], 6),
        (i, 'g' | 'G') => (&text[..i], 9),
        _ => (text, 0),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let mantissa: BigInt = format!("{int}{frac}").parse().ok()?;
    let ten = BigInt::from(10u32);
    let value = BigRational::new(
        mantissa * num_traits::pow(ten.clone(), scale),
        num_traits::pow(ten, frac.len()),
    );
    value.to_f64().filter(|v| v.is_finite())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TagWarning {
    pub rule: String,
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Tagging {
    pub tags: TagSet,
    pub warnings: Vec<TagWarning>,
}

/// Apply `rules` in order. For each tag key the first rule that yields a
/// usable value wins.
pub fn tag_job(record: &JobRecord, rules: &[TagRule]) -> Tagging {
    let mut out = Tagging {
        tags: TagSet {
            job_id: record.job_id,
            tags: BTreeMap::new(),
        },
        warnings: Vec::new(),
    };
    for rule in rules {
        let Some(caps) = rule.spec.fields.iter().find_map(|f| rule.regex.captures(f.of(record))) else {
            continue;
        };
        for (group, key) in &rule.spec.captures {
            if out.tags.tags.contains_key(key) {
                continue;
            }
            let Some(m) = caps.name(group) else { continue };
            let value = if rule.numeric.contains(key) {
                match parse_number(m.as_str()) {
                    Some(n) => TagValue::Number(n),
                    None => {
                        out.warnings.push(TagWarning {
                            rule: rule.spec.name.clone(),
                            key: key.clone(),
                            value: m.as_str().to_string(),
                        });
                        continue;
                    }
                }
            } else {
                TagValue::Text(m.as_str().to_string())
            };
            out.tags.tags.insert(key.clone(), value);
        }
    }
    out
}
