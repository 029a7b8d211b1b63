//! Priority rules layered over the model verdict.
//!
//! Rules file format, one rule per line:
//!
//! ```text
//! # priority user resource op effect
//! 10 * 5 * DENY
//! 20 3 5 op2 ALLOW
//! ```
//!
//! `*` matches anything. `op` is `op1`..`op4`. Effects are `ALLOW` or
//! `DENY` (case-insensitive). Blank lines and `#` comments are ignored.

use std::fmt;

use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::types::{Operation, OPERATION_COUNT};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RulesError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate rule key (priority {priority}, {user} {resource} {operation}) at rules {first} and {second}")]
    Duplicate {
        priority: u32,
        user: String,
        resource: String,
        operation: String,
        first: usize,
        second: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Match<T> {
    Any,
    Exact(T),
}

impl<T: PartialEq> Match<T> {
    pub fn matches(&self, value: &T) -> bool {
        match self {
            Match::Any => true,
            Match::Exact(v) => v == value,
        }
    }
}

impl<T: fmt::Display> fmt::Display for Match<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Match::Any => f.write_str("*"),
            Match::Exact(v) => v.fmt(f),
        }
    }
}

impl<T: Canonical> Canonical for Match<T> {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            Match::Any => enc.u8(0),
            Match::Exact(v) => enc.u8(1).value(v),
        };
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.u8()? {
            0 => Ok(Match::Any),
            1 => Ok(Match::Exact(dec.value()?)),
            tag => Err(CodecError::InvalidTag { what: "match", tag }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Effect {
    Allow,
    Deny,
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Effect::Allow => "ALLOW",
            Effect::Deny => "DENY",
        })
    }
}

impl Canonical for Effect {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u8(match self {
            Effect::Allow => 0,
            Effect::Deny => 1,
        });
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.u8()? {
            0 => Ok(Effect::Allow),
            1 => Ok(Effect::Deny),
            tag => Err(CodecError::InvalidTag { what: "effect", tag }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PriorityRule {
    pub priority: u32,
    pub user: Match<u32>,
    pub resource: Match<u32>,
    pub operation: Match<Operation>,
    pub effect: Effect,
}

impl PriorityRule {
    pub fn matches(&self, user_index: u64, resource_id: u64, op: Operation) -> bool {
        let narrow = |m: &Match<u32>, v: u64| match m {
            Match::Any => true,
            Match::Exact(x) => u64::from(*x) == v,
        };
        narrow(&self.user, user_index) && narrow(&self.resource, resource_id) && self.operation.matches(&op)
    }

    fn key(&self) -> (u32, Match<u32>, Match<u32>, Match<Operation>) {
        (self.priority, self.user, self.resource, self.operation)
    }
}

impl fmt::Display for PriorityRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.priority, self.user, self.resource, self.operation, self.effect
        )
    }
}

impl Canonical for PriorityRule {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u32(self.priority)
            .value(&self.user)
            .value(&self.resource)
            .value(&self.operation)
            .value(&self.effect);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            priority: dec.u32()?,
            user: dec.value()?,
            resource: dec.value()?,
            operation: dec.value()?,
            effect: dec.value()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleOutcome {
    pub access_list: [bool; OPERATION_COUNT],
    pub overridden: [bool; OPERATION_COUNT],
}

/// Per operation, the highest-priority matching rule replaces the model
/// verdict. Between equal priorities DENY wins, so the result never depends
/// on rule order.
pub fn apply_priority_rules(
    rules: &[PriorityRule],
    user_index: u64,
    resource_id: u64,
    model_access: [bool; OPERATION_COUNT],
) -> RuleOutcome {
    let mut out = RuleOutcome {
        access_list: model_access,
        overridden: [false; OPERATION_COUNT],
    };
    for op in Operation::ALL {
        let winner = rules
            .iter()
            .filter(|r| r.matches(user_index, resource_id, op))
            .max_by_key(|r| (r.priority, r.effect == Effect::Deny));
        if let Some(rule) = winner {
            out.access_list[op.index()] = rule.effect == Effect::Allow;
            out.overridden[op.index()] = true;
        }
    }
    out
}

pub fn validate_rules(rules: &[PriorityRule]) -> Result<(), RulesError> {
    let mut seen = std::collections::HashMap::new();
    for (i, rule) in rules.iter().enumerate() {
        if let Some(first) = seen.insert(rule.key(), i) {
            return Err(RulesError::Duplicate {
                priority: rule.priority,
                user: rule.user.to_string(),
                resource: rule.resource.to_string(),
                operation: rule.operation.to_string(),
                first: first + 1,
                second: i + 1,
            });
        }
    }
    Ok(())
}

fn parse_id(field: &str, what: &str) -> Result<Match<u32>, String> {
    if field == "*" {
        return Ok(Match::Any);
    }
    field
        .parse()
        .map(Match::Exact)
        .map_err(|_| format!("invalid {what} `{field}`"))
}

fn parse_line(line: &str) -> Result<PriorityRule, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let [priority, user, resource, op, effect] = fields[..] else {
        return Err(format!("expected 5 fields, found {}", fields.len()));
    };
    Ok(PriorityRule {
        priority: priority
            .parse()
            .map_err(|_| format!("invalid priority `{priority}`"))?,
        user: parse_id(user, "user")?,
        resource: parse_id(resource, "resource")?,
        operation: if op == "*" {
            Match::Any
        } else {
            Match::Exact(op.parse().map_err(|_| format!("invalid operation `{op}`"))?)
        },
        effect: match effect.to_ascii_uppercase().as_str() {
            "ALLOW" => Effect::Allow,
            "DENY" => Effect::Deny,
            _ => return Err(format!("invalid effect `{effect}`")),
        },
    })
}

/// Parses and validates a rules file.
pub fn parse_rules(text: &str) -> Result<Vec<PriorityRule>, RulesError> {
    let mut rules = Vec::new();
    let mut lines = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let rule = parse_line(line).map_err(|reason| RulesError::Parse { line: n + 1, reason })?;
        rules.push(rule);
        lines.push(n + 1);
    }
    validate_rules(&rules).map_err(|e| match e {
        RulesError::Duplicate {
            priority,
            user,
            resource,
            operation,
            first,
            second,
        } => RulesError::Duplicate {
            priority,
            user,
            resource,
            operation,
            first: lines[first - 1],
            second: lines[second - 1],
        },
        other => other,
    })?;
    Ok(rules)
}

pub fn format_rules(rules: &[PriorityRule]) -> String {
    let mut out = String::from("# priority user resource op effect\n");
    for rule in rules {
        out.push_str(&rule.to_string());
        out.push('\n');
    }
    out
}
