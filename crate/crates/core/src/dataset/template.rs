//! Conjunctive-phrase templates that turn a pair of statements or a
//! statement and its reasons into a single input sentence.

use crate::error::{Error, Result};

/// Which example kind a template is filled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateKind {
    /// `{A}`, `{B}`: two statements.
    Pair,
    /// `{S}`, `{O}`: a statement and one reason.
    Reason,
    /// `{S}`, `{O1}`, `{O2}`, `{O3}`: a statement and an ordering of all
    /// three reasons.
    Choice,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSpec {
    pub name: String,
    pub pattern: String,
    kind: TemplateKind,
}

const PAIR_SLOTS: [&str; 2] = ["A", "B"];
const REASON_SLOTS: [&str; 2] = ["S", "O"];
const CHOICE_SLOTS: [&str; 4] = ["S", "O1", "O2", "O3"];

fn slots(pattern: &str) -> Result<Vec<&str>> {
    let mut out = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| Error::Template(format!("unclosed slot in {pattern:?}")))?;
        out.push(&after[..close]);
        rest = &after[close + 1..];
    }
    Ok(out)
}

impl TemplateSpec {
    pub fn new(name: impl Into<String>, pattern: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let pattern = pattern.into();
        let found = slots(&pattern)?;
        if found.is_empty() {
            return Err(Error::Template(format!("template {name:?} has no slots")));
        }
        let kind = if found.iter().all(|s| PAIR_SLOTS.contains(s)) {
            TemplateKind::Pair
        } else if found.iter().all(|s| REASON_SLOTS.contains(s)) {
            TemplateKind::Reason
        } else if found.iter().all(|s| CHOICE_SLOTS.contains(s)) {
            TemplateKind::Choice
        } else {
            return Err(Error::Template(format!(
                "template {name:?} mixes or uses unknown slots {found:?}"
            )));
        };
        Ok(TemplateSpec {
            name,
            pattern,
            kind,
        })
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    /// `{A} makes more sense than {B}`
    pub fn more_sense() -> Self {
        TemplateSpec::new("more_sense", "{A} makes more sense than {B}").expect("valid builtin")
    }

    /// `{S} makes less sense because {O}`
    pub fn less_sense_because() -> Self {
        TemplateSpec::new("less_sense_because", "{S} makes less sense because {O}")
            .expect("valid builtin")
    }

    /// `The reason {S} makes less sense is {O1} rather than {O2} or {O3}`
    pub fn reason_rather_than() -> Self {
        TemplateSpec::new(
            "reason_rather_than",
            "The reason {S} makes less sense is {O1} rather than {O2} or {O3}",
        )
        .expect("valid builtin")
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "more_sense" => Ok(Self::more_sense()),
            "less_sense_because" => Ok(Self::less_sense_because()),
            "reason_rather_than" => Ok(Self::reason_rather_than()),
            other => Err(Error::Template(format!("unknown template {other:?}"))),
        }
    }

    fn fill(&self, values: &[(&str, &str)]) -> Result<String> {
        let mut out = String::new();
        let mut rest = self.pattern.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}').expect("validated in new");
            let slot = &after[..close];
            let value = values
                .iter()
                .find(|(k, _)| *k == slot)
                .map(|(_, v)| v.trim())
                .ok_or_else(|| {
                    Error::Template(format!(
                        "slot {{{slot}}} of {:?} cannot be filled here",
                        self.name
                    ))
                })?;
            out.push(' ');
            out.push_str(value);
            out.push(' ');
            rest = &after[close + 1..];
        }
        out.push_str(rest);
        Ok(out.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    pub fn render_pair(&self, a: &str, b: &str) -> Result<String> {
        self.fill(&[("A", a), ("B", b)])
    }

    pub fn render_reason(&self, statement: &str, reason: &str) -> Result<String> {
        self.fill(&[("S", statement), ("O", reason)])
    }

    pub fn render_choice(&self, statement: &str, options: [&str; 3]) -> Result<String> {
        self.fill(&[
            ("S", statement),
            ("O1", options[0]),
            ("O2", options[1]),
            ("O3", options[2]),
        ])
    }
}
