//! News-aware semantic rules: situation frames, generic-object vocabulary,
//! named-entity replacement, and the canonical one-line rule text.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::entity::{EntityType, TypedEntityPartition};
use crate::error::{Error, Result};
use crate::text::normalize;

/// Situation-recognition output as stored next to each sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub verb: String,
    #[serde(default)]
    pub roles: Vec<RoleObject>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleObject {
    pub role: String,
    pub object: String,
}

/// Verb plus ordered role/generic-object pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SituationFrame {
    verb: String,
    pairs: Vec<(String, String)>,
}

impl SituationFrame {
    pub fn verb(&self) -> &str {
        &self.verb
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn n_roles(&self) -> usize {
        self.pairs.len()
    }

    /// The frame itself as a rule, with every object left generic.
    pub fn as_rule(&self) -> SemanticRule {
        SemanticRule {
            verb: self.verb.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|(r, o)| RoleFillers {
                    role: r.clone(),
                    fillers: vec![o.clone()],
                })
                .collect(),
        }
    }

    pub fn to_annotation(&self) -> FrameAnnotation {
        FrameAnnotation {
            verb: self.verb.clone(),
            roles: self
                .pairs
                .iter()
                .map(|(role, object)| RoleObject {
                    role: role.clone(),
                    object: object.clone(),
                })
                .collect(),
        }
    }
}

const RESERVED: &[char] = &['|', ',', ':', '\n', '\r'];

fn check_field(what: &str, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        return Err(Error::InvalidFrame(format!("{what} is empty")));
    }
    if value.trim() != value {
        return Err(Error::InvalidFrame(format!(
            "{what} {value:?} has surrounding whitespace"
        )));
    }
    if value.contains(RESERVED) {
        return Err(Error::InvalidFrame(format!(
            "{what} {value:?} contains a reserved character"
        )));
    }
    Ok(())
}

/// Validates an annotation into a frame.
pub fn build_frame(annotation: &FrameAnnotation) -> Result<SituationFrame> {
    check_field("verb", &annotation.verb)?;
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(annotation.roles.len());
    for ro in &annotation.roles {
        check_field("role", &ro.role)?;
        check_field("object", &ro.object)?;
        if !seen.insert(ro.role.as_str()) {
            return Err(Error::InvalidFrame(format!("duplicate role {:?}", ro.role)));
        }
        pairs.push((ro.role.clone(), ro.object.clone()));
    }
    Ok(SituationFrame {
        verb: annotation.verb.clone(),
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoleFillers {
    pub role: String,
    pub fillers: Vec<String>,
}

/// Verb plus ordered role/filler-list pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticRule {
    pub verb: String,
    pub pairs: Vec<RoleFillers>,
}

impl SemanticRule {
    pub fn validate(&self) -> Result<()> {
        check_field("verb", &self.verb)?;
        let mut seen = HashSet::new();
        for p in &self.pairs {
            check_field("role", &p.role)?;
            if !seen.insert(p.role.as_str()) {
                return Err(Error::InvalidFrame(format!("duplicate role {:?}", p.role)));
            }
            if p.fillers.is_empty() {
                return Err(Error::InvalidFrame(format!(
                    "role {:?} has no fillers",
                    p.role
                )));
            }
            for f in &p.fillers {
                check_field("filler", f)?;
            }
        }
        Ok(())
    }

    /// All filler strings in stored order.
    pub fn fillers(&self) -> impl Iterator<Item = &str> {
        self.pairs
            .iter()
            .flat_map(|p| p.fillers.iter().map(String::as_str))
    }
}

/// Maps lowercase generic nouns ("people", "city") to the entity type they
/// stand for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenericObjectVocabulary {
    entries: BTreeMap<String, EntityType>,
}

const DEFAULT_VOCAB: &[(&str, EntityType)] = &[
    ("people", EntityType::Per),
    ("person", EntityType::Per),
    ("man", EntityType::Per),
    ("woman", EntityType::Per),
    ("men", EntityType::Per),
    ("women", EntityType::Per),
    ("player", EntityType::Per),
    ("singer", EntityType::Per),
    ("company", EntityType::Org),
    ("team", EntityType::Org),
    ("group", EntityType::Org),
    ("organization", EntityType::Org),
    ("band", EntityType::Org),
    ("city", EntityType::Loc),
    ("place", EntityType::Loc),
    ("theater", EntityType::Loc),
    ("stadium", EntityType::Loc),
    ("park", EntityType::Loc),
    ("country", EntityType::Loc),
];

impl Default for GenericObjectVocabulary {
    fn default() -> Self {
        GenericObjectVocabulary {
            entries: DEFAULT_VOCAB
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        }
    }
}

impl GenericObjectVocabulary {
    pub fn empty() -> Self {
        GenericObjectVocabulary {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, object: &str, etype: EntityType) {
        self.entries.insert(normalize(object), etype);
    }

    pub fn lookup(&self, object: &str) -> Option<EntityType> {
        self.entries.get(&normalize(object)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, EntityType)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Parses `object<TAB>etype` lines; `#` starts a comment line.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut v = Self::empty();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (obj, etype) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidInput(format!(
                    "vocabulary line {}: expected object<TAB>etype",
                    lineno + 1
                ))
            })?;
            v.insert(obj, etype.parse()?);
        }
        Ok(v)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# object\tetype\n");
        for (k, v) in &self.entries {
            out.push_str(&format!("{k}\t{v}\n"));
        }
        out
    }
}

/// Named-entity replacement: every pair whose object is in `vocab` with
/// type `t` gets all entities of `partition[t]` (score order) as fillers,
/// provided that bucket is non-empty. Everything else keeps its generic
/// object. Single pass; verb and role order are preserved.
pub fn replace_entities(
    frame: &SituationFrame,
    partition: &TypedEntityPartition,
    vocab: &GenericObjectVocabulary,
) -> SemanticRule {
    let pairs = frame
        .pairs
        .iter()
        .map(|(role, object)| {
            let fillers = match vocab.lookup(object).map(|t| partition.get(t)) {
                Some(ents) if !ents.is_empty() => ents.iter().map(|m| m.surface.clone()).collect(),
                _ => vec![object.clone()],
            };
            RoleFillers {
                role: role.clone(),
                fillers,
            }
        })
        .collect();
    SemanticRule {
        verb: frame.verb.clone(),
        pairs,
    }
}

/// Canonical single-line form: `verb | role1: a, b | role2: c`.
pub fn serialize_rule(rule: &SemanticRule) -> String {
    let mut out = rule.verb.clone();
    for p in &rule.pairs {
        out.push_str(" | ");
        out.push_str(&p.role);
        out.push_str(": ");
        out.push_str(&p.fillers.join(", "));
    }
    out
}

impl fmt::Display for SemanticRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_rule(self))
    }
}

fn parse_err(column: usize, message: impl Into<String>) -> Error {
    Error::RuleParse {
        column,
        message: message.into(),
    }
}

/// Inverse of [`serialize_rule`]. Columns in errors are 1-based characters.
pub fn parse_rule(text: &str) -> Result<SemanticRule> {
    if text.contains(['\n', '\r']) {
        let col = text
            .find(['\n', '\r'])
            .map(|b| text[..b].chars().count() + 1)
            .unwrap_or(1);
        return Err(parse_err(col, "rule text must be a single line"));
    }
    let col_of = |byte: usize| text[..byte].chars().count() + 1;
    let mut segments = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c == '|' {
            segments.push((start, &text[start..i]));
            start = i + 1;
        }
    }
    segments.push((start, &text[start..]));

    let (vstart, vseg) = segments[0];
    let verb = vseg.trim();
    if verb.is_empty() {
        return Err(parse_err(col_of(vstart), "missing verb"));
    }
    if let Some(b) = verb.find([',', ':']) {
        let lead = vseg.len() - vseg.trim_start().len();
        return Err(parse_err(
            col_of(vstart + lead + b),
            "verb contains a reserved character",
        ));
    }

    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for &(sstart, seg) in &segments[1..] {
        let colon = seg
            .find(':')
            .ok_or_else(|| parse_err(col_of(sstart), "expected `role: fillers`"))?;
        let role = seg[..colon].trim();
        if role.is_empty() {
            return Err(parse_err(col_of(sstart), "empty role"));
        }
        if let Some(b) = role.find(',') {
            let lead = seg.len() - seg.trim_start().len();
            return Err(parse_err(
                col_of(sstart + lead + b),
                "role contains a comma",
            ));
        }
        if !seen.insert(role.to_string()) {
            return Err(parse_err(
                col_of(sstart),
                format!("duplicate role {role:?}"),
            ));
        }
        let mut fillers = Vec::new();
        let mut fstart = sstart + colon + 1;
        for part in seg[colon + 1..].split(',') {
            let f = part.trim();
            if f.is_empty() {
                return Err(parse_err(col_of(fstart), "empty filler"));
            }
            if let Some(b) = f.find(':') {
                let lead = part.len() - part.trim_start().len();
                return Err(parse_err(
                    col_of(fstart + lead + b),
                    "filler contains a colon",
                ));
            }
            fillers.push(f.to_string());
            fstart += part.len() + 1;
        }
        pairs.push(RoleFillers {
            role: role.to_string(),
            fillers,
        });
    }
    Ok(SemanticRule {
        verb: verb.to_string(),
        pairs,
    })
}

impl FromStr for SemanticRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_rule(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entity::EntityMention;
    use proptest::prelude::*;

    fn ann(verb: &str, roles: &[(&str, &str)]) -> FrameAnnotation {
        FrameAnnotation {
            verb: verb.into(),
            roles: roles
                .iter()
                .map(|(r, o)| RoleObject {
                    role: r.to_string(),
                    object: o.to_string(),
                })
                .collect(),
        }
    }

    fn per(names: &[&str]) -> TypedEntityPartition {
        TypedEntityPartition {
            per: names
                .iter()
                .enumerate()
                .map(|(i, n)| EntityMention::new(*n, EntityType::Per, (i, i + 1)).unwrap())
                .collect(),
            ..Default::default()
        }
    }

    fn fig2_rule() -> SemanticRule {
        let frame = build_frame(&ann(
            "performing",
            &[("Agent", "people"), ("Stage", "theater")],
        ))
        .unwrap();
        replace_entities(
            &frame,
            &per(&["Ms. Micucci", "Ms. Lindhome"]),
            &GenericObjectVocabulary::default(),
        )
    }

    #[test]
    fn builds_fig2_frame() {
        let f = build_frame(&ann(
            "performing",
            &[("Agent", "people"), ("Stage", "theater")],
        ))
        .unwrap();
        assert_eq!(f.n_roles(), 2);
        assert_eq!(f.verb(), "performing");
    }

    #[test]
    fn builds_empty_frame() {
        assert_eq!(build_frame(&ann("v", &[])).unwrap().n_roles(), 0);
    }

    #[test]
    fn duplicate_role_is_invalid() {
        let err = build_frame(&ann("v", &[("Agent", "man"), ("Agent", "woman")])).unwrap_err();
        assert!(matches!(err, Error::InvalidFrame(_)));
        assert!(build_frame(&ann("", &[])).is_err());
        assert!(build_frame(&ann("v", &[("Agent", "")])).is_err());
    }

    #[test]
    fn replaces_generic_people_with_names() {
        let rule = fig2_rule();
        assert_eq!(rule.pairs[0].fillers, vec!["Ms. Micucci", "Ms. Lindhome"]);
        assert_eq!(rule.pairs[1].fillers, vec!["theater"]);
        assert_eq!(rule.verb, "performing");
    }

    #[test]
    fn empty_partition_keeps_frame() {
        let frame = build_frame(&ann(
            "performing",
            &[("Agent", "people"), ("Stage", "theater")],
        ))
        .unwrap();
        let rule = replace_entities(
            &frame,
            &TypedEntityPartition::default(),
            &GenericObjectVocabulary::default(),
        );
        assert_eq!(rule, frame.as_rule());
        assert_eq!(
            serialize_rule(&rule),
            "performing | Agent: people | Stage: theater"
        );
    }

    #[test]
    fn serializes_fig2_rule() {
        let text = serialize_rule(&fig2_rule());
        assert_eq!(
            text,
            "performing | Agent: Ms. Micucci, Ms. Lindhome | Stage: theater"
        );
        assert_eq!(parse_rule(&text).unwrap(), fig2_rule());
    }

    #[test]
    fn serializes_verb_only() {
        let rule = SemanticRule {
            verb: "verb".into(),
            pairs: vec![],
        };
        assert_eq!(serialize_rule(&rule), "verb");
        assert_eq!(parse_rule("verb").unwrap(), rule);
    }

    #[test]
    fn parse_errors_carry_columns() {
        match parse_rule("run | Agent people").unwrap_err() {
            Error::RuleParse { column, .. } => assert_eq!(column, 6),
            e => panic!("unexpected {e}"),
        }
        match parse_rule("run | Agent: a, , b").unwrap_err() {
            Error::RuleParse { column, .. } => assert_eq!(column, 16),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            parse_rule("  | A: b"),
            Err(Error::RuleParse { column: 1, .. })
        ));
        assert!(parse_rule("run | A: x | A: y").is_err());
        assert!(parse_rule("run\n| A: x").is_err());
    }

    #[test]
    fn vocabulary_tsv() {
        let v = GenericObjectVocabulary::parse_tsv("# c\nMan\tPER\ncity\tLOC\n").unwrap();
        assert_eq!(v.lookup("man"), Some(EntityType::Per));
        assert_eq!(v.lookup("  City "), Some(EntityType::Loc));
        assert_eq!(v.lookup("dog"), None);
        assert_eq!(GenericObjectVocabulary::parse_tsv(&v.to_tsv()).unwrap(), v);
    }

    fn field() -> impl Strategy<Value = String> {
        "[A-Za-z][A-Za-z0-9 .'-]{0,10}[A-Za-z0-9.]"
            .prop_map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    fn arb_rule() -> impl Strategy<Value = SemanticRule> {
        (
            field(),
            prop::collection::vec((field(), prop::collection::vec(field(), 1..4)), 0..5),
        )
            .prop_map(|(verb, pairs)| {
                let mut seen = HashSet::new();
                SemanticRule {
                    verb,
                    pairs: pairs
                        .into_iter()
                        .filter(|(r, _)| seen.insert(r.clone()))
                        .map(|(role, fillers)| RoleFillers { role, fillers })
                        .collect(),
                }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn serialize_parse_round_trip(rule in arb_rule()) {
            prop_assert!(rule.validate().is_ok());
            prop_assert_eq!(parse_rule(&serialize_rule(&rule)).unwrap(), rule);
        }
    }
}
