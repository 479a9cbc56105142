//! Named entity extraction: article slicing, recognition, deduplication,
//! image-relevance ranking and per-type partitioning.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{ImageRef, SimilarityScorer};
use crate::text::normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "ORG")]
    Org,
    #[serde(rename = "LOC")]
    Loc,
}

impl EntityType {
    pub const ALL: [EntityType; 3] = [EntityType::Per, EntityType::Org, EntityType::Loc];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Per => "PER",
            EntityType::Org => "ORG",
            EntityType::Loc => "LOC",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PER" | "PERSON" => Ok(EntityType::Per),
            "ORG" | "ORGANIZATION" => Ok(EntityType::Org),
            "LOC" | "LOCATION" | "GPE" => Ok(EntityType::Loc),
            other => Err(Error::InvalidInput(format!(
                "unknown entity type {other:?}"
            ))),
        }
    }
}

/// A typed entity mention. `span` is a half-open token range in article
/// coordinates; `score` is the image-text similarity (0 until scored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMention {
    pub surface: String,
    pub etype: EntityType,
    pub span: (usize, usize),
    pub score: f64,
}

impl EntityMention {
    pub fn new(
        surface: impl Into<String>,
        etype: EntityType,
        span: (usize, usize),
    ) -> Result<Self> {
        let surface = surface.into();
        if surface.trim().is_empty() {
            return Err(Error::InvalidInput("entity surface is empty".into()));
        }
        if span.0 >= span.1 {
            return Err(Error::InvalidInput(format!(
                "entity span {span:?} is empty for {surface:?}"
            )));
        }
        Ok(EntityMention {
            surface,
            etype,
            span,
            score: 0.0,
        })
    }

    fn key(&self) -> (String, EntityType) {
        (normalize(&self.surface), self.etype)
    }
}

/// Ordered, deduplicated entity mentions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntitySet {
    mentions: Vec<EntityMention>,
}

impl EntitySet {
    /// Sorts by article position and keeps the first mention of each
    /// (normalized surface, type) pair.
    pub fn from_mentions(mut mentions: Vec<EntityMention>) -> Self {
        mentions.sort_by_key(|m| m.span);
        let mut seen = HashSet::new();
        mentions.retain(|m| seen.insert(m.key()));
        EntitySet { mentions }
    }

    /// Wraps mentions already in the desired order. Later duplicates are
    /// dropped.
    pub fn from_ordered(mut mentions: Vec<EntityMention>) -> Self {
        let mut seen = HashSet::new();
        mentions.retain(|m| seen.insert(m.key()));
        EntitySet { mentions }
    }

    pub fn mentions(&self) -> &[EntityMention] {
        &self.mentions
    }

    pub fn len(&self) -> usize {
        self.mentions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mentions.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, EntityMention> {
        self.mentions.iter()
    }

    pub fn into_vec(self) -> Vec<EntityMention> {
        self.mentions
    }
}

impl<'a> IntoIterator for &'a EntitySet {
    type Item = &'a EntityMention;
    type IntoIter = std::slice::Iter<'a, EntityMention>;

    fn into_iter(self) -> Self::IntoIter {
        self.mentions.iter()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TypedEntityPartition {
    pub per: Vec<EntityMention>,
    pub org: Vec<EntityMention>,
    pub loc: Vec<EntityMention>,
}

impl TypedEntityPartition {
    pub fn get(&self, etype: EntityType) -> &[EntityMention] {
        match etype {
            EntityType::Per => &self.per,
            EntityType::Org => &self.org,
            EntityType::Loc => &self.loc,
        }
    }

    pub fn get_mut(&mut self, etype: EntityType) -> &mut Vec<EntityMention> {
        match etype {
            EntityType::Per => &mut self.per,
            EntityType::Org => &mut self.org,
            EntityType::Loc => &mut self.loc,
        }
    }

    /// Keeps only the given type; used by the PER-only rule variant.
    pub fn only(&self, etype: EntityType) -> Self {
        let mut out = TypedEntityPartition::default();
        *out.get_mut(etype) = self.get(etype).to_vec();
        out
    }

    pub fn len(&self) -> usize {
        self.per.len() + self.org.len() + self.loc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A contiguous slice of the article with its offset in article tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenWindow<'a, T> {
    pub offset: usize,
    pub tokens: &'a [T],
}

/// Cuts an article into windows of `window` tokens starting every `stride`
/// tokens. The final window may be shorter and always reaches the end.
pub fn slice_article<T>(
    article: &[T],
    window: usize,
    stride: usize,
) -> Result<Vec<TokenWindow<'_, T>>> {
    if window == 0 {
        return Err(Error::InvalidInput("window must be >= 1".into()));
    }
    if stride == 0 || stride > window {
        return Err(Error::InvalidInput(format!(
            "stride must satisfy 1 <= stride <= window ({window}), got {stride}"
        )));
    }
    if article.is_empty() {
        return Err(Error::InvalidInput("cannot slice an empty article".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window).min(article.len());
        out.push(TokenWindow {
            offset: start,
            tokens: &article[start..end],
        });
        if end == article.len() {
            break;
        }
        start += stride;
    }
    Ok(out)
}

/// A span found by a recognizer, in window-local token coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecognizedSpan {
    pub surface: String,
    pub etype: EntityType,
    pub start: usize,
    pub end: usize,
}

/// Pluggable NER. Implementations used from several threads must be `Sync`.
pub trait EntityRecognizer {
    fn recognize(&self, tokens: &[String]) -> std::result::Result<Vec<RecognizedSpan>, String>;
}

/// Runs the recognizer on every window, rebases spans to article
/// coordinates, and deduplicates by (normalized surface, type).
pub fn extract_entities<R: EntityRecognizer + ?Sized>(
    windows: &[TokenWindow<'_, String>],
    recognizer: &R,
) -> Result<EntitySet> {
    let mut mentions = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        let spans = recognizer
            .recognize(w.tokens)
            .map_err(|message| Error::Recognizer { window: i, message })?;
        for s in spans {
            let m = EntityMention::new(s.surface, s.etype, (w.offset + s.start, w.offset + s.end))
                .map_err(|e| Error::Recognizer {
                    window: i,
                    message: e.to_string(),
                })?;
            mentions.push(m);
        }
    }
    Ok(EntitySet::from_mentions(mentions))
}

/// Total order used for ranking: score descending, then article position,
/// then surface.
pub fn rank_order(a: &EntityMention, b: &EntityMention) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.span.0.cmp(&b.span.0))
        .then_with(|| a.surface.cmp(&b.surface))
}

/// Scores every entity surface against the image and keeps the `k` best.
pub fn select_top_k<S: SimilarityScorer + ?Sized>(
    image: &ImageRef,
    entities: &EntitySet,
    scorer: &S,
    k: usize,
) -> Result<EntitySet> {
    if k == 0 {
        return Err(Error::InvalidInput("top-k requires k >= 1".into()));
    }
    let mut scored = Vec::with_capacity(entities.len());
    for m in entities {
        let score = scorer.score(image, &m.surface);
        if !score.is_finite() {
            return Err(Error::Scorer {
                entity: m.surface.clone(),
                score,
            });
        }
        scored.push(EntityMention { score, ..m.clone() });
    }
    scored.sort_by(rank_order);
    scored.truncate(k);
    Ok(EntitySet { mentions: scored })
}

/// Buckets entities by type, keeping score-descending order in each bucket.
pub fn partition_by_type(entities: &EntitySet) -> TypedEntityPartition {
    let mut sorted = entities.mentions.clone();
    sorted.sort_by(rank_order);
    let mut out = TypedEntityPartition::default();
    for m in sorted {
        out.get_mut(m.etype).push(m);
    }
    out
}

/// Surface-to-type lookup table loaded from a TSV gazetteer.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    entries: HashMap<Vec<String>, (String, EntityType)>,
    max_tokens: usize,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, surface: &str, etype: EntityType) {
        let key: Vec<String> = crate::text::tokenize(surface)
            .iter()
            .map(|t| t.to_lowercase())
            .collect();
        if key.is_empty() {
            return;
        }
        self.max_tokens = self.max_tokens.max(key.len());
        self.entries
            .insert(key, (surface.trim().to_string(), etype));
    }

    /// Parses `surface<TAB>etype` lines; `#` starts a comment line.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut g = Gazetteer::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (surface, etype) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidInput(format!(
                    "gazetteer line {}: expected surface<TAB>etype",
                    lineno + 1
                ))
            })?;
            g.insert(surface, etype.parse()?);
        }
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut rows: Vec<_> = self.entries.values().collect();
        rows.sort();
        let mut out = String::from("# surface\tetype\n");
        for (surface, etype) in rows {
            out.push_str(&format!("{surface}\t{etype}\n"));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn longest_match(&self, tokens: &[String], at: usize) -> Option<(usize, EntityType)> {
        let max = self.max_tokens.min(tokens.len() - at);
        (1..=max).rev().find_map(|n| {
            let key: Vec<String> = tokens[at..at + n]
                .iter()
                .map(|t| t.to_lowercase())
                .collect();
            self.entries.get(&key).map(|(_, t)| (n, *t))
        })
    }
}

const SPAN_STOPWORDS: &[&str] = &[
    "The",
    "A",
    "An",
    "In",
    "On",
    "At",
    "He",
    "She",
    "It",
    "They",
    "We",
    "I",
    "His",
    "Her",
    "Their",
    "This",
    "That",
    "These",
    "Those",
    "But",
    "And",
    "Or",
    "As",
    "After",
    "Before",
    "When",
    "While",
    "On",
    "For",
    "From",
    "With",
    "By",
    "Officials",
    "Monday",
    "Tuesday",
    "Wednesday",
    "Thursday",
    "Friday",
    "Saturday",
    "Sunday",
];

fn is_capitalized(tok: &str) -> bool {
    let mut chars = tok.chars();
    matches!(chars.next(), Some(c) if c.is_uppercase()) && tok.chars().any(|c| c.is_alphabetic())
}

/// Deterministic recognizer: longest gazetteer match first, otherwise runs
/// of two or more capitalized tokens are tagged PER.
#[derive(Debug, Clone, Default)]
pub struct GazetteerRecognizer {
    gazetteer: Gazetteer,
}

impl GazetteerRecognizer {
    pub fn new(gazetteer: Gazetteer) -> Self {
        GazetteerRecognizer { gazetteer }
    }

    pub fn gazetteer(&self) -> &Gazetteer {
        &self.gazetteer
    }
}

impl EntityRecognizer for GazetteerRecognizer {
    fn recognize(&self, tokens: &[String]) -> std::result::Result<Vec<RecognizedSpan>, String> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if let Some((n, etype)) = self.gazetteer.longest_match(tokens, i) {
                out.push(RecognizedSpan {
                    surface: tokens[i..i + n].join(" "),
                    etype,
                    start: i,
                    end: i + n,
                });
                i += n;
                continue;
            }
            if is_capitalized(&tokens[i]) {
                let mut start = i;
                let mut end = i;
                while end < tokens.len()
                    && is_capitalized(&tokens[end])
                    && (end == i || self.gazetteer.longest_match(tokens, end).is_none())
                {
                    end += 1;
                }
                while start < end && SPAN_STOPWORDS.contains(&tokens[start].as_str()) {
                    start += 1;
                }
                if end - start >= 2 {
                    out.push(RecognizedSpan {
                        surface: tokens[start..end].join(" "),
                        etype: EntityType::Per,
                        start,
                        end,
                    });
                }
                i = end.max(i + 1);
                continue;
            }
            i += 1;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    struct FixedScorer(HashMap<String, f64>);

    impl SimilarityScorer for FixedScorer {
        fn score(&self, _image: &ImageRef, text: &str) -> f64 {
            self.0.get(text).copied().unwrap_or(0.0)
        }
    }

    fn image() -> ImageRef {
        ImageRef::new("img", vec![1.0]).unwrap()
    }

    fn mention(s: &str, t: EntityType, pos: usize) -> EntityMention {
        EntityMention::new(s, t, (pos, pos + 1)).unwrap()
    }

    #[test]
    fn slicing_single_full_window() {
        let art: Vec<usize> = (1..=512).collect();
        let w = slice_article(&art, 512, 512).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].tokens.len(), 512);
    }

    #[test]
    fn slicing_identity_window() {
        let art: Vec<usize> = (1..=10).collect();
        let w = slice_article(&art, 10, 10).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].tokens, &art[..]);
    }

    #[test]
    fn slicing_overlap_and_coverage() {
        let art: Vec<usize> = (1..=700).collect();
        let w = slice_article(&art, 512, 256).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].tokens.first(), Some(&1));
        assert_eq!(w[0].tokens.last(), Some(&512));
        assert_eq!(w[1].tokens.first(), Some(&257));
        assert_eq!(w[1].tokens.last(), Some(&700));
        let mut seen = vec![false; 700];
        for win in &w {
            for k in 0..win.tokens.len() {
                seen[win.offset + k] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn slicing_rejects_bad_arguments() {
        let empty: Vec<u8> = vec![];
        assert!(matches!(
            slice_article(&empty, 4, 4),
            Err(Error::InvalidInput(_))
        ));
        assert!(slice_article(&[1, 2], 0, 1).is_err());
        assert!(slice_article(&[1, 2], 2, 3).is_err());
        assert!(slice_article(&[1, 2], 2, 0).is_err());
    }

    #[test]
    fn recognizes_fig1_entities() {
        let mut g = Gazetteer::new();
        g.insert("New York", EntityType::Loc);
        let rec = GazetteerRecognizer::new(g);
        let toks =
            tokenize("The singer Pedro Sa Moraes performed at a club in New York on Monday.");
        let windows = slice_article(&toks, 512, 512).unwrap();
        let set = extract_entities(&windows, &rec).unwrap();
        let got: Vec<_> = set.iter().map(|m| (m.surface.as_str(), m.etype)).collect();
        assert_eq!(
            got,
            vec![
                ("Pedro Sa Moraes", EntityType::Per),
                ("New York", EntityType::Loc)
            ]
        );
    }

    #[test]
    fn lowercase_article_yields_nothing() {
        let rec = GazetteerRecognizer::default();
        let toks = tokenize("nothing here is capitalized at all.");
        let set = extract_entities(&slice_article(&toks, 8, 8).unwrap(), &rec).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn overlapping_windows_deduplicate() {
        let mut g = Gazetteer::new();
        g.insert("Acme Corp", EntityType::Org);
        let rec = GazetteerRecognizer::new(g);
        let toks = tokenize("x y Acme Corp z w v u Acme Corp t");
        let windows = slice_article(&toks, 6, 2).unwrap();
        let set = extract_entities(&windows, &rec).unwrap();
        for (i, a) in set.iter().enumerate() {
            for b in set.iter().skip(i + 1) {
                assert!(!(normalize(&a.surface) == normalize(&b.surface) && a.etype == b.etype));
            }
        }
        assert_eq!(set.len(), 1);
        assert_eq!(set.mentions()[0].span, (2, 4));
    }

    #[test]
    fn recognizer_failure_reports_window() {
        struct Failing;
        impl EntityRecognizer for Failing {
            fn recognize(
                &self,
                tokens: &[String],
            ) -> std::result::Result<Vec<RecognizedSpan>, String> {
                if tokens.iter().any(|t| t == "boom") {
                    Err("bad token".into())
                } else {
                    Ok(vec![])
                }
            }
        }
        let toks = tokenize("a b c d boom e");
        let err = extract_entities(&slice_article(&toks, 2, 2).unwrap(), &Failing).unwrap_err();
        assert!(matches!(err, Error::Recognizer { window: 2, .. }));
    }

    #[test]
    fn top_k_picks_highest_scores() {
        let set = EntitySet::from_mentions(vec![
            mention("A", EntityType::Per, 0),
            mention("B", EntityType::Org, 1),
            mention("C", EntityType::Loc, 2),
            mention("D", EntityType::Per, 3),
        ]);
        let scorer = FixedScorer(
            [("A", 0.1), ("B", 0.9), ("C", 0.5), ("D", 0.7)]
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        );
        let top = select_top_k(&image(), &set, &scorer, 3).unwrap();
        let names: Vec<_> = top.iter().map(|m| m.surface.as_str()).collect();
        assert_eq!(names, vec!["B", "D", "C"]);
        assert_eq!(top.mentions()[0].score, 0.9);
        let all = select_top_k(&image(), &set, &scorer, 10).unwrap();
        assert_eq!(all.len(), 4);
        assert!(select_top_k(&image(), &set, &scorer, 0).is_err());
    }

    #[test]
    fn top_k_rejects_non_finite_scores() {
        let set = EntitySet::from_mentions(vec![mention("A", EntityType::Per, 0)]);
        let scorer = FixedScorer([("A".to_string(), f64::NAN)].into_iter().collect());
        let err = select_top_k(&image(), &set, &scorer, 1).unwrap_err();
        assert!(matches!(err, Error::Scorer { ref entity, .. } if entity == "A"));
    }

    #[test]
    fn partition_direct_bucketing() {
        let set = EntitySet::from_mentions(vec![
            mention("A", EntityType::Per, 0),
            mention("B", EntityType::Loc, 1),
        ]);
        let p = partition_by_type(&set);
        assert_eq!(p.per.len(), 1);
        assert!(p.org.is_empty());
        assert_eq!(p.loc[0].surface, "B");
    }

    #[test]
    fn partition_fig2_entities() {
        let mut g = Gazetteer::new();
        g.insert("Largo", EntityType::Loc);
        g.insert("Los Angeles", EntityType::Loc);
        let rec = GazetteerRecognizer::new(g);
        let toks = tokenize(
            "Ms. Micucci and Ms. Lindhome performed their act at the Largo in Los Angeles.",
        );
        let set = extract_entities(&slice_article(&toks, 512, 512).unwrap(), &rec).unwrap();
        let p = partition_by_type(&set);
        let per: Vec<_> = p.per.iter().map(|m| m.surface.as_str()).collect();
        assert_eq!(per, vec!["Ms. Micucci", "Ms. Lindhome"]);
        assert!(p.loc.iter().any(|m| m.surface == "Largo"));
    }

    #[test]
    fn gazetteer_tsv_round_trip() {
        let g = Gazetteer::parse_tsv("# comment\nNew York\tLOC\nAcme Corp\tORG\n\n").unwrap();
        assert_eq!(g.len(), 2);
        let again = Gazetteer::parse_tsv(&g.to_tsv()).unwrap();
        assert_eq!(again.len(), 2);
        assert!(Gazetteer::parse_tsv("no tab here").is_err());
        assert!(Gazetteer::parse_tsv("X\tFOO").is_err());
    }
}
