//! Caption quality (BLEU-4, ROUGE-L, CIDEr) and entity precision/recall.
//!
//! Caption metrics take case-folded token sequences; each hypothesis is
//! paired with one or more references. Corpus scores do not depend on the
//! order of samples.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::entity::{EntityRecognizer, EntityType};
use crate::error::{Error, Result};
use crate::text::{normalize, tokenize};

pub const DEFAULT_RARITY_THRESHOLD: usize = 5;
pub const ROUGE_BETA: f64 = 1.2;
const MAX_N: usize = 4;

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn check_lengths<H, R>(hyps: &[H], refs: &[R]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses but {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// Lower-cased tokens used by the caption metrics.
pub fn metric_tokens(text: &str) -> Vec<String> {
    tokenize(&normalize(text))
}

/// Corpus-level BLEU-4: clipped n-gram precisions combined by geometric
/// mean, times the brevity penalty against the closest reference length.
/// No smoothing; any zero precision gives 0.
pub fn bleu4(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_lengths(hypotheses, references)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::InvalidInput("sample without references".into()));
        }
        hyp_len += hyp.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap_or(0);
        for n in 1..=MAX_N {
            let h = ngrams(hyp, n);
            let mut max_ref: Counts<'_> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &h {
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || (0..MAX_N).any(|i| matched[i] == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_N)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure for one hypothesis. With several references the best
/// precision and best recall are combined.
pub fn rouge_l_sentence(hyp: &[String], refs: &[Vec<String>]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in refs.iter().filter(|r| !r.is_empty()) {
        let l = lcs_len(hyp, reference) as f64;
        p = p.max(l / hyp.len() as f64);
        r = r.max(l / reference.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean sentence-level ROUGE-L.
pub fn rouge_l(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_lengths(hypotheses, references)?;
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| rouge_l_sentence(h, r))
        .sum();
    Ok(total / hypotheses.len() as f64)
}

/// Document frequencies of n-grams over a reference corpus, where each
/// sample's reference set counts as one document.
#[derive(Debug, Clone)]
pub struct CiderIdf {
    n_docs: usize,
    df: HashMap<Vec<String>, usize>,
}

impl CiderIdf {
    pub fn from_references(references: &[Vec<Vec<String>>]) -> Self {
        let mut df = HashMap::new();
        for refs in references {
            let mut seen = std::collections::HashSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    for g in ngrams(r, n).into_keys() {
                        seen.insert(g.to_vec());
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        CiderIdf {
            n_docs: references.len(),
            df,
        }
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn idf(&self, gram: &[String]) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0).max(1);
        (self.n_docs.max(1) as f64 / df as f64).ln().max(0.0)
    }

    fn vector<'a>(&self, tokens: &'a [String], n: usize) -> BTreeMap<&'a [String], f64> {
        ngrams(tokens, n)
            .into_iter()
            .map(|(g, c)| (g, c as f64 * self.idf(g)))
            .collect()
    }
}

fn cos(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .iter()
        .map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0))
        .sum();
    dot / (na * nb)
}

/// CIDEr with document frequencies from `idf`: per n-gram order, the mean
/// tf-idf cosine against each reference, averaged over orders 1..=4 and
/// then over samples. No length penalty or rescaling, so scores lie in [0, 1].
pub fn cider_with_idf(
    hypotheses: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    idf: &CiderIdf,
) -> Result<f64> {
    check_lengths(hypotheses, references)?;
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (hyp, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::InvalidInput("sample without references".into()));
        }
        let mut score = 0.0;
        for n in 1..=MAX_N {
            let h = idf.vector(hyp, n);
            let s: f64 = refs.iter().map(|r| cos(&h, &idf.vector(r, n))).sum();
            score += s / refs.len() as f64;
        }
        total += score / MAX_N as f64;
    }
    Ok(total / hypotheses.len() as f64)
}

/// CIDEr using the evaluated references as the idf corpus.
pub fn cider(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    cider_with_idf(
        hypotheses,
        references,
        &CiderIdf::from_references(references),
    )
}

/// Micro-averaged precision and recall.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl PrecisionRecall {
    pub fn from_counts(matched: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        PrecisionRecall {
            precision: ratio(matched, predicted),
            recall: ratio(matched, gold),
            matched,
            predicted,
            gold,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityScores {
    pub entity: PrecisionRecall,
    pub people: PrecisionRecall,
    pub rare: PrecisionRecall,
}

/// Size of the multiset intersection.
pub fn multiset_overlap<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for x in b {
        *counts.entry(x.as_ref()).or_insert(0) += 1;
    }
    let mut hit = 0;
    for x in a {
        if let Some(c) = counts.get_mut(x.as_ref()) {
            if *c > 0 {
                *c -= 1;
                hit += 1;
            }
        }
    }
    hit
}

/// Case-folded entity surfaces with their types.
pub fn caption_entities<R: EntityRecognizer + ?Sized>(
    text: &str,
    recognizer: &R,
    sample: usize,
) -> Result<Vec<(String, EntityType)>> {
    let tokens = tokenize(text);
    let spans = recognizer
        .recognize(&tokens)
        .map_err(|message| Error::Recognizer {
            window: sample,
            message,
        })?;
    Ok(spans
        .into_iter()
        .map(|s| (normalize(&s.surface), s.etype))
        .collect())
}

/// How often each case-folded entity surface occurs in training references.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityFrequencies(pub BTreeMap<String, usize>);

impl EntityFrequencies {
    pub fn from_captions<R: EntityRecognizer + ?Sized, S: AsRef<str>>(
        captions: &[S],
        recognizer: &R,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, c) in captions.iter().enumerate() {
            for (surface, _) in caption_entities(c.as_ref(), recognizer, i)? {
                *map.entry(surface).or_insert(0) += 1;
            }
        }
        Ok(EntityFrequencies(map))
    }

    pub fn count(&self, surface: &str) -> usize {
        self.0.get(&normalize(surface)).copied().unwrap_or(0)
    }

    /// Rare means seen at most `threshold` times (unseen surfaces are rare).
    pub fn is_rare(&self, surface: &str, threshold: usize) -> bool {
        self.count(surface) <= threshold
    }
}

type EntityView = fn(&(String, EntityType), &EntityFrequencies, usize) -> bool;

/// Entity, people's-name, and rare-proper-noun precision/recall over
/// multisets of case-folded surfaces, micro-averaged across samples.
/// Precision with no predicted entities is 0, as is recall with no gold ones.
pub fn entity_prf<R: EntityRecognizer + ?Sized, S: AsRef<str>>(
    hypotheses: &[S],
    references: &[S],
    recognizer: &R,
    frequencies: &EntityFrequencies,
    rarity_threshold: usize,
) -> Result<EntityScores> {
    check_lengths(hypotheses, references)?;
    // [matched, predicted, gold] for entity, people, rare.
    let mut counts = [[0usize; 3]; 3];
    for (i, (h, r)) in hypotheses.iter().zip(references).enumerate() {
        let he = caption_entities(h.as_ref(), recognizer, i)?;
        let re = caption_entities(r.as_ref(), recognizer, i)?;
        let views: [EntityView; 3] = [
            |_, _, _| true,
            |e, _, _| e.1 == EntityType::Per,
            |e, f, t| f.is_rare(&e.0, t),
        ];
        for (slot, keep) in views.iter().enumerate() {
            let hs: Vec<&str> = he
                .iter()
                .filter(|e| keep(e, frequencies, rarity_threshold))
                .map(|e| e.0.as_str())
                .collect();
            let rs: Vec<&str> = re
                .iter()
                .filter(|e| keep(e, frequencies, rarity_threshold))
                .map(|e| e.0.as_str())
                .collect();
            counts[slot][0] += multiset_overlap(&hs, &rs);
            counts[slot][1] += hs.len();
            counts[slot][2] += rs.len();
        }
    }
    let pr = |c: [usize; 3]| PrecisionRecall::from_counts(c[0], c[1], c[2]);
    Ok(EntityScores {
        entity: pr(counts[0]),
        people: pr(counts[1]),
        rare: pr(counts[2]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub entity_p: f64,
    pub entity_r: f64,
    pub people_p: f64,
    pub people_r: f64,
    pub rare_p: f64,
    pub rare_r: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub const SCORE_NAMES: [&'static str; 9] = [
        "BLEU-4", "ROUGE-L", "CIDEr", "Entity P", "Entity R", "People P", "People R", "Rare P",
        "Rare R",
    ];

    /// Name and value of every score, in report order.
    pub fn scores(&self) -> [(&'static str, f64); 9] {
        let v = [
            self.bleu4,
            self.rouge_l,
            self.cider,
            self.entity_p,
            self.entity_r,
            self.people_p,
            self.people_r,
            self.rare_p,
            self.rare_r,
        ];
        std::array::from_fn(|i| (Self::SCORE_NAMES[i], v[i]))
    }
}

/// Scores generated captions against single references.
pub fn evaluate<R: EntityRecognizer + ?Sized, S: AsRef<str>>(
    hypotheses: &[S],
    references: &[S],
    recognizer: &R,
    frequencies: &EntityFrequencies,
    rarity_threshold: usize,
) -> Result<EvalReport> {
    check_lengths(hypotheses, references)?;
    if hypotheses.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let hyp: Vec<Vec<String>> = hypotheses
        .iter()
        .map(|h| metric_tokens(h.as_ref()))
        .collect();
    let refs: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|r| vec![metric_tokens(r.as_ref())])
        .collect();
    let ent = entity_prf(
        hypotheses,
        references,
        recognizer,
        frequencies,
        rarity_threshold,
    )?;
    Ok(EvalReport {
        bleu4: bleu4(&hyp, &refs)?,
        rouge_l: rouge_l(&hyp, &refs)?,
        cider: cider(&hyp, &refs)?,
        entity_p: ent.entity.precision,
        entity_r: ent.entity.recall,
        people_p: ent.people.precision,
        people_r: ent.people.recall,
        rare_p: ent.rare.precision,
        rare_r: ent.rare.recall,
        n_samples: hypotheses.len(),
    })
}
