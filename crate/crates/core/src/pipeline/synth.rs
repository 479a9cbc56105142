//! Templated news corpus whose image features encode the pictured event.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sample::{save_dataset, Manifest, Sample};
use crate::entity::{EntityType, Gazetteer};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rule::{FrameAnnotation, GenericObjectVocabulary, RoleObject};
use crate::scoring::embed_text_hashed;
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub test_fraction: f64,
    /// Upper bound on distinct tokens across articles and captions.
    pub vocab_size: usize,
    pub entity_pool: usize,
    /// Probabilities of PER, ORG, LOC for each pictured entity.
    pub type_proportions: [f64; 3],
    pub max_caption_entities: usize,
    pub max_distractors: usize,
    pub d_img: usize,
    /// Hash seed of the text embedding the features are built from.
    pub feature_seed: u64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 2400,
            test_fraction: 0.1,
            vocab_size: 500,
            entity_pool: 60,
            type_proportions: [0.6, 0.2, 0.2],
            max_caption_entities: 3,
            max_distractors: 2,
            d_img: 64,
            feature_seed: 17,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.type_proportions;
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(
                "type_proportions must be non-negative and sum to 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1]".into()));
        }
        if self.max_caption_entities == 0 || self.d_img == 0 {
            return Err(Error::Config(
                "max_caption_entities and d_img must be positive".into(),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        let needed: usize = (0..3).filter(|&i| p[i] > 0.0).count()
            * (self.max_caption_entities + self.max_distractors);
        if self.entity_pool < needed {
            return Err(Error::Config(format!(
                "entity_pool must be at least {needed}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub gazetteer: Gazetteer,
    pub vocabulary: GenericObjectVocabulary,
    pub entities: Vec<(String, EntityType)>,
}

const FIRST: [&str; 30] = [
    "Anna", "Ben", "Cara", "Dev", "Eve", "Finn", "Gia", "Hugo", "Ines", "Jon", "Kira", "Leo",
    "Mara", "Nils", "Omar", "Pia", "Quinn", "Rosa", "Sam", "Tara", "Uma", "Vic", "Wes", "Xena",
    "Yara", "Zane", "Ada", "Bo", "Cy", "Dina",
];
const LAST: [&str; 30] = [
    "Cole", "Ortiz", "Diaz", "Patel", "Moss", "Hale", "Brandt", "Ng", "Rossi", "Kerr", "Lund",
    "Mendez", "Novak", "Okafor", "Price", "Quist", "Reyes", "Sato", "Tran", "Ueda", "Vance",
    "Wolfe", "Xu", "Young", "Zeller", "Abbott", "Baird", "Costa", "Dunn", "Ellis",
];
const ORG_HEAD: [&str; 20] = [
    "Nova",
    "Apex",
    "Harbor",
    "Summit",
    "Cedar",
    "Falcon",
    "Granite",
    "Horizon",
    "Iron",
    "Juniper",
    "Keystone",
    "Lumen",
    "Meridian",
    "Northwind",
    "Orchid",
    "Pioneer",
    "Quarry",
    "Redwood",
    "Silver",
    "Tidal",
];
const ORG_TAIL: [&str; 5] = ["Records", "United", "Group", "Media", "Athletics"];
const CITIES: [&str; 40] = [
    "Paris",
    "Lagos",
    "Lima",
    "Oslo",
    "Boston",
    "Denver",
    "Austin",
    "Dublin",
    "Madrid",
    "Nairobi",
    "Quito",
    "Seoul",
    "Tokyo",
    "Vienna",
    "Warsaw",
    "Zurich",
    "Cairo",
    "Delhi",
    "Hanoi",
    "Kyoto",
    "Lisbon",
    "Manila",
    "Naples",
    "Prague",
    "Riga",
    "Sofia",
    "Tunis",
    "Accra",
    "Bergen",
    "Cork",
    "New Haven",
    "San Diego",
    "Cape Town",
    "Hong Kong",
    "Las Vegas",
    "New Orleans",
    "Rio Grande",
    "Salt Lake",
    "El Paso",
    "Palm Beach",
];
const VERBS: [(&str, &str); 12] = [
    ("performing", "performance"),
    ("speaking", "speech"),
    ("celebrating", "celebration"),
    ("meeting", "meeting"),
    ("protesting", "protest"),
    ("visiting", "visit"),
    ("signing", "ceremony"),
    ("training", "session"),
    ("announcing", "announcement"),
    ("competing", "competition"),
    ("marching", "march"),
    ("rehearsing", "rehearsal"),
];
const PER_GENERIC: [&str; 5] = ["people", "man", "woman", "player", "singer"];
const ORG_GENERIC: [&str; 4] = ["team", "company", "band", "group"];
const LOC_GENERIC: [&str; 4] = ["city", "stadium", "park", "theater"];
const ITEMS: [&str; 6] = ["trophy", "banner", "microphone", "guitar", "flag", "ball"];
const DAYS: [&str; 7] = [
    "Monday",
    "Tuesday",
    "Wednesday",
    "Thursday",
    "Friday",
    "Saturday",
    "Sunday",
];
const FILLER: [&str; 60] = [
    "budget", "council", "weather", "traffic", "schedule", "ticket", "season", "report", "market",
    "policy", "crowd", "stage", "audience", "press", "vote", "union", "school", "museum",
    "festival", "harbor", "bridge", "station", "library", "hospital", "airport", "garden", "tour",
    "album", "contract", "deal", "match", "league", "coach", "fans", "critics", "police", "mayor",
    "board", "panel", "survey", "forecast", "storm", "river", "street", "plaza", "campus",
    "studio", "gallery", "venue", "arena", "court", "field", "track", "route", "plan", "program",
    "project", "study", "review", "update",
];
const ADJ: [&str; 8] = [
    "busy", "quiet", "long", "short", "crowded", "calm", "tense", "festive",
];

fn build_pool(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<(String, EntityType)> {
    let mut per: Vec<String> = FIRST
        .iter()
        .flat_map(|f| LAST.iter().map(move |l| format!("{f} {l}")))
        .collect();
    let mut org: Vec<String> = ORG_HEAD
        .iter()
        .flat_map(|h| ORG_TAIL.iter().map(move |t| format!("{h} {t}")))
        .collect();
    let mut loc: Vec<String> = CITIES.iter().map(|s| s.to_string()).collect();
    per.shuffle(rng);
    org.shuffle(rng);
    loc.shuffle(rng);
    let p = cfg.type_proportions;
    let min_each = cfg.max_caption_entities + cfg.max_distractors;
    let mut counts = [0usize; 3];
    for i in 0..3 {
        if p[i] > 0.0 {
            counts[i] = ((cfg.entity_pool as f64 * p[i]).round() as usize).max(min_each);
        }
    }
    // Hand out any shortfall to the most likely type.
    let total: usize = counts.iter().sum();
    if total < cfg.entity_pool {
        let best = (0..3).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        counts[best] += cfg.entity_pool - total;
    }
    counts[1] = counts[1].min(org.len());
    counts[2] = counts[2].min(loc.len());
    let mut pool = Vec::new();
    pool.extend(
        per.into_iter()
            .take(counts[0])
            .map(|s| (s, EntityType::Per)),
    );
    pool.extend(
        org.into_iter()
            .take(counts[1])
            .map(|s| (s, EntityType::Org)),
    );
    pool.extend(
        loc.into_iter()
            .take(counts[2])
            .map(|s| (s, EntityType::Loc)),
    );
    pool
}

fn pick_type(p: &[f64; 3], rng: &mut ChaCha8Rng) -> EntityType {
    let u: f64 = rng.random();
    if u < p[0] {
        EntityType::Per
    } else if u < p[0] + p[1] {
        EntityType::Org
    } else {
        EntityType::Loc
    }
}

fn join_names(names: &[String]) -> String {
    names.join(" and ")
}

fn generic_phrase(object: &str) -> String {
    if object == "people" {
        object.to_string()
    } else {
        format!("a {object}")
    }
}

struct Event {
    verb: usize,
    frame: FrameAnnotation,
    caption: String,
    pictured: Vec<(String, EntityType)>,
}

fn make_event(cfg: &SynthConfig, pool: &[(String, EntityType)], rng: &mut ChaCha8Rng) -> Event {
    let n = rng.random_range(1..=cfg.max_caption_entities);
    let mut pictured: Vec<(String, EntityType)> = Vec::new();
    for _ in 0..n {
        let t = pick_type(&cfg.type_proportions, rng);
        let choices: Vec<&(String, EntityType)> = pool
            .iter()
            .filter(|(s, et)| *et == t && !pictured.iter().any(|(p, _)| p == s))
            .collect();
        if let Some(e) = choices.choose(rng) {
            pictured.push((*e).clone());
        }
    }
    let of = |t: EntityType| -> Vec<String> {
        pictured
            .iter()
            .filter(|e| e.1 == t)
            .map(|e| e.0.clone())
            .collect()
    };
    let (pers, orgs, locs) = (
        of(EntityType::Per),
        of(EntityType::Org),
        of(EntityType::Loc),
    );

    let verb = rng.random_range(0..VERBS.len());
    let mut roles = Vec::new();
    let agent_obj = *PER_GENERIC.choose(rng).expect("non-empty");
    roles.push(RoleObject {
        role: "Agent".into(),
        object: agent_obj.into(),
    });
    let mut caption = if pers.is_empty() {
        generic_phrase(agent_obj)
    } else {
        join_names(&pers)
    };
    caption.push(' ');
    caption.push_str(VERBS[verb].0);
    if !orgs.is_empty() || rng.random_bool(0.2) {
        let obj = *ORG_GENERIC.choose(rng).expect("non-empty");
        roles.push(RoleObject {
            role: "Partner".into(),
            object: obj.into(),
        });
        let text = if orgs.is_empty() {
            generic_phrase(obj)
        } else {
            join_names(&orgs)
        };
        caption.push_str(&format!(" with {text}"));
    }
    if rng.random_bool(0.3) {
        let item = *ITEMS.choose(rng).expect("non-empty");
        roles.push(RoleObject {
            role: "Item".into(),
            object: item.into(),
        });
        caption.push_str(&format!(" holding a {item}"));
    }
    if !locs.is_empty() || rng.random_bool(0.2) {
        let obj = *LOC_GENERIC.choose(rng).expect("non-empty");
        roles.push(RoleObject {
            role: "Place".into(),
            object: obj.into(),
        });
        let text = if locs.is_empty() {
            generic_phrase(obj)
        } else {
            join_names(&locs)
        };
        caption.push_str(&format!(" in {text}"));
    }
    Event {
        verb,
        frame: FrameAnnotation {
            verb: VERBS[verb].0.into(),
            roles,
        },
        caption,
        pictured,
    }
}

fn entity_sentence(e: &str, t: EntityType, noun: &str, rng: &mut ChaCha8Rng) -> String {
    let options: Vec<String> = match t {
        EntityType::Per => vec![
            format!("{e} spoke to reporters after the {noun} ."),
            format!("Witnesses said {e} arrived early ."),
            format!("According to officials , {e} was present ."),
        ],
        EntityType::Org => vec![
            format!("{e} issued a statement about the {noun} ."),
            format!("A spokesperson for {e} declined to comment ."),
        ],
        EntityType::Loc => vec![
            format!("Residents of {e} followed the {noun} closely ."),
            format!("The event in {e} was widely covered ."),
        ],
    };
    options.choose(rng).expect("non-empty").clone()
}

fn image_feature(
    cfg: &SynthConfig,
    event: &Event,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut v = embed_text_hashed(VERBS[event.verb].0, cfg.d_img, cfg.feature_seed);
    for (e, _) in &event.pictured {
        for (a, b) in v
            .iter_mut()
            .zip(embed_text_hashed(e, cfg.d_img, cfg.feature_seed))
        {
            *a += b;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / norm + noise.sample(rng)).collect()
}

/// Generates the corpus in memory; the same config always yields the same
/// samples.
pub fn gen_synthetic_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = build_pool(cfg, &mut rng);
    let entity_tokens: usize = pool
        .iter()
        .flat_map(|(s, _)| tokenize(s))
        .collect::<BTreeSet<_>>()
        .len();
    let fixed_words = 110;
    let n_filler = cfg
        .vocab_size
        .saturating_sub(entity_tokens + fixed_words)
        .min(FILLER.len());
    if n_filler < 4 {
        return Err(Error::Config(format!(
            "vocab_size {} leaves no room for article filler words",
            cfg.vocab_size
        )));
    }
    let filler = &FILLER[..n_filler];
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let event = make_event(cfg, &pool, &mut rng);
        let max_d = cfg.max_distractors;
        let mut n_distract = rng.random_range(0..=max_d);
        if event.pictured.len() + n_distract < 2 {
            n_distract = 2 - event.pictured.len();
        }
        let mut mentioned = event.pictured.clone();
        let others: Vec<&(String, EntityType)> =
            pool.iter().filter(|e| !mentioned.contains(e)).collect();
        for e in others.choose_multiple(&mut rng, n_distract) {
            mentioned.push((*e).clone());
        }
        mentioned.shuffle(&mut rng);

        let noun = VERBS[event.verb].1;
        let day = DAYS.choose(&mut rng).expect("non-empty");
        let mut sentences = vec![format!("The {noun} drew attention on {day} .")];
        for (e, t) in &mentioned {
            sentences.push(entity_sentence(e, *t, noun, &mut rng));
        }
        for _ in 0..rng.random_range(0..=1) {
            let a = filler.choose(&mut rng).expect("non-empty");
            let b = filler.choose(&mut rng).expect("non-empty");
            let adj = ADJ.choose(&mut rng).expect("non-empty");
            let at = rng.random_range(1..=sentences.len());
            sentences.insert(at, format!("the {a} and the {b} were {adj} ."));
        }
        let feature = image_feature(cfg, &event, &noise, &mut rng);
        samples.push(Sample {
            id: format!("syn{i:06}"),
            article: sentences.join(" "),
            caption: event.caption,
            image_feature: feature,
            frame: Some(event.frame),
            entities: None,
        });
    }
    let n_test = (cfg.n_samples as f64 * cfg.test_fraction).round() as usize;
    let test = samples.split_off(cfg.n_samples - n_test);

    let mut gazetteer = Gazetteer::new();
    for (s, t) in &pool {
        gazetteer.insert(s, *t);
    }
    Ok(SyntheticDataset {
        train: samples,
        test,
        gazetteer,
        vocabulary: GenericObjectVocabulary::default(),
        entities: pool,
    })
}

/// Writes `train.jsonl`, `test.jsonl`, `manifest.json`, `gazetteer.tsv`,
/// and `vocabulary.tsv` under `dir`.
pub fn write_synthetic_dataset(
    dir: impl AsRef<Path>,
    cfg: &SynthConfig,
) -> Result<(SyntheticDataset, Manifest)> {
    let dir = dir.as_ref();
    let data = gen_synthetic_dataset(cfg)?;
    let manifest = save_dataset(
        dir,
        cfg.d_img,
        &[("train", &data.train), ("test", &data.test)],
    )?;
    write_atomic(
        dir.join("gazetteer.tsv"),
        data.gazetteer.to_tsv().as_bytes(),
    )?;
    write_atomic(
        dir.join("vocabulary.tsv"),
        data.vocabulary.to_tsv().as_bytes(),
    )?;
    Ok((data, manifest))
}
