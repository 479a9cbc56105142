//! Python bindings: entity extraction, rule construction, scoring,
//! metrics, model loading and generation, and experiment runs.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use rulecap::entity::{
    extract_entities, partition_by_type, select_top_k, slice_article, EntityMention, EntitySet,
    EntityType, Gazetteer, GazetteerRecognizer,
};
use rulecap::metrics::{self, metric_tokens};
use rulecap::model::{
    decode_beam, decode_greedy, ModelCheckpoint, ModelInput, RuleCapModel, Variant,
};
use rulecap::pipeline::{self, rule_segments, ExperimentConfig, SynthConfig};
use rulecap::rule::{
    self, build_frame, replace_entities, serialize_rule, FrameAnnotation, GenericObjectVocabulary,
};
use rulecap::scoring::{self, ImageRef, StubScorer};
use rulecap::text::{self, detokenize, Vocab};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Mention = (String, String, usize, usize, f64);

fn to_tuple(m: &EntityMention) -> Mention {
    (
        m.surface.clone(),
        m.etype.to_string(),
        m.span.0,
        m.span.1,
        m.score,
    )
}

fn from_tuples(items: Vec<Mention>) -> PyResult<EntitySet> {
    let mentions = items
        .into_iter()
        .map(|(surface, etype, start, end, score)| {
            let etype: EntityType = etype.parse().map_err(err)?;
            let mut m = EntityMention::new(surface, etype, (start, end)).map_err(err)?;
            m.score = score;
            Ok(m)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(EntitySet::from_ordered(mentions))
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    text::tokenize(text)
}

/// Gazetteer-backed entity recognizer.
#[pyclass(name = "Recognizer")]
struct PyRecognizer {
    inner: GazetteerRecognizer,
}

#[pymethods]
impl PyRecognizer {
    /// Builds from gazetteer TSV text (`surface<TAB>type` per line).
    #[new]
    fn new(gazetteer_tsv: &str) -> PyResult<Self> {
        Ok(PyRecognizer {
            inner: GazetteerRecognizer::new(Gazetteer::parse_tsv(gazetteer_tsv).map_err(err)?),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyRecognizer {
            inner: GazetteerRecognizer::new(Gazetteer::load(path).map_err(err)?),
        })
    }

    /// Entities of an article as `(surface, type, start, end, score)`.
    #[pyo3(signature = (article, window = 512, stride = 256))]
    fn extract(&self, article: &str, window: usize, stride: usize) -> PyResult<Vec<Mention>> {
        let tokens = text::tokenize(article);
        let windows = slice_article(&tokens, window, stride).map_err(err)?;
        let set = extract_entities(&windows, &self.inner).map_err(err)?;
        Ok(set.iter().map(to_tuple).collect())
    }
}

/// Hashed bag-of-words cosine between an image feature and a text.
#[pyfunction]
#[pyo3(signature = (feature, text, seed = 17))]
fn stub_score(feature: Vec<f64>, text: &str, seed: u64) -> PyResult<f64> {
    let image = ImageRef::new("image", feature).map_err(err)?;
    Ok(scoring::stub_score(&image, text, seed))
}

/// Keeps the k entities most similar to the image under the stub scorer.
#[pyfunction]
#[pyo3(signature = (feature, entities, k = 3, seed = 17))]
fn select_top_k_entities(
    feature: Vec<f64>,
    entities: Vec<Mention>,
    k: usize,
    seed: u64,
) -> PyResult<Vec<Mention>> {
    let image = ImageRef::new("image", feature).map_err(err)?;
    let set = from_tuples(entities)?;
    let top = select_top_k(&image, &set, &StubScorer::new(seed), k).map_err(err)?;
    Ok(top.iter().map(to_tuple).collect())
}

/// Builds the serialized rule for a frame (JSON text) and selected entities.
#[pyfunction]
#[pyo3(signature = (frame_json, entities, vocabulary_tsv = None, variant = "FULL"))]
fn build_rule(
    frame_json: &str,
    entities: Vec<Mention>,
    vocabulary_tsv: Option<&str>,
    variant: &str,
) -> PyResult<String> {
    let annotation: FrameAnnotation = serde_json::from_str(frame_json).map_err(err)?;
    let frame = build_frame(&annotation).map_err(err)?;
    let vocab = match vocabulary_tsv {
        Some(t) => GenericObjectVocabulary::parse_tsv(t).map_err(err)?,
        None => GenericObjectVocabulary::default(),
    };
    let variant: Variant = variant.parse().map_err(err)?;
    let mut partition = partition_by_type(&from_tuples(entities)?);
    if variant == Variant::PerRule {
        partition = partition.only(EntityType::Per);
    }
    let rule = match variant {
        Variant::NonEntity => frame.as_rule(),
        _ => replace_entities(&frame, &partition, &vocab),
    };
    Ok(serialize_rule(&rule))
}

type RolePairs = Vec<(String, Vec<String>)>;

/// Parses canonical rule text into `(verb, [(role, [fillers])])`.
#[pyfunction]
fn parse_rule(text: &str) -> PyResult<(String, RolePairs)> {
    let r = rule::parse_rule(text).map_err(err)?;
    Ok((
        r.verb,
        r.pairs.into_iter().map(|p| (p.role, p.fillers)).collect(),
    ))
}

fn corpus(hyps: &[String], refs: &[String]) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    (
        hyps.iter().map(|h| metric_tokens(h)).collect(),
        refs.iter().map(|r| vec![metric_tokens(r)]).collect(),
    )
}

#[pyfunction]
fn bleu4(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    let (h, r) = corpus(&hypotheses, &references);
    metrics::bleu4(&h, &r).map_err(err)
}

#[pyfunction]
fn rouge_l(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    let (h, r) = corpus(&hypotheses, &references);
    metrics::rouge_l(&h, &r).map_err(err)
}

#[pyfunction]
fn cider(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    let (h, r) = corpus(&hypotheses, &references);
    metrics::cider(&h, &r).map_err(err)
}

/// A trained captioning model with its token vocabulary.
#[pyclass(name = "Model")]
struct PyModel {
    model: RuleCapModel,
    vocab: Vocab,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (model, tokens) = ModelCheckpoint::load(path)
            .map_err(err)?
            .into_model()
            .map_err(err)?;
        let tokens = tokens.ok_or_else(|| err("checkpoint has no vocabulary"))?;
        Ok(PyModel {
            model,
            vocab: Vocab::from_tokens(tokens),
        })
    }

    #[getter]
    fn variant(&self) -> String {
        self.model.variant().to_string()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.params.num_scalars()
    }

    /// Captions one sample given its serialized rule, image feature, and article.
    #[pyo3(signature = (rule, image_feature, article, beam_size = 1))]
    fn generate(
        &self,
        rule: &str,
        image_feature: Vec<f64>,
        article: &str,
        beam_size: usize,
    ) -> PyResult<String> {
        let parsed = rule::parse_rule(rule).map_err(err)?;
        let input = ModelInput {
            rule_texts: rule_segments(&parsed, self.model.config().rule_tokens),
            image_feature,
            article_ids: self.vocab.encode(&text::tokenize(article)),
        };
        let ctx = self.model.context(&input).map_err(err)?;
        let max_len = self.model.config().max_tgt_len + 1;
        let out = if beam_size <= 1 {
            decode_greedy(&self.model, &ctx, max_len)
        } else {
            decode_beam(&self.model, &ctx, beam_size, max_len)
        }
        .map_err(err)?;
        Ok(detokenize(&self.vocab.decode(&out.tokens)))
    }
}

/// Writes a synthetic corpus to `out_dir`; returns `(n_train, n_test)`.
#[pyfunction]
#[pyo3(signature = (out_dir, n_samples = 2400, seed = 0))]
fn gen_synthetic_dataset(out_dir: &str, n_samples: usize, seed: u64) -> PyResult<(usize, usize)> {
    let cfg = SynthConfig {
        n_samples,
        seed,
        ..SynthConfig::default()
    };
    let (data, _) = pipeline::write_synthetic_dataset(out_dir, &cfg).map_err(err)?;
    Ok((data.train.len(), data.test.len()))
}

/// Runs the experiment described by a TOML/JSON config; returns the report
/// as JSON text.
#[pyfunction]
fn run_experiment(config_path: &str, out_dir: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::load(config_path).map_err(err)?;
    let report = pipeline::run_experiment(&cfg, out_dir).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

#[pymodule(name = "rulecap")]
fn rulecap_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRecognizer>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(stub_score, m)?)?;
    m.add_function(wrap_pyfunction!(select_top_k_entities, m)?)?;
    m.add_function(wrap_pyfunction!(build_rule, m)?)?;
    m.add_function(wrap_pyfunction!(parse_rule, m)?)?;
    m.add_function(wrap_pyfunction!(bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(cider, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
