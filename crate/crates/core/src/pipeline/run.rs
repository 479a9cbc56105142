use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, ExperimentConfig, Placement, ScorerKind};
use super::sample::{load_dataset, Sample};
use crate::entity::{
    extract_entities, partition_by_type, select_top_k, slice_article, EntitySet, EntityType,
    Gazetteer, GazetteerRecognizer,
};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json_pretty, write_jsonl};
use crate::metrics::{evaluate, EntityFrequencies, EvalReport};
use crate::model::optim::{AdamWConfig, LinearSchedule};
use crate::model::train::TrainerConfig;
use crate::model::{
    decode_beam, decode_greedy, train_step, GenerationOutput, ModelCheckpoint, ModelInput,
    RuleCapModel, RuleTokenMode, StopReason, TrainExample, Trainer, Variant,
};
use crate::rule::{
    build_frame, replace_entities, serialize_rule, GenericObjectVocabulary, SemanticRule,
};
use crate::scoring::{BilinearScorer, SimilarityScorer, StubScorer};
use crate::text::{detokenize, tokenize, Vocab};

/// Everything the per-sample stages need besides the model.
pub struct PipelineContext {
    pub recognizer: GazetteerRecognizer,
    pub vocabulary: GenericObjectVocabulary,
    pub scorer: Box<dyn SimilarityScorer>,
    pub top_k: usize,
    pub window: usize,
    pub stride: usize,
}

impl PipelineContext {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let gazetteer = Gazetteer::load(&cfg.gazetteer_path)?;
        let vocabulary = match &cfg.vocabulary_path {
            Some(p) => GenericObjectVocabulary::load(p)?,
            None => GenericObjectVocabulary::default(),
        };
        let scorer: Box<dyn SimilarityScorer> = match cfg.scorer {
            ScorerKind::Stub => Box::new(StubScorer::new(cfg.scorer_seed)),
            ScorerKind::Bilinear => {
                let path = cfg
                    .scorer_path
                    .as_ref()
                    .ok_or_else(|| Error::Config("scorer_path is required".into()))?;
                Box::new(BilinearScorer::load(path)?)
            }
        };
        Ok(PipelineContext {
            recognizer: GazetteerRecognizer::new(gazetteer),
            vocabulary,
            scorer,
            top_k: cfg.top_k,
            window: cfg.window,
            stride: cfg.stride,
        })
    }
}

/// Output of the rule stages for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedSample {
    pub id: String,
    pub variant: Variant,
    pub entities: EntitySet,
    pub rule: SemanticRule,
    pub rule_text: String,
    pub article_tokens: Vec<String>,
    pub image_feature: Vec<f64>,
    pub caption: String,
}

/// slice, extract, top-k, partition, frame, replace, serialize. Errors name
/// the failing stage and the sample.
pub fn prepare_sample(
    sample: &Sample,
    ctx: &PipelineContext,
    variant: Variant,
) -> Result<PreparedSample> {
    let id = sample.id.as_str();
    let tokens = tokenize(&sample.article);
    let all = match &sample.entities {
        Some(e) => e.clone(),
        None => {
            let windows = slice_article(&tokens, ctx.window, ctx.stride)
                .map_err(|e| e.at_stage("slice", id))?;
            extract_entities(&windows, &ctx.recognizer).map_err(|e| e.at_stage("extract", id))?
        }
    };
    let image = crate::scoring::ImageRef::new(id, sample.image_feature.clone())
        .map_err(|e| e.at_stage("top_k", id))?;
    let top = if all.is_empty() {
        all
    } else {
        select_top_k(&image, &all, ctx.scorer.as_ref(), ctx.top_k)
            .map_err(|e| e.at_stage("top_k", id))?
    };
    let mut partition = partition_by_type(&top);
    if variant == Variant::PerRule {
        partition = partition.only(EntityType::Per);
    }
    let annotation = sample.frame.as_ref().ok_or_else(|| {
        Error::InvalidFrame("sample has no frame annotation".into()).at_stage("frame", id)
    })?;
    let frame = build_frame(annotation).map_err(|e| e.at_stage("frame", id))?;
    let rule = if variant == Variant::NonEntity {
        frame.as_rule()
    } else {
        replace_entities(&frame, &partition, &ctx.vocabulary)
    };
    rule.validate().map_err(|e| e.at_stage("replace", id))?;
    let rule_text = serialize_rule(&rule);
    Ok(PreparedSample {
        id: sample.id.clone(),
        variant,
        entities: top,
        rule,
        rule_text,
        article_tokens: tokens,
        image_feature: sample.image_feature.clone(),
        caption: sample.caption.clone(),
    })
}

/// Prepares every sample for `variant`; `NON_RULE` gets full rules, which
/// the model then ignores.
pub fn prepare_split(
    samples: &[Sample],
    ctx: &PipelineContext,
    variant: Variant,
) -> Result<Vec<PreparedSample>> {
    let rule_variant = if variant == Variant::NonRule {
        Variant::Full
    } else {
        variant
    };
    samples
        .iter()
        .map(|s| prepare_sample(s, ctx, rule_variant))
        .collect()
}

/// Token vocabulary over training articles and captions.
pub fn build_vocab(train: &[PreparedSample], cfg: &ExperimentConfig) -> Vocab {
    let seqs: Vec<Vec<String>> = train
        .iter()
        .flat_map(|p| [p.article_tokens.clone(), tokenize(&p.caption)])
        .collect();
    Vocab::build(
        seqs.iter().map(|s| s.as_slice()),
        cfg.min_token_count,
        cfg.max_vocab,
    )
}

/// Rule texts fed to the model: the whole rule, or the verb followed by one
/// `role: fillers` segment per pair or one `role: filler` per filler.
pub fn rule_segments(rule: &SemanticRule, mode: RuleTokenMode) -> Vec<String> {
    match mode {
        RuleTokenMode::Pooled => vec![serialize_rule(rule)],
        RuleTokenMode::PerPair => {
            let mut out = vec![rule.verb.clone()];
            out.extend(
                rule.pairs
                    .iter()
                    .map(|p| format!("{}: {}", p.role, p.fillers.join(", "))),
            );
            out
        }
        RuleTokenMode::PerFiller => {
            let mut out = vec![rule.verb.clone()];
            out.extend(
                rule.pairs
                    .iter()
                    .flat_map(|p| p.fillers.iter().map(move |f| format!("{}: {f}", p.role))),
            );
            out
        }
    }
}

/// Model input for a prepared sample.
pub fn model_input(p: &PreparedSample, vocab: &Vocab, mode: RuleTokenMode) -> ModelInput {
    ModelInput {
        rule_texts: rule_segments(&p.rule, mode),
        image_feature: p.image_feature.clone(),
        article_ids: vocab.encode(&p.article_tokens),
    }
}

fn caption_ids(caption: &str, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    let mut ids = vocab.encode(&tokenize(caption));
    ids.truncate(max_len);
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCaption {
    pub id: String,
    pub caption: String,
    pub reference: String,
    pub rule: String,
    pub entities: Vec<String>,
    pub stop: StopReason,
}

fn decode(model: &RuleCapModel, input: &ModelInput, beam_size: usize) -> Result<GenerationOutput> {
    let ctx = model.context(input)?;
    let max_len = model.config().max_tgt_len + 1;
    if beam_size <= 1 {
        decode_greedy(model, &ctx, max_len)
    } else {
        decode_beam(model, &ctx, beam_size, max_len)
    }
}

/// Runs every stage for one sample and decodes a caption.
pub fn run_pipeline(
    sample: &Sample,
    ctx: &PipelineContext,
    model: &RuleCapModel,
    vocab: &Vocab,
    beam_size: usize,
) -> Result<GeneratedCaption> {
    let variant = match model.variant() {
        Variant::NonRule => Variant::Full,
        v => v,
    };
    let prepared = prepare_sample(sample, ctx, variant)?;
    let mut out = generate_captions(model, vocab, std::slice::from_ref(&prepared), beam_size)?;
    Ok(out.remove(0))
}

/// Decodes captions for already prepared samples.
pub fn generate_captions(
    model: &RuleCapModel,
    vocab: &Vocab,
    samples: &[PreparedSample],
    beam_size: usize,
) -> Result<Vec<GeneratedCaption>> {
    let mode = model.config().rule_tokens;
    samples
        .iter()
        .map(|p| {
            let input = model_input(p, vocab, mode);
            let out = decode(model, &input, beam_size).map_err(|e| e.at_stage("decode", &p.id))?;
            Ok(GeneratedCaption {
                id: p.id.clone(),
                caption: detokenize(&vocab.decode(&out.tokens)),
                reference: p.caption.clone(),
                rule: p.rule_text.clone(),
                entities: p.entities.iter().map(|m| m.surface.clone()).collect(),
                stop: out.stop,
            })
        })
        .collect()
}

pub struct TrainedRun {
    pub model: RuleCapModel,
    pub trainer: TrainerConfig,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Builds the model for `variant` and trains it on `train` with seeded
/// shuffling. Variants built from the same seed share every parameter
/// outside the rule machinery.
pub fn train_model(
    cfg: &ExperimentConfig,
    placement: &Placement,
    variant: Variant,
    seed: u64,
    train: &[PreparedSample],
    vocab: &Vocab,
) -> Result<TrainedRun> {
    if train.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let mut mc = cfg.model_config(placement, vocab.len())?;
    mc.init_seed = derive_seed(seed, "init");
    let mut model = RuleCapModel::new(mc.clone())?;
    model.set_variant(variant)?;
    if variant != Variant::NonRule {
        model.rule_in_input = cfg.rule_in_input;
        model.rule_injection = cfg.rule_injection;
    }
    let examples: Vec<TrainExample> = train
        .iter()
        .map(|p| TrainExample {
            input: model_input(p, vocab, mc.rule_tokens),
            target: caption_ids(&p.caption, vocab, mc.max_tgt_len),
        })
        .collect();
    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let trainer_cfg = TrainerConfig {
        adamw: AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        schedule: LinearSchedule {
            peak_lr: cfg.lr,
            warmup_steps: cfg.warmup_steps.min(total),
            total_steps: total,
        },
        clip_norm: cfg.clip_norm,
    };
    let mut trainer = Trainer::new(trainer_cfg, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle"));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch: Vec<TrainExample> = Vec::with_capacity(cfg.batch_size);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            sum += train_step(&mut model, &mut trainer, &batch, step)?;
            step += 1;
        }
        let mean = sum / per_epoch as f64;
        log::info!(
            "{} {placement} seed {seed} epoch {}: loss {mean:.4}",
            variant,
            epoch + 1
        );
        epoch_losses.push(mean);
    }
    Ok(TrainedRun {
        model,
        trainer: trainer_cfg,
        epoch_losses,
        steps: step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub variant: Variant,
    pub placement: Option<Placement>,
    pub inject_layers: Vec<usize>,
    pub seed: u64,
    pub derived_seeds: BTreeMap<String, u64>,
    pub trainer: TrainerConfig,
    pub epochs: usize,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub n_params: usize,
    pub vocab_size: usize,
    pub metrics: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: Variant,
    pub placement: Option<Placement>,
    pub inject_layers: Vec<usize>,
    /// `None` for rows averaged over seeds.
    pub seed: Option<u64>,
    pub metrics: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config: ExperimentConfig,
    pub runs: Vec<ReportRow>,
    pub summary: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn summary_row(
        &self,
        variant: Variant,
        placement: Option<&Placement>,
    ) -> Option<&ReportRow> {
        self.summary
            .iter()
            .find(|r| r.variant == variant && r.placement.as_ref() == placement)
    }

    pub fn runs_for(&self, variant: Variant, placement: Option<&Placement>) -> Vec<&ReportRow> {
        self.runs
            .iter()
            .filter(|r| r.variant == variant && r.placement.as_ref() == placement)
            .collect()
    }

    /// Markdown table with scores ×100, summary rows first.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("# {}\n\n", self.name);
        let header = |s: &mut String| {
            s.push_str("| Variant | Placement | Seed |");
            for name in EvalReport::SCORE_NAMES {
                let _ = write!(s, " {name} |");
            }
            s.push_str("\n|---|---|---|");
            for _ in 0..9 {
                s.push_str("---:|");
            }
            s.push('\n');
        };
        let row = |s: &mut String, r: &ReportRow| {
            let placement = r
                .placement
                .as_ref()
                .map_or("-".to_string(), |p| p.to_string());
            let seed = r.seed.map_or("mean".to_string(), |v| v.to_string());
            let _ = write!(s, "| {} | {placement} | {seed} |", r.variant);
            for (_, v) in r.metrics.scores() {
                let _ = write!(s, " {:.2} |", v * 100.0);
            }
            s.push('\n');
        };
        s.push_str("## Summary\n\n");
        header(&mut s);
        for r in &self.summary {
            row(&mut s, r);
        }
        s.push_str("\n## Runs\n\n");
        header(&mut s);
        for r in &self.runs {
            row(&mut s, r);
        }
        s
    }
}

fn mean_report(reports: &[&EvalReport]) -> EvalReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    EvalReport {
        bleu4: avg(|r| r.bleu4),
        rouge_l: avg(|r| r.rouge_l),
        cider: avg(|r| r.cider),
        entity_p: avg(|r| r.entity_p),
        entity_r: avg(|r| r.entity_r),
        people_p: avg(|r| r.people_p),
        people_r: avg(|r| r.people_r),
        rare_p: avg(|r| r.rare_p),
        rare_r: avg(|r| r.rare_r),
        n_samples: reports.first().map_or(0, |r| r.n_samples),
    }
}

pub fn limit_samples<T>(items: Vec<T>, limit: Option<usize>) -> Vec<T> {
    match limit {
        Some(n) => items.into_iter().take(n).collect(),
        None => items,
    }
}

/// Trains and evaluates every (seed, placement, variant) combination in the
/// config, writing per-run metadata and captions under `out_dir/runs` and
/// `report.json` plus `report.md` under `out_dir`. `NON_RULE` ignores the
/// placement and runs once per seed.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: impl AsRef<Path>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let ctx = PipelineContext::from_config(cfg)?;
    let train = limit_samples(
        load_dataset(&cfg.train_path, "train")?,
        cfg.max_train_samples,
    );
    let test = limit_samples(load_dataset(&cfg.test_path, "test")?, cfg.max_test_samples);
    if test.is_empty() {
        return Err(Error::InvalidInput("test split is empty".into()));
    }

    let mut variants: Vec<Variant> = Vec::new();
    for v in &cfg.variants {
        if !variants.contains(v) {
            variants.push(*v);
        }
    }
    let mut prepared: BTreeMap<&'static str, (Vec<PreparedSample>, Vec<PreparedSample>)> =
        BTreeMap::new();
    for v in &variants {
        prepared.insert(
            v.as_str(),
            (
                prepare_split(&train, &ctx, *v)?,
                prepare_split(&test, &ctx, *v)?,
            ),
        );
    }
    let (any_train, _) = prepared.values().next().expect("at least one variant");
    let vocab = build_vocab(any_train, cfg);
    let train_captions: Vec<&str> = train.iter().map(|s| s.caption.as_str()).collect();
    let freqs = EntityFrequencies::from_captions(&train_captions, &ctx.recognizer)?;
    log::info!(
        "{}: {} train / {} test samples, vocabulary {}",
        cfg.name,
        train.len(),
        test.len(),
        vocab.len()
    );

    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for v in &variants {
            let placements: Vec<Option<&Placement>> = if *v == Variant::NonRule {
                vec![None]
            } else {
                cfg.placements.iter().map(Some).collect()
            };
            for placement in placements {
                let p = placement.cloned().unwrap_or(Placement::Custom(Vec::new()));
                let (tr, te) = &prepared[v.as_str()];
                let run = train_model(cfg, &p, *v, seed, tr, &vocab)?;
                let captions = generate_captions(&run.model, &vocab, te, cfg.beam_size)?;
                let hyps: Vec<&str> = captions.iter().map(|c| c.caption.as_str()).collect();
                let refs: Vec<&str> = captions.iter().map(|c| c.reference.as_str()).collect();
                let metrics =
                    evaluate(&hyps, &refs, &ctx.recognizer, &freqs, cfg.rarity_threshold)?;
                let inject_layers = if *v == Variant::NonRule {
                    Vec::new()
                } else {
                    run.model.config().inject_layers.clone()
                };
                let tag = format!(
                    "{}_{}_s{seed}",
                    v.as_str(),
                    placement.map_or("none".to_string(), |p| p.to_string())
                );
                let run_dir = out_dir.join("runs").join(&tag);
                let meta = RunMetadata {
                    variant: *v,
                    placement: placement.cloned(),
                    inject_layers: inject_layers.clone(),
                    seed,
                    derived_seeds: ["init", "shuffle"]
                        .iter()
                        .map(|n| (n.to_string(), derive_seed(seed, n)))
                        .collect(),
                    trainer: run.trainer,
                    epochs: cfg.epochs,
                    steps: run.steps,
                    epoch_losses: run.epoch_losses.clone(),
                    n_params: run.model.params.num_scalars(),
                    vocab_size: vocab.len(),
                    metrics,
                };
                write_json_pretty(run_dir.join("metadata.json"), &meta)?;
                write_jsonl(run_dir.join("captions.jsonl"), &captions)?;
                if cfg.save_checkpoints {
                    ModelCheckpoint::from_model(&run.model, Some(vocab.tokens().to_vec()))
                        .save(run_dir.join("model.json"))?;
                }
                log::info!(
                    "{tag}: CIDEr {:.2} entity R {:.2}",
                    metrics.cider * 100.0,
                    metrics.entity_r * 100.0
                );
                runs.push(ReportRow {
                    variant: *v,
                    placement: placement.cloned(),
                    inject_layers,
                    seed: Some(seed),
                    metrics,
                });
            }
        }
    }

    let mut summary: Vec<ReportRow> = Vec::new();
    for r in &runs {
        if summary
            .iter()
            .any(|s| s.variant == r.variant && s.placement == r.placement)
        {
            continue;
        }
        let group: Vec<&EvalReport> = runs
            .iter()
            .filter(|x| x.variant == r.variant && x.placement == r.placement)
            .map(|x| &x.metrics)
            .collect();
        summary.push(ReportRow {
            variant: r.variant,
            placement: r.placement.clone(),
            inject_layers: r.inject_layers.clone(),
            seed: None,
            metrics: mean_report(&group),
        });
    }
    let report = ExperimentReport {
        name: cfg.name.clone(),
        config: cfg.clone(),
        runs,
        summary,
    };
    write_json_pretty(out_dir.join("report.json"), &report)?;
    write_atomic(out_dir.join("report.md"), report.to_markdown().as_bytes())?;
    Ok(report)
}

/// Which variants and placements an ablation grid covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationAxes {
    pub variants: Vec<Variant>,
    pub placements: Vec<Placement>,
}

impl Default for AblationAxes {
    fn default() -> Self {
        AblationAxes {
            variants: Variant::ALL.to_vec(),
            placements: Placement::PARTS.to_vec(),
        }
    }
}

/// Runs the requested variant × placement grid with the base config's
/// seeds shared by every cell.
pub fn run_ablation_grid(
    base: &ExperimentConfig,
    axes: &AblationAxes,
    out_dir: impl AsRef<Path>,
) -> Result<ExperimentReport> {
    let mut cfg = base.clone();
    cfg.variants = axes.variants.clone();
    cfg.placements = axes.placements.clone();
    run_experiment(&cfg, out_dir)
}
