use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rulecap::entity::{
    extract_entities, partition_by_type, select_top_k, slice_article, EntitySet, EntityType,
    Gazetteer, GazetteerRecognizer,
};
use rulecap::io::{read_json, read_jsonl, write_atomic, write_json_pretty, write_jsonl};
use rulecap::metrics::{evaluate, EntityFrequencies};
use rulecap::model::{ModelCheckpoint, Variant};
use rulecap::pipeline::{
    build_vocab, generate_captions, limit_samples, load_dataset, prepare_split, run_ablation_grid,
    run_experiment, train_model, write_synthetic_dataset, AblationAxes, ExperimentConfig,
    PipelineContext, Placement, SynthConfig,
};
use rulecap::rule::{
    build_frame, replace_entities, serialize_rule, FrameAnnotation, GenericObjectVocabulary,
};
use rulecap::scoring::{ImageRef, StubScorer};
use rulecap::text::{tokenize, Vocab};
use rulecap::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "rulecap", version, about = "Rule-driven news image captioning")]
struct Cli {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; replaces the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, gazetteer, and vocabulary to --out-dir.
    GenData(GenData),
    /// Recognize article entities and keep the top-k for an image.
    ExtractEntities(ExtractEntities),
    /// Turn a frame and selected entities into a serialized rule.
    BuildRule(BuildRule),
    /// Train one model and save its checkpoint.
    Train(Train),
    /// Caption a dataset split with a trained checkpoint.
    Generate(Generate),
    /// Score generated captions against references.
    Evaluate(Evaluate),
    /// Run a variant × placement grid.
    Ablate(Ablate),
    /// Run the variants and placements listed in the config.
    Experiment,
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 2400)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    vocab_size: usize,
    #[arg(long, default_value_t = 60)]
    entity_pool: usize,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    #[arg(long, default_value_t = 64)]
    d_img: usize,
    #[arg(long, default_value_t = 0.02)]
    noise_std: f64,
}

#[derive(Args)]
struct ExtractEntities {
    /// Plain-text article.
    #[arg(long)]
    article: PathBuf,
    #[arg(long)]
    gazetteer: PathBuf,
    #[arg(long)]
    image_id: String,
    /// Dataset file or directory holding the image's feature.
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    #[arg(long, default_value_t = 17)]
    scorer_seed: u64,
    #[arg(long, default_value_t = 512)]
    window: usize,
    #[arg(long, default_value_t = 256)]
    stride: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildRule {
    #[arg(long)]
    frame: PathBuf,
    /// Output of extract-entities, or a bare entity list.
    #[arg(long)]
    entities: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value = "FULL")]
    variant: Variant,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    #[arg(long, default_value = "FULL")]
    variant: Variant,
    /// P1..P4 or a comma-separated layer list; defaults to the config's first.
    #[arg(long)]
    placement: Option<Placement>,
}

#[derive(Args)]
struct Generate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    /// JSONL with `id` and `caption` per line.
    #[arg(long)]
    hyp: PathBuf,
    /// JSONL with `id` and `caption` per line.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Defaults to the config's gazetteer.
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    /// Training captions for proper-noun frequencies; defaults to --ref.
    #[arg(long)]
    train_ref: Option<PathBuf>,
    #[arg(long)]
    rarity_threshold: Option<usize>,
}

#[derive(Args)]
struct Ablate {
    /// Comma-separated variants; all four by default.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    /// Comma-separated P1..P4; all four by default.
    #[arg(long, value_delimiter = ',')]
    placements: Option<Vec<Placement>>,
}

#[derive(Serialize)]
struct ExtractOutput {
    image_id: String,
    entities: EntitySet,
    top_k: EntitySet,
}

#[derive(Serialize)]
struct RuleOutput {
    rule: rulecap::rule::SemanticRule,
    text: String,
}

#[derive(Deserialize)]
struct Captioned {
    id: String,
    caption: String,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn gen_data(cli: &Cli, a: &GenData) -> Result<()> {
    let cfg = SynthConfig {
        n_samples: a.n,
        vocab_size: a.vocab_size,
        entity_pool: a.entity_pool,
        test_fraction: a.test_fraction,
        d_img: a.d_img,
        noise_std: a.noise_std,
        seed: cli.seed.unwrap_or(0),
        ..SynthConfig::default()
    };
    let (_, manifest) = write_synthetic_dataset(&cli.out_dir, &cfg)?;
    for s in &manifest.splits {
        println!(
            "{}: {} samples -> {}",
            s.name,
            s.count,
            cli.out_dir.join(&s.file).display()
        );
    }
    Ok(())
}

fn find_image(path: &Path, split: &str, id: &str) -> Result<ImageRef> {
    let samples = load_dataset(path, split)?;
    let s = samples
        .into_iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::InvalidInput(format!("no sample with id {id}")))?;
    ImageRef::new(s.id, s.image_feature)
}

fn extract(a: &ExtractEntities) -> Result<()> {
    let text = std::fs::read_to_string(&a.article)?;
    let tokens = tokenize(&text);
    let recognizer = GazetteerRecognizer::new(Gazetteer::load(&a.gazetteer)?);
    let windows = slice_article(&tokens, a.window, a.stride)?;
    let entities = extract_entities(&windows, &recognizer)?;
    let image = find_image(&a.images, &a.split, &a.image_id)?;
    let top_k = if entities.is_empty() {
        entities.clone()
    } else {
        select_top_k(&image, &entities, &StubScorer::new(a.scorer_seed), a.top_k)?
    };
    for m in top_k.iter() {
        println!("{}\t{}\t{:.4}", m.surface, m.etype, m.score);
    }
    write_json_pretty(
        &a.out,
        &ExtractOutput {
            image_id: a.image_id.clone(),
            entities,
            top_k,
        },
    )
}

fn build_rule(a: &BuildRule) -> Result<()> {
    let annotation: FrameAnnotation = read_json(&a.frame)?;
    let value: serde_json::Value = read_json(&a.entities)?;
    let entities: EntitySet = match value.get("top_k") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => serde_json::from_value(value)?,
    };
    let vocab = GenericObjectVocabulary::load(&a.vocab)?;
    let frame = build_frame(&annotation)?;
    let mut partition = partition_by_type(&entities);
    if a.variant == Variant::PerRule {
        partition = partition.only(EntityType::Per);
    }
    let rule = match a.variant {
        Variant::NonEntity => frame.as_rule(),
        _ => replace_entities(&frame, &partition, &vocab),
    };
    let text = serialize_rule(&rule);
    println!("{text}");
    if let Some(out) = &a.out {
        write_json_pretty(out, &RuleOutput { rule, text })?;
    }
    Ok(())
}

fn train(cli: &Cli, a: &Train) -> Result<()> {
    let cfg = load_config(cli)?;
    cfg.validate()?;
    let placement = a
        .placement
        .clone()
        .unwrap_or_else(|| cfg.placements[0].clone());
    let ctx = PipelineContext::from_config(&cfg)?;
    let samples = limit_samples(
        load_dataset(&cfg.train_path, "train")?,
        cfg.max_train_samples,
    );
    let prepared = prepare_split(&samples, &ctx, a.variant)?;
    let vocab = build_vocab(&prepared, &cfg);
    let run = train_model(&cfg, &placement, a.variant, cfg.seeds[0], &prepared, &vocab)?;
    let path = cli.out_dir.join("model.json");
    ModelCheckpoint::from_model(&run.model, Some(vocab.tokens().to_vec())).save(&path)?;
    write_json_pretty(cli.out_dir.join("train_losses.json"), &run.epoch_losses)?;
    println!(
        "trained {} ({placement}) for {} steps, final loss {:.4} -> {}",
        a.variant,
        run.steps,
        run.epoch_losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn generate(cli: &Cli, a: &Generate) -> Result<()> {
    let cfg = load_config(cli)?;
    let ctx = PipelineContext::from_config(&cfg)?;
    let (model, tokens) = ModelCheckpoint::load(&a.model)?.into_model()?;
    let vocab = Vocab::from_tokens(
        tokens.ok_or_else(|| Error::Checkpoint("checkpoint has no vocabulary".into()))?,
    );
    let samples = load_dataset(&a.data, &a.split)?;
    let prepared = prepare_split(&samples, &ctx, model.variant())?;
    let captions = generate_captions(&model, &vocab, &prepared, a.beam.unwrap_or(cfg.beam_size))?;
    write_jsonl(&a.out, &captions)?;
    println!("{} captions -> {}", captions.len(), a.out.display());
    Ok(())
}

fn evaluate_cmd(cli: &Cli, a: &Evaluate) -> Result<()> {
    let cfg = load_config(cli)?;
    let hyps: Vec<Captioned> = read_jsonl(&a.hyp)?;
    let refs: Vec<Captioned> = read_jsonl(&a.reference)?;
    let by_id: HashMap<&str, &str> = refs
        .iter()
        .map(|r| (r.id.as_str(), r.caption.as_str()))
        .collect();
    let mut pairs_h = Vec::with_capacity(hyps.len());
    let mut pairs_r = Vec::with_capacity(hyps.len());
    for h in &hyps {
        let r = by_id
            .get(h.id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("no reference for {}", h.id)))?;
        pairs_h.push(h.caption.as_str());
        pairs_r.push(*r);
    }
    let gazetteer = a.gazetteer.clone().unwrap_or(cfg.gazetteer_path.clone());
    let recognizer = GazetteerRecognizer::new(Gazetteer::load(gazetteer)?);
    let freqs = match &a.train_ref {
        Some(p) => {
            let train: Vec<Captioned> = read_jsonl(p)?;
            let caps: Vec<&str> = train.iter().map(|c| c.caption.as_str()).collect();
            EntityFrequencies::from_captions(&caps, &recognizer)?
        }
        None => EntityFrequencies::from_captions(&pairs_r, &recognizer)?,
    };
    let threshold = a.rarity_threshold.unwrap_or(cfg.rarity_threshold);
    let report = evaluate(&pairs_h, &pairs_r, &recognizer, &freqs, threshold)?;
    write_json_pretty(&a.report, &report)?;
    let mut md = String::from("| Metric | Score |\n|---|---:|\n");
    for (name, v) in report.scores() {
        md.push_str(&format!("| {name} | {:.2} |\n", v * 100.0));
        println!("{name:>9}: {:6.2}", v * 100.0);
    }
    write_atomic(a.report.with_extension("md"), md.as_bytes())
}

fn ablate(cli: &Cli, a: &Ablate) -> Result<()> {
    let cfg = load_config(cli)?;
    let defaults = AblationAxes::default();
    let axes = AblationAxes {
        variants: a.variants.clone().unwrap_or(defaults.variants),
        placements: a.placements.clone().unwrap_or(defaults.placements),
    };
    let report = run_ablation_grid(&cfg, &axes, &cli.out_dir)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn experiment(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let report = run_experiment(&cfg, &cli.out_dir)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::ExtractEntities(a) => extract(a),
        Command::BuildRule(a) => build_rule(a),
        Command::Train(a) => train(cli, a),
        Command::Generate(a) => generate(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::Ablate(a) => ablate(cli, a),
        Command::Experiment => experiment(cli),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                msg.push_str(&format!("\n  caused by: {s}"));
                source = s.source();
            }
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
