//! Dataset format, synthetic corpus generation, experiment configuration,
//! and the train/generate/evaluate orchestration.

pub mod config;
pub mod run;
pub mod sample;
pub mod synth;

pub use config::{derive_seed, ExperimentConfig, Placement, ScorerKind};
pub use run::{
    build_vocab, generate_captions, limit_samples, model_input, prepare_sample, prepare_split,
    rule_segments, run_ablation_grid, run_experiment, run_pipeline, train_model, AblationAxes,
    ExperimentReport, GeneratedCaption, PipelineContext, PreparedSample, ReportRow, RunMetadata,
    TrainedRun,
};
pub use sample::{load_dataset, save_dataset, Manifest, Sample, SplitInfo};
pub use synth::{gen_synthetic_dataset, write_synthetic_dataset, SynthConfig, SyntheticDataset};
