//! Experiment plumbing: configuration, datasets, optimizer, training and
//! evaluation loops, and the roadmap sweep.

mod config;
mod data;
mod optim;
mod roadmap;
mod train;

pub use config::{fingerprint_text, DatasetSpec, ExperimentConfig, LrSchedule, DEFAULT_DATA_SEED};
pub use data::{
    load_cifar10, synth_dataset, synth_dataset_with, ChannelStats, Dataset, SynthParams,
    CIFAR_FILE_BYTES, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, SYNTH_CLASSES,
};
pub use optim::{cosine_lr, AdamW};
pub use roadmap::{
    roadmap_sweep, roadmap_sweep_with, write_roadmap_csv, RoadmapRow, RoadmapStage,
    ROADMAP_CSV_HEADER, ROADMAP_STAGES,
};
pub use train::{
    evaluate, git_object_hash, head_similarity_report, linear_probe, load_datasets, train,
    train_on, EpochRecord, RunReport, StepRecord, EVAL_CHUNK, EVAL_SAMPLE_SEED, SIMILARITY_BATCH,
};
