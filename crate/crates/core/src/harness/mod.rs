//! Synthetic data, on-disk datasets, experiment configuration and the
//! end-to-end pipeline behind the command-line tool.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod phantom;

pub use config::{ExperimentConfig, MaskKind, MaskSpec, Mode, Seeds};
pub use dataset::{DatasetContainer, Manifest, DATASET_FORMAT};
pub use experiment::{
    evaluate, make_phantom, run_experiment, sample, train, uncertainty, undersample, EvalReport, QuantData,
    QuantReport, RunLayout, RunReport, StaticData, StaticReport, TrainSummary, UncertaintyReport,
};
pub use phantom::{default_regions, make_quant_phantom, make_static_phantom, Contrast, PhantomSpec, TissueRegion};
