//! Matrix factorization for implicit feedback trained with BPR and with
//! adversarial personalized ranking (APR), plus a perturbation robustness
//! probe and a full-ranking leave-one-out evaluator.

pub mod apr;
pub mod bpr;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod synthetic;
pub mod train;

pub use apr::{apr_batch_step, apr_gradients, apr_instance_loss, build_adv_perturbations, train_apr, AprConfig};
pub use bpr::{bpr_batch_step, bpr_gradients, bpr_instance_loss, continue_bpr, train_bpr, TrainConfig};
pub use config::RunConfig;
pub use dataset::{
    ingest, read_split, split_leave_one_out, write_split, IngestOptions, InteractionDataset, RawInteraction,
    SplitDataset, Target, Triplet,
};
pub use error::{Error, Result};
pub use evaluator::{evaluate, itempop_scorer, paired_significance, EvalReport, Scorer};
pub use model::{FactorModel, PerturbationField, Stage};
pub use optim::{Optimizer, OptimizerState};
pub use probe::{probe_sweep, Mode, ProbeReport};
pub use train::{write_history, EpochRecord, TrainOutcome};
