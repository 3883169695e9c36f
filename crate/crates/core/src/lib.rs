//! Dual-pathway streaming phase classification.
//!
//! A linear head classifies each frame feature. Two refinement pathways
//! operate alongside it: a memory of reliable past frames of the same
//! stream, and banks of hard training samples retrieved by similarity.
//! Confidence-driven gates decide how much of each refined feature is added
//! before the head classifies again.
//!
//! ```
//! use dsted_core::{generate, split, train, evaluate_model, TrainConfig, WorkflowSpec};
//!
//! let spec = WorkflowSpec { mean_durations: vec![30.0, 30.0, 30.0], skip_probs: vec![0.0; 3], dim: 8,
//!     confusable_pairs: vec![], ..WorkflowSpec::default_benchmark() };
//! let data = generate(&spec, 4, 1).unwrap();
//! let (train_set, test_set) = split(&data, 0.5, 1).unwrap();
//! let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
//! let trained = train(&train_set, 3, &cfg, 7).unwrap();
//! let (report, _) = evaluate_model(&trained.model, &test_set).unwrap();
//! assert!(report.accuracy >= 0.0);
//! ```

pub mod error;
pub mod eval;
pub mod gate;
pub mod model;
pub mod numerics;
pub mod rmp;
pub mod synth;
pub mod upr;

pub use error::{Error, Result};
pub use eval::{ablation_run, evaluate, evaluate_model, sweep, AblationTable, MetricsReport, SweepTable};
pub use gate::{ClassifierHead, GateParams};
pub use model::{
    forward_frame, grad_check, run_sequence, run_sequences, train, Checkpoint, FrameRecord, Model, PipelineParams,
    SequenceResult, Session, TrainConfig, TrainedModel, Variant,
};
pub use numerics::PhaseDistribution;
pub use rmp::{FusionLayer, MemoryBank, MemoryEntry, RmpConfig};
pub use synth::{generate, split, LabeledSequence, WorkflowSpec};
pub use upr::{PolicyMode, PolicyNet, Prototype, PrototypeBankSet, UprConfig};
