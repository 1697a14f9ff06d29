//! Verification of data-poisoning backdoors in feedforward ReLU classifiers.
//!
//! Given a classifier and a suite of correctly classified inputs, the crate
//! either synthesizes a square trigger patch (position, pixel values, target
//! label) that pushes the suite to the target label, or proves that no such
//! patch exists up to the solver's box resolution.
//!
//! The pieces, bottom-up:
//!
//! - [`model`]: network representation, JSON loading, forward evaluation and
//!   lowering to a dense affine+ReLU chain.
//! - [`data`]: IDX/CSV ingestion and test-suite selection.
//! - [`trigger`]: patch geometry and application.
//! - [`solver`]: reduced queries over the trigger pixels, forward linear
//!   bound propagation and best-first branch-and-bound.
//! - [`verify`]: the search loop over inputs, trigger positions and labels.
//! - [`eval`]: clean accuracy, attack success rate and transfer reports.
//! - [`report`]: the JSON run report shared with the command-line tool.

pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod report;
pub mod solver;
pub mod trigger;
pub mod verify;

pub use data::{Dataset, SuiteMember, SuiteOptions, TestSuite};
pub use error::{Error, Result};
pub use eval::AttackReport;
pub use model::{AffineNetwork, AffineStage, Image, Layer, Logits, Network, Prediction, Shape};
pub use report::{RunReport, SolverStats};
pub use solver::{BlockRegion, Budget, CancelToken, ReducedQuery, SearchBox, SolveStatus, UnknownReason};
pub use trigger::{TriggerAssignment, TriggerRegion, TriggerSpec};
pub use verify::{QueryOutcome, QueryStatus, Resolution, SearchMode, Verdict, VpnConfig};
