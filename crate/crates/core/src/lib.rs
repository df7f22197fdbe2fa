//! Identification of switched Markov polynomial NARX models.
//!
//! The crate covers the full pipeline: simulating switched systems,
//! building polynomial regressors, scaled forward-backward inference,
//! weighted ℓ1 regression with optional hard thresholding, the EM loop
//! that ties them together, and evaluation against a known ground truth.

pub mod basis;
pub mod dataset;
pub mod em;
pub mod gram;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod simulate;
pub mod solver;
pub mod study;
pub mod tuning;

pub use basis::{enumerate_basis, BasisConfig, DesignMatrix, LaggedVector, PolynomialBasis};
pub use dataset::{split_dataset, Segment, Split, TrajectoryDataset};
pub use em::{fit, EmError, FitConfig, FitReport, Variant};
pub use metrics::{evaluate, match_modes, EvaluationReport};
pub use inference::{filter_sequence, forward_backward, PosteriorSet, SegmentPosterior};
pub use model::SmnarxModel;
pub use simulate::{benchmark_system, simulate, InputLaw, TrueSystem};
pub use solver::{hard_threshold, solve_gram_lasso, solve_weighted_lasso, GramSystem, SolverSettings};
pub use study::{run_study, StudyReport, StudySettings};
pub use tuning::{grid_search_lambda, GridSearchResult};
