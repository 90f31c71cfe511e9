//! Projection predictive feature selection for generalized linear models.
//!
//! A fitted reference model (posterior draws over some design) is projected
//! onto sparse feature subsets by minimizing the KL divergence between the
//! induced predictive distributions. The crate covers:
//!
//! - [`glm`]: exponential-family observation models and an IRLS solver.
//! - [`projection`]: draw-by-draw, single-point and clustered projections.
//! - [`search`]: forward search and L1/elastic-net ordering with relaxation.
//! - [`validation`]: K-fold, PSIS-LOO and subsampled LOO validation of the
//!   whole selection process plus model-size decision rules.
//! - [`reference`]: supervised principal components reference models and
//!   ingestion of externally produced posterior draws.
//! - [`simdata`]: the correlated-feature synthetic data mechanism.
//! - [`theory`]: executable checks of the reference-model gain identities.
//! - [`experiments`]: replication studies of relaxation and selection bias.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod experiments;
pub mod glm;
pub mod kmeans;
pub mod linalg;
pub mod projection;
pub mod reference;
pub mod rng;
pub mod search;
pub mod simdata;
pub mod theory;
pub mod validation;

pub use error::{Error, Result};
pub use glm::{DesignMatrix, Family, FitResult};
pub use projection::{PosteriorDraws, ProjectedSubmodel, ReferenceFit};
pub use search::{SearchConfig, SearchMethod, SelectionPath};
pub use validation::{PointwiseUtilities, SizeRule, UtilitySummary};
