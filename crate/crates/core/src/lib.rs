//! Spatio-temporal count forecasting with negative-binomial hierarchical
//! models, distributed-lag climate effects and structured random effects.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod lagbasis;
pub mod forecast;
pub mod infer;
pub mod model;
pub mod simulate;
pub mod panel;
pub mod sparse;
pub mod stats;
pub mod structures;

pub use lagbasis::{CrossBasis, ExposureBasis, LagWindow, SplineSpec};
pub use panel::{
    CasePanel, CovariatePanel, ExpectedPanel, Month, MonthWindow, PopulationPanel, RiskPanel,
};
pub use structures::{ProximityMatrix, SpatialStructure};
pub use model::{assemble, AssembledModel, BasisKind, ModelData, ModelSpec};
pub use infer::{fit, FitConfig, PosteriorFit};
pub use forecast::{predict, ForecastConfig, ForecastPanel};
pub use simulate::{simulate, SimConfig};
