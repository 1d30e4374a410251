//! Prevalence estimation under diagnostic misclassification and selection
//! bias.
//!
//! The toolkit corrects apparent prevalence from an imperfect binary test
//! using validation-study estimates of sensitivity and specificity, optionally
//! combined with direct standardization to known population strata, either
//! nonparametrically or through a binary regression model. Closed-form and
//! empirical sandwich variance estimators give truncated Wald intervals, a
//! numeric-sandwich oracle cross-checks them, and a Monte Carlo engine
//! measures bias and interval coverage over factorial parameter grids.

pub mod cli;
pub mod design;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod model;
pub mod numeric;
pub mod simulation;
pub mod stacks;
pub mod variance;

pub use error::{Error, Result};
pub use estimators::{
    estimate_assay, naive_prevalence, rg_analysis, rogan_gladen, srg, srg_analysis, srgm,
    srgm_analysis, EstimationOptions,
};
pub use model::{
    EstimateFlags, Link, MainStudy, Method, PrevalenceEstimate, RegressionSpec, SampleFractions,
    StratumTable, TestRecord, ValidationStudy,
};
