//! Survival-based causal inference for first-time badges.
//!
//! Users become eligible for an action at a start time and may perform it
//! once. A badge introduced at `tau` may change the hazard of acting. The
//! crate fits piecewise-constant hazard models (shared or Gamma
//! heterogeneous), compares the badge window against virtual-badge control
//! windows with a bootstrap difference-in-differences test, and provides the
//! synthetic generators, balance checks and counterfactual simulations used
//! to evaluate and apply the test.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basic;
pub mod bootstrap;
pub mod cohort;
pub mod counterfactual;
pub mod error;
pub mod io;
pub mod model;
pub mod rng;
pub mod robust;
pub mod stats;
pub mod synth;

pub use basic::{fit_alt_basic, fit_null_basic, llr_basic, loglik_basic, wilks_pvalue, BasicFit};
pub use bootstrap::{
    bootstrap_test, place_virtual_badges, treatment_group, BootstrapResult, VirtualBadgeSchedule,
};
pub use cohort::{
    balance_rows, balance_table, fit_grouped, intensity_series, moods_median_test,
    popularity_buckets, smd, BalanceRow, CovariateTable, GroupedFit, GroupedReport,
    IntensitySeries,
};
pub use counterfactual::{
    compare_worlds, fit_bounty_model, fit_wiki_hazards, observed_series, popularity_ranks,
    simulate_counterfactual_wikis, time_grid, CounterfactualSeries, Question, Scenario, TagEntity,
};
pub use error::{Error, Result};
pub use model::{
    exposure_segments, validate_dataset, ActionTime, Cohort, Dataset, EventRecord,
    ExposureSegments, Model, Placement, Rate, StudyConfig,
};
pub use robust::{
    fit_alt_robust, fit_null_robust, fit_null_robust_split, llr_robust, marginal_segment_loglik,
    select_rate_cv, RobustFit,
};
pub use synth::{
    calibrate_effect, run_power_study, simulate_cohort, simulate_user, Coupling, Effect, Method,
    PowerCurve, SynthSpec,
};
