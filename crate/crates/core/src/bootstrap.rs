//! Bootstrap difference-in-differences test.
//!
//! The treatment group is every user who became eligible within `w / 2` of
//! the badge introduction. Control groups are built the same way around
//! virtual badges placed away from the real one, where the badge cannot
//! have had an effect. The treatment log-likelihood ratio is then ranked
//! against the control ratios.

use rand::Rng;
use rayon::prelude::*;

use crate::basic::llr_basic;
use crate::error::{Error, Result};
use crate::model::{virtual_badge_range, Cohort, Dataset, Model, Placement, Rate, StudyConfig};
use crate::rng::{derive_seed, substream};
use crate::robust::{llr_robust, select_rate_cv};
use crate::stats::Ecdf;

/// Fewest usable control groups for which a p-value is reported.
pub const MIN_CONTROLS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualBadgeSchedule {
    /// Virtual badge times, sorted.
    pub times: Vec<f64>,
    pub placement: Placement,
    pub seed: u64,
}

/// One control group's outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutcome {
    pub tau: f64,
    /// Users whose start time fell in the control window.
    pub n_users: usize,
    /// `None` when the fit failed and the group was dropped.
    pub llr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub model: Model,
    /// Gamma rate used by the robust model.
    pub rate: Option<f64>,
    pub llr_treatment: f64,
    pub treatment_size: usize,
    pub controls: Vec<ControlOutcome>,
    pub llr_controls: Vec<f64>,
    pub ecdf: Ecdf,
    pub p_value: f64,
    pub n_controls_used: usize,
    pub n_controls_dropped: usize,
}

/// Users whose start time lies in `[tau - w/2, tau + w/2]`.
pub fn treatment_group(dataset: &Dataset, tau: f64, window: f64) -> Result<Cohort<'_>> {
    if !(window >= 0.0) {
        return Err(Error::InvalidArgument("window must be nonnegative".into()));
    }
    let cohort = dataset.centered_window(tau, window);
    if cohort.is_empty() {
        return Err(Error::EmptyTreatment {
            lo: tau - window / 2.0,
            hi: tau + window / 2.0,
        });
    }
    Ok(cohort)
}

/// Chooses virtual badge times in `[w/2, tau - w] ∪ [tau + w, T - w/2]`.
///
/// `UniformRandom` draws `n_controls` independent uniform times over the
/// union. `SlidingWindow` ignores `n_controls` and steps through each piece
/// of the union by `stride` (default `w / 4`).
pub fn place_virtual_badges(
    horizon: f64,
    tau: f64,
    window: f64,
    n_controls: usize,
    placement: Placement,
    stride: Option<f64>,
    seed: u64,
) -> Result<VirtualBadgeSchedule> {
    let range = virtual_badge_range(horizon, tau, window);
    if range.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no admissible virtual badge times for horizon {horizon}, tau {tau}, window {window}"
        )));
    }
    let mut times = match placement {
        Placement::UniformRandom => {
            let mut rng = substream(seed, 0);
            let total: f64 = range.iter().map(|(lo, hi)| hi - lo).sum();
            (0..n_controls)
                .map(|_| {
                    if total > 0.0 {
                        let mut u = rng.random::<f64>() * total;
                        for (lo, hi) in &range {
                            let len = hi - lo;
                            if u <= len {
                                return lo + u;
                            }
                            u -= len;
                        }
                        range[range.len() - 1].1
                    } else {
                        range[rng.random_range(0..range.len())].0
                    }
                })
                .collect::<Vec<f64>>()
        }
        Placement::SlidingWindow => {
            let stride = stride.unwrap_or(window / 4.0);
            if !(stride > 0.0) {
                return Err(Error::InvalidConfig(
                    "sliding-window placement needs a positive stride".into(),
                ));
            }
            let mut times = Vec::new();
            for (lo, hi) in &range {
                let steps = ((hi - lo) / stride + 1e-9).floor() as usize;
                times.extend((0..=steps).map(|i| lo + i as f64 * stride));
            }
            times
        }
    };
    times.sort_by(f64::total_cmp);
    Ok(VirtualBadgeSchedule {
        times,
        placement,
        seed,
    })
}

/// Add-one smoothed upper-tail p-value:
/// `(1 + #{control >= treatment}) / (n + 1)`.
pub fn smoothed_pvalue(llr_treatment: f64, llr_controls: &[f64]) -> f64 {
    let exceed = llr_controls.iter().filter(|c| **c >= llr_treatment).count();
    (1 + exceed) as f64 / (llr_controls.len() + 1) as f64
}

/// Log-likelihood ratio of one group at badge time `tau`.
pub fn group_llr(cohort: Cohort<'_>, tau: f64, model: Model, rate: Option<f64>) -> Result<f64> {
    match model {
        Model::Basic => llr_basic(cohort, tau),
        Model::Robust => {
            let r =
                rate.ok_or_else(|| Error::InvalidArgument("the robust model needs a rate".into()))?;
            llr_robust(cohort, tau, r)
        }
    }
}

/// Resolves the configured rate, running cross-validation over the whole
/// dataset when a grid is given. `None` for the basic model.
pub fn resolve_rate(dataset: &Dataset, config: &StudyConfig) -> Result<Option<f64>> {
    if config.model == Model::Basic {
        return Ok(None);
    }
    match &config.rate {
        Rate::Fixed(r) => Ok(Some(*r)),
        Rate::Grid(grid) => select_rate_cv(
            dataset.cohort(),
            config.tau,
            grid,
            config.folds,
            derive_seed(config.seed, &[1]),
        )
        .map(Some),
    }
}

/// Runs the full test for `config.model`.
pub fn bootstrap_test(dataset: &Dataset, config: &StudyConfig) -> Result<BootstrapResult> {
    config.validate()?;
    if dataset.horizon() != config.horizon {
        return Err(Error::InvalidConfig(format!(
            "dataset horizon {} differs from configured horizon {}",
            dataset.horizon(),
            config.horizon
        )));
    }
    let treatment = treatment_group(dataset, config.tau, config.window)?;
    let rate = resolve_rate(dataset, config)?;
    let llr_treatment = group_llr(treatment, config.tau, config.model, rate)?;
    let schedule = place_virtual_badges(
        config.horizon,
        config.tau,
        config.window,
        config.n_controls,
        config.placement,
        config.stride,
        derive_seed(config.seed, &[0]),
    )?;
    rank_against_controls(
        dataset,
        config,
        rate,
        llr_treatment,
        treatment.len(),
        &schedule,
    )
}

fn rank_against_controls(
    dataset: &Dataset,
    config: &StudyConfig,
    rate: Option<f64>,
    llr_treatment: f64,
    treatment_size: usize,
    schedule: &VirtualBadgeSchedule,
) -> Result<BootstrapResult> {
    let controls: Vec<ControlOutcome> = schedule
        .times
        .par_iter()
        .map(|&tau| {
            let cohort = dataset.centered_window(tau, config.window);
            let llr = group_llr(cohort, tau, config.model, rate)
                .ok()
                .filter(|v| !v.is_nan());
            ControlOutcome {
                tau,
                n_users: cohort.len(),
                llr,
            }
        })
        .collect();
    let llr_controls: Vec<f64> = controls.iter().filter_map(|c| c.llr).collect();
    let used = llr_controls.len();
    let dropped = controls.len() - used;
    if used < MIN_CONTROLS {
        return Err(Error::TooFewControls {
            usable: used,
            dropped,
            required: MIN_CONTROLS,
        });
    }
    Ok(BootstrapResult {
        model: config.model,
        rate,
        llr_treatment,
        treatment_size,
        p_value: smoothed_pvalue(llr_treatment, &llr_controls),
        ecdf: Ecdf::new(&llr_controls),
        controls,
        llr_controls,
        n_controls_used: used,
        n_controls_dropped: dropped,
    })
}
