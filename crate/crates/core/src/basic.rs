//! Shared-hazard survival model: one constant hazard before the badge and
//! another after it, common to every user.

use crate::error::{Error, Result};
use crate::model::Cohort;
use crate::stats::chi2_sf;

/// Tolerance below zero accepted for a log-likelihood ratio.
pub const LLR_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasicFit {
    /// Per-day hazard before the badge.
    pub lambda0: f64,
    /// Per-day hazard after the badge.
    pub lambda1: f64,
    pub loglik: f64,
    pub n_events_pre: usize,
    pub n_events_post: usize,
    pub exposure_pre: f64,
    pub exposure_post: f64,
    /// The pre-badge regime had no events or no exposure; `lambda0` is 0.
    pub sparse_pre: bool,
    /// Same for the post-badge regime.
    pub sparse_post: bool,
}

/// Log-likelihood of `events` exponential waiting times with total
/// `exposure` under hazard `lambda`.
pub(crate) fn exponential_loglik(events: usize, exposure: f64, lambda: f64) -> f64 {
    let mut ll = -lambda * exposure;
    if events > 0 {
        ll += events as f64 * lambda.ln();
    }
    ll
}

fn rate_estimate(events: usize, exposure: f64) -> (f64, bool) {
    if events == 0 || exposure <= 0.0 {
        (0.0, true)
    } else {
        (events as f64 / exposure, false)
    }
}

/// Maximum-likelihood fit with a single hazard for the whole period.
///
/// Events and exposure are pooled into the `pre` fields.
pub fn fit_null_basic(cohort: Cohort<'_>) -> Result<BasicFit> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let horizon = cohort.horizon;
    let (events, exposure) = cohort.records.iter().fold((0usize, 0.0), |(n, e), r| {
        let acted = r.action.observed_by(horizon).is_some() as usize;
        (n + acted, e + (r.end(horizon) - r.start).max(0.0))
    });
    if exposure <= 0.0 {
        return Err(Error::NoExposure("cohort"));
    }
    let (lambda, sparse) = rate_estimate(events, exposure);
    Ok(BasicFit {
        lambda0: lambda,
        lambda1: lambda,
        loglik: exponential_loglik(events, exposure, lambda),
        n_events_pre: events,
        n_events_post: 0,
        exposure_pre: exposure,
        exposure_post: 0.0,
        sparse_pre: sparse,
        sparse_post: sparse,
    })
}

/// Maximum-likelihood fit with separate hazards before and after `tau`.
pub fn fit_alt_basic(cohort: Cohort<'_>, tau: f64) -> Result<BasicFit> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let mut fit = BasicFit {
        lambda0: 0.0,
        lambda1: 0.0,
        loglik: 0.0,
        n_events_pre: 0,
        n_events_post: 0,
        exposure_pre: 0.0,
        exposure_post: 0.0,
        sparse_pre: false,
        sparse_post: false,
    };
    for seg in cohort.segments(tau) {
        fit.exposure_pre += seg.pre_duration;
        fit.exposure_post += seg.post_duration;
        fit.n_events_pre += seg.event_pre as usize;
        fit.n_events_post += seg.event_post as usize;
    }
    if fit.exposure_pre <= 0.0 && fit.exposure_post <= 0.0 {
        return Err(Error::NoExposure("both regimes"));
    }
    (fit.lambda0, fit.sparse_pre) = rate_estimate(fit.n_events_pre, fit.exposure_pre);
    (fit.lambda1, fit.sparse_post) = rate_estimate(fit.n_events_post, fit.exposure_post);
    fit.loglik = exponential_loglik(fit.n_events_pre, fit.exposure_pre, fit.lambda0)
        + exponential_loglik(fit.n_events_post, fit.exposure_post, fit.lambda1);
    Ok(fit)
}

/// Log-likelihood of the cohort under hazards `lambda0` before `tau` and
/// `lambda1` after it. An event in a zero-hazard regime gives `-inf`.
pub fn loglik_basic(cohort: Cohort<'_>, lambda0: f64, lambda1: f64, tau: f64) -> f64 {
    cohort
        .segments(tau)
        .map(|seg| {
            let mut ll = -(lambda0 * seg.pre_duration + lambda1 * seg.post_duration);
            if seg.event_pre {
                ll += lambda0.ln();
            }
            if seg.event_post {
                ll += lambda1.ln();
            }
            ll
        })
        .sum()
}

/// Null and alternative fits together with their log-likelihood ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasicTest {
    pub null: BasicFit,
    pub alt: BasicFit,
    pub llr: f64,
}

pub fn test_basic(cohort: Cohort<'_>, tau: f64) -> Result<BasicTest> {
    let null = fit_null_basic(cohort)?;
    let alt = fit_alt_basic(cohort, tau)?;
    Ok(BasicTest {
        null,
        alt,
        llr: alt.loglik - null.loglik,
    })
}

/// Log-likelihood ratio of the two-hazard model against the single hazard.
pub fn llr_basic(cohort: Cohort<'_>, tau: f64) -> Result<f64> {
    test_basic(cohort, tau).map(|t| t.llr)
}

/// Asymptotic p-value of a log-likelihood ratio: the deviance `2 * llr`
/// against a chi-squared distribution with one degree of freedom.
pub fn wilks_pvalue(llr: f64) -> Result<f64> {
    if llr.is_nan() || llr < -LLR_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "log-likelihood ratio must be nonnegative, got {llr}"
        )));
    }
    Ok(chi2_sf(2.0 * llr.max(0.0), 1.0))
}
