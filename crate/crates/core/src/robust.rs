//! Heterogeneous survival model. Each user draws a pre-badge hazard from
//! `Gamma(k0, r)` and an independent post-badge hazard from `Gamma(k1, r)`.
//! Integrating the hazards out turns every exposure segment into a Lomax
//! waiting time with survival `(r / (r + d))^k`, and the shape estimates
//! have a closed form for a given rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Cohort, EventRecord, ExposureSegments};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustFit {
    pub k0: f64,
    pub k1: f64,
    pub r: f64,
    pub loglik: f64,
    /// `k0 / r`, the mean per-day hazard before the badge.
    pub mean_intensity_pre: f64,
    /// `k1 / r`.
    pub mean_intensity_post: f64,
    pub n_events_pre: usize,
    pub n_events_post: usize,
    /// `sum ln(1 + d / r)` over pre-badge segments.
    pub log_exposure_pre: f64,
    pub log_exposure_post: f64,
    pub sparse_pre: bool,
    pub sparse_post: bool,
}

/// Marginal log-likelihood of one exposure segment of length `duration`
/// that ends in an event or is censored.
pub fn marginal_segment_loglik(duration: f64, event: bool, k: f64, r: f64) -> f64 {
    if k == 0.0 {
        return if event { f64::NEG_INFINITY } else { 0.0 };
    }
    let log_survival = -k * (duration / r).ln_1p();
    if event {
        k.ln() - (r + duration).ln() + log_survival
    } else {
        log_survival
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    events: usize,
    log_exposure: f64,
}

impl Tally {
    fn add(&mut self, duration: f64, event: bool, r: f64) {
        self.events += event as usize;
        self.log_exposure += (duration / r).ln_1p();
    }

    fn shape(&self) -> (f64, bool) {
        if self.events == 0 || self.log_exposure <= 0.0 {
            (0.0, true)
        } else {
            (self.events as f64 / self.log_exposure, false)
        }
    }
}

fn check_rate(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "rate must be positive, got {r}"
        )))
    }
}

fn segments_loglik<'a>(
    segments: impl Iterator<Item = ExposureSegments> + 'a,
    k0: f64,
    k1: f64,
    r: f64,
) -> f64 {
    segments
        .map(|seg| {
            let mut ll = 0.0;
            if seg.pre_duration > 0.0 || seg.event_pre {
                ll += marginal_segment_loglik(seg.pre_duration, seg.event_pre, k0, r);
            }
            if seg.post_duration > 0.0 || seg.event_post {
                ll += marginal_segment_loglik(seg.post_duration, seg.event_post, k1, r);
            }
            ll
        })
        .sum()
}

fn build_fit(pre: Tally, post: Tally, k0: f64, k1: f64, r: f64, loglik: f64) -> RobustFit {
    RobustFit {
        k0,
        k1,
        r,
        loglik,
        mean_intensity_pre: k0 / r,
        mean_intensity_post: k1 / r,
        n_events_pre: pre.events,
        n_events_post: post.events,
        log_exposure_pre: pre.log_exposure,
        log_exposure_post: post.log_exposure,
        sparse_pre: pre.events == 0 || pre.log_exposure <= 0.0,
        sparse_post: post.events == 0 || post.log_exposure <= 0.0,
    }
}

/// Shape estimate when each user keeps a single latent hazard for the whole
/// observation period. Events and exposure are pooled into the `pre`
/// fields and `loglik` is the single-segment marginal likelihood.
pub fn fit_null_robust(cohort: Cohort<'_>, r: f64) -> Result<RobustFit> {
    check_rate(r)?;
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let horizon = cohort.horizon;
    let mut tally = Tally::default();
    for rec in cohort.records {
        let duration = (rec.end(horizon) - rec.start).max(0.0);
        tally.add(duration, rec.action.observed_by(horizon).is_some(), r);
    }
    if tally.log_exposure <= 0.0 {
        return Err(Error::NoExposure("cohort"));
    }
    let (k, _) = tally.shape();
    let loglik = cohort
        .records
        .iter()
        .map(|rec| {
            let duration = (rec.end(horizon) - rec.start).max(0.0);
            marginal_segment_loglik(duration, rec.action.observed_by(horizon).is_some(), k, r)
        })
        .sum();
    Ok(build_fit(tally, Tally::default(), k, k, r, loglik))
}

fn tally_regimes(cohort: Cohort<'_>, tau: f64, r: f64) -> (Tally, Tally) {
    let mut pre = Tally::default();
    let mut post = Tally::default();
    for seg in cohort.segments(tau) {
        pre.add(seg.pre_duration, seg.event_pre, r);
        post.add(seg.post_duration, seg.event_post, r);
    }
    (pre, post)
}

/// Separate shape estimates before and after `tau`.
pub fn fit_alt_robust(cohort: Cohort<'_>, tau: f64, r: f64) -> Result<RobustFit> {
    check_rate(r)?;
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let (pre, post) = tally_regimes(cohort, tau, r);
    if pre.log_exposure <= 0.0 && post.log_exposure <= 0.0 {
        return Err(Error::NoExposure("both regimes"));
    }
    let (k0, _) = pre.shape();
    let (k1, _) = post.shape();
    let loglik = segments_loglik(cohort.segments(tau), k0, k1, r);
    Ok(build_fit(pre, post, k0, k1, r, loglik))
}

/// Common shape for both regimes, with the pre- and post-badge segments
/// still scored as independent draws. This is the alternative model
/// restricted to `k0 == k1`, so the pair forms a nested test.
pub fn fit_null_robust_split(cohort: Cohort<'_>, tau: f64, r: f64) -> Result<RobustFit> {
    check_rate(r)?;
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let (pre, post) = tally_regimes(cohort, tau, r);
    let pooled = Tally {
        events: pre.events + post.events,
        log_exposure: pre.log_exposure + post.log_exposure,
    };
    if pooled.log_exposure <= 0.0 {
        return Err(Error::NoExposure("cohort"));
    }
    let (k, _) = pooled.shape();
    let loglik = segments_loglik(cohort.segments(tau), k, k, r);
    Ok(build_fit(pre, post, k, k, r, loglik))
}

/// Marginal log-likelihood with shapes `k0` before and `k1` after `tau`.
pub fn loglik_robust(cohort: Cohort<'_>, k0: f64, k1: f64, tau: f64, r: f64) -> f64 {
    segments_loglik(cohort.segments(tau), k0, k1, r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustTest {
    pub null: RobustFit,
    pub alt: RobustFit,
    pub llr: f64,
}

pub fn test_robust(cohort: Cohort<'_>, tau: f64, r: f64) -> Result<RobustTest> {
    let null = fit_null_robust_split(cohort, tau, r)?;
    let alt = fit_alt_robust(cohort, tau, r)?;
    Ok(RobustTest {
        null,
        alt,
        llr: alt.loglik - null.loglik,
    })
}

pub fn llr_robust(cohort: Cohort<'_>, tau: f64, r: f64) -> Result<f64> {
    test_robust(cohort, tau, r).map(|t| t.llr)
}

/// Picks the rate from `grid` with the best mean held-out marginal
/// log-likelihood of the two-regime model, using `folds`-fold
/// cross-validation over users. Ties go to the smaller rate.
pub fn select_rate_cv(
    cohort: Cohort<'_>,
    tau: f64,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("rate grid is empty".into()));
    }
    for r in grid {
        check_rate(*r)?;
    }
    if folds < 2 {
        return Err(Error::InvalidArgument(
            "cross-validation needs at least 2 folds".into(),
        ));
    }
    let mut sorted_grid = grid.to_vec();
    sorted_grid.sort_by(f64::total_cmp);
    if sorted_grid.len() == 1 {
        return Ok(sorted_grid[0]);
    }

    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0usize; cohort.len()];
    for (pos, idx) in order.into_iter().enumerate() {
        fold_of[idx] = pos % folds;
    }
    let splits: Vec<(Vec<EventRecord>, Vec<EventRecord>)> = (0..folds)
        .map(|fold| {
            let (held, train): (Vec<_>, Vec<_>) = cohort
                .records
                .iter()
                .zip(&fold_of)
                .partition(|(_, f)| **f == fold);
            (
                train.into_iter().map(|(r, _)| r.clone()).collect(),
                held.into_iter().map(|(r, _)| r.clone()).collect(),
            )
        })
        .collect();

    let mut best: Option<(f64, f64)> = None;
    for &r in &sorted_grid {
        let mut total = 0.0;
        let mut used = 0usize;
        for (train, held) in &splits {
            if held.is_empty() {
                continue;
            }
            let Ok(fit) = fit_alt_robust(Cohort::new(train, cohort.horizon), tau, r) else {
                continue;
            };
            total += loglik_robust(Cohort::new(held, cohort.horizon), fit.k0, fit.k1, tau, r);
            used += 1;
        }
        if used == 0 {
            continue;
        }
        let score = total / used as f64;
        match best {
            Some((_, best_score)) if !(score > best_score) => {}
            _ => best = Some((r, score)),
        }
    }
    best.map(|(r, _)| r)
        .ok_or(Error::NoExposure("every cross-validation fold"))
}
