//! Synthetic users and the power study of the three tests.
//!
//! Users start uniformly over `[0, T]`, draw a pre-badge and a post-badge
//! hazard from Gamma distributions with a common rate, and act at the first
//! event of a process with intensity `lambda(t) * (1 + a t)`. Badge strength
//! is expressed as the increase in the probability of acting within ten days
//! of becoming eligible.

use std::fmt;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use rayon::prelude::*;

use crate::basic::wilks_pvalue;
use crate::bootstrap::bootstrap_test;
use crate::error::{Error, Result};
use crate::model::{validate_dataset, ActionTime, EventRecord, Model, StudyConfig};
use crate::rng::{derive_seed, substream};

/// Delay used to define the effect strength, in days.
pub const EFFECT_DELAY: f64 = 10.0;

/// Significance level of the rejection rates.
pub const REJECTION_LEVEL: f64 = 0.05;

/// Joint law of a user's two latent hazards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// `lambda1 = lambda0 + Gamma(k1 - k0, r)` (Beta-thinned when `k1 < k0`).
    /// Without an effect the hazard does not change at the badge.
    Additive,
    /// `lambda1` is drawn afresh at the badge, independently of `lambda0`.
    Independent,
}

/// How the post-badge shape is specified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Effect {
    Shape(f64),
    /// Target increase in the probability of acting within [`EFFECT_DELAY`].
    TargetDp(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_users: usize,
    pub horizon: f64,
    pub tau: f64,
    pub r: f64,
    pub k0: f64,
    pub effect: Effect,
    /// Slope of the global trend `1 + a t`.
    pub trend_a: f64,
    pub coupling: Coupling,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_users: 10_000,
            horizon: 360.0,
            tau: 180.0,
            r: 10.0,
            k0: 0.1,
            effect: Effect::TargetDp(0.0),
            trend_a: 0.001,
            coupling: Coupling::Additive,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if !(self.tau > 0.0 && self.tau <= self.horizon) {
            return bad("tau must lie in (0, horizon]");
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return bad("rate must be positive");
        }
        if !(self.k0 >= 0.0) {
            return bad("k0 must be nonnegative");
        }
        if !(self.trend_a >= 0.0) {
            return bad("trend slope must be nonnegative");
        }
        if let Effect::Shape(k1) = self.effect {
            if !(k1 >= 0.0) {
                return bad("k1 must be nonnegative");
            }
        }
        Ok(())
    }

    /// Post-badge shape, calibrating it from the target strength if needed.
    pub fn k1(&self) -> Result<f64> {
        match self.effect {
            Effect::Shape(k1) => Ok(k1),
            Effect::TargetDp(dp) => calibrate_effect(self.k0, self.r, dp, EFFECT_DELAY),
        }
    }
}

/// Post-badge shape `k1` such that the probability of acting within `delay`
/// rises by `target_dp` over the pre-badge shape `k0` (trend ignored).
pub fn calibrate_effect(k0: f64, r: f64, target_dp: f64, delay: f64) -> Result<f64> {
    let base = r / (r + delay);
    let baseline = base.powf(k0);
    if !(target_dp >= 0.0 && target_dp < baseline) {
        return Err(Error::InfeasibleTarget {
            target: target_dp,
            baseline,
        });
    }
    if target_dp == 0.0 {
        return Ok(k0);
    }
    Ok((baseline - target_dp).ln() / base.ln())
}

/// Monte Carlo estimate of the effect strength for users who become
/// eligible at `tau`, trend included: the probability of acting within
/// `delay` under `k1` minus the same under `k0`.
pub fn effect_strength_mc(spec: &SynthSpec, k1: f64, n: usize, seed: u64) -> f64 {
    let acted_within = |k: f64, stream: u64| {
        let mut rng = substream(seed, stream);
        (0..n)
            .filter(|_| {
                let lambda = gamma_draw(k, spec.r, &mut rng);
                // A user starting exactly at tau lives in a single regime.
                match first_event_time(
                    spec.tau,
                    lambda,
                    lambda,
                    spec.tau,
                    spec.trend_a,
                    spec.tau + EFFECT_DELAY,
                    &mut rng,
                ) {
                    ActionTime::At(t) => t - spec.tau <= EFFECT_DELAY,
                    ActionTime::Censored => false,
                }
            })
            .count() as f64
            / n as f64
    };
    // Common random numbers for the two arms.
    acted_within(k1, 0) - acted_within(spec.k0, 0)
}

/// Monte Carlo calibration of `k1` by bisection on [`effect_strength_mc`].
pub fn calibrate_effect_mc(spec: &SynthSpec, target_dp: f64, n: usize, seed: u64) -> Result<f64> {
    let closed_form = calibrate_effect(spec.k0, spec.r, target_dp, EFFECT_DELAY)?;
    if target_dp == 0.0 {
        return Ok(spec.k0);
    }
    let (mut lo, mut hi) = (spec.k0, closed_form.max(spec.k0) * 4.0 + 1.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if effect_strength_mc(spec, mid, n, seed) < target_dp {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    if shape <= 0.0 {
        return 0.0;
    }
    Gamma::new(shape, 1.0 / rate)
        .expect("positive gamma parameters")
        .sample(rng)
}

/// First event after `start` of a process with intensity `lambda0` before
/// `tau` and `lambda1` after it, multiplied by `1 + a t`, sampled by thinning
/// against `lambda * (1 + a T)`. Censored if nothing happens by `horizon`.
pub fn first_event_time<R: Rng + ?Sized>(
    start: f64,
    lambda0: f64,
    lambda1: f64,
    tau: f64,
    trend_a: f64,
    horizon: f64,
    rng: &mut R,
) -> ActionTime {
    let bound = 1.0 + trend_a * horizon;
    let mut t = start;
    while t < horizon {
        let (lambda, regime_end) = if t < tau {
            (lambda0, tau.min(horizon))
        } else {
            (lambda1, horizon)
        };
        if lambda <= 0.0 {
            t = regime_end;
            continue;
        }
        let majorant = lambda * bound;
        let candidate = t - (1.0 - rng.random::<f64>()).ln() / majorant;
        if candidate >= regime_end {
            // Memoryless: restart the proposal at the regime boundary.
            t = regime_end;
            continue;
        }
        t = candidate;
        if rng.random::<f64>() * bound <= 1.0 + trend_a * t {
            return ActionTime::At(t);
        }
    }
    ActionTime::Censored
}

/// Draws a user's pre- and post-badge hazards with marginals
/// `Gamma(k0, r)` and `Gamma(k1, r)`.
pub fn draw_hazards<R: Rng + ?Sized>(
    k0: f64,
    k1: f64,
    r: f64,
    coupling: Coupling,
    rng: &mut R,
) -> (f64, f64) {
    let lambda0 = gamma_draw(k0, r, rng);
    let lambda1 = match coupling {
        Coupling::Independent => gamma_draw(k1, r, rng),
        Coupling::Additive if k1 >= k0 => lambda0 + gamma_draw(k1 - k0, r, rng),
        // Beta thinning of a Gamma(k0) variable gives Gamma(k1).
        Coupling::Additive if k1 > 0.0 => {
            lambda0 * Beta::new(k1, k0 - k1).expect("valid beta").sample(rng)
        }
        Coupling::Additive => 0.0,
    };
    (lambda0, lambda1)
}

/// Draws one user's latent hazards and their first action time.
#[allow(clippy::too_many_arguments)]
pub fn simulate_user<R: Rng + ?Sized>(
    start: f64,
    k0: f64,
    k1: f64,
    r: f64,
    tau: f64,
    trend_a: f64,
    horizon: f64,
    coupling: Coupling,
    rng: &mut R,
) -> ActionTime {
    let (lambda0, lambda1) = draw_hazards(k0, k1, r, coupling, rng);
    first_event_time(start, lambda0, lambda1, tau, trend_a, horizon, rng)
}

/// Simulates `spec.n_users` users. User `i` has id `i` and its own random
/// stream, so the output does not depend on thread scheduling.
pub fn simulate_cohort(spec: &SynthSpec) -> Result<Vec<EventRecord>> {
    spec.validate()?;
    let k1 = spec.k1()?;
    Ok((0..spec.n_users)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(spec.seed, i as u64);
            let start = rng.random::<f64>() * spec.horizon;
            let action = simulate_user(
                start,
                spec.k0,
                k1,
                spec.r,
                spec.tau,
                spec.trend_a,
                spec.horizon,
                spec.coupling,
                &mut rng,
            );
            EventRecord::new(i.to_string(), start, action)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Basic model, chi-squared reference distribution.
    BasicTheoretical,
    /// Basic model, virtual-badge reference distribution.
    BasicBootstrap,
    /// Robust model, virtual-badge reference distribution.
    RobustBootstrap,
}

impl Method {
    pub const ALL: [Method; 3] = [
        Method::BasicTheoretical,
        Method::BasicBootstrap,
        Method::RobustBootstrap,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::BasicTheoretical => "basic_theoretical",
            Method::BasicBootstrap => "basic_bootstrap",
            Method::RobustBootstrap => "robust_bootstrap",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerRow {
    pub strength: f64,
    pub method: Method,
    pub avg_p: f64,
    pub rejection_rate: f64,
    /// Replicates that produced a p-value.
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerCurve {
    pub effect_strengths: Vec<f64>,
    /// One row per (strength, method), strengths in input order.
    pub rows: Vec<PowerRow>,
    pub n_replicates: usize,
    pub n_failed: usize,
}

impl PowerCurve {
    pub fn row(&self, strength_index: usize, method: Method) -> &PowerRow {
        let i = strength_index * Method::ALL.len()
            + Method::ALL.iter().position(|m| *m == method).unwrap();
        &self.rows[i]
    }

    pub fn rejection_rates(&self, method: Method) -> Vec<f64> {
        (0..self.effect_strengths.len())
            .map(|i| self.row(i, method).rejection_rate)
            .collect()
    }
}

/// p-values of the three methods on one synthetic cohort.
pub fn replicate_pvalues(spec: &SynthSpec, test: &StudyConfig) -> Result<[f64; 3]> {
    let records = simulate_cohort(spec)?;
    let dataset = validate_dataset(records, spec.horizon)?.dataset;
    let basic = bootstrap_test(
        &dataset,
        &StudyConfig {
            model: Model::Basic,
            ..test.clone()
        },
    )?;
    let robust = bootstrap_test(
        &dataset,
        &StudyConfig {
            model: Model::Robust,
            ..test.clone()
        },
    )?;
    Ok([
        wilks_pvalue(basic.llr_treatment)?,
        basic.p_value,
        robust.p_value,
    ])
}

/// Average p-value and rejection rate of each method for every strength.
///
/// Replicate `j` of strength `i` uses seeds derived from `(i, j)`, both for
/// the cohort and for the virtual badges.
pub fn run_power_study(
    strengths: &[f64],
    n_replicates: usize,
    template: &SynthSpec,
    test: &StudyConfig,
) -> Result<PowerCurve> {
    if n_replicates == 0 {
        return Err(Error::InvalidArgument("need at least one replicate".into()));
    }
    template.validate()?;
    let mut config = test.clone();
    config.tau = template.tau;
    config.horizon = template.horizon;
    config.validate()?;
    // Fail fast on infeasible strengths.
    for s in strengths {
        calibrate_effect(template.k0, template.r, *s, EFFECT_DELAY)?;
    }

    let jobs: Vec<(usize, usize)> = (0..strengths.len())
        .flat_map(|i| (0..n_replicates).map(move |j| (i, j)))
        .collect();
    let outcomes: Vec<Option<[f64; 3]>> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let path = [i as u64, j as u64];
            let spec = SynthSpec {
                effect: Effect::TargetDp(strengths[i]),
                seed: derive_seed(template.seed, &path),
                ..*template
            };
            let cfg = StudyConfig {
                seed: derive_seed(config.seed, &path),
                ..config.clone()
            };
            match replicate_pvalues(&spec, &cfg) {
                Ok(p) => Some(p),
                Err(e) => {
                    log::warn!("replicate {j} at strength {}: {e}", strengths[i]);
                    None
                }
            }
        })
        .collect();

    let n_failed = outcomes.iter().filter(|o| o.is_none()).count();
    if n_failed * 10 > outcomes.len() {
        return Err(Error::TooManyFailures {
            failed: n_failed,
            total: outcomes.len(),
        });
    }

    let mut rows = Vec::with_capacity(strengths.len() * Method::ALL.len());
    for (i, &strength) in strengths.iter().enumerate() {
        let block = &outcomes[i * n_replicates..(i + 1) * n_replicates];
        for (m, method) in Method::ALL.iter().enumerate() {
            let ps: Vec<f64> = block.iter().flatten().map(|p| p[m]).collect();
            let n_ok = ps.len();
            let (avg_p, rejection_rate) = if n_ok == 0 {
                (f64::NAN, f64::NAN)
            } else {
                (
                    ps.iter().sum::<f64>() / n_ok as f64,
                    ps.iter().filter(|p| **p <= REJECTION_LEVEL).count() as f64 / n_ok as f64,
                )
            };
            rows.push(PowerRow {
                strength,
                method: *method,
                avg_p,
                rejection_rate,
                n_ok,
            });
        }
    }
    Ok(PowerCurve {
        effect_strengths: strengths.to_vec(),
        rows,
        n_replicates,
        n_failed,
    })
}
