//! Event records, study configuration and the split of each user's
//! observation into the pre-badge and post-badge regimes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Time of a user's first action, in days since the study epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionTime {
    At(f64),
    /// The user never acted while observed.
    Censored,
}

impl ActionTime {
    /// The action time if it falls within `[0, horizon]`.
    pub fn observed_by(self, horizon: f64) -> Option<f64> {
        match self {
            ActionTime::At(t) if t <= horizon => Some(t),
            _ => None,
        }
    }

    pub fn is_censored(self) -> bool {
        matches!(self, ActionTime::Censored)
    }
}

/// One user's observation: when they became eligible, and when (if ever)
/// they first performed the action.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub user_id: String,
    pub start: f64,
    pub action: ActionTime,
    /// Carried through from input files; never used in estimation.
    pub utility: Option<f64>,
}

impl EventRecord {
    pub fn new(user_id: impl Into<String>, start: f64, action: ActionTime) -> Self {
        EventRecord {
            user_id: user_id.into(),
            start,
            action,
            utility: None,
        }
    }

    pub fn censored(user_id: impl Into<String>, start: f64) -> Self {
        Self::new(user_id, start, ActionTime::Censored)
    }

    pub fn acted(user_id: impl Into<String>, start: f64, action: f64) -> Self {
        Self::new(user_id, start, ActionTime::At(action))
    }

    /// End of the observed span: the action time or the horizon, whichever
    /// comes first.
    pub fn end(&self, horizon: f64) -> f64 {
        self.action.observed_by(horizon).unwrap_or(horizon)
    }

    fn check(&self, horizon: f64) -> Option<DropReason> {
        if !self.start.is_finite() {
            return Some(DropReason::NonFiniteStart);
        }
        if self.start < 0.0 {
            return Some(DropReason::NegativeStart);
        }
        if self.start > horizon {
            return Some(DropReason::StartBeyondHorizon);
        }
        match self.action {
            ActionTime::At(t) if !t.is_finite() => Some(DropReason::NonFiniteAction),
            ActionTime::At(t) if t < self.start => Some(DropReason::ActionBeforeStart),
            _ => None,
        }
    }
}

/// Which likelihood model a fit or test uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Model {
    /// Hazards shared by all users.
    Basic,
    /// Per-user Gamma-distributed hazards.
    Robust,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Model::Basic => "basic",
            Model::Robust => "robust",
        })
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Model::Basic),
            "robust" => Ok(Model::Robust),
            other => Err(Error::InvalidConfig(format!(
                "unknown model {other:?} (expected basic or robust)"
            ))),
        }
    }
}

/// How virtual badge times are chosen for the control groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    UniformRandom,
    SlidingWindow,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::UniformRandom => "uniform_random",
            Placement::SlidingWindow => "sliding_window",
        })
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_random" | "uniform" => Ok(Placement::UniformRandom),
            "sliding_window" | "sliding" => Ok(Placement::SlidingWindow),
            other => Err(Error::InvalidConfig(format!(
                "unknown placement {other:?} (expected uniform_random or sliding_window)"
            ))),
        }
    }
}

/// Gamma rate parameter of the robust model: fixed, or chosen by
/// cross-validation over a grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Rate {
    Fixed(f64),
    Grid(Vec<f64>),
}

impl Default for Rate {
    fn default() -> Self {
        Rate::Grid(DEFAULT_RATE_GRID.to_vec())
    }
}

pub const DEFAULT_RATE_GRID: [f64; 5] = [0.1, 1.0, 10.0, 100.0, 1000.0];

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Fixed(r) => write!(f, "{r}"),
            Rate::Grid(grid) => {
                let parts: Vec<String> = grid.iter().map(|r| r.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for Rate {
    type Err = Error;

    /// A single number is a fixed rate; a comma-separated list is a grid.
    fn from_str(s: &str) -> Result<Self> {
        let values = s
            .split(',')
            .map(|part| {
                part.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidConfig(format!("rate value {:?} is not a number", part.trim()))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidConfig("rate values must be positive".into()));
        }
        if s.contains(',') {
            Ok(Rate::Grid(values))
        } else {
            Ok(Rate::Fixed(values[0]))
        }
    }
}

/// Parameters of one badge study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    /// Badge introduction time.
    pub tau: f64,
    /// End of the observation period.
    pub horizon: f64,
    /// Width of treatment and control windows of start times.
    pub window: f64,
    pub model: Model,
    pub rate: Rate,
    pub n_controls: usize,
    pub seed: u64,
    pub placement: Placement,
    /// Step between sliding-window control positions; `window / 4` when unset.
    pub stride: Option<f64>,
    /// Number of cross-validation folds used when `rate` is a grid.
    pub folds: usize,
}

impl StudyConfig {
    pub fn new(tau: f64, horizon: f64) -> Self {
        StudyConfig {
            tau,
            horizon,
            window: 60.0,
            model: Model::Robust,
            rate: Rate::default(),
            n_controls: 200,
            seed: 0,
            placement: Placement::UniformRandom,
            stride: None,
            folds: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(
                "tau and horizon must be finite".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau <= self.horizon) {
            return Err(Error::InvalidConfig(format!(
                "tau = {} must lie in (0, horizon = {}]",
                self.tau, self.horizon
            )));
        }
        if !(self.window >= 0.0 && self.window.is_finite()) {
            return Err(Error::InvalidConfig("window must be nonnegative".into()));
        }
        if self.n_controls == 0 {
            return Err(Error::InvalidConfig("n_controls must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig("at least two folds are needed".into()));
        }
        match &self.rate {
            Rate::Fixed(r) if !(*r > 0.0 && r.is_finite()) => {
                return Err(Error::InvalidConfig("rate must be positive".into()))
            }
            Rate::Grid(grid) if grid.is_empty() || grid.iter().any(|r| !(*r > 0.0)) => {
                return Err(Error::InvalidConfig(
                    "rate grid must be nonempty and positive".into(),
                ))
            }
            _ => {}
        }
        if let Some(stride) = self.stride {
            if !(stride > 0.0) {
                return Err(Error::InvalidConfig("stride must be positive".into()));
            }
        }
        if virtual_badge_range(self.horizon, self.tau, self.window).is_empty() {
            return Err(Error::InvalidConfig(format!(
                "no room for virtual badges: [{}, {}] and [{}, {}] are both empty",
                self.window / 2.0,
                self.tau - self.window,
                self.tau + self.window,
                self.horizon - self.window / 2.0
            )));
        }
        Ok(())
    }
}

/// Nonempty pieces of `[w/2, tau - w] ∪ [tau + w, horizon - w/2]`, the
/// times where a virtual badge can sit without its window overlapping the
/// real one or the edges of the observation period.
pub fn virtual_badge_range(horizon: f64, tau: f64, window: f64) -> Vec<(f64, f64)> {
    [
        (window / 2.0, tau - window),
        (tau + window, horizon - window / 2.0),
    ]
    .into_iter()
    .filter(|(lo, hi)| lo <= hi)
    .collect()
}

/// Exposure of one user under each hazard regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureSegments {
    pub pre_duration: f64,
    pub post_duration: f64,
    pub event_pre: bool,
    pub event_post: bool,
}

/// Splits a record's observed span at `tau`.
///
/// Users eligible after `tau` start their post-badge exposure at their own
/// start time, since nobody is at risk before becoming eligible.
pub fn exposure_segments(record: &EventRecord, tau: f64, horizon: f64) -> ExposureSegments {
    let s = record.start;
    let observed = record.action.observed_by(horizon);
    let end = observed.unwrap_or(horizon).max(s);
    if s < tau {
        let event_pre = matches!(observed, Some(t) if t <= tau);
        let post_duration = if event_pre { 0.0 } else { (end - tau).max(0.0) };
        ExposureSegments {
            pre_duration: end.min(tau) - s,
            post_duration,
            event_pre,
            event_post: observed.is_some() && !event_pre,
        }
    } else {
        ExposureSegments {
            pre_duration: 0.0,
            post_duration: end - s,
            event_pre: false,
            event_post: observed.is_some(),
        }
    }
}

/// Records dropped during validation, by reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DropReason {
    NonFiniteStart,
    NegativeStart,
    StartBeyondHorizon,
    NonFiniteAction,
    ActionBeforeStart,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::NonFiniteStart => "non-finite start",
            DropReason::NegativeStart => "negative start",
            DropReason::StartBeyondHorizon => "start beyond horizon",
            DropReason::NonFiniteAction => "non-finite action",
            DropReason::ActionBeforeStart => "action before start",
        })
    }
}

/// A validated set of records, sorted by start time.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<EventRecord>,
    horizon: f64,
}

/// Borrowed view of (part of) a dataset; what every estimator consumes.
#[derive(Debug, Clone, Copy)]
pub struct Cohort<'a> {
    pub records: &'a [EventRecord],
    pub horizon: f64,
}

impl<'a> Cohort<'a> {
    pub fn new(records: &'a [EventRecord], horizon: f64) -> Self {
        Cohort { records, horizon }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn segments(&self, tau: f64) -> impl Iterator<Item = ExposureSegments> + 'a {
        let horizon = self.horizon;
        self.records
            .iter()
            .map(move |r| exposure_segments(r, tau, horizon))
    }
}

impl Dataset {
    /// Wraps records that are already known to be valid.
    pub fn from_valid(mut records: Vec<EventRecord>, horizon: f64) -> Self {
        records.sort_by(|a, b| a.start.total_cmp(&b.start));
        Dataset { records, horizon }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn cohort(&self) -> Cohort<'_> {
        Cohort::new(&self.records, self.horizon)
    }

    /// Users whose start time lies in `[lo, hi]`.
    pub fn window(&self, lo: f64, hi: f64) -> Cohort<'_> {
        let first = self.records.partition_point(|r| r.start < lo);
        let last = self.records.partition_point(|r| r.start <= hi);
        Cohort::new(&self.records[first..last.max(first)], self.horizon)
    }

    /// Users whose start time lies within `width / 2` of `center`.
    pub fn centered_window(&self, center: f64, width: f64) -> Cohort<'_> {
        self.window(center - width / 2.0, center + width / 2.0)
    }
}

/// Outcome of [`validate_dataset`].
#[derive(Debug, Clone)]
pub struct Validation {
    pub dataset: Dataset,
    pub dropped: Vec<(DropReason, usize)>,
}

impl Validation {
    pub fn n_dropped(&self) -> usize {
        self.dropped.iter().map(|(_, n)| n).sum()
    }
}

/// Keeps the records that are consistent with an observation window
/// ending at `horizon`.
pub fn validate_dataset(records: Vec<EventRecord>, horizon: f64) -> Result<Validation> {
    let mut counts = std::collections::BTreeMap::new();
    let mut kept = Vec::with_capacity(records.len());
    for record in records {
        match record.check(horizon) {
            Some(reason) => *counts.entry(reason).or_insert(0usize) += 1,
            None => kept.push(record),
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyCohort);
    }
    Ok(Validation {
        dataset: Dataset::from_valid(kept, horizon),
        dropped: counts.into_iter().collect(),
    })
}
