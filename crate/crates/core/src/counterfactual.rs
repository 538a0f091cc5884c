//! Counterfactual worlds: how many tag wikis would exist had the badge never
//! been introduced, and the stratified time-to-bounty and time-to-answer
//! hazards.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::basic::fit_alt_basic;
use crate::cohort::{fit_grouped, partition_by_group, GroupedReport};
use crate::error::{Error, Result};
use crate::model::{validate_dataset, ActionTime, EventRecord, Model};
use crate::rng::substream;
use crate::stats::{mean, quantile_sorted};

/// A tag, first used at `first_use`, whose wiki may have been written.
#[derive(Debug, Clone, PartialEq)]
pub struct TagEntity {
    pub id: String,
    /// Number of questions using the tag.
    pub popularity: f64,
    pub first_use: f64,
    pub wiki: ActionTime,
}

impl TagEntity {
    pub fn record(&self) -> EventRecord {
        EventRecord::new(self.id.clone(), self.first_use, self.wiki)
    }
}

/// Popularity rank of every tag, 1 for the most used.
pub fn popularity_ranks(tags: &[TagEntity]) -> HashMap<String, usize> {
    let mut order: Vec<&TagEntity> = tags.iter().collect();
    order.sort_by(|a, b| {
        b.popularity
            .total_cmp(&a.popularity)
            .then_with(|| a.id.cmp(&b.id))
    });
    order
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t.id.clone(), i + 1))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    TrueWorld,
    Counterfactual,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::TrueWorld => "true_world",
            Scenario::Counterfactual => "counterfactual",
        })
    }
}

/// Cumulative wiki counts on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualSeries {
    pub scenario: Scenario,
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
    /// Mean popularity rank of the wikis written after the grid start, up to
    /// each grid time. `None` before the first one.
    pub mean_rank: Vec<Option<f64>>,
}

/// Evenly spaced times from `start` to `end`, always including `end`.
pub fn time_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(end >= start) {
        return Err(Error::InvalidArgument(format!(
            "bad grid: start {start}, end {end}, step {step}"
        )));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| start + i as f64 * step).collect();
    if end - grid[n] > 1e-9 * step {
        grid.push(end);
    }
    Ok(grid)
}

/// One world's wiki times, paired with popularity ranks, on the grid.
fn path(mut wikis: Vec<(f64, usize)>, grid: &[f64]) -> (Vec<f64>, Vec<Option<f64>>) {
    wikis.sort_by(|a, b| a.0.total_cmp(&b.0));
    let start = grid[0];
    let mut counts = Vec::with_capacity(grid.len());
    let mut ranks = Vec::with_capacity(grid.len());
    let (mut i, mut n_new, mut rank_sum) = (0, 0usize, 0.0);
    for &g in grid {
        while i < wikis.len() && wikis[i].0 <= g {
            if wikis[i].0 > start {
                n_new += 1;
                rank_sum += wikis[i].1 as f64;
            }
            i += 1;
        }
        counts.push(i as f64);
        ranks.push((n_new > 0).then(|| rank_sum / n_new as f64));
    }
    (counts, ranks)
}

fn rank_of(ranks: &HashMap<String, usize>, id: &str) -> usize {
    ranks.get(id).copied().unwrap_or(0)
}

/// Cumulative wiki counts observed in the data.
pub fn observed_series(
    tags: &[TagEntity],
    ranks: &HashMap<String, usize>,
    grid: &[f64],
) -> Result<CounterfactualSeries> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty time grid".into()));
    }
    let wikis = tags
        .iter()
        .filter_map(|t| match t.wiki {
            ActionTime::At(w) => Some((w, rank_of(ranks, &t.id))),
            ActionTime::Censored => None,
        })
        .collect();
    let (counts, mean_rank) = path(wikis, grid);
    Ok(CounterfactualSeries {
        scenario: Scenario::TrueWorld,
        grid: grid.to_vec(),
        mean: counts.clone(),
        lo95: counts.clone(),
        hi95: counts,
        mean_rank,
    })
}

/// Simulates wiki creation from `grid[0]` on with each tag's bucket hazard
/// held at its pre-badge value. Wikis written before `grid[0]` are kept as
/// observed; every other tag waits an exponential time from
/// `max(first_use, grid[0])`, censored at the last grid time.
pub fn simulate_counterfactual_wikis(
    tags: &[TagEntity],
    bucket_of: &HashMap<String, String>,
    lambda0: &HashMap<String, f64>,
    grid: &[f64],
    n_replicates: usize,
    seed: u64,
) -> Result<CounterfactualSeries> {
    if grid.is_empty() || n_replicates == 0 {
        return Err(Error::InvalidArgument(
            "need a nonempty grid and at least one replicate".into(),
        ));
    }
    let mut missing = BTreeSet::new();
    let mut hazards = Vec::with_capacity(tags.len());
    for tag in tags {
        let h = bucket_of
            .get(&tag.id)
            .and_then(|b| lambda0.get(b).map(|h| (b, *h)));
        match (bucket_of.get(&tag.id), h) {
            (_, Some((b, h))) if !(h >= 0.0) || !h.is_finite() => {
                return Err(Error::InvalidArgument(format!(
                    "hazard for bucket {b} is {h}"
                )))
            }
            (_, Some((_, h))) => hazards.push(h),
            (Some(b), None) => {
                missing.insert(b.clone());
            }
            (None, None) => {
                missing.insert(format!("<none for tag {}>", tag.id));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingBuckets(missing.into_iter().collect()));
    }
    let ranks = popularity_ranks(tags);
    let start = grid[0];
    let end = grid[grid.len() - 1];
    let paths: Vec<(Vec<f64>, Vec<Option<f64>>)> = (0..n_replicates as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = substream(seed, rep);
            let mut wikis = Vec::new();
            for (tag, &h) in tags.iter().zip(&hazards) {
                let rank = rank_of(&ranks, &tag.id);
                if let ActionTime::At(w) = tag.wiki {
                    if w <= start {
                        wikis.push((w, rank));
                        continue;
                    }
                }
                let from = tag.first_use.max(start);
                if h == 0.0 || from >= end {
                    continue;
                }
                let t = from + Exp::new(h).expect("positive hazard").sample(&mut rng);
                if t <= end {
                    wikis.push((t, rank));
                }
            }
            path(wikis, grid)
        })
        .collect();
    let n = grid.len();
    let mut series = CounterfactualSeries {
        scenario: Scenario::Counterfactual,
        grid: grid.to_vec(),
        mean: Vec::with_capacity(n),
        lo95: Vec::with_capacity(n),
        hi95: Vec::with_capacity(n),
        mean_rank: Vec::with_capacity(n),
    };
    for g in 0..n {
        let mut counts: Vec<f64> = paths.iter().map(|p| p.0[g]).collect();
        counts.sort_by(f64::total_cmp);
        series.mean.push(mean(&counts));
        series.lo95.push(quantile_sorted(&counts, 0.025));
        series.hi95.push(quantile_sorted(&counts, 0.975));
        let ranks: Vec<f64> = paths.iter().filter_map(|p| p.1[g]).collect();
        series
            .mean_rank
            .push((!ranks.is_empty()).then(|| mean(&ranks)));
    }
    Ok(series)
}

/// Pre-badge hazard of each popularity bucket, fitted on the tags' first-use
/// and wiki times. Buckets that could not be fitted are in the report's
/// flagged list and absent from the map.
pub fn fit_wiki_hazards(
    tags: &[TagEntity],
    bucket_of: &HashMap<String, String>,
    tau: f64,
    horizon: f64,
) -> Result<(HashMap<String, f64>, GroupedReport)> {
    let records = validate_dataset(tags.iter().map(TagEntity::record).collect(), horizon)?
        .dataset
        .records()
        .to_vec();
    let groups = partition_by_group(records, bucket_of, horizon);
    let report = fit_grouped(&groups, tau, Model::Basic, None)?;
    let lambda0 = report
        .fits
        .iter()
        .map(|f| (f.key.clone(), f.lambda0_hat))
        .collect();
    Ok((lambda0, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandPosition {
    Below,
    Inside,
    Above,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldComparison {
    pub grid: Vec<f64>,
    /// True minus counterfactual mean count.
    pub difference: Vec<f64>,
    pub position: Vec<BandPosition>,
    pub rank_true: Vec<Option<f64>>,
    pub rank_counterfactual: Vec<Option<f64>>,
}

impl WorldComparison {
    /// First grid time at which the true count is above the band.
    pub fn first_exit_above(&self) -> Option<f64> {
        self.grid
            .iter()
            .zip(&self.position)
            .find(|(_, p)| **p == BandPosition::Above)
            .map(|(t, _)| *t)
    }

    pub fn all_inside(&self) -> bool {
        self.position.iter().all(|p| *p == BandPosition::Inside)
    }
}

/// Compares two series on the same grid.
pub fn compare_series(
    truth: &CounterfactualSeries,
    counterfactual: &CounterfactualSeries,
) -> Result<WorldComparison> {
    if truth.grid.len() != counterfactual.grid.len()
        || truth
            .grid
            .iter()
            .zip(&counterfactual.grid)
            .any(|(a, b)| (a - b).abs() > 1e-9)
    {
        return Err(Error::GridMismatch);
    }
    let position = truth
        .mean
        .iter()
        .zip(counterfactual.lo95.iter().zip(&counterfactual.hi95))
        .map(|(t, (lo, hi))| {
            if t < lo {
                BandPosition::Below
            } else if t > hi {
                BandPosition::Above
            } else {
                BandPosition::Inside
            }
        })
        .collect();
    Ok(WorldComparison {
        grid: truth.grid.clone(),
        difference: truth
            .mean
            .iter()
            .zip(&counterfactual.mean)
            .map(|(a, b)| a - b)
            .collect(),
        position,
        rank_true: truth.mean_rank.clone(),
        rank_counterfactual: counterfactual.mean_rank.clone(),
    })
}

/// Compares the observed wikis of `tags` against a simulated series.
pub fn compare_worlds(
    tags: &[TagEntity],
    counterfactual: &CounterfactualSeries,
    ranks: &HashMap<String, usize>,
) -> Result<WorldComparison> {
    let truth = observed_series(tags, ranks, &counterfactual.grid)?;
    compare_series(&truth, counterfactual)
}

/// Bounties may be offered only this long after a question is asked.
pub const BOUNTY_DELAY: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BountyStratum {
    NoBounty,
    ByAsker,
    ByOther,
}

impl BountyStratum {
    pub fn code(self) -> i8 {
        match self {
            BountyStratum::NoBounty => -1,
            BountyStratum::ByAsker => 0,
            BountyStratum::ByOther => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounty {
    pub time: f64,
    pub by_asker: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    pub id: String,
    pub ask: f64,
    pub bounty: Option<Bounty>,
    pub first_answer: ActionTime,
}

impl Question {
    pub fn stratum(&self) -> BountyStratum {
        match self.bounty {
            None => BountyStratum::NoBounty,
            Some(b) if b.by_asker => BountyStratum::ByAsker,
            Some(_) => BountyStratum::ByOther,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BountyStratumFit {
    pub stratum: BountyStratum,
    pub lambda0: f64,
    pub lambda1: f64,
    pub n_records: usize,
    pub n_events_pre: usize,
    pub n_events_post: usize,
    pub exposure_pre: f64,
    pub exposure_post: f64,
    /// No usable records; hazards are reported as 0.
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BountyModel {
    /// Bounty offers, clock started `BOUNTY_DELAY` after asking; asker and
    /// other strata only.
    pub to_bounty: Vec<BountyStratumFit>,
    /// First answers, clock started at asking; all three strata.
    pub to_answer: Vec<BountyStratumFit>,
    /// Questions whose bounty precedes the allowed time.
    pub rejected: Vec<String>,
}

fn fit_stratum(
    stratum: BountyStratum,
    records: Vec<EventRecord>,
    tau: f64,
    horizon: f64,
) -> BountyStratumFit {
    let n_records = records.len();
    let fit =
        validate_dataset(records, horizon).and_then(|v| fit_alt_basic(v.dataset.cohort(), tau));
    match fit {
        Ok(f) => BountyStratumFit {
            stratum,
            lambda0: f.lambda0,
            lambda1: f.lambda1,
            n_records,
            n_events_pre: f.n_events_pre,
            n_events_post: f.n_events_post,
            exposure_pre: f.exposure_pre,
            exposure_post: f.exposure_post,
            empty: false,
        },
        Err(e) => {
            log::warn!("stratum {} has no usable records: {e}", stratum.code());
            BountyStratumFit {
                stratum,
                lambda0: 0.0,
                lambda1: 0.0,
                n_records,
                n_events_pre: 0,
                n_events_post: 0,
                exposure_pre: 0.0,
                exposure_post: 0.0,
                empty: true,
            }
        }
    }
}

/// Per-stratum two-regime hazards for the time to a bounty and the time to
/// the first answer.
pub fn fit_bounty_model(questions: &[Question], tau: f64, horizon: f64) -> Result<BountyModel> {
    let mut rejected = Vec::new();
    let mut bounty: HashMap<BountyStratum, Vec<EventRecord>> = HashMap::new();
    let mut answer: HashMap<BountyStratum, Vec<EventRecord>> = HashMap::new();
    for q in questions {
        let stratum = q.stratum();
        if let Some(b) = q.bounty {
            let clock = q.ask + BOUNTY_DELAY;
            if b.time < clock {
                rejected.push(q.id.clone());
                continue;
            }
            bounty.entry(stratum).or_default().push(EventRecord::acted(
                q.id.clone(),
                clock,
                b.time,
            ));
        }
        answer.entry(stratum).or_default().push(EventRecord::new(
            q.id.clone(),
            q.ask,
            q.first_answer,
        ));
    }
    let fit_all = |map: &mut HashMap<BountyStratum, Vec<EventRecord>>, strata: &[BountyStratum]| {
        strata
            .iter()
            .map(|s| fit_stratum(*s, map.remove(s).unwrap_or_default(), tau, horizon))
            .collect()
    };
    use BountyStratum::*;
    Ok(BountyModel {
        to_bounty: fit_all(&mut bounty, &[ByAsker, ByOther]),
        to_answer: fit_all(&mut answer, &[NoBounty, ByAsker, ByOther]),
        rejected,
    })
}
