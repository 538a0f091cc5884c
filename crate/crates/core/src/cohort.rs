//! Supporting analyses around a badge study: covariate balance between the
//! treatment and control windows, per-group fits, Mood's median test and
//! sliding-window intensity estimates.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::basic::fit_alt_basic;
use crate::bootstrap::VirtualBadgeSchedule;
use crate::error::{Error, Result};
use crate::model::{Dataset, EventRecord, Model};
use crate::robust::fit_alt_robust;
use crate::stats::{chi2_sf, mean, median, sample_variance};

/// Mean |SMD| at or below which a covariate counts as balanced.
pub const BALANCE_THRESHOLD: f64 = 0.25;

/// Absolute standardized mean difference with the unweighted pooled
/// standard deviation `sqrt((var_t + var_c) / 2)`.
pub fn smd(treatment: &[f64], control: &[f64]) -> Result<f64> {
    if treatment.len() < 2 || control.len() < 2 {
        return Err(Error::InvalidArgument(
            "each group needs at least two values".into(),
        ));
    }
    let diff = (mean(treatment) - mean(control)).abs();
    let pooled = ((sample_variance(treatment) + sample_variance(control)) / 2.0).sqrt();
    if pooled == 0.0 {
        if diff == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::InvalidArgument(
            "pooled standard deviation is zero but the means differ".into(),
        ));
    }
    Ok(diff / pooled)
}

/// Numeric covariates per user; `None` marks a missing value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub rows: HashMap<String, Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRow {
    pub covariate: String,
    /// |SMD| averaged over control groups.
    pub mean_smd: f64,
    /// Standard deviation of |SMD| across control groups.
    pub sd_smd: f64,
    pub balanced: bool,
    /// Control groups that produced an SMD.
    pub n_windows: usize,
    /// Why the row could not be computed, if it could not.
    pub flag: Option<String>,
}

fn column<'a>(
    table: &CovariateTable,
    ids: impl Iterator<Item = &'a str>,
    col: usize,
    missing_indicator: bool,
) -> Vec<f64> {
    ids.filter_map(|id| table.rows.get(id))
        .filter_map(|row| {
            let v = row[col];
            if missing_indicator {
                Some(if v.is_none() { 1.0 } else { 0.0 })
            } else {
                v
            }
        })
        .collect()
}

/// Balance of every covariate between a treatment group and each control
/// group, given as user ids. Covariates with missing values get a companion
/// `<name>-NA` row for the missingness indicator.
pub fn balance_rows(
    table: &CovariateTable,
    treatment: &[&str],
    controls: &[Vec<&str>],
) -> Vec<BalanceRow> {
    let mut rows = Vec::new();
    for (col, name) in table.names.iter().enumerate() {
        let has_missing = table.rows.values().any(|row| row[col].is_none());
        let variants: &[bool] = if has_missing {
            &[false, true]
        } else {
            &[false]
        };
        for &indicator in variants {
            let label = if indicator {
                format!("{name}-NA")
            } else {
                name.clone()
            };
            let t = column(table, treatment.iter().copied(), col, indicator);
            if t.is_empty() {
                rows.push(BalanceRow {
                    covariate: label,
                    mean_smd: f64::NAN,
                    sd_smd: f64::NAN,
                    balanced: false,
                    n_windows: 0,
                    flag: Some("absent for all treatment users".into()),
                });
                continue;
            }
            let smds: Vec<f64> = controls
                .iter()
                .filter_map(|group| {
                    let c = column(table, group.iter().copied(), col, indicator);
                    smd(&t, &c).ok()
                })
                .collect();
            if smds.is_empty() {
                rows.push(BalanceRow {
                    covariate: label,
                    mean_smd: f64::NAN,
                    sd_smd: f64::NAN,
                    balanced: false,
                    n_windows: 0,
                    flag: Some("no control group gave a defined SMD".into()),
                });
                continue;
            }
            let m = mean(&smds);
            rows.push(BalanceRow {
                covariate: label,
                mean_smd: m,
                sd_smd: sample_variance(&smds).sqrt(),
                balanced: m <= BALANCE_THRESHOLD,
                n_windows: smds.len(),
                flag: None,
            });
        }
    }
    rows
}

/// Balance between the treatment window around `tau` and the control
/// windows of `schedule`.
pub fn balance_table(
    table: &CovariateTable,
    dataset: &Dataset,
    tau: f64,
    window: f64,
    schedule: &VirtualBadgeSchedule,
) -> Vec<BalanceRow> {
    let ids = |center: f64| -> Vec<&str> {
        dataset
            .centered_window(center, window)
            .records
            .iter()
            .map(|r| r.user_id.as_str())
            .collect()
    };
    let treatment = ids(tau);
    let controls: Vec<Vec<&str>> = schedule.times.iter().map(|t| ids(*t)).collect();
    balance_rows(table, &treatment, &controls)
}

/// Per-group two-regime fit. For the robust model the hazards are the mean
/// intensities `k / r` and the exposures are log-exposures.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedFit {
    pub key: String,
    pub model: Model,
    pub lambda0_hat: f64,
    pub lambda1_hat: f64,
    pub n_events_pre: usize,
    pub n_events_post: usize,
    pub exposure_pre: f64,
    pub exposure_post: f64,
    pub sparse_pre: bool,
    pub sparse_post: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupedReport {
    pub fits: Vec<GroupedFit>,
    /// Groups left out, with the reason.
    pub flagged: Vec<(String, String)>,
}

impl GroupedReport {
    pub fn get(&self, key: &str) -> Option<&GroupedFit> {
        self.fits.iter().find(|f| f.key == key)
    }
}

/// Splits records into per-group datasets. Records whose id has no group
/// are skipped.
pub fn partition_by_group(
    records: Vec<EventRecord>,
    group_of: &HashMap<String, String>,
    horizon: f64,
) -> Vec<(String, Dataset)> {
    let mut groups: BTreeMap<String, Vec<EventRecord>> = BTreeMap::new();
    for rec in records {
        if let Some(key) = group_of.get(&rec.user_id) {
            groups.entry(key.clone()).or_default().push(rec);
        }
    }
    groups
        .into_iter()
        .map(|(k, recs)| (k, Dataset::from_valid(recs, horizon)))
        .collect()
}

/// Fits the two-regime model separately in every group. Empty groups and
/// groups whose fit fails are flagged rather than fatal.
pub fn fit_grouped(
    groups: &[(String, Dataset)],
    tau: f64,
    model: Model,
    rate: Option<f64>,
) -> Result<GroupedReport> {
    if model == Model::Robust && rate.is_none() {
        return Err(Error::InvalidArgument(
            "the robust model needs a rate".into(),
        ));
    }
    let outcomes: Vec<std::result::Result<GroupedFit, (String, String)>> = groups
        .par_iter()
        .map(|(key, data)| {
            if data.is_empty() {
                return Err((key.clone(), "empty group".to_string()));
            }
            let fit = match model {
                Model::Basic => fit_alt_basic(data.cohort(), tau).map(|f| GroupedFit {
                    key: key.clone(),
                    model,
                    lambda0_hat: f.lambda0,
                    lambda1_hat: f.lambda1,
                    n_events_pre: f.n_events_pre,
                    n_events_post: f.n_events_post,
                    exposure_pre: f.exposure_pre,
                    exposure_post: f.exposure_post,
                    sparse_pre: f.sparse_pre,
                    sparse_post: f.sparse_post,
                }),
                Model::Robust => {
                    fit_alt_robust(data.cohort(), tau, rate.unwrap()).map(|f| GroupedFit {
                        key: key.clone(),
                        model,
                        lambda0_hat: f.mean_intensity_pre,
                        lambda1_hat: f.mean_intensity_post,
                        n_events_pre: f.n_events_pre,
                        n_events_post: f.n_events_post,
                        exposure_pre: f.log_exposure_pre,
                        exposure_post: f.log_exposure_post,
                        sparse_pre: f.sparse_pre,
                        sparse_post: f.sparse_post,
                    })
                }
            };
            fit.map_err(|e| (key.clone(), e.to_string()))
        })
        .collect();
    let mut report = GroupedReport::default();
    for outcome in outcomes {
        match outcome {
            Ok(fit) => report.fits.push(fit),
            Err(flag) => report.flagged.push(flag),
        }
    }
    Ok(report)
}

/// Default popularity cut points: top 1%, 1-10%, 10-50%, bottom 50%.
pub const DEFAULT_POPULARITY_CUTS: [f64; 3] = [0.01, 0.10, 0.50];

/// Assigns each entity to a popularity bucket by its rank fraction, most
/// popular first. `cuts` are increasing fractions in `(0, 1)`.
pub fn popularity_buckets(popularity: &[(String, f64)], cuts: &[f64]) -> HashMap<String, String> {
    let mut order: Vec<&(String, f64)> = popularity.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut bounds = vec![0.0];
    bounds.extend_from_slice(cuts);
    bounds.push(1.0);
    let labels: Vec<String> = bounds
        .windows(2)
        .map(|w| format!("{}-{}%", w[0] * 100.0, w[1] * 100.0))
        .collect();
    let n = order.len() as f64;
    order
        .into_iter()
        .enumerate()
        .map(|(i, (id, _))| {
            let frac = (i + 1) as f64 / n;
            let bucket = cuts.iter().position(|c| frac <= *c).unwrap_or(cuts.len());
            (id.clone(), labels[bucket].clone())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoodResult {
    pub chi2: f64,
    pub p_value: f64,
    pub pooled_median: f64,
    /// `[[a_above, a_at_or_below], [b_above, b_at_or_below]]`.
    pub table: [[usize; 2]; 2],
}

/// Mood's median test: a 2x2 chi-squared test, without continuity
/// correction, of counts above vs at-or-below the pooled median.
pub fn moods_median_test(a: &[f64], b: &[f64]) -> Result<MoodResult> {
    if a.len() + b.len() < 4 || a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "need two nonempty samples with at least four values in total".into(),
        ));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let m = median(&pooled);
    let count = |xs: &[f64]| {
        let above = xs.iter().filter(|x| **x > m).count();
        [above, xs.len() - above]
    };
    let table = [count(a), count(b)];
    let col = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    if col[0] == 0 || col[1] == 0 {
        return Err(Error::InvalidArgument(
            "every value lies on one side of the pooled median".into(),
        ));
    }
    let n = pooled.len() as f64;
    let det = table[0][0] as f64 * table[1][1] as f64 - table[0][1] as f64 * table[1][0] as f64;
    let denom = a.len() as f64 * b.len() as f64 * col[0] as f64 * col[1] as f64;
    let chi2 = n * det * det / denom;
    Ok(MoodResult {
        chi2,
        p_value: chi2_sf(chi2, 1.0),
        pooled_median: m,
        table,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    pub center: f64,
    pub side: Side,
    /// Hazard (basic) or shape (robust); `None` for a window without data.
    pub estimate: Option<f64>,
    pub n_users: usize,
    pub n_events: usize,
    /// No events in the window.
    pub sparse: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensitySeries {
    pub window: f64,
    pub model: Model,
    pub points: Vec<SeriesPoint>,
}

/// Sliding-window intensity estimates. Each window holds the users whose
/// start time lies within `w / 2` of its center. Windows centered before
/// `tau` are fitted on the users' pre-badge exposure, later windows on their
/// post-badge exposure, with a single-regime model in both cases.
pub fn intensity_series(
    dataset: &Dataset,
    tau: f64,
    window: f64,
    step: f64,
    model: Model,
    rate: Option<f64>,
) -> Result<IntensitySeries> {
    if !(window > 0.0) || !(step > 0.0) {
        return Err(Error::InvalidArgument(
            "window and step must be positive".into(),
        ));
    }
    let r = match (model, rate) {
        (Model::Robust, None) => {
            return Err(Error::InvalidArgument(
                "the robust model needs a rate".into(),
            ))
        }
        (_, r) => r.unwrap_or(0.0),
    };
    let horizon = dataset.horizon();
    let first = window / 2.0;
    let last = horizon - window / 2.0;
    let n_centers = if last >= first {
        ((last - first) / step + 1e-9).floor() as usize + 1
    } else {
        0
    };
    let points = (0..n_centers)
        .into_par_iter()
        .map(|i| {
            let center = first + i as f64 * step;
            let side = if center < tau { Side::Pre } else { Side::Post };
            let cohort = dataset.centered_window(center, window);
            let mut events = 0usize;
            let mut exposure = 0.0;
            for seg in cohort.segments(tau) {
                let (d, e) = match side {
                    Side::Pre => (seg.pre_duration, seg.event_pre),
                    Side::Post => (seg.post_duration, seg.event_post),
                };
                events += e as usize;
                exposure += match model {
                    Model::Basic => d,
                    Model::Robust => (d / r).ln_1p(),
                };
            }
            let estimate = (exposure > 0.0).then(|| events as f64 / exposure);
            SeriesPoint {
                center,
                side,
                estimate,
                n_users: cohort.len(),
                n_events: events,
                sparse: events == 0,
            }
        })
        .collect();
    Ok(IntensitySeries {
        window,
        model,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smd_reference_values() {
        assert!((smd(&[1.0, 3.0], &[2.0, 4.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(smd(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(smd(&[5.0, 5.0], &[5.0, 5.0]).unwrap(), 0.0);
        assert!(smd(&[5.0, 5.0], &[6.0, 6.0]).is_err());
        assert!(smd(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn table(values: &[(&str, Option<f64>)]) -> CovariateTable {
        CovariateTable {
            names: vec!["x".into()],
            rows: values
                .iter()
                .map(|(id, v)| (id.to_string(), vec![*v]))
                .collect(),
        }
    }

    #[test]
    fn balance_identical_groups() {
        let t = table(&[
            ("a", Some(1.0)),
            ("b", Some(2.0)),
            ("c", Some(1.0)),
            ("d", Some(2.0)),
        ]);
        let rows = balance_rows(&t, &["a", "b"], &[vec!["c", "d"]]);
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].mean_smd, rows[0].sd_smd), (0.0, 0.0));
        assert!(rows[0].balanced);
    }

    #[test]
    fn balance_adds_missingness_rows() {
        let t = table(&[
            ("a", Some(1.0)),
            ("b", None),
            ("c", Some(2.0)),
            ("d", Some(1.5)),
            ("e", None),
            ("f", Some(3.0)),
        ]);
        let rows = balance_rows(&t, &["a", "b", "c"], &[vec!["d", "e", "f"]]);
        let names: Vec<&str> = rows.iter().map(|r| r.covariate.as_str()).collect();
        assert_eq!(names, vec!["x", "x-NA"]);
        assert_eq!(rows[1].mean_smd, 0.0);
    }

    #[test]
    fn balance_flags_covariate_missing_for_treatment() {
        let t = table(&[("a", None), ("b", None), ("c", Some(2.0)), ("d", Some(1.0))]);
        let rows = balance_rows(&t, &["a", "b"], &[vec!["c", "d"]]);
        assert!(rows[0].flag.is_some());
        assert!(!rows[0].balanced);
    }

    #[test]
    fn mood_reference_values() {
        let r = moods_median_test(&[1.0, 1.0, 1.0, 1.0], &[2.0, 2.0, 2.0, 2.0]).unwrap();
        assert!((r.chi2 - 8.0).abs() < 1e-12);
        let same = moods_median_test(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(same.chi2, 0.0);
        assert_eq!(same.p_value, 1.0);
        assert!(moods_median_test(&[1.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn mood_detects_large_shift() {
        let a: Vec<f64> = (0..500).map(|i| (i % 100) as f64).collect();
        let b: Vec<f64> = (0..500).map(|i| (i % 100) as f64 + 30.0).collect();
        assert!(moods_median_test(&a, &b).unwrap().p_value < 1e-3);
    }

    #[test]
    fn buckets_by_rank_fraction() {
        let pop: Vec<(String, f64)> = (0..200).map(|i| (format!("t{i}"), i as f64)).collect();
        let b = popularity_buckets(&pop, &DEFAULT_POPULARITY_CUTS);
        assert_eq!(b["t199"], "0-1%");
        assert_eq!(b["t198"], "0-1%");
        assert_eq!(b["t197"], "1-10%");
        assert_eq!(b["t150"], "10-50%");
        assert_eq!(b["t0"], "50-100%");
        let counts = b.values().filter(|v| *v == "50-100%").count();
        assert_eq!(counts, 100);
    }

    #[test]
    fn grouped_flags_empty_groups() {
        let ds = Dataset::from_valid(vec![EventRecord::acted("a", 0.0, 1.0)], 4.0);
        let empty = Dataset::from_valid(vec![], 4.0);
        let report = fit_grouped(
            &[("g".into(), ds), ("empty".into(), empty)],
            2.0,
            Model::Basic,
            None,
        )
        .unwrap();
        assert_eq!(report.fits.len(), 1);
        assert_eq!(report.flagged[0].0, "empty");
    }

    #[test]
    fn series_has_gaps_for_empty_windows() {
        let ds = Dataset::from_valid(
            vec![
                EventRecord::acted("a", 5.0, 6.0),
                EventRecord::censored("b", 90.0),
            ],
            100.0,
        );
        let s = intensity_series(&ds, 50.0, 10.0, 5.0, Model::Basic, None).unwrap();
        assert_eq!(s.points.first().unwrap().center, 5.0);
        assert_eq!(s.points.last().unwrap().center, 95.0);
        assert!(s.points.windows(2).all(|w| w[0].center < w[1].center));
        assert_eq!(s.points[0].estimate, Some(1.0));
        assert!(s.points[5].estimate.is_none());
        assert!(s.points[17].sparse);
    }

    proptest! {
        #[test]
        fn smd_symmetric_and_affine_invariant(
            t in prop::collection::vec(-10.0..10.0f64, 2..20),
            c in prop::collection::vec(-10.0..10.0f64, 2..20),
            shift in -5.0..5.0f64,
            scale in 0.1..10.0f64,
        ) {
            let Ok(base) = smd(&t, &c) else { return Ok(()); };
            prop_assert!((smd(&c, &t).unwrap() - base).abs() < 1e-9);
            let shifted = |xs: &[f64]| xs.iter().map(|x| x + shift).collect::<Vec<_>>();
            prop_assert!((smd(&shifted(&t), &shifted(&c)).unwrap() - base).abs() < 1e-6);
            let scaled = |xs: &[f64]| xs.iter().map(|x| x * scale).collect::<Vec<_>>();
            prop_assert!((smd(&scaled(&t), &scaled(&c)).unwrap() - base).abs() < 1e-6);
        }

        #[test]
        fn mood_invariant_under_monotone_transform(
            a in prop::collection::vec(0.1..100.0f64, 2..30),
            b in prop::collection::vec(0.1..100.0f64, 2..30),
        ) {
            let Ok(base) = moods_median_test(&a, &b) else { return Ok(()); };
            let f = |xs: &[f64]| xs.iter().map(|x| x.ln() * 3.0 + 1.0).collect::<Vec<_>>();
            let moved = moods_median_test(&f(&a), &f(&b)).unwrap();
            prop_assert!((moved.chi2 - base.chi2).abs() < 1e-9);
        }
    }
}
