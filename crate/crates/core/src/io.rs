//! Tab-separated input and output: event logs, reputation histories,
//! covariates, tag and question tables, the flat study config, and the
//! result tables written by the command line tool.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::bootstrap::BootstrapResult;
use crate::cohort::{BalanceRow, CovariateTable, GroupedReport, IntensitySeries, Side};
use crate::counterfactual::{Bounty, BountyModel, CounterfactualSeries, Question, TagEntity};
use crate::error::{Error, Result};
use crate::model::{ActionTime, EventRecord, Model, Placement, Rate, StudyConfig};
use crate::synth::PowerCurve;

pub const EVENTS_HEADER: [&str; 3] = ["user_id", "start", "action"];
pub const REPUTATION_HEADER: [&str; 3] = ["user_id", "time", "reputation"];
pub const TAGS_HEADER: [&str; 4] = ["tag_id", "popularity", "first_use", "wiki"];
pub const QUESTIONS_HEADER: [&str; 5] = [
    "question_id",
    "ask",
    "bounty_time",
    "bounty_by",
    "first_answer",
];

/// One data line split on tabs, with the 1-based column where each field
/// starts.
struct Row<'a> {
    path: &'a Path,
    line: usize,
    fields: Vec<(usize, &'a str)>,
}

impl<'a> Row<'a> {
    fn split(path: &'a Path, line: usize, text: &'a str) -> Self {
        let mut col = 1;
        let fields = text
            .split('\t')
            .map(|f| {
                let start = col;
                col += f.chars().count() + 1;
                (start, f)
            })
            .collect();
        Row { path, line, fields }
    }

    fn error(&self, column: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn field(&self, i: usize, name: &str) -> Result<&'a str> {
        match self.fields.get(i) {
            Some((_, f)) => Ok(f),
            None => {
                let end = self.fields.last().map_or(1, |(c, f)| c + f.chars().count());
                Err(self.error(end, format!("missing field {name:?}")))
            }
        }
    }

    fn f64(&self, i: usize, name: &str) -> Result<f64> {
        let text = self.field(i, name)?;
        text.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.error(self.fields[i].0, format!("{name}: not a number: {text:?}")))
    }

    /// Empty field means censored.
    fn action(&self, i: usize, name: &str) -> Result<ActionTime> {
        if self.field(i, name)?.trim().is_empty() {
            Ok(ActionTime::Censored)
        } else {
            self.f64(i, name).map(ActionTime::At)
        }
    }
}

/// Reads `path` and checks that the header starts with `expected`. Returns
/// the header fields and the nonblank data lines with their line numbers.
fn read_table(path: &Path, expected: &[&str]) -> Result<(Vec<String>, String)> {
    let text = fs::read_to_string(path)?;
    let header_line = text.lines().next().unwrap_or("");
    let header: Vec<String> = header_line.split('\t').map(str::to_string).collect();
    let row = Row::split(path, 1, header_line);
    for (i, want) in expected.iter().enumerate() {
        match header.get(i) {
            Some(got) if got == want => {}
            _ => {
                let col = row.fields.get(i).map_or(header_line.len() + 1, |f| f.0);
                return Err(row.error(col, format!("expected header {:?}", expected.join("\t"))));
            }
        }
    }
    Ok((header, text))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn warn_extra_columns(path: &Path, header: &[String], known: usize) {
    if header.len() > known {
        log::warn!(
            "{}: ignoring extra columns {}",
            path.display(),
            header[known..].join(", ")
        );
    }
}

/// Parses an events file with header `user_id start action`.
pub fn parse_events_file(path: impl AsRef<Path>) -> Result<Vec<EventRecord>> {
    let path = path.as_ref();
    let (header, text) = read_table(path, &EVENTS_HEADER)?;
    warn_extra_columns(path, &header, 3);
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (line, l) in data_lines(&text) {
        let row = Row::split(path, line, l);
        let id = row.field(0, "user_id")?.to_string();
        let record = EventRecord::new(id, row.f64(1, "start")?, row.action(2, "action")?);
        if !seen.insert(record.user_id.clone()) {
            return Err(Error::DuplicateUser(record.user_id));
        }
        records.push(record);
    }
    Ok(records)
}

fn fmt_action(a: ActionTime) -> String {
    match a {
        ActionTime::At(t) => t.to_string(),
        ActionTime::Censored => String::new(),
    }
}

/// Writes records in the events format. Times use the shortest
/// representation that reads back to the same value.
pub fn write_events<W: Write>(mut w: W, records: &[EventRecord]) -> io::Result<()> {
    writeln!(w, "{}", EVENTS_HEADER.join("\t"))?;
    for r in records {
        writeln!(w, "{}\t{}\t{}", r.user_id, r.start, fmt_action(r.action))?;
    }
    Ok(())
}

/// Writes through a temporary file in the target directory, then renames it
/// into place so readers never see a partial file.
pub fn write_atomic(
    path: impl AsRef<Path>,
    fill: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReputationRow {
    pub user_id: String,
    pub time: f64,
    pub reputation: i64,
}

pub fn parse_reputation_file(path: impl AsRef<Path>) -> Result<Vec<ReputationRow>> {
    let path = path.as_ref();
    let (header, text) = read_table(path, &REPUTATION_HEADER)?;
    warn_extra_columns(path, &header, 3);
    data_lines(&text)
        .map(|(line, l)| {
            let row = Row::split(path, line, l);
            let rep = row.field(2, "reputation")?;
            Ok(ReputationRow {
                user_id: row.field(0, "user_id")?.to_string(),
                time: row.f64(1, "time")?,
                reputation: rep.trim().parse().map_err(|_| {
                    row.error(
                        row.fields[2].0,
                        format!("reputation: not an integer: {rep:?}"),
                    )
                })?,
            })
        })
        .collect()
}

/// Combines logs that may each hold part of a user's history, ordering
/// every user's rows by time.
pub fn merge_reputation_logs(logs: Vec<Vec<ReputationRow>>) -> Vec<ReputationRow> {
    let mut all: Vec<ReputationRow> = logs.into_iter().flatten().collect();
    all.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.time.total_cmp(&b.time)));
    all
}

/// First time each user's reputation reaches `threshold`. Users who never
/// reach it are absent. Each user's rows must be in time order.
pub fn derive_eligibility(log: &[ReputationRow], threshold: i64) -> Result<BTreeMap<String, f64>> {
    let mut last: HashMap<&str, f64> = HashMap::new();
    let mut start = BTreeMap::new();
    for row in log {
        if let Some(prev) = last.insert(&row.user_id, row.time) {
            if row.time < prev {
                return Err(Error::UnsortedLog(row.user_id.clone()));
            }
        }
        if row.reputation >= threshold && !start.contains_key(&row.user_id) {
            start.insert(row.user_id.clone(), row.time);
        }
    }
    Ok(start)
}

/// Covariates with header `user_id name1 name2 ...`; `NA` marks a missing
/// value.
pub fn parse_covariates_file(path: impl AsRef<Path>) -> Result<CovariateTable> {
    let path = path.as_ref();
    let (header, text) = read_table(path, &["user_id"])?;
    let names: Vec<String> = header[1..].to_vec();
    let mut rows = HashMap::new();
    for (line, l) in data_lines(&text) {
        let row = Row::split(path, line, l);
        let id = row.field(0, "user_id")?.to_string();
        let values = names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                if row.field(j + 1, name)?.trim() == "NA" {
                    Ok(None)
                } else {
                    row.f64(j + 1, name).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.insert(id.clone(), values).is_some() {
            return Err(Error::DuplicateUser(id));
        }
    }
    Ok(CovariateTable { names, rows })
}

/// Group labels with header `user_id group`.
pub fn parse_groups_file(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let path = path.as_ref();
    let (header, text) = read_table(path, &["user_id", "group"])?;
    warn_extra_columns(path, &header, 2);
    let mut groups = HashMap::new();
    for (line, l) in data_lines(&text) {
        let row = Row::split(path, line, l);
        let id = row.field(0, "user_id")?.to_string();
        let group = row.field(1, "group")?.trim().to_string();
        if groups.insert(id.clone(), group).is_some() {
            return Err(Error::DuplicateUser(id));
        }
    }
    Ok(groups)
}

/// Tags with header `tag_id popularity first_use wiki`; an empty wiki field
/// means the tag has none.
pub fn parse_tags_file(path: impl AsRef<Path>) -> Result<Vec<TagEntity>> {
    let path = path.as_ref();
    let (header, text) = read_table(path, &TAGS_HEADER)?;
    warn_extra_columns(path, &header, 4);
    let mut seen = HashSet::new();
    let mut tags = Vec::new();
    for (line, l) in data_lines(&text) {
        let row = Row::split(path, line, l);
        let tag = TagEntity {
            id: row.field(0, "tag_id")?.to_string(),
            popularity: row.f64(1, "popularity")?,
            first_use: row.f64(2, "first_use")?,
            wiki: row.action(3, "wiki")?,
        };
        if !seen.insert(tag.id.clone()) {
            return Err(Error::DuplicateUser(tag.id));
        }
        tags.push(tag);
    }
    Ok(tags)
}

/// Questions with header `question_id ask bounty_time bounty_by
/// first_answer`. `bounty_by` is `asker`, `other` or empty when there was no
/// bounty.
pub fn parse_questions_file(path: impl AsRef<Path>) -> Result<Vec<Question>> {
    let path = path.as_ref();
    let (header, text) = read_table(path, &QUESTIONS_HEADER)?;
    warn_extra_columns(path, &header, 5);
    data_lines(&text)
        .map(|(line, l)| {
            let row = Row::split(path, line, l);
            let by = row.field(3, "bounty_by")?.trim();
            let bounty = match by {
                "" => None,
                "asker" | "other" => Some(Bounty {
                    time: row.f64(2, "bounty_time")?,
                    by_asker: by == "asker",
                }),
                _ => {
                    return Err(row.error(
                        row.fields[3].0,
                        format!("bounty_by must be asker, other or empty, got {by:?}"),
                    ))
                }
            };
            Ok(Question {
                id: row.field(0, "question_id")?.to_string(),
                ask: row.f64(1, "ask")?,
                bounty,
                first_answer: row.action(4, "first_answer")?,
            })
        })
        .collect()
}

/// Study settings from a config file or the command line; unset fields
/// keep their defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigOverrides {
    pub tau: Option<f64>,
    pub horizon: Option<f64>,
    pub window: Option<f64>,
    pub model: Option<Model>,
    pub rate: Option<Rate>,
    pub n_controls: Option<usize>,
    pub placement: Option<Placement>,
    pub seed: Option<u64>,
    pub stride: Option<f64>,
    pub folds: Option<usize>,
}

impl ConfigOverrides {
    /// Fields set in `other` win.
    pub fn merge(self, other: ConfigOverrides) -> ConfigOverrides {
        ConfigOverrides {
            tau: other.tau.or(self.tau),
            horizon: other.horizon.or(self.horizon),
            window: other.window.or(self.window),
            model: other.model.or(self.model),
            rate: other.rate.or(self.rate),
            n_controls: other.n_controls.or(self.n_controls),
            placement: other.placement.or(self.placement),
            seed: other.seed.or(self.seed),
            stride: other.stride.or(self.stride),
            folds: other.folds.or(self.folds),
        }
    }

    pub fn build(self) -> Result<StudyConfig> {
        let (Some(tau), Some(horizon)) = (self.tau, self.horizon) else {
            return Err(Error::InvalidConfig("tau and horizon are required".into()));
        };
        let mut c = StudyConfig::new(tau, horizon);
        if let Some(v) = self.window {
            c.window = v;
        }
        if let Some(v) = self.model {
            c.model = v;
        }
        if let Some(v) = self.rate {
            c.rate = v;
        }
        if let Some(v) = self.n_controls {
            c.n_controls = v;
        }
        if let Some(v) = self.placement {
            c.placement = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.folds {
            c.folds = v;
        }
        c.stride = self.stride;
        c.validate()?;
        Ok(c)
    }
}

/// Parses a flat `key = value` config. Blank lines and lines starting with
/// `#` are skipped.
pub fn parse_config_file(path: impl AsRef<Path>) -> Result<ConfigOverrides> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_config(&text, path)
}

pub fn parse_config(text: &str, path: &Path) -> Result<ConfigOverrides> {
    let mut c = ConfigOverrides::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |column: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            column,
            message,
        };
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(1, format!("expected key=value, got {line:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        let col = raw.find('=').unwrap_or(0) + 2;
        let bad = |e: String| err(col, format!("{key}: {e}"));
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        match key {
            "tau" => c.tau = Some(num(value).map_err(bad)?),
            "horizon" => c.horizon = Some(num(value).map_err(bad)?),
            "window" => c.window = Some(num(value).map_err(bad)?),
            "model" => c.model = Some(value.parse().map_err(|e: Error| bad(e.to_string()))?),
            "rate" => c.rate = Some(value.parse().map_err(|e: Error| bad(e.to_string()))?),
            "n_controls" => c.n_controls = Some(num(value).map_err(bad)?),
            "placement" => {
                c.placement = Some(value.parse().map_err(|e: Error| bad(e.to_string()))?)
            }
            "seed" => c.seed = Some(num(value).map_err(bad)?),
            "stride" => c.stride = Some(num(value).map_err(bad)?),
            "folds" => c.folds = Some(num(value).map_err(bad)?),
            _ => return Err(err(1, format!("unknown key {key:?}"))),
        }
    }
    Ok(c)
}

/// A result table: a header row and string cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Table {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_to(&self, w: &mut dyn Write) -> io::Result<()> {
        writeln!(w, "{}", self.header.join("\t"))?;
        for row in &self.rows {
            writeln!(w, "{}", row.join("\t"))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, |w| self.write_to(w))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Treatment and control log-likelihood ratios, one row per group.
pub fn llr_table(result: &BootstrapResult, tau: f64) -> Table {
    let mut t = Table::new(&["group", "tau", "n_users", "llr"]);
    t.push(vec![
        "treatment".into(),
        tau.to_string(),
        result.treatment_size.to_string(),
        result.llr_treatment.to_string(),
    ]);
    for c in &result.controls {
        t.push(vec![
            "control".into(),
            c.tau.to_string(),
            c.n_users.to_string(),
            opt(c.llr),
        ]);
    }
    t
}

/// Empirical CDF of the control log-likelihood ratios.
pub fn ecdf_table(result: &BootstrapResult) -> Table {
    let mut t = Table::new(&["llr", "ecdf"]);
    for (x, f) in result.ecdf.points() {
        t.push(vec![x.to_string(), f.to_string()]);
    }
    t
}

pub fn power_table(curve: &PowerCurve) -> Table {
    let mut t = Table::new(&["strength", "method", "avg_p", "rejection_rate", "n_ok"]);
    for r in &curve.rows {
        t.push(vec![
            r.strength.to_string(),
            r.method.to_string(),
            r.avg_p.to_string(),
            r.rejection_rate.to_string(),
            r.n_ok.to_string(),
        ]);
    }
    t
}

/// Rows of several series stacked, tagged with their scenario.
pub fn counterfactual_table(series: &[&CounterfactualSeries]) -> Table {
    let mut t = Table::new(&["time", "mean", "lo95", "hi95", "mean_rank", "scenario"]);
    for s in series {
        for i in 0..s.grid.len() {
            t.push(vec![
                s.grid[i].to_string(),
                s.mean[i].to_string(),
                s.lo95[i].to_string(),
                s.hi95[i].to_string(),
                opt(s.mean_rank[i]),
                s.scenario.to_string(),
            ]);
        }
    }
    t
}

pub fn balance_table_rows(rows: &[BalanceRow]) -> Table {
    let mut t = Table::new(&[
        "covariate",
        "mean_smd",
        "sd_smd",
        "balanced",
        "n_windows",
        "flag",
    ]);
    for r in rows {
        t.push(vec![
            r.covariate.clone(),
            r.mean_smd.to_string(),
            r.sd_smd.to_string(),
            r.balanced.to_string(),
            r.n_windows.to_string(),
            r.flag.clone().unwrap_or_default(),
        ]);
    }
    t
}

pub fn series_table(series: &IntensitySeries) -> Table {
    let mut t = Table::new(&[
        "center", "side", "estimate", "n_users", "n_events", "sparse",
    ]);
    for p in &series.points {
        t.push(vec![
            p.center.to_string(),
            match p.side {
                Side::Pre => "pre".into(),
                Side::Post => "post".into(),
            },
            opt(p.estimate),
            p.n_users.to_string(),
            p.n_events.to_string(),
            p.sparse.to_string(),
        ]);
    }
    t
}

pub fn grouped_table(report: &GroupedReport) -> Table {
    let mut t = Table::new(&[
        "group",
        "model",
        "lambda0_hat",
        "lambda1_hat",
        "n_events_pre",
        "n_events_post",
        "exposure_pre",
        "exposure_post",
        "sparse_pre",
        "sparse_post",
    ]);
    for f in &report.fits {
        t.push(vec![
            f.key.clone(),
            f.model.to_string(),
            f.lambda0_hat.to_string(),
            f.lambda1_hat.to_string(),
            f.n_events_pre.to_string(),
            f.n_events_post.to_string(),
            f.exposure_pre.to_string(),
            f.exposure_post.to_string(),
            f.sparse_pre.to_string(),
            f.sparse_post.to_string(),
        ]);
    }
    t
}

pub fn bounty_table(model: &BountyModel) -> Table {
    let mut t = Table::new(&[
        "process",
        "stratum",
        "lambda0",
        "lambda1",
        "n_records",
        "n_events_pre",
        "n_events_post",
        "exposure_pre",
        "exposure_post",
        "empty",
    ]);
    let families = [
        ("to_bounty", &model.to_bounty),
        ("to_answer", &model.to_answer),
    ];
    for (name, fits) in families {
        for f in fits.iter() {
            t.push(vec![
                name.into(),
                f.stratum.code().to_string(),
                f.lambda0.to_string(),
                f.lambda1.to_string(),
                f.n_records.to_string(),
                f.n_events_pre.to_string(),
                f.n_events_post.to_string(),
                f.exposure_pre.to_string(),
                f.exposure_post.to_string(),
                f.empty.to_string(),
            ]);
        }
    }
    t
}

/// `dir/name`, creating `dir` if needed.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}
