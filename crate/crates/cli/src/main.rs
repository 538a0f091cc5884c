use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use badgecause::basic::{test_basic, wilks_pvalue};
use badgecause::bootstrap::{place_virtual_badges, resolve_rate};
use badgecause::cohort::{
    balance_table, fit_grouped, intensity_series, partition_by_group, DEFAULT_POPULARITY_CUTS,
};
use badgecause::counterfactual::{
    compare_series, fit_bounty_model, fit_wiki_hazards, observed_series, popularity_ranks,
    simulate_counterfactual_wikis, time_grid, BandPosition,
};
use badgecause::io::{self, ConfigOverrides, Table};
use badgecause::robust::test_robust;
use badgecause::synth::{Coupling, Effect, SynthSpec};
use badgecause::{
    bootstrap_test, popularity_buckets, run_power_study, simulate_cohort, validate_dataset,
    Dataset, Model, Placement, Rate, StudyConfig,
};

/// Badge effect analysis on user action logs.
#[derive(Parser)]
#[command(name = "badgecause", version)]
struct Cli {
    /// Study settings file with key = value lines
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed; overrides the config file
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    /// Worker threads (defaults to all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct StudyArgs {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    model: Option<ModelArg>,
    /// A single rate or a comma-separated grid for cross-validation
    #[arg(long)]
    rate: Option<String>,
    #[arg(long)]
    n_controls: Option<usize>,
    #[arg(long)]
    placement: Option<PlacementArg>,
    #[arg(long)]
    stride: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Basic,
    Robust,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    UniformRandom,
    SlidingWindow,
}

#[derive(Clone, Copy, ValueEnum)]
enum CouplingArg {
    Additive,
    Independent,
}

#[derive(Args)]
struct EventsArg {
    /// Events file: user_id, start, action
    #[arg(long)]
    events: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10_000)]
    n_users: usize,
    /// Gamma rate of the latent hazards
    #[arg(long, default_value_t = 10.0)]
    r: f64,
    /// Pre-badge Gamma shape
    #[arg(long, default_value_t = 0.1)]
    k0: f64,
    /// Slope of the global trend 1 + a t
    #[arg(long, default_value_t = 0.001)]
    trend: f64,
    #[arg(long, value_enum, default_value = "additive")]
    coupling: CouplingArg,
}

#[derive(Subcommand)]
enum Command {
    /// Check an events file and report dropped records
    Validate {
        #[command(flatten)]
        events: EventsArg,
        #[command(flatten)]
        study: StudyArgs,
    },
    /// Fit the null and two-regime models to the whole cohort
    Fit {
        #[command(flatten)]
        events: EventsArg,
        #[command(flatten)]
        study: StudyArgs,
    },
    /// Bootstrap difference-in-differences test with virtual badges
    Test {
        #[command(flatten)]
        events: EventsArg,
        #[command(flatten)]
        study: StudyArgs,
    },
    /// Covariate balance between treatment and control windows
    Balance {
        #[command(flatten)]
        events: EventsArg,
        /// Covariates file: user_id, then one column per covariate
        #[arg(long)]
        covariates: PathBuf,
        #[command(flatten)]
        study: StudyArgs,
    },
    /// Sliding-window intensity estimates
    Series {
        #[command(flatten)]
        events: EventsArg,
        /// Distance between window centers (defaults to window / 4)
        #[arg(long)]
        step: Option<f64>,
        #[command(flatten)]
        study: StudyArgs,
    },
    /// Two-regime fits per user group
    Grouped {
        #[command(flatten)]
        events: EventsArg,
        /// Groups file: user_id, group
        #[arg(long)]
        groups: PathBuf,
        #[command(flatten)]
        study: StudyArgs,
    },
    /// Start times from reputation histories
    Eligibility {
        /// Reputation logs: user_id, time, reputation
        #[arg(long, required = true, num_args = 1..)]
        reputation: Vec<PathBuf>,
        #[arg(long)]
        threshold: i64,
    },
    /// Generate a synthetic cohort
    Synth {
        #[command(flatten)]
        synth: SynthArgs,
        /// Increase in the probability of acting within ten days
        #[arg(long, default_value_t = 0.0, conflicts_with = "k1")]
        delta_p: f64,
        /// Post-badge Gamma shape, instead of --delta-p
        #[arg(long)]
        k1: Option<f64>,
        #[command(flatten)]
        study: StudyArgs,
    },
    /// Power of the three tests over effect strengths
    Power {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.02,0.05,0.1")]
        strengths: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        replicates: usize,
        #[command(flatten)]
        study: StudyArgs,
    },
    /// Counterfactual tag wikis and bounty hazards
    Counterfactual {
        /// Tags file: tag_id, popularity, first_use, wiki
        #[arg(long, required_unless_present = "questions")]
        tags: Option<PathBuf>,
        /// Questions file: question_id, ask, bounty_time, bounty_by, first_answer
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        replicates: usize,
        /// Grid step of the simulated series
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        #[command(flatten)]
        study: StudyArgs,
    },
}

/// Errors in how the tool was invoked, as opposed to problems in the data.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl StudyArgs {
    fn overrides(&self) -> Result<ConfigOverrides> {
        Ok(ConfigOverrides {
            tau: self.tau,
            horizon: self.horizon,
            window: self.window,
            model: self.model.map(|m| match m {
                ModelArg::Basic => Model::Basic,
                ModelArg::Robust => Model::Robust,
            }),
            rate: self
                .rate
                .as_deref()
                .map(str::parse::<Rate>)
                .transpose()
                .map_err(|e| usage(e.to_string()))?,
            n_controls: self.n_controls,
            placement: self.placement.map(|p| match p {
                PlacementArg::UniformRandom => Placement::UniformRandom,
                PlacementArg::SlidingWindow => Placement::SlidingWindow,
            }),
            seed: None,
            stride: self.stride,
            folds: self.folds,
        })
    }
}

struct Ctx {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
}

impl Ctx {
    fn overrides(&self, study: &StudyArgs) -> Result<ConfigOverrides> {
        let file = match &self.config {
            Some(p) => io::parse_config_file(p).map_err(|e| usage(e.to_string()))?,
            None => ConfigOverrides::default(),
        };
        let mut merged = file.merge(study.overrides()?);
        if self.seed.is_some() {
            merged.seed = self.seed;
        }
        Ok(merged)
    }

    fn study(&self, study: &StudyArgs) -> Result<StudyConfig> {
        self.overrides(study)?
            .build()
            .map_err(|e| usage(e.to_string()))
    }

    fn save(&self, table: &Table, name: &str) -> Result<PathBuf> {
        let path = io::output_path(&self.out, name)?;
        table.save(&path)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}

fn load(events: &Path, horizon: f64) -> Result<Dataset> {
    let records = io::parse_events_file(events)?;
    let v = validate_dataset(records, horizon)?;
    for (reason, n) in &v.dropped {
        log::warn!("dropped {n} record(s): {reason}");
    }
    Ok(v.dataset)
}

fn kv(rows: &[(&str, String)]) -> Table {
    let mut t = Table::new(&["key", "value"]);
    for (k, v) in rows {
        t.push(vec![k.to_string(), v.clone()]);
    }
    t
}

fn print(table: &Table) -> Result<()> {
    table.write_to(&mut std::io::stdout().lock())?;
    Ok(())
}

fn synth_spec(args: &SynthArgs, tau: f64, horizon: f64, seed: u64, effect: Effect) -> SynthSpec {
    SynthSpec {
        n_users: args.n_users,
        horizon,
        tau,
        r: args.r,
        k0: args.k0,
        effect,
        trend_a: args.trend,
        coupling: match args.coupling {
            CouplingArg::Additive => Coupling::Additive,
            CouplingArg::Independent => Coupling::Independent,
        },
        seed,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = Ctx {
        config: cli.config,
        seed: cli.seed,
        out: cli.output_dir,
    };
    match cli.command {
        Command::Validate { events, study } => {
            let horizon = ctx
                .overrides(&study)?
                .horizon
                .ok_or_else(|| usage("--horizon is required"))?;
            let records = io::parse_events_file(&events.events)?;
            let total = records.len();
            let v = validate_dataset(records, horizon)?;
            let mut rows = vec![
                ("records", total.to_string()),
                ("kept", v.dataset.len().to_string()),
            ];
            let reasons: Vec<(String, String)> = v
                .dropped
                .iter()
                .map(|(r, n)| (format!("dropped_{r}"), n.to_string()))
                .collect();
            rows.extend(reasons.iter().map(|(k, v)| (k.as_str(), v.clone())));
            print(&kv(&rows))?;
        }
        Command::Fit { events, study } => {
            let config = ctx.study(&study)?;
            let data = load(&events.events, config.horizon)?;
            let table = match config.model {
                Model::Basic => {
                    let t = test_basic(data.cohort(), config.tau)?;
                    kv(&[
                        ("model", "basic".into()),
                        ("lambda_null", t.null.lambda0.to_string()),
                        ("lambda0", t.alt.lambda0.to_string()),
                        ("lambda1", t.alt.lambda1.to_string()),
                        ("n_events_pre", t.alt.n_events_pre.to_string()),
                        ("n_events_post", t.alt.n_events_post.to_string()),
                        ("exposure_pre", t.alt.exposure_pre.to_string()),
                        ("exposure_post", t.alt.exposure_post.to_string()),
                        ("loglik_null", t.null.loglik.to_string()),
                        ("loglik_alt", t.alt.loglik.to_string()),
                        ("llr", t.llr.to_string()),
                        ("wilks_p", wilks_pvalue(t.llr)?.to_string()),
                    ])
                }
                Model::Robust => {
                    let r = resolve_rate(&data, &config)?.expect("robust model has a rate");
                    let t = test_robust(data.cohort(), config.tau, r)?;
                    kv(&[
                        ("model", "robust".into()),
                        ("r", r.to_string()),
                        ("k_null", t.null.k0.to_string()),
                        ("k0", t.alt.k0.to_string()),
                        ("k1", t.alt.k1.to_string()),
                        ("mean_intensity_pre", t.alt.mean_intensity_pre.to_string()),
                        ("mean_intensity_post", t.alt.mean_intensity_post.to_string()),
                        ("n_events_pre", t.alt.n_events_pre.to_string()),
                        ("n_events_post", t.alt.n_events_post.to_string()),
                        ("loglik_null", t.null.loglik.to_string()),
                        ("loglik_alt", t.alt.loglik.to_string()),
                        ("llr", t.llr.to_string()),
                    ])
                }
            };
            ctx.save(&table, "fit.tsv")?;
            print(&table)?;
        }
        Command::Test { events, study } => {
            let config = ctx.study(&study)?;
            let data = load(&events.events, config.horizon)?;
            let result = bootstrap_test(&data, &config)?;
            ctx.save(&io::llr_table(&result, config.tau), "llr.tsv")?;
            ctx.save(&io::ecdf_table(&result), "ecdf.tsv")?;
            let summary = kv(&[
                ("model", result.model.to_string()),
                ("rate", result.rate.map_or("NA".into(), |r| r.to_string())),
                ("treatment_size", result.treatment_size.to_string()),
                ("llr_treatment", result.llr_treatment.to_string()),
                ("n_controls_used", result.n_controls_used.to_string()),
                ("n_controls_dropped", result.n_controls_dropped.to_string()),
                ("p_value", result.p_value.to_string()),
            ]);
            ctx.save(&summary, "test.tsv")?;
            print(&summary)?;
        }
        Command::Balance {
            events,
            covariates,
            study,
        } => {
            let config = ctx.study(&study)?;
            let data = load(&events.events, config.horizon)?;
            let table = io::parse_covariates_file(&covariates)?;
            let schedule = place_virtual_badges(
                config.horizon,
                config.tau,
                config.window,
                config.n_controls,
                config.placement,
                config.stride,
                badgecause::rng::derive_seed(config.seed, &[0]),
            )?;
            let rows = balance_table(&table, &data, config.tau, config.window, &schedule);
            let out = io::balance_table_rows(&rows);
            ctx.save(&out, "balance.tsv")?;
            print(&out)?;
        }
        Command::Series {
            events,
            step,
            study,
        } => {
            let config = ctx.study(&study)?;
            let data = load(&events.events, config.horizon)?;
            let rate = resolve_rate(&data, &config)?;
            let step = step.unwrap_or(config.window / 4.0);
            let series =
                intensity_series(&data, config.tau, config.window, step, config.model, rate)
                    .map_err(|e| usage(e.to_string()))?;
            ctx.save(&io::series_table(&series), "series.tsv")?;
        }
        Command::Grouped {
            events,
            groups,
            study,
        } => {
            let config = ctx.study(&study)?;
            let data = load(&events.events, config.horizon)?;
            let group_of = io::parse_groups_file(&groups)?;
            let rate = resolve_rate(&data, &config)?;
            let parts = partition_by_group(data.records().to_vec(), &group_of, config.horizon);
            let report = fit_grouped(&parts, config.tau, config.model, rate)?;
            for (key, why) in &report.flagged {
                log::warn!("group {key} skipped: {why}");
            }
            let out = io::grouped_table(&report);
            ctx.save(&out, "grouped.tsv")?;
            print(&out)?;
        }
        Command::Eligibility {
            reputation,
            threshold,
        } => {
            let logs = reputation
                .iter()
                .map(io::parse_reputation_file)
                .collect::<badgecause::Result<Vec<_>>>()?;
            let starts = io::derive_eligibility(&io::merge_reputation_logs(logs), threshold)?;
            let mut t = Table::new(&["user_id", "start"]);
            for (user, s) in starts {
                t.push(vec![user, s.to_string()]);
            }
            ctx.save(&t, "eligibility.tsv")?;
        }
        Command::Synth {
            synth,
            delta_p,
            k1,
            study,
        } => {
            let o = ctx.overrides(&study)?;
            let effect = k1.map_or(Effect::TargetDp(delta_p), Effect::Shape);
            let spec = synth_spec(
                &synth,
                o.tau.unwrap_or(180.0),
                o.horizon.unwrap_or(360.0),
                o.seed.unwrap_or(0),
                effect,
            );
            spec.validate().map_err(|e| usage(e.to_string()))?;
            let records = simulate_cohort(&spec)?;
            let path = io::output_path(&ctx.out, "events.tsv")?;
            io::write_atomic(&path, |w| io::write_events(w, &records))?;
            log::info!("wrote {}", path.display());
        }
        Command::Power {
            synth,
            strengths,
            replicates,
            study,
        } => {
            let mut o = ctx.overrides(&study)?;
            let tau = *o.tau.get_or_insert(180.0);
            let horizon = *o.horizon.get_or_insert(360.0);
            let seed = o.seed.unwrap_or(0);
            let test = o.build().map_err(|e| usage(e.to_string()))?;
            let template = synth_spec(&synth, tau, horizon, seed, Effect::TargetDp(0.0));
            template.validate().map_err(|e| usage(e.to_string()))?;
            let curve = run_power_study(&strengths, replicates, &template, &test)?;
            let out = io::power_table(&curve);
            ctx.save(&out, "power.tsv")?;
            print(&out)?;
        }
        Command::Counterfactual {
            tags,
            questions,
            replicates,
            step,
            study,
        } => {
            let o = ctx.overrides(&study)?;
            let (Some(tau), Some(horizon)) = (o.tau, o.horizon) else {
                return Err(usage("--tau and --horizon are required"));
            };
            let seed = o.seed.unwrap_or(0);
            if let Some(tags) = tags {
                let tags = io::parse_tags_file(&tags)?;
                let pop: Vec<(String, f64)> =
                    tags.iter().map(|t| (t.id.clone(), t.popularity)).collect();
                let buckets = popularity_buckets(&pop, &DEFAULT_POPULARITY_CUTS);
                let (lambda0, report) = fit_wiki_hazards(&tags, &buckets, tau, horizon)?;
                for (key, why) in &report.flagged {
                    log::warn!("bucket {key} not fitted: {why}");
                }
                ctx.save(&io::grouped_table(&report), "wiki_hazards.tsv")?;
                let grid = time_grid(tau, horizon, step).map_err(|e| usage(e.to_string()))?;
                let cf = simulate_counterfactual_wikis(
                    &tags, &buckets, &lambda0, &grid, replicates, seed,
                )?;
                let truth = observed_series(&tags, &popularity_ranks(&tags), &grid)?;
                ctx.save(
                    &io::counterfactual_table(&[&truth, &cf]),
                    "counterfactual.tsv",
                )?;
                let cmp = compare_series(&truth, &cf)?;
                let above = cmp
                    .position
                    .iter()
                    .filter(|p| **p == BandPosition::Above)
                    .count();
                print(&kv(&[
                    (
                        "final_difference",
                        cmp.difference.last().unwrap().to_string(),
                    ),
                    ("grid_points_above_band", above.to_string()),
                    (
                        "first_exit_above",
                        cmp.first_exit_above()
                            .map_or("NA".into(), |t| t.to_string()),
                    ),
                ]))?;
            }
            if let Some(questions) = questions {
                let qs = io::parse_questions_file(&questions)?;
                let model = fit_bounty_model(&qs, tau, horizon)?;
                if !model.rejected.is_empty() {
                    log::warn!(
                        "{} question(s) rejected: bounty offered too early",
                        model.rejected.len()
                    );
                }
                ctx.save(&io::bounty_table(&model), "bounty.tsv")?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<badgecause::Error>() {
        Some(e) if !e.is_data_error() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
