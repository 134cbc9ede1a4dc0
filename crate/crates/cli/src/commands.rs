use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use canonport::analytics::{factor_regressors, periods_per_year, summarize, BacktestSummary};
use canonport::backtest::{run_backtest, BacktestConfig, BacktestEngine, BacktestResult};
use canonport::cca::{cca_decompose, permutation_null};
use canonport::config::{ConfigError, ConfigFile};
use canonport::data::{
    extract_csv_text, fetch_dataset, parse_french_daily, parse_french_factors, sha256_hex,
    store_in_cache, DataSource, DatasetId, ReturnPanel,
};
use canonport::moments::estimate_moments;
use canonport::montecarlo::{
    build_market, insample_bias_experiment, isserlis_check, verify_prop4, wachter_bias_experiment,
    McEstimate, MonteCarloError, SyntheticMarketSpec,
};
use canonport::policy::{cp_policy, PolicyKind, PolicyMode};
use canonport::signals::column_names;
use chrono::NaiveDate;
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::{
    fmt_f64, fmt_opt, write_csv, write_dated_matrix, write_json, write_labelled_matrix,
};
use crate::{Cli, CliError, Command, Ctx, Global, RunArgs};

const FACTORS: &str = "FF5F";

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Backtest { run, from_manifest } => cmd_backtest(g, run, from_manifest.as_deref()),
        Command::Sweep { run } => cmd_sweep(g, run),
        Command::CcaAnalyze { run, perms } => cmd_cca_analyze(g, run, *perms),
        Command::Simulate(args) => cmd_simulate(g, args),
        Command::DumpMoments { run, date } => cmd_dump_moments(g, run, date.as_deref()),
        Command::Fetch {
            datasets,
            from_file,
        } => cmd_fetch(g, datasets, from_file.as_deref()),
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::ConfigInvalid(msg.into())
}

fn cache_dir(g: &Global) -> PathBuf {
    if let Some(d) = &g.cache_dir {
        return d.clone();
    }
    match std::env::var_os("HOME") {
        Some(home) => PathBuf::from(home).join(".cache").join("canonport"),
        None => PathBuf::from(".canonport-cache"),
    }
}

/// Config file plus command-line overrides, which win over plain keys but
/// not over sweep axes.
fn config_file(g: &Global, run: &RunArgs) -> Result<ConfigFile, CliError> {
    let mut file = match &run.config {
        Some(p) => ConfigFile::load(p).ctx()?,
        None => ConfigFile::default(),
    };
    let mut set = |key: &str, value: String| {
        file.entries.retain(|(k, _)| k != key);
        file.entries.push((key.to_string(), value));
    };
    if let Some(v) = &run.dataset {
        set("dataset", v.clone());
    }
    if let Some(v) = &run.policy {
        set("policy", v.clone());
    }
    if let Some(v) = &run.policy_mode {
        set("policy_mode", v.clone());
    }
    if let Some(v) = run.k {
        set("k", v.to_string());
    }
    if let Some(v) = run.gamma {
        set("gamma", v.to_string());
    }
    if let Some(v) = g.seed {
        set("seed", v.to_string());
    }
    Ok(file)
}

fn resolve_config(g: &Global, run: &RunArgs) -> Result<BacktestConfig, CliError> {
    let cfg = config_file(g, run)?.to_backtest().ctx()?;
    cfg.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(cfg)
}

struct Loaded {
    panel: ReturnPanel,
    sha256: String,
}

fn load_panel(g: &Global, id: &DatasetId) -> Result<Loaded, CliError> {
    let bytes = fetch_dataset(id, &cache_dir(g), g.offline).ctx()?;
    let text = extract_csv_text(&bytes).ctx()?;
    Ok(Loaded {
        panel: parse_french_daily(&text, id).ctx()?,
        sha256: sha256_hex(&bytes),
    })
}

fn load_factor_panel(g: &Global) -> Option<Loaded> {
    let id = DatasetId::factors();
    let attempt = || -> Result<Loaded, CliError> {
        let bytes = fetch_dataset(&id, &cache_dir(g), g.offline).ctx()?;
        let text = extract_csv_text(&bytes).ctx()?;
        Ok(Loaded {
            panel: parse_french_factors(&text).ctx()?,
            sha256: sha256_hex(&bytes),
        })
    };
    match attempt() {
        Ok(l) => Some(l),
        Err(e) => {
            eprintln!("warning: factor data unavailable, skipping regressions ({e})");
            None
        }
    }
}

fn source_string(id: &DatasetId) -> String {
    match &id.source {
        DataSource::Url(u) => u.clone(),
        DataSource::Path(p) => p.display().to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetChecksum {
    pub name: String,
    pub source: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub created: String,
    pub seed: u64,
    pub config: BacktestConfig,
    pub datasets: Vec<DatasetChecksum>,
}

impl RunManifest {
    fn new(command: &str, cfg: &BacktestConfig, datasets: Vec<DatasetChecksum>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            created: chrono::Utc::now().to_rfc3339(),
            seed: cfg.seed,
            config: cfg.clone(),
            datasets,
        }
    }
}

fn checksums(
    cfg: &BacktestConfig,
    data: &Loaded,
    factors: Option<&Loaded>,
) -> Vec<DatasetChecksum> {
    let mut out = vec![DatasetChecksum {
        name: cfg.dataset.name.clone(),
        source: source_string(&cfg.dataset),
        sha256: data.sha256.clone(),
    }];
    if let Some(f) = factors {
        let id = DatasetId::factors();
        out.push(DatasetChecksum {
            name: id.name.clone(),
            source: source_string(&id),
            sha256: f.sha256.clone(),
        });
    }
    out
}

/// Backtest plus its summary; the factor regression uses the same config
/// with the UNI policy as the last regressor.
fn run_one(
    cfg: &BacktestConfig,
    panel: &ReturnPanel,
    factors: Option<&ReturnPanel>,
) -> Result<(BacktestResult, BacktestSummary, bool), CliError> {
    let result = run_backtest(cfg, panel).ctx()?;
    let regressors = match factors {
        None => None,
        Some(f) => {
            let uni = if cfg.policy.kind == PolicyKind::Uni {
                result.realized_returns.clone()
            } else {
                let mut u = cfg.clone();
                u.policy = "uni".parse().ctx()?;
                run_backtest(&u, panel).ctx()?.realized_returns
            };
            match factor_regressors(&result, f, &uni) {
                Ok(x) => Some(x),
                Err(e) => {
                    eprintln!("warning: skipping factor regression ({e})");
                    None
                }
            }
        }
    };
    let summary = summarize(
        &result,
        regressors.as_ref(),
        periods_per_year(cfg.horizon_days),
    )
    .ctx()?;
    Ok((result, summary, regressors.is_some()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ReturnRow {
    date: NaiveDate,
    hold_end: NaiveDate,
    #[serde(rename = "return")]
    ret: f64,
    universe: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Report {
    summary: BacktestSummary,
    factor_regression: bool,
    returns: Vec<ReturnRow>,
}

fn report_header() -> Vec<String> {
    [
        "label",
        "n_periods",
        "periods_per_year",
        "mean_ann",
        "sd_ann",
        "sharpe_ann",
        "sharpe_t",
        "alpha_ann",
        "beta_uni",
        "idio_vol_ann",
        "ir_ann",
        "ir_t",
        "turnover",
        "prop_leverage",
        "sum_neg",
        "min_w",
        "max_w",
        "sd_w",
        "static",
        "dynamic",
        "share_dynamic",
        "long_mean",
        "short_mean",
        "l",
        "l_short",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn report_row(s: &BacktestSummary) -> Vec<String> {
    let p = &s.performance;
    let w = &s.weights;
    let sd = s.static_dynamic;
    vec![
        s.label.clone(),
        p.n_periods.to_string(),
        p.periods_per_year.to_string(),
        fmt_f64(p.mean_ann),
        fmt_f64(p.sd_ann),
        fmt_f64(p.sharpe_ann),
        fmt_f64(p.sharpe_t),
        fmt_opt(p.alpha_ann),
        fmt_opt(p.beta_uni),
        fmt_opt(p.idio_vol_ann),
        fmt_opt(p.ir_ann),
        fmt_opt(p.ir_t),
        fmt_f64(w.turnover),
        fmt_f64(w.prop_leverage),
        fmt_f64(w.sum_neg),
        fmt_f64(w.min_w),
        fmt_f64(w.max_w),
        fmt_f64(w.sd_w),
        fmt_opt(sd.map(|d| d.static_part)),
        fmt_opt(sd.map(|d| d.dynamic_part)),
        fmt_opt(sd.map(|d| d.share_dynamic)),
        fmt_f64(s.legs.long_mean),
        fmt_f64(s.legs.short_mean),
        fmt_f64(s.legs.l),
        fmt_f64(s.legs.l_short),
    ]
}

fn write_run_outputs(
    dir: &Path,
    result: &BacktestResult,
    summary: &BacktestSummary,
    factor_regression: bool,
    manifest: &RunManifest,
) -> Result<(), CliError> {
    let (dates, weights) = result.all_weights();
    write_dated_matrix(&dir.join("weights.csv"), &result.assets, &dates, &weights)?;
    let rows: Vec<ReturnRow> = (0..result.n_rebalances())
        .map(|i| ReturnRow {
            date: result.dates[i],
            hold_end: result.hold_end_dates[i],
            ret: result.realized_returns[i],
            universe: result.universe_sizes[i],
        })
        .collect();
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.date.to_string(),
                r.hold_end.to_string(),
                fmt_f64(r.ret),
                r.universe.to_string(),
            ]
        })
        .collect();
    let header: Vec<String> = ["date", "hold_end", "return", "universe"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_csv(&dir.join("returns.csv"), &header, &csv_rows)?;
    write_csv(
        &dir.join("report.csv"),
        &report_header(),
        &[report_row(summary)],
    )?;
    write_json(
        &dir.join("report.json"),
        &Report {
            summary: summary.clone(),
            factor_regression,
            returns: rows,
        },
    )?;
    write_json(&dir.join("manifest.json"), manifest)
}

fn cmd_backtest(g: &Global, run: &RunArgs, from_manifest: Option<&Path>) -> Result<(), CliError> {
    let cfg = match from_manifest {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            let m: RunManifest = serde_json::from_str(&text)
                .map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            m.config
        }
        None => resolve_config(g, run)?,
    };
    let data = load_panel(g, &cfg.dataset)?;
    let factors = if run.no_factors {
        None
    } else {
        load_factor_panel(g)
    };
    let (result, summary, regressed) =
        run_one(&cfg, &data.panel, factors.as_ref().map(|f| &f.panel))?;
    let manifest = RunManifest::new(
        "backtest",
        &cfg,
        checksums(&cfg, &data, if regressed { factors.as_ref() } else { None }),
    );
    write_run_outputs(&run.out, &result, &summary, regressed, &manifest)?;
    let p = &summary.performance;
    println!(
        "{}: {} returns, mean {:.3}% sd {:.3}% Sharpe {:.3} (t {:.2}) -> {}",
        summary.label,
        p.n_periods,
        p.mean_ann,
        p.sd_ann,
        p.sharpe_ann,
        p.sharpe_t,
        run.out.display()
    );
    Ok(())
}

/// Summary of a finished cell whose manifest records the same config.
fn completed_cell(dir: &Path, cfg: &BacktestConfig) -> Option<BacktestSummary> {
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).ok()?).ok()?;
    let same = serde_json::to_value(&manifest.config).ok()? == serde_json::to_value(cfg).ok()?;
    if !same {
        return None;
    }
    let report: Report =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).ok()?).ok()?;
    Some(report.summary)
}

fn cmd_sweep(g: &Global, run: &RunArgs) -> Result<(), CliError> {
    let cells = config_file(g, run)?.expand_sweep().ctx()?;
    for (_, cfg) in &cells {
        cfg.validate().map_err(|e| invalid(e.to_string()))?;
    }
    let mut data: HashMap<DatasetId, Loaded> = HashMap::new();
    for (_, cfg) in &cells {
        if !data.contains_key(&cfg.dataset) {
            data.insert(cfg.dataset.clone(), load_panel(g, &cfg.dataset)?);
        }
    }
    let factors = if run.no_factors {
        None
    } else {
        load_factor_panel(g)
    };
    let rows: Vec<Vec<String>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, (assign, cfg))| {
            let dir = run.out.join(format!("cell-{i:03}"));
            let summary = match completed_cell(&dir, cfg) {
                Some(s) => s,
                None => {
                    let d = &data[&cfg.dataset];
                    let (result, summary, regressed) =
                        run_one(cfg, &d.panel, factors.as_ref().map(|f| &f.panel))?;
                    let manifest = RunManifest::new(
                        "sweep",
                        cfg,
                        checksums(cfg, d, if regressed { factors.as_ref() } else { None }),
                    );
                    write_run_outputs(&dir, &result, &summary, regressed, &manifest)?;
                    summary
                }
            };
            let desc: Vec<String> = assign.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let mut row = vec![
                format!("cell-{i:03}"),
                desc.join("; "),
                cfg.dataset.name.clone(),
            ];
            row.extend(report_row(&summary));
            Ok(row)
        })
        .collect::<Result<_, CliError>>()?;
    let mut header: Vec<String> = vec!["cell".into(), "assignments".into(), "dataset".into()];
    header.extend(report_header());
    write_csv(&run.out.join("sweep.csv"), &header, &rows)?;
    println!(
        "{} cells -> {}",
        rows.len(),
        run.out.join("sweep.csv").display()
    );
    Ok(())
}

fn cmd_cca_analyze(g: &Global, run: &RunArgs, perms: usize) -> Result<(), CliError> {
    let mut cfg = resolve_config(g, run)?;
    if cfg.policy.kind != PolicyKind::Cp {
        eprintln!(
            "note: canonical decompositions need a CP policy; using {}",
            cfg.policy.label()
        );
        cfg.policy.kind = PolicyKind::Cp;
    }
    cfg.keep_snapshots = true;
    let data = load_panel(g, &cfg.dataset)?;
    let result = run_backtest(&cfg, &data.panel).ctx()?;
    let k_max = result
        .snapshots
        .iter()
        .map(|s| s.s2.len())
        .max()
        .unwrap_or(0);
    let mut header = vec!["date".to_string()];
    header.extend((1..=k_max).map(|i| format!("s2_{i}")));
    let rows: Vec<Vec<String>> = result
        .snapshots
        .iter()
        .map(|s| {
            let mut row = vec![s.date.to_string()];
            row.extend((0..k_max).map(|i| s.s2.get(i).map(|v| fmt_f64(*v)).unwrap_or_default()));
            row
        })
        .collect();
    write_csv(&run.out.join("s2.csv"), &header, &rows)?;

    if perms > 0 {
        let engine = BacktestEngine::new(&cfg, &data.panel).ctx()?;
        let k = engine
            .rebalance_blocks()
            .last()
            .ok_or_else(|| CliError::Failed("no rebalance dates".into()))?;
        let w = engine.window_data(k, 1).ctx()?.ok_or_else(|| {
            CliError::Failed("fewer than two eligible assets at the last rebalance".into())
        })?;
        let observed =
            cca_decompose(&estimate_moments(&w.returns, &w.signals, &cfg.moments).ctx()?)
                .ctx()?
                .squared();
        let null = permutation_null(&w.returns, &w.signals, &cfg.moments, perms, cfg.seed).ctx()?;
        let cols: Vec<String> = (1..=null.ncols()).map(|i| format!("s2_{i}")).collect();
        let names: Vec<String> = (1..=null.nrows()).map(|i| i.to_string()).collect();
        write_labelled_matrix(&run.out.join("null.csv"), &names, &cols, &null)?;
        let mut qrows = Vec::new();
        for i in 0..null.ncols() {
            let mut col: Vec<f64> = null.column(i).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            let q =
                |p: f64| col[((p * (col.len() - 1) as f64).round() as usize).min(col.len() - 1)];
            let exceed = col.iter().filter(|v| **v >= observed[i]).count();
            qrows.push(vec![
                (i + 1).to_string(),
                fmt_f64(observed[i]),
                fmt_f64(q(0.5)),
                fmt_f64(q(0.95)),
                fmt_f64(q(0.99)),
                fmt_f64((1 + exceed) as f64 / (1 + perms) as f64),
            ]);
        }
        let header: Vec<String> = [
            "component",
            "observed",
            "null_q50",
            "null_q95",
            "null_q99",
            "p_value",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        write_csv(&run.out.join("null_summary.csv"), &header, &qrows)?;
    }
    let manifest = RunManifest::new("cca-analyze", &cfg, checksums(&cfg, &data, None));
    write_json(&run.out.join("manifest.json"), &manifest)?;
    println!(
        "{} dates -> {}",
        rows.len(),
        run.out.join("s2.csv").display()
    );
    Ok(())
}

fn cmd_dump_moments(g: &Global, run: &RunArgs, date: Option<&str>) -> Result<(), CliError> {
    let cfg = resolve_config(g, run)?;
    let data = load_panel(g, &cfg.dataset)?;
    let engine = BacktestEngine::new(&cfg, &data.panel).ctx()?;
    let terminal = engine.calendar().len();
    let mut ks: Vec<usize> = engine.rebalance_blocks().collect();
    ks.push(terminal);
    let k = match date {
        None => terminal,
        Some(s) => {
            let d = NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map_err(|e| invalid(format!("--date {s}: {e}")))?;
            *ks.iter()
                .rfind(|&&k| engine.boundary_date(k) <= d)
                .ok_or_else(|| invalid(format!("no rebalance on or before {d}")))?
        }
    };
    let lookahead = usize::from(k != terminal);
    let w = engine
        .window_data(k, lookahead)
        .ctx()?
        .ok_or_else(|| CliError::Failed("fewer than two eligible assets at that date".into()))?;
    let m = estimate_moments(&w.returns, &w.signals, &cfg.moments).ctx()?;
    let assets: Vec<String> = w
        .universe
        .iter()
        .map(|&a| data.panel.assets[a].clone())
        .collect();
    let signal_names: Vec<String> = cfg.signals.iter().map(|s| s.name()).collect();
    let signals = column_names(&assets, &signal_names);
    write_labelled_matrix(&run.out.join("sigma_r.csv"), &assets, &assets, &m.sigma_r)?;
    write_labelled_matrix(&run.out.join("sigma_x.csv"), &signals, &signals, &m.sigma_x)?;
    write_labelled_matrix(
        &run.out.join("sigma_rx.csv"),
        &assets,
        &signals,
        &m.sigma_rx,
    )?;
    #[derive(Serialize)]
    struct Meta {
        date: NaiveDate,
        assets: Vec<String>,
        signals: Vec<String>,
        delta_r: f64,
        delta_x: f64,
        mu_r: Vec<f64>,
        mu_x: Vec<f64>,
        n_obs: usize,
    }
    write_json(
        &run.out.join("moments.json"),
        &Meta {
            date: engine.boundary_date(k),
            assets,
            signals,
            delta_r: m.delta_r,
            delta_x: m.delta_x,
            mu_r: m.mu_r.iter().copied().collect(),
            mu_x: m.mu_x.iter().copied().collect(),
            n_obs: m.n_obs,
        },
    )?;
    write_json(
        &run.out.join("manifest.json"),
        &RunManifest::new("dump-moments", &cfg, checksums(&cfg, &data, None)),
    )?;
    println!(
        "moments at {} -> {}",
        engine.boundary_date(k),
        run.out.display()
    );
    Ok(())
}

fn cmd_fetch(g: &Global, names: &[String], from_file: Option<&Path>) -> Result<(), CliError> {
    let dir = cache_dir(g);
    let names: Vec<String> = if names.is_empty() {
        DatasetId::BUILTIN_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(std::iter::once(FACTORS.to_string()))
            .collect()
    } else {
        names.to_vec()
    };
    let ids: Vec<DatasetId> = names
        .iter()
        .map(|n| {
            n.parse::<DatasetId>()
                .map_err(|e| invalid(format!("{n}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if let Some(path) = from_file {
        let [id] = ids.as_slice() else {
            return Err(invalid("--from-file needs exactly one dataset name"));
        };
        let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let text = extract_csv_text(&bytes).ctx()?;
        if id.name == FACTORS {
            parse_french_factors(&text).ctx()?;
        } else {
            parse_french_daily(&text, id).ctx()?;
        }
        let stored = store_in_cache(id, &dir, &bytes).ctx()?;
        println!("{} {} {}", id.name, sha256_hex(&bytes), stored.display());
        return Ok(());
    }
    let mut failures = Vec::new();
    for id in &ids {
        match fetch_dataset(id, &dir, g.offline) {
            Ok(bytes) => println!("{} {}", id.name, sha256_hex(&bytes)),
            Err(e) => {
                eprintln!("{}: {e}", id.name);
                failures.push(id.name.clone());
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "could not fetch {}",
            failures.join(", ")
        )))
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// prop4, isserlis, wachter or bias.
    #[arg(long)]
    pub experiment: String,
    #[arg(long, default_value = "simulate.csv")]
    pub out: PathBuf,
    /// Canonical correlations, comma separated.
    #[arg(long, default_value = "0.5")]
    pub s: String,
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    /// Signals per asset.
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    /// Sample length for wachter and bias.
    #[arg(long, default_value_t = 60)]
    pub t: usize,
    /// Draws for prop4 and isserlis.
    #[arg(long, default_value_t = 1_000_000)]
    pub draws: usize,
    /// Replications for wachter and bias.
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Common mean of every return and signal (prop4).
    #[arg(long, default_value_t = 0.0)]
    pub mu: f64,
    /// `N/T:q/T` pairs for wachter, comma separated.
    #[arg(long, default_value = "0.03:0.06,0.1:0.2,0.3:0.6")]
    pub ratios: String,
}

fn parse_list(name: &str, text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| invalid(format!("--{name} {t}: {e}")))
        })
        .collect()
}

fn sim_ctx<T>(r: Result<T, impl Into<canonport::Error>>) -> Result<T, CliError> {
    r.map_err(|e| match e.into() {
        canonport::Error::MonteCarlo(MonteCarloError::InvalidSpec(m)) => invalid(m),
        other => other.into(),
    })
}

fn estimate_cells(e: &McEstimate, mean: f64, var: f64) -> Vec<String> {
    vec![
        fmt_f64(mean),
        fmt_f64(e.mean),
        fmt_f64(e.se_mean),
        fmt_f64(var),
        fmt_f64(e.var),
        fmt_f64(e.se_var),
    ]
}

fn cmd_simulate(g: &Global, a: &SimulateArgs) -> Result<(), CliError> {
    let seed = g.seed.unwrap_or(0);
    let s = parse_list("s", &a.s)?;
    let spec = SyntheticMarketSpec {
        n: a.n,
        m: a.m,
        t: a.t,
        target_s: s,
        mu_r: (a.mu != 0.0).then(|| vec![a.mu; a.n]),
        mu_x: (a.mu != 0.0).then(|| vec![a.mu; a.n * a.m]),
        sigma_r: None,
        sigma_x: None,
        seed,
    };
    let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<String>>();
    let (header, rows) = match a.experiment.as_str() {
        "prop4" => {
            let rep = sim_ctx(verify_prop4(&spec, a.draws, a.gamma))?;
            let header = strs(&[
                "component",
                "s",
                "predicted_mean",
                "mean",
                "se_mean",
                "predicted_var",
                "var",
                "se_var",
            ]);
            let mut rows: Vec<Vec<String>> = rep
                .canonical
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let mut row = vec![format!("pair{}", i + 1), fmt_f64(rep.s[i])];
                    row.extend(estimate_cells(
                        e,
                        rep.predicted.expected[i],
                        rep.predicted.variance[i],
                    ));
                    row
                })
                .collect();
            let mut row = vec!["portfolio".to_string(), String::new()];
            row.extend(estimate_cells(
                &rep.portfolio,
                rep.predicted_portfolio_mean,
                rep.predicted_portfolio_var,
            ));
            rows.push(row);
            (header, rows)
        }
        "isserlis" => {
            let market = sim_ctx(build_market(&spec))?;
            let d = cca_decompose(&market.moments).ctx()?;
            let p = cp_policy(&d, a.gamma, PolicyMode::Approx).ctx()?;
            let c = sim_ctx(isserlis_check(&market.moments, &p.a, a.draws, seed))?;
            let header = strs(&["predicted_var", "var", "se_var"]);
            (
                header,
                vec![vec![
                    fmt_f64(c.predicted_var),
                    fmt_f64(c.estimate.var),
                    fmt_f64(c.estimate.se_var),
                ]],
            )
        }
        "wachter" => {
            let ratios = a
                .ratios
                .split(',')
                .map(|pair| {
                    let (n, q) = pair
                        .split_once(':')
                        .ok_or_else(|| invalid(format!("--ratios {pair}: expected N/T:q/T")))?;
                    let p = |v: &str| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| invalid(format!("--ratios {pair}: {e}")))
                    };
                    Ok((p(n)?, p(q)?))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let cells = sim_ctx(wachter_bias_experiment(&ratios, a.t, a.reps, seed))?;
            let header = strs(&[
                "n_ratio",
                "q_ratio",
                "n",
                "q",
                "t",
                "reps",
                "mean_s",
                "se_mean_s",
                "mean_max_s",
                "se_max_s",
                "q05",
                "q50",
                "q95",
            ]);
            let rows = cells
                .iter()
                .map(|c| {
                    vec![
                        fmt_f64(c.n_ratio),
                        fmt_f64(c.q_ratio),
                        c.n.to_string(),
                        c.q.to_string(),
                        c.t.to_string(),
                        c.reps.to_string(),
                        fmt_f64(c.mean_s),
                        fmt_f64(c.se_mean_s),
                        fmt_f64(c.mean_max_s),
                        fmt_f64(c.se_max_s),
                        fmt_f64(c.q05),
                        fmt_f64(c.q50),
                        fmt_f64(c.q95),
                    ]
                })
                .collect();
            (header, rows)
        }
        "bias" => {
            let b = sim_ctx(insample_bias_experiment(&spec, a.reps))?;
            let header = strs(&[
                "mean_in",
                "se_in",
                "mean_out",
                "se_out",
                "mean_diff",
                "se_diff",
                "reps",
            ]);
            (
                header,
                vec![vec![
                    fmt_f64(b.mean_in),
                    fmt_f64(b.se_in),
                    fmt_f64(b.mean_out),
                    fmt_f64(b.se_out),
                    fmt_f64(b.mean_diff),
                    fmt_f64(b.se_diff),
                    b.reps.to_string(),
                ]],
            )
        }
        other => {
            return Err(CliError::from(canonport::Error::Config(
                ConfigError::InvalidValue {
                    key: "experiment".into(),
                    value: other.into(),
                    reason: "expected prop4, isserlis, wachter or bias".into(),
                },
            )))
        }
    };
    write_csv(&a.out, &header, &rows)?;
    println!("{} -> {}", a.experiment, a.out.display());
    Ok(())
}
