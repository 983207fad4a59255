//! `pbho`: configuration-driven runner for the experiment harnesses,
//! plus privacy-certificate and bound evaluation utilities.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2
//! runtime failure, 3 missing dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pbho_core::bounds::{pac_bayes_bound, chain_rule_kl_bound_equal, BoundConfig, BoundKind};
use pbho_core::experiments::{
    forward_select, freedman_null_trial, min_weight_norm_baseline,
    regularizer_generalization_correlation, run_weight_decay_experiment, ExperimentError,
    FreedmanConfig, LdConfig, ModelKind, SelectionObjective, SelectionPath, WeightDecayConfig,
    WeightDecayRun,
};
use pbho_core::hyperopt::write_history_csv;
use pbho_core::models::{generate_freedman, load_mnist, ModelError};
use pbho_core::samplers::{account_privacy, max_dp_step_size, PrivacyBudget};

#[derive(Parser)]
#[command(name = "pbho", version, about = "Hyperparameter optimization with a gradient-incoherence regularizer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a configured experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `--set freedman.max_p=4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Maximum certified step size, or the (ε, δ) frontier for a given η.
    Privacy {
        /// Minibatch size h.
        #[arg(long)]
        minibatch: usize,
        /// Dataset size s.
        #[arg(long)]
        dataset_size: usize,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 1)]
        chains: usize,
        /// When given (without ε, δ), print the frontier this step size implies.
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a generalization bound from a per-step trace.
    Bound {
        /// CSV with `d2` and `risk` columns.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "simplified")]
        kind: String,
        /// Bound sample size (validation examples behind the empirical risk).
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        conf_delta: f64,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Inner step size behind the KL trace.
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
        #[arg(long, default_value_t = 1)]
        n_train: usize,
        #[arg(long, default_value_t = 1)]
        n_val: usize,
        /// Parameter dimension m.
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long)]
        loss_min: Option<f64>,
        #[arg(long)]
        loss_max: Option<f64>,
        /// Mark the trace as produced outside a valid privacy certificate.
        #[arg(long)]
        cert_invalid: bool,
    },
    /// Extract gnuplot-ready columns from a CSV artifact.
    PlotData {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated column names, in output order.
        #[arg(long)]
        columns: String,
        #[arg(long)]
        output: PathBuf,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

type CliResult<T> = Result<T, Failure>;

fn fail<T>(code: u8, msg: impl Into<String>) -> CliResult<T> {
    Err(Failure { code, msg: msg.into() })
}

fn runtime_code(e: &ExperimentError) -> u8 {
    match e {
        ExperimentError::Model(ModelError::Io { .. }) => 3,
        _ => 2,
    }
}

// ---------------------------------------------------------------- config

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> String {
    "out".into()
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// "freedman-null" | "freedman-signal" | "weight-decay"
    experiment: String,
    /// "eq1" | "eq5" | "aic" | "all" (selection experiments only)
    #[serde(default)]
    objective: Option<String>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_out")]
    output_dir: String,
    /// Worker threads for (ζ, seed) parallelism; default all cores.
    #[serde(default)]
    workers: Option<usize>,
    #[serde(default)]
    data: DataSection,
    #[serde(default)]
    freedman: FreedmanSection,
    #[serde(default)]
    weight_decay: WdSection,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct DataSection {
    mnist_dir: Option<String>,
    n_total: usize,
    d: usize,
    test_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { mnist_dir: None, n_total: 500, d: 500, test_size: 10_000 }
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct FreedmanSection {
    max_p: usize,
    zeta: f64,
    chains: usize,
    eta: f64,
    steps: usize,
    tau_grid: Option<Vec<f64>>,
}

impl Default for FreedmanSection {
    fn default() -> Self {
        FreedmanSection { max_p: 10, zeta: 0.0025, chains: 50, eta: 0.1, steps: 50, tau_grid: None }
    }
}

impl FreedmanSection {
    fn to_config(&self) -> FreedmanConfig {
        FreedmanConfig {
            max_p: self.max_p,
            zeta: self.zeta,
            ld: LdConfig { chains: self.chains, eta: self.eta, steps: self.steps },
            tau_grid: self.tau_grid.clone(),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct WdSection {
    /// "linear-softmax" | "mlp"
    model: String,
    hidden: usize,
    zetas: Vec<f64>,
    subsample: usize,
    inner_steps: usize,
    outer_steps: usize,
    inner_lr: f64,
    outer_lr: f64,
    lambda0: f64,
    init_sd: f64,
    eval_every: usize,
}

impl Default for WdSection {
    fn default() -> Self {
        WdSection {
            model: "linear-softmax".into(),
            hidden: 32,
            zetas: vec![0.0, 1.0],
            subsample: 50,
            inner_steps: 1000,
            outer_steps: 100,
            inner_lr: 1e-4,
            outer_lr: 0.5,
            lambda0: 0.0,
            init_sd: 0.01,
            eval_every: 1,
        }
    }
}

impl WdSection {
    fn to_config(&self) -> WeightDecayConfig {
        WeightDecayConfig {
            subsample: self.subsample,
            inner_steps: self.inner_steps,
            outer_steps: self.outer_steps,
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            lambda0: self.lambda0,
            init_sd: self.init_sd,
            eval_every: self.eval_every,
        }
    }

    fn model_kind(&self) -> CliResult<ModelKind> {
        match self.model.as_str() {
            "linear-softmax" => Ok(ModelKind::LinearSoftmax),
            "mlp" => Ok(ModelKind::Mlp { hidden: self.hidden }),
            other => fail(1, format!("weight_decay.model: unknown model kind {other:?}")),
        }
    }
}

/// Applies one `--set key=value` override onto the parsed TOML tree.
/// Values parse as TOML scalars and fall back to plain strings.
fn apply_override(root: &mut toml::Value, spec: &str) -> CliResult<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        return fail(1, format!("--set {spec:?}: expected KEY=VALUE"));
    };
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| Failure { code: 1, msg: format!("--set {key}: {part} is not a table") })?
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Failure { code: 1, msg: format!("--set {key}: not a table path") })?
        .insert(parts.last().unwrap().to_string(), parsed);
    Ok(())
}

fn load_config(path: &Path, overrides: &[String]) -> CliResult<(RunConfig, toml::Value)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure { code: 1, msg: format!("cannot read {}: {e}", path.display()) })?;
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| Failure { code: 1, msg: format!("{}: {e}", path.display()) })?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let cfg: RunConfig = value
        .clone()
        .try_into()
        .map_err(|e| Failure { code: 1, msg: format!("{}: {e}", path.display()) })?;
    Ok((cfg, value))
}

// ------------------------------------------------------------------ run

fn write_manifest(dir: &Path, merged: &toml::Value, seeds: &[u64]) -> CliResult<()> {
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    let manifest = serde_json::json!({
        "config": merged,
        "seeds": seeds,
        "git": git,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&dir.join("manifest.json"), &manifest)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure { code: 2, msg: e.to_string() })?;
    fs::write(path, text)
        .map_err(|e| Failure { code: 2, msg: format!("cannot write {}: {e}", path.display()) })
}

fn write_selection_csv(path: &Path, sel: &SelectionPath) -> CliResult<()> {
    let mut out = String::from("p,features,objective,val_r2,val_mse,test_mse,aic\n");
    for e in &sel.entries {
        let feats = e
            .features
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join("+");
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.p, feats, e.objective, e.val_r2, e.val_mse, e.test_mse, e.aic
        ));
    }
    fs::write(path, out)
        .map_err(|e| Failure { code: 2, msg: format!("cannot write {}: {e}", path.display()) })
}

fn parse_objectives(spec: Option<&str>) -> CliResult<Vec<(SelectionObjective, &'static str)>> {
    let all = [
        (SelectionObjective::Eq1, "eq1"),
        (SelectionObjective::Eq5, "eq5"),
        (SelectionObjective::Aic, "aic"),
    ];
    match spec.unwrap_or("all") {
        "all" => Ok(all.to_vec()),
        "eq1" => Ok(vec![all[0]]),
        "eq5" => Ok(vec![all[1]]),
        "aic" => Ok(vec![all[2]]),
        other => fail(1, format!("objective: unknown value {other:?}")),
    }
}

fn run_freedman(cfg: &RunConfig, signal: bool, out: &Path) -> CliResult<()> {
    let objectives = parse_objectives(cfg.objective.as_deref())?;
    let fcfg = cfg.freedman.to_config();
    let kind = if signal { "freedman-signal" } else { "freedman-null" };
    let mut summary = Vec::new();
    for &seed in &cfg.seeds {
        let (train, val, test) =
            generate_freedman(signal, cfg.data.n_total, cfg.data.d, cfg.data.test_size, seed)
                .map_err(|e| Failure { code: 2, msg: e.to_string() })?;
        let mut per_seed = serde_json::Map::new();
        per_seed.insert("seed".into(), seed.into());
        for &(objective, name) in &objectives {
            let path = forward_select(&train, &val, &test, objective, &fcfg, seed)
                .map_err(|e| Failure { code: runtime_code(&e), msg: e.to_string() })?;
            write_selection_csv(&out.join(format!("{kind}-{name}-seed{seed}.csv")), &path)?;
            let best = path.argmin_entry();
            per_seed.insert(
                name.into(),
                serde_json::json!({
                    "argmin_p": best.p,
                    "argmin_features": best.features,
                    "argmin_test_mse": best.test_mse,
                }),
            );
        }
        if !signal {
            let trial = freedman_null_trial(&train, &val, &test, &fcfg, seed)
                .map_err(|e| Failure { code: runtime_code(&e), msg: e.to_string() })?;
            per_seed.insert(
                "null_trial".into(),
                serde_json::to_value(&trial).map_err(|e| Failure { code: 2, msg: e.to_string() })?,
            );
        }
        summary.push(serde_json::Value::Object(per_seed));
    }
    write_json(&out.join("summary.json"), &summary)
}

fn run_weight_decay_cmd(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let Some(dir) = &cfg.data.mnist_dir else {
        return fail(1, "data.mnist_dir is required for the weight-decay experiment");
    };
    let (train, test) = load_mnist(Path::new(dir))
        .map_err(|e| Failure { code: 3, msg: e.to_string() })?;
    let kind = cfg.weight_decay.model_kind()?;
    let wcfg = cfg.weight_decay.to_config();
    let runs = run_weight_decay_experiment(
        &train, &test, kind, &cfg.weight_decay.zetas, &cfg.seeds, &wcfg,
    )
    .map_err(|e| Failure { code: runtime_code(&e), msg: e.to_string() })?;
    let mut entries = Vec::new();
    for run in &runs {
        let tag = format!("{}-zeta{}-seed{}", run.objective_kind, run.zeta, run.seed);
        write_history_csv(&run.history, &out.join(format!("history-{tag}.csv")))
            .map_err(|e| Failure { code: 2, msg: e.to_string() })?;
        write_records_csv(&out.join(format!("trace-{tag}.csv")), run)?;
        let baseline = (run.objective_kind == "eq1")
            .then(|| min_weight_norm_baseline(run).ok())
            .flatten();
        entries.push(serde_json::json!({
            "objective": run.objective_kind,
            "zeta": run.zeta,
            "seed": run.seed,
            "final": run.final_record(),
            "lambda_mean": run.lambda_mean,
            "baseline": baseline,
        }));
    }
    let correlation = match regularizer_generalization_correlation(&runs) {
        Ok(stats) => serde_json::to_value(&stats).unwrap_or(serde_json::Value::Null),
        Err(e) => serde_json::json!({ "warning": e.to_string() }),
    };
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({ "runs": entries, "correlation": correlation }),
    )
}

fn write_records_csv(path: &Path, run: &WeightDecayRun) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Failure { code: 2, msg: e.to_string() })?;
    for r in &run.records {
        w.serialize(r).map_err(|e| Failure { code: 2, msg: e.to_string() })?;
    }
    w.flush().map_err(|e| Failure { code: 2, msg: e.to_string() })
}

fn cmd_run(config: &Path, set: &[String]) -> CliResult<()> {
    let (cfg, merged) = load_config(config, set)?;
    if let Some(w) = cfg.workers {
        // Ignored when a global pool already exists (tests, repeat calls).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out)
        .map_err(|e| Failure { code: 2, msg: format!("cannot create {}: {e}", out.display()) })?;
    match cfg.experiment.as_str() {
        "freedman-null" => run_freedman(&cfg, false, &out)?,
        "freedman-signal" => run_freedman(&cfg, true, &out)?,
        "weight-decay" => run_weight_decay_cmd(&cfg, &out)?,
        other => return fail(1, format!("experiment: unknown kind {other:?}")),
    }
    write_manifest(&out, &merged, &cfg.seeds)
}

// -------------------------------------------------------------- privacy

#[allow(clippy::too_many_arguments)]
fn cmd_privacy(
    minibatch: usize,
    dataset_size: usize,
    epsilon: Option<f64>,
    delta: Option<f64>,
    gamma: f64,
    chains: usize,
    eta: Option<f64>,
    json: bool,
) -> CliResult<()> {
    match (epsilon, delta, eta) {
        (Some(eps), Some(delta), _) => {
            let budget = PrivacyBudget::new(eps, delta, chains, minibatch, dataset_size)
                .map_err(|e| Failure { code: 1, msg: e.to_string() })?;
            let eta_max = max_dp_step_size(&budget, gamma)
                .map_err(|e| Failure { code: 1, msg: e.to_string() })?;
            let (ce, cd) = account_privacy(&budget);
            let report = serde_json::json!({
                "minibatch": minibatch,
                "dataset_size": dataset_size,
                "epsilon": eps,
                "delta": delta,
                "gamma": gamma,
                "chains": chains,
                "eta_max": eta_max,
                "composed_epsilon": ce,
                "composed_delta": cd,
            });
            if json {
                println!("{}", serde_json::to_string_pretty(&report).unwrap());
            } else {
                println!("eta_max = {eta_max:.6}  ({chains} chain(s): epsilon {ce}, delta {cd})");
            }
            Ok(())
        }
        (None, None, Some(eta)) => {
            if eta <= 0.0 {
                return fail(1, format!("eta {eta} must be positive"));
            }
            let (h, s) = (minibatch as f64, dataset_size as f64);
            let mut rows = Vec::new();
            for i in 1..=10 {
                let eps = 0.05 * i as f64;
                let delta_min = 1.25 * (-h * h * eps * eps / (s * gamma * gamma * eta)).exp();
                let feasible = delta_min < eps;
                rows.push(serde_json::json!({
                    "epsilon": eps,
                    "delta_min": delta_min,
                    "composed_epsilon": chains as f64 * eps,
                    "composed_delta": chains as f64 * delta_min,
                    "feasible": feasible,
                }));
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&rows).unwrap());
            } else {
                println!("epsilon  delta_min      feasible");
                for r in &rows {
                    println!(
                        "{:<8.2} {:<14.6e} {}",
                        r["epsilon"].as_f64().unwrap(),
                        r["delta_min"].as_f64().unwrap(),
                        r["feasible"]
                    );
                }
            }
            Ok(())
        }
        _ => fail(1, "provide either --epsilon and --delta, or --eta alone"),
    }
}

// ---------------------------------------------------------------- bound

fn read_trace(path: &Path) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Failure { code: 1, msg: format!("{}: {e}", path.display()) })?;
    let headers = rdr
        .headers()
        .map_err(|e| Failure { code: 1, msg: e.to_string() })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(d2_at), Some(risk_at)) = (col("d2"), col("risk")) else {
        return fail(1, format!("{}: trace needs `d2` and `risk` columns", path.display()));
    };
    let mut d2 = Vec::new();
    let mut risk = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Failure { code: 1, msg: e.to_string() })?;
        let parse = |at: usize| -> CliResult<f64> {
            rec.get(at)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Failure { code: 1, msg: format!("{}: bad row {rec:?}", path.display()) })
        };
        d2.push(parse(d2_at)?);
        risk.push(parse(risk_at)?);
    }
    if d2.is_empty() {
        return fail(1, format!("{}: empty trace", path.display()));
    }
    Ok((d2, risk))
}

#[allow(clippy::too_many_arguments)]
fn cmd_bound(
    trace: &Path,
    kind: &str,
    n: usize,
    conf_delta: f64,
    epsilon: f64,
    delta: f64,
    eta: f64,
    n_train: usize,
    n_val: usize,
    dim: usize,
    loss_range: Option<(f64, f64)>,
    cert_valid: bool,
) -> CliResult<()> {
    let kind = match kind {
        "simplified" => BoundKind::Simplified,
        "general" => BoundKind::General,
        "bounded-loss" => BoundKind::BoundedLoss,
        other => return fail(1, format!("kind: unknown bound kind {other:?}")),
    };
    let (d2, risks) = read_trace(trace)?;
    let emp = risks.iter().sum::<f64>() / risks.len() as f64;
    let kl = chain_rule_kl_bound_equal(&d2, eta, n_train, n_val, dim);
    let cfg = BoundConfig { delta_conf: conf_delta, loss_range, ..Default::default() };
    let report = pac_bayes_bound(emp, kl, n, epsilon, delta, kind, &cfg, cert_valid)
        .map_err(|e| Failure { code: 1, msg: e.to_string() })?;
    let warning = if report.bound.is_none() {
        Some("beta infeasible: the bound does not hold at this budget".to_string())
    } else if report.vacuous {
        Some("bound exceeds the maximum loss (vacuous)".to_string())
    } else {
        None
    };
    let out = serde_json::json!({ "report": report, "warning": warning });
    println!("{}", serde_json::to_string_pretty(&out).unwrap());
    Ok(())
}

// ------------------------------------------------------------ plot-data

fn cmd_plot_data(input: &Path, columns: &str, output: &Path) -> CliResult<()> {
    let mut rdr = csv::Reader::from_path(input)
        .map_err(|e| Failure { code: 1, msg: format!("{}: {e}", input.display()) })?;
    let headers = rdr
        .headers()
        .map_err(|e| Failure { code: 1, msg: e.to_string() })?
        .clone();
    let wanted: Vec<&str> = columns.split(',').map(str::trim).collect();
    let idx: Vec<usize> = wanted
        .iter()
        .map(|name| {
            headers.iter().position(|h| h == *name).ok_or_else(|| Failure {
                code: 1,
                msg: format!("{}: no column {name:?}", input.display()),
            })
        })
        .collect::<CliResult<_>>()?;
    let mut out = format!("# {}\n", wanted.join(" "));
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Failure { code: 1, msg: e.to_string() })?;
        let row: Vec<&str> = idx.iter().map(|&i| rec.get(i).unwrap_or("nan")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(output, out)
        .map_err(|e| Failure { code: 2, msg: format!("cannot write {}: {e}", output.display()) })
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Run { config, set } => cmd_run(&config, &set),
        Cmd::Privacy {
            minibatch,
            dataset_size,
            epsilon,
            delta,
            gamma,
            chains,
            eta,
            json,
        } => cmd_privacy(minibatch, dataset_size, epsilon, delta, gamma, chains, eta, json),
        Cmd::Bound {
            trace,
            kind,
            n,
            conf_delta,
            epsilon,
            delta,
            eta,
            n_train,
            n_val,
            dim,
            loss_min,
            loss_max,
            cert_invalid,
        } => {
            let loss_range = match (loss_min, loss_max) {
                (Some(a), Some(b)) => Some((a, b)),
                (None, None) => None,
                _ => return fail(1, "provide both --loss-min and --loss-max or neither"),
            };
            cmd_bound(
                &trace, &kind, n, conf_delta, epsilon, delta, eta, n_train, n_val, dim,
                loss_range, !cert_invalid,
            )
        }
        Cmd::PlotData { input, columns, output } => cmd_plot_data(&input, &columns, &output),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
