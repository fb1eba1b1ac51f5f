//! The `run`, `eval` and `sweep` commands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use proxyrl::grading::baseline_grader;
use proxyrl::metrics::{alignment_report, pgr, PromptGroupedScores};
use proxyrl::protocol::{run_protocol, GraderSnapshot, Mode, RunResult};
use proxyrl::runlog::RUNLOG_VERSION;
use proxyrl::{Env, Error, PolicyParams, ProxyGrader, Streams};
use serde::Serialize;
use serde_json::json;

use crate::run_config::{self, ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug)]
pub enum CommandError {
    Config(ConfigError),
    Run(Error),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => EXIT_CONFIG,
            CommandError::Run(Error::NumericDivergence) => EXIT_DIVERGED,
            CommandError::Run(_) => EXIT_FAILED,
        }
    }
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommandError::Config(e) => write!(f, "invalid config: {e}"),
            CommandError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        CommandError::Run(e)
    }
}

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        CommandError::Run(Error::Io(e))
    }
}

impl From<serde_json::Error> for CommandError {
    fn from(e: serde_json::Error) -> Self {
        CommandError::Run(Error::Json(e))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    pub baseline_j: f64,
    pub maximum_j: f64,
    pub achieved_j: f64,
    pub achieved_step: u64,
    pub pgr: Option<f64>,
    pub peak_step: u64,
    pub peak_j: f64,
    pub final_j: f64,
    pub stopped_at: Option<u64>,
    pub budget: Budget,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Budget {
    pub feedback: u64,
    pub validation: u64,
    pub over_opt_check: u64,
    pub baseline_eval: u64,
    pub protocol_total: u64,
    pub total: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CommandError> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn manifest(config: &RunConfig) -> serde_json::Value {
    json!({
        "name": "proxyrl",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "env_seed": config.env.seed,
        "scale_factor": config.scale_factor,
        "components": {
            "runlog": RUNLOG_VERSION,
            "checkpoint": proxyrl::policy::CHECKPOINT_VERSION,
        },
        "config": config,
    })
}

/// Expert-baseline objective used as the PGR maximum.
fn pgr_maximum(config: &RunConfig, env: &Env) -> Result<f64, CommandError> {
    if let Some(m) = config.pgr_maximum {
        return Ok(m);
    }
    let mut exp = config.experiment();
    exp.protocol.mode = Mode::ExpertBaseline;
    exp.protocol.total_steps = config.reference_steps;
    let out = run_protocol(&exp, env, None)?;
    if let Some(e) = out.error {
        return Err(e.into());
    }
    Ok(out.result.final_j())
}

fn load_snapshots(dir: &Path) -> Result<Vec<GraderSnapshot>, CommandError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(serde_json::from_reader(fs::File::open(p)?)?))
        .collect()
}

fn snapshots_for_retrain(config: &RunConfig, env: &Env) -> Result<Vec<GraderSnapshot>, CommandError> {
    if let Some(dir) = &config.snapshot_dir {
        return load_snapshots(dir);
    }
    let mut exp = config.experiment();
    exp.protocol.mode = Mode::FtLoop;
    let out = run_protocol(&exp, env, None)?;
    if let Some(e) = out.error {
        return Err(e.into());
    }
    Ok(out.result.snapshots)
}

fn summarize(config: &RunConfig, r: &RunResult, maximum: f64, error: Option<&Error>) -> Summary {
    let (peak_step, peak_j) = r.peak().map(|p| (p.step, p.expert_reward)).unwrap_or((0, r.baseline_j));
    Summary {
        mode: r.mode,
        seed: config.seed,
        baseline_j: r.baseline_j,
        maximum_j: maximum,
        achieved_j: r.achieved_j,
        achieved_step: r.achieved_step,
        pgr: pgr(r.baseline_j, r.achieved_j, maximum).ok(),
        peak_step,
        peak_j,
        final_j: r.final_j(),
        stopped_at: r.stopped_at,
        budget: Budget {
            feedback: r.ledger.feedback,
            validation: r.ledger.validation,
            over_opt_check: r.ledger.over_opt_check,
            baseline_eval: r.ledger.baseline_eval,
            protocol_total: r.ledger.protocol_total(),
            total: r.ledger.total(),
        },
        warnings: r.warnings.clone(),
        error: error.map(|e| e.to_string()),
    }
}

fn write_outputs(out: &Path, r: &RunResult, summary: &Summary) -> Result<(), CommandError> {
    let mut f = fs::File::create(out.join("runlog.csv"))?;
    r.log.write_csv(&mut f)?;
    f.flush()?;
    let graders = out.join("graders");
    fs::create_dir_all(&graders)?;
    for s in &r.snapshots {
        write_json(&graders.join(format!("iter-{:03}.json", s.iteration)), s)?;
    }
    let checkpoints = out.join("checkpoints");
    fs::create_dir_all(&checkpoints)?;
    for p in &r.checkpoints {
        p.save(&checkpoints.join(format!("step-{:06}.prlp", p.step)))?;
    }
    r.final_policy.save(&checkpoints.join("final.prlp"))?;
    write_json(&out.join("summary.json"), summary)
}

/// Executes one configured run into its output directory.
pub fn run(config: &RunConfig) -> Result<Summary, CommandError> {
    let out = config.resolved_output();
    fs::create_dir_all(&out)?;
    write_json(&out.join("manifest.json"), &manifest(config))?;
    fs::write(out.join("config.toml"), config.to_toml())?;
    let exp = config.experiment();
    let env = Env::new(exp.env.clone())?;
    let snapshots = match exp.protocol.mode {
        Mode::RetrainScratch => Some(snapshots_for_retrain(config, &env)?),
        _ => None,
    };
    let outcome = run_protocol(&exp, &env, snapshots.as_deref())?;
    let maximum = match exp.protocol.mode {
        Mode::ExpertBaseline => outcome.result.final_j(),
        _ => pgr_maximum(config, &env)?,
    };
    let summary = summarize(config, &outcome.result, maximum, outcome.error.as_ref());
    write_outputs(&out, &outcome.result, &summary)?;
    match outcome.error {
        Some(e) => Err(e.into()),
        None => Ok(summary),
    }
}

pub fn cmd_run(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Summary, CommandError> {
    let mut overrides = Vec::new();
    if let Some(s) = seed {
        overrides.push(("seed".to_string(), s.to_string()));
    }
    let mut config = run_config::load(path, &overrides).map_err(CommandError::Config)?;
    if let Some(o) = out {
        config.output_dir = o;
    }
    run(&config)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub checkpoint_step: u64,
    pub expert_reward: f64,
    pub expert_se: f64,
    pub n_mc: usize,
    pub rho: Option<f64>,
    pub rho_lo: Option<f64>,
    pub rho_hi: Option<f64>,
}

/// Expert objective of a saved policy and the alignment of the configured
/// grader on its rollouts. The grader is the snapshot at `grader` if given,
/// otherwise the initial proxy fitted as the run would fit it.
pub fn cmd_eval(
    checkpoint: &Path,
    config_path: &Path,
    n_mc: Option<usize>,
    grader: Option<&Path>,
) -> Result<EvalReport, CommandError> {
    let config = run_config::load(config_path, &[]).map_err(CommandError::Config)?;
    let exp = config.experiment();
    let policy = PolicyParams::load(checkpoint)?;
    let env = Env::new(exp.env.clone())?;
    let e = env.config();
    if (policy.vocab, policy.length, policy.context_dim) != (e.vocab, e.length, e.context_dim) {
        return Err(Error::Checkpoint("checkpoint shape does not match the configured environment".into()).into());
    }
    let data = env.dataset()?;
    let streams = Streams::new(exp.seed);
    let n_mc = n_mc.unwrap_or(exp.protocol.eval_n_mc);
    let mut rng = streams.rng("eval", policy.step);
    let j = env.true_objective(&policy, &data.validation, n_mc, &mut rng)?;

    let proxy: ProxyGrader = match grader {
        Some(p) => serde_json::from_reader::<_, GraderSnapshot>(fs::File::open(p)?)?.grader,
        None => {
            let base = PolicyParams::zeros(e.vocab, e.length, e.context_dim);
            let mut fit_rng = streams.rng("baseline-fit", 0);
            let n = exp.scaled(exp.grading.baseline_fit_samples);
            baseline_grader(&env, &base, &data.train, n, exp.grading.trace_noise, &mut fit_rng)?.0
        }
    };
    let p = &exp.protocol;
    let mut rng = streams.rng("eval-rho", policy.step);
    let mut scores = PromptGroupedScores::default();
    for g in 0..p.rho_prompts {
        let task = &data.validation[g % data.validation.len()];
        for _ in 0..p.rho_group {
            let r = policy.sample(task, &mut rng);
            let f = env.extract_features(task, &r.tokens)?;
            let expert = env.expert_grade_features(&f, &mut rng, false).score;
            let pr = proxy.proxy_grade(task.id, &f, p.n_traces, &mut rng)?.score;
            scores.push(g as u64, expert, pr);
        }
    }
    let report = alignment_report(&scores, p.bootstrap_samples, 0.9, &mut streams.rng("eval-bootstrap", policy.step)).ok();
    Ok(EvalReport {
        checkpoint_step: policy.step,
        expert_reward: j.mean,
        expert_se: j.se,
        n_mc: j.n,
        rho: report.map(|r| r.rho),
        rho_lo: report.map(|r| r.rho_ci.0),
        rho_hi: report.map(|r| r.rho_ci.1),
    })
}

/// One sweep cell: the overrides applied and how it ended.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub index: usize,
    pub overrides: Vec<(String, String)>,
    pub output_dir: PathBuf,
    pub exit_code: i32,
    pub summary: Option<Summary>,
    pub message: Option<String>,
}

fn cross_product(sets: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for (key, values) in sets {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

fn cell_name(index: usize, overrides: &[(String, String)]) -> String {
    let mut name = format!("cell-{index:03}");
    for (k, v) in overrides {
        let clean: String =
            format!("{k}={v}").chars().map(|c| if c.is_ascii_alphanumeric() || "._=-".contains(c) { c } else { '_' }).collect();
        name.push('_');
        name.push_str(&clean);
    }
    name
}

/// Runs the cross product of `sets` sequentially and writes `index.csv`
/// under the base config's output directory.
pub fn cmd_sweep(path: &Path, sets: &[(String, Vec<String>)]) -> Result<Vec<CellResult>, CommandError> {
    let base = run_config::load(path, &[]).map_err(CommandError::Config)?;
    let root = base.resolved_output();
    fs::create_dir_all(&root)?;
    let mut results = Vec::new();
    for (index, overrides) in cross_product(sets).into_iter().enumerate() {
        let dir = root.join(cell_name(index, &overrides));
        let result = match run_config::load(path, &overrides) {
            Err(e) => Err(CommandError::Config(e)),
            Ok(mut config) => {
                config.output_dir = dir.clone();
                run(&config)
            }
        };
        let cell = match result {
            Ok(summary) => CellResult { index, overrides, output_dir: dir, exit_code: EXIT_OK, summary: Some(summary), message: None },
            Err(e) => {
                CellResult { index, overrides, output_dir: dir, exit_code: e.exit_code(), summary: None, message: Some(e.to_string()) }
            }
        };
        if let Some(m) = &cell.message {
            eprintln!("cell {index} failed: {m}");
        }
        results.push(cell);
    }
    write_index(&root.join("index.csv"), &results)?;
    Ok(results)
}

fn write_index(path: &Path, cells: &[CellResult]) -> Result<(), CommandError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(Error::from)?;
    w.write_record([
        "cell",
        "overrides",
        "exit_code",
        "pgr",
        "achieved_j",
        "peak_j",
        "final_j",
        "protocol_budget",
        "output_dir",
        "message",
    ])
    .map_err(Error::from)?;
    for c in cells {
        let s = c.summary.as_ref();
        let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let overrides = c.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
        w.write_record([
            c.index.to_string(),
            overrides,
            c.exit_code.to_string(),
            f(s.and_then(|s| s.pgr)),
            f(s.map(|s| s.achieved_j)),
            f(s.map(|s| s.peak_j)),
            f(s.map(|s| s.final_j)),
            s.map(|s| s.budget.protocol_total.to_string()).unwrap_or_default(),
            c.output_dir.display().to_string(),
            c.message.clone().unwrap_or_default(),
        ])
        .map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}
