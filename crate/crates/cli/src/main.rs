//! Experiment runner: reproducible commands over the analysis suite and
//! the protocol simulator, emitting CSVs.
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 a safety
//! invariant was violated during simulation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use num_traits::ToPrimitive;

use tierchain_core::agents::{delta, p_invalid, BeliefModel, Strategy};
use tierchain_core::analysis::{
    committee_size_csv, committee_size_table, nic_check, rational_from_f64, rational_ratio,
    Rational,
};
use tierchain_core::bft::supermajority_threshold;
use tierchain_core::exec;
use tierchain_core::sim::{
    agent_utilities_csv, metrics_csv, reference_table, run_session, tps_sweep, tps_sweep_csv,
    LatencyMode, SessionConfig,
};

#[derive(Parser)]
#[command(name = "tierchain", version, about = "Two-layer committee blockchain: simulator and analysis suite")]
struct Cli {
    /// Cap the worker pool used for parallel sweeps.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimum secure committee size over an (alpha, epsilon) grid.
    CommitteeSize(CommitteeSizeArgs),
    /// Evaluate the three incentive-compatibility conditions for a
    /// session configuration.
    NicCheck(NicCheckArgs),
    /// Invalid-acceptance probabilities and the pivotal term per
    /// peer-sign probability.
    Delta(DeltaArgs),
    /// Run one full protocol session.
    Simulate(SimulateArgs),
    /// Consensus block time and throughput per committee size.
    TpsSweep(TpsSweepArgs),
}

#[derive(Args)]
struct CommitteeSizeArgs {
    #[arg(long, default_value_t = 0.01)]
    alpha_min: f64,
    #[arg(long, default_value_t = 0.18)]
    alpha_max: f64,
    #[arg(long, default_value_t = 0.01)]
    alpha_step: f64,
    /// Comma-separated admissible compromise probabilities.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2e-4, 2e-5, 2e-6])]
    epsilon: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    max_n: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NicCheckArgs {
    /// Session configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DeltaArgs {
    /// Committee size.
    #[arg(long)]
    committee: usize,
    /// Signature threshold; defaults to the supermajority.
    #[arg(long)]
    threshold: Option<usize>,
    /// Comma-separated peer-sign probabilities; defaults to
    /// 0.05..0.95 step 0.05.
    #[arg(long, value_delimiter = ',')]
    q: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Session configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Metrics CSV destination; stdout when omitted. Per-agent realized
    /// utilities go to `<out>.agents.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Event trace destination (one event per line).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TpsSweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![21, 31, 41, 51, 61, 71, 81, 91])]
    sizes: Vec<u64>,
    /// "calibration" (reference block-time table) or "model".
    #[arg(long, default_value = "calibration")]
    mode: String,
    #[arg(long, default_value_t = 0.5)]
    base: f64,
    #[arg(long, default_value_t = 0.01)]
    per_message: f64,
    #[arg(long, default_value_t = 0.002)]
    quadratic_factor: f64,
    #[arg(long, default_value_t = 16 * (1 << 20))]
    block_bytes: u64,
    #[arg(long, default_value_t = 200)]
    tx_bytes: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version print to stdout and exit clean.
            if err.use_stderr() {
                eprint!("{err}");
                return ExitCode::from(1);
            }
            print!("{err}");
            return ExitCode::SUCCESS;
        }
    };
    if let Some(threads) = cli.parallel {
        exec::configure_threads(threads);
    }
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::CommitteeSize(args) => cmd_committee_size(args),
        Command::NicCheck(args) => cmd_nic_check(args),
        Command::Delta(args) => cmd_delta(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::TpsSweep(args) => cmd_tps_sweep(args),
    }
}

fn emit(out: &Option<PathBuf>, contents: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, contents)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{contents}"),
    }
    Ok(())
}

/// Snap a CLI float to an exact small-denominator rational when it is one
/// (grid values like 0.01 or 2e-4), falling back to its exact dyadic
/// value otherwise.
fn snap_rational(x: f64, denom: i64) -> Rational {
    let scaled = (x * denom as f64).round();
    if scaled != 0.0 && ((x * denom as f64) - scaled).abs() / scaled.abs() < 1e-9 {
        rational_ratio(scaled as i64, denom)
    } else {
        rational_from_f64(x)
    }
}

fn cmd_committee_size(args: CommitteeSizeArgs) -> Result<u8> {
    if args.alpha_step <= 0.0 || args.alpha_max < args.alpha_min {
        bail!("usage: alpha grid requires alpha_step > 0 and alpha_max >= alpha_min");
    }
    if args.epsilon.is_empty() {
        bail!("usage: at least one epsilon is required");
    }
    const DENOM: i64 = 1_000_000;
    let start = (args.alpha_min * DENOM as f64).round() as i64;
    let step = (args.alpha_step * DENOM as f64).round() as i64;
    let stop = (args.alpha_max * DENOM as f64).round() as i64;
    if step <= 0 {
        bail!("usage: alpha_step is below the 1e-6 grid resolution");
    }
    let mut alphas = Vec::new();
    let mut v = start;
    while v <= stop {
        alphas.push(rational_ratio(v, DENOM));
        v += step;
    }
    let epsilons: Vec<Rational> =
        args.epsilon.iter().map(|&e| snap_rational(e, 10_000_000)).collect();
    let rows = committee_size_table(&alphas, &epsilons, args.max_n);
    emit(&args.out, &committee_size_csv(&rows))?;
    Ok(0)
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<SessionConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut config: SessionConfig =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    config.validate().context("validating configuration")?;
    Ok(config)
}

fn cmd_nic_check(args: NicCheckArgs) -> Result<u8> {
    let config = load_config(&args.config, None)?;
    let n = config.n_csl;
    let byz_alpha: f64 = config
        .agents
        .alphas
        .as_ref()
        .map(|alphas| alphas[n - config.agents.n_byzantine..].iter().sum())
        .unwrap_or(config.agents.n_byzantine as f64 / n as f64);
    let belief = BeliefModel::from_f64(
        config.belief.alpha_a.unwrap_or(byz_alpha),
        config.belief.rho_s1,
        n,
    );
    let threshold = supermajority_threshold(n);
    let delta_min = delta(&belief, threshold);
    let report = nic_check(
        &config.game,
        config.agents.n_byzantine as u64,
        n as u64,
        &delta_min,
    );

    let mut out = String::new();
    out.push_str("# schema=nic-check.v1\n");
    out.push_str("condition,holds,margin\n");
    out.push_str(&format!(
        "faithful_fault_tolerance,{},{}\n",
        report.fault_tolerance_ok, report.fault_margin
    ));
    out.push_str(&format!(
        "maximum_payload,{},{:.6e}\n",
        report.payload_ok,
        report.payload_slack.to_f64().unwrap_or(f64::NAN)
    ));
    out.push_str(&format!(
        "minimum_reward,{},{:.6e}\n",
        report.reward_ok,
        report.reward_slack.to_f64().unwrap_or(f64::NAN)
    ));
    out.push_str(&format!("nic,{},\n", report.nic()));
    if report.degenerate_validation_cost {
        out.push_str("degenerate_validation_cost,true,\n");
    }
    emit(&args.out, &out)?;
    eprintln!(
        "nic: {} (delta_min = {:.6e})",
        if report.nic() { "holds" } else { "violated" },
        delta_min.to_f64().unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn cmd_delta(args: DeltaArgs) -> Result<u8> {
    if args.committee < 1 {
        bail!("usage: committee size must be at least 1");
    }
    let threshold = args.threshold.unwrap_or_else(|| supermajority_threshold(args.committee));
    if threshold < 1 || threshold > args.committee {
        bail!("usage: threshold must be in [1, committee]");
    }
    let qs: Vec<Rational> = match &args.q {
        Some(values) => values.iter().map(|&q| snap_rational(q, 1_000_000)).collect(),
        None => (1..=19).map(|i| rational_ratio(i, 20)).collect(),
    };
    let mut out = String::new();
    out.push_str("# schema=delta.v1\n");
    out.push_str("committee_size,threshold,q,p_invalid_s1,p_invalid_s2,delta\n");
    for q in qs {
        let belief = BeliefModel::new(q.clone(), rational_ratio(0, 1), args.committee);
        let p1 = p_invalid(&belief, Strategy::SignWithoutValidating, threshold);
        let p2 = p_invalid(&belief, Strategy::ValidateThenSign, threshold);
        let d = delta(&belief, threshold);
        out.push_str(&format!(
            "{},{},{:.6},{:.9e},{:.9e},{:.9e}\n",
            args.committee,
            threshold,
            q.to_f64().unwrap(),
            p1.to_f64().unwrap(),
            p2.to_f64().unwrap(),
            d.to_f64().unwrap()
        ));
    }
    emit(&args.out, &out)?;
    Ok(0)
}

fn cmd_simulate(args: SimulateArgs) -> Result<u8> {
    let config = load_config(&args.config, args.seed)?;
    let outcome = run_session(&config).context("running session")?;
    let metrics = &outcome.metrics;

    emit(&args.out, &metrics_csv(&config, metrics))?;
    if let Some(out) = &args.out {
        let agents_path = out.with_extension("agents.csv");
        fs::write(&agents_path, agent_utilities_csv(metrics))
            .with_context(|| format!("writing {}", agents_path.display()))?;
    }
    if let Some(trace_path) = &args.trace {
        fs::write(trace_path, &outcome.trace)
            .with_context(|| format!("writing {}", trace_path.display()))?;
    }

    eprintln!(
        "session: {} pow, {} tx, {} com blocks committed; {} invalid; safety {}; liveness {}",
        metrics.committed_pow_blocks,
        metrics.committed_tx_blocks,
        metrics.committed_com_blocks,
        metrics.invalid_blocks_committed,
        if metrics.safety_ok { "ok" } else { "VIOLATED" },
        if metrics.liveness_ok { "ok" } else { "degraded" },
    );
    if !metrics.safety_ok {
        eprintln!("safety invariant violated; see trace events kind=invalid-commit");
        return Ok(2);
    }
    Ok(0)
}

fn cmd_tps_sweep(args: TpsSweepArgs) -> Result<u8> {
    if args.sizes.is_empty() {
        bail!("usage: at least one committee size is required");
    }
    let mode = match args.mode.as_str() {
        "calibration" => LatencyMode::Calibration { table: reference_table() },
        "model" => LatencyMode::Model {
            base: args.base,
            per_message: args.per_message,
            quadratic_factor: args.quadratic_factor,
        },
        other => bail!("usage: unknown mode {other:?} (expected \"calibration\" or \"model\")"),
    };
    let rows = tps_sweep(&args.sizes, &mode, args.block_bytes, args.tx_bytes);
    emit(&args.out, &tps_sweep_csv(&rows, &args.mode))?;
    Ok(0)
}
