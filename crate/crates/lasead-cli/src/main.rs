//! Scenario runner CLI.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime fault.

use clap::{Args, Parser, Subcommand};
use lasead::control::Method;
use lasead::detection::CalibrationArtifact;
use lasead::harness::{
    calibrate_pipeline, default_threshold_grid, export, run_batch, ScenarioConfig, ScenarioSpec,
    TuneMode,
};
use lasead::pomdp::{
    breakpoints, myopic_advantage, myopic_region, value_iteration, verify_dominance, Chain2,
    PomdpConfig, Sensor2, SensorModel2,
};
use lasead::sensors::Scenario;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lasead",
    version,
    about = "Sensor-attack detection and recovery simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of seeded simulations for one scenario and method.
    Simulate(SimulateArgs),
    /// Calibrate the CUSUM detector on benign runs and write the artifact.
    Calibrate(CalibrateArgs),
    /// Grid-search the probing window thresholds.
    Tune(TuneArgs),
    /// Solve the simplified two-sensor POMDP and verify the threshold results.
    Pomdp(PomdpArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario name (no-attack | encoder | encoder-imu | eic | stochastic)
    /// or a path to a scenario-config JSON file.
    #[arg(long)]
    scenario: String,
    /// Estimation method; defaults to lase-ad-s, or whatever a scenario
    /// config file specifies.
    #[arg(long)]
    method: Option<String>,
    /// Number of seeds; overrides a config file's value when given.
    #[arg(long)]
    seeds: Option<usize>,
    /// Master seed; run i draws from stream (master, i).
    #[arg(long)]
    master_seed: Option<u64>,
    /// Encoder-attack duration in seconds (encoder scenario only).
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
    /// Output directory for per-run CSVs, summary.json and traces.csv.
    #[arg(long)]
    out: PathBuf,
    /// Calibration artifact JSON; auto-calibrates when omitted.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// WoLF hyperparameter (wolf-* methods).
    #[arg(long)]
    wolf_c: Option<f64>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Benign seeds used for calibration (split evenly train/holdout).
    #[arg(long, default_value_t = 40)]
    benign_seeds: usize,
    #[arg(long, default_value_t = 1)]
    master_seed: u64,
    /// Output path for the calibration artifact.
    #[arg(long, default_value = "calibration.json")]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    /// Tuning mode: evaluate candidate windows against the stochastic
    /// attacker or on benign data.
    #[arg(long)]
    mode: String,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 1)]
    master_seed: u64,
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Args)]
struct PomdpArgs {
    /// JSON config; defaults to the reference two-sensor configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for report.json and grid.csv.
    #[arg(long, default_value = "pomdp-out")]
    out: PathBuf,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PomdpCliConfig {
    alpha_c: f64,
    tau_c: f64,
    alpha_e: f64,
    tau_e: f64,
    lambda: f64,
    gamma: f64,
    a01: f64,
    a11: f64,
    grid: usize,
}

impl Default for PomdpCliConfig {
    fn default() -> Self {
        Self {
            alpha_c: 0.3,
            tau_c: 0.7,
            alpha_e: 0.05,
            tau_e: 0.95,
            lambda: 0.05,
            gamma: 0.9,
            a01: 0.02,
            a11: 0.98,
            grid: 10_001,
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Calibrate(args) => calibrate_cmd(args),
        Command::Tune(args) => tune_cmd(args),
        Command::Pomdp(args) => pomdp_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

type CmdResult = Result<(), (u8, String)>;

fn config_err<E: std::fmt::Display>(e: E) -> (u8, String) {
    (EXIT_CONFIG, e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> (u8, String) {
    (EXIT_RUNTIME, e.to_string())
}

fn parse_scenario(name: &str, duration: f64) -> Result<ScenarioSpec, String> {
    match name {
        "no-attack" => Ok(ScenarioSpec::Named(Scenario::NoAttack)),
        "encoder" | "encoder-attack" => Ok(ScenarioSpec::Named(Scenario::EncoderAttack {
            duration_s: duration,
        })),
        "encoder-imu" | "encoder-imu-attack" => Ok(ScenarioSpec::Named(Scenario::EncoderImuAttack)),
        "eic" | "eic-attack" => Ok(ScenarioSpec::Named(Scenario::EicAttack)),
        "stochastic" => Ok(ScenarioSpec::Stochastic {
            attacker: Default::default(),
        }),
        other => Err(format!(
            "unknown scenario '{other}' (expected no-attack | encoder | encoder-imu | eic | stochastic or a JSON file path)"
        )),
    }
}

fn load_config(args: &SimulateArgs) -> Result<ScenarioConfig, (u8, String)> {
    let method: Option<Method> = args
        .method
        .as_deref()
        .map(|m| m.parse())
        .transpose()
        .map_err(config_err)?;
    let mut config = if Path::new(&args.scenario).is_file() {
        let text = std::fs::read_to_string(&args.scenario).map_err(config_err)?;
        let mut c: ScenarioConfig = serde_json::from_str(&text).map_err(config_err)?;
        if let Some(m) = method {
            c.method = m;
        }
        c
    } else {
        let spec = parse_scenario(&args.scenario, args.duration).map_err(config_err)?;
        ScenarioConfig::new(spec, method.unwrap_or(Method::LaseAdS))
    };
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    if let Some(master) = args.master_seed {
        config.master_seed = master;
    }
    if let Some(c) = args.wolf_c {
        config.wolf_c = c;
    }
    config.validate().map_err(config_err)?;
    Ok(config)
}

fn load_or_build_calibration(
    path: &Option<PathBuf>,
    base: &ScenarioConfig,
) -> Result<CalibrationArtifact, (u8, String)> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(config_err)?;
            serde_json::from_str(&text).map_err(config_err)
        }
        None => {
            eprintln!("note: no calibration artifact given, calibrating on 40 benign runs");
            calibrate_pipeline(base, 20, 20).map_err(runtime_err)
        }
    }
}

fn simulate(args: SimulateArgs) -> CmdResult {
    let config = load_config(&args)?;
    let calibration = load_or_build_calibration(&args.calibration, &config)?;
    let result = run_batch(&config, &calibration).map_err(runtime_err)?;
    if result.runs.iter().any(|r| r.fault.is_some()) {
        let fault = result
            .runs
            .iter()
            .find_map(|r| r.fault.clone())
            .unwrap_or_default();
        export(&result, &args.out).map_err(runtime_err)?;
        return Err((EXIT_RUNTIME, format!("run fault: {fault}")));
    }
    export(&result, &args.out).map_err(runtime_err)?;
    let s = &result.summary;
    println!(
        "{} / {}: failure rate {:.3} ± {:.3} over {} seeds{}",
        s.scenario,
        s.method,
        s.failure_rate,
        s.failure_se,
        s.n_runs,
        s.cost
            .as_ref()
            .map(|c| format!(", median cost {:.3}", c.median))
            .unwrap_or_default()
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn calibrate_cmd(args: CalibrateArgs) -> CmdResult {
    if args.benign_seeds < 20 {
        return Err((
            EXIT_CONFIG,
            "calibration needs at least 20 benign seeds".into(),
        ));
    }
    let mut base = ScenarioConfig::new(ScenarioSpec::Named(Scenario::NoAttack), Method::Normal);
    base.master_seed = args.master_seed;
    let train = args.benign_seeds / 2;
    let holdout = args.benign_seeds - train;
    let artifact = calibrate_pipeline(&base, train, holdout).map_err(runtime_err)?;
    let json = serde_json::to_string_pretty(&artifact).map_err(runtime_err)?;
    std::fs::write(&args.out, json).map_err(runtime_err)?;
    if artifact.budget_infeasible {
        eprintln!("warning: 5% alert budget infeasible on the threshold grid; using the maximum");
    }
    println!(
        "calibrated: tau = {:?}, drift = {:?}",
        artifact.cusum.tau, artifact.cusum.drift
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn tune_cmd(args: TuneArgs) -> CmdResult {
    let mode = match args.mode.as_str() {
        "stochastic" => TuneMode::Stochastic,
        "benign" => TuneMode::Benign,
        other => return Err((EXIT_CONFIG, format!("unknown tune mode '{other}'"))),
    };
    let mut base = ScenarioConfig::new(ScenarioSpec::Named(Scenario::NoAttack), Method::LaseAdS);
    base.master_seed = args.master_seed;
    let calibration = load_or_build_calibration(&args.calibration, &base)?;
    let grid = default_threshold_grid();
    let (lo, hi) = lasead::harness::tune_thresholds(&base, &calibration, mode, &grid, args.seeds)
        .map_err(runtime_err)?;
    println!("tuned probing window: ({lo}, {hi})");
    Ok(())
}

fn pomdp_cmd(args: PomdpArgs) -> CmdResult {
    let cfg: PomdpCliConfig = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(config_err)?;
            serde_json::from_str(&text).map_err(config_err)?
        }
        None => PomdpCliConfig::default(),
    };
    let chain = Chain2::new(cfg.a01, cfg.a11).map_err(config_err)?;
    let cheap = SensorModel2::new(cfg.alpha_c, cfg.tau_c).map_err(config_err)?;
    let expensive = SensorModel2::new(cfg.alpha_e, cfg.tau_e).map_err(config_err)?;
    let pomdp_cfg = PomdpConfig {
        lambda: cfg.lambda,
        gamma: cfg.gamma,
        grid: cfg.grid,
        ..Default::default()
    };

    let vi = value_iteration(&chain, &cheap, &expensive, &pomdp_cfg).map_err(runtime_err)?;
    let report = verify_dominance(&chain, &cheap, &expensive, &pomdp_cfg).map_err(runtime_err)?;

    std::fs::create_dir_all(&args.out).map_err(runtime_err)?;
    let full = serde_json::json!({
        "config": cfg,
        "breakpoints": {
            "cheap": breakpoints(&cheap),
            "expensive": breakpoints(&expensive),
        },
        "myopic_region": report.myopic_region,
        "violations": report.violations,
        "extra_probe_measure": report.extra_probe_measure,
        "sweeps": report.sweeps,
    });
    std::fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&full).map_err(runtime_err)?,
    )
    .map_err(runtime_err)?;

    let mut csv = String::from("pi,advantage,value,policy,myopic\n");
    for (i, &pi) in vi.grid.iter().enumerate() {
        let a = myopic_advantage(&cheap, &expensive, pi);
        let myopic = a > cfg.lambda;
        csv.push_str(&format!(
            "{:.6},{:.8},{:.8},{},{}\n",
            pi,
            a,
            vi.value[i],
            if vi.policy[i] == Sensor2::Expensive {
                1
            } else {
                0
            },
            if myopic { 1 } else { 0 },
        ));
    }
    std::fs::write(args.out.join("grid.csv"), csv).map_err(runtime_err)?;

    let region = myopic_region(&cheap, &expensive, cfg.lambda).map_err(runtime_err)?;
    println!(
        "myopic region: {:?}, dominance violations: {}, extra probing measure: {:.4}",
        region, report.violations, report.extra_probe_measure
    );
    println!("wrote {}", args.out.display());
    Ok(())
}
