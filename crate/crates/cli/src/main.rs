//! `dwa`: run, compare and inspect downwash-aware allocation scenarios.

mod compare;
mod field;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dwa_core::allocation::AllocatorMode;
use dwa_core::config::{load_platform, load_scenario};
use dwa_core::downwash::DownwashModel;
use dwa_core::sim::{self, Scenario, SimRun, Summary};

/// Violations are counted from this time on.
const TRANSIENT_S: f64 = 1.0;

#[derive(Parser)]
#[command(name = "dwa", version, about = "Downwash-aware control allocation simulator")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write `<name>.log.csv` and `<name>.summary`.
    Run(RunArgs),
    /// Compare two summaries, or run a scenario in both modes and compare.
    Compare(CompareArgs),
    /// Sample the wake velocity field on a (z, r) grid.
    Field(FieldArgs),
    /// Parse and validate a scenario or platform file.
    ValidateConfig(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Conventional,
    DownwashAware,
}

impl From<Mode> for AllocatorMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Conventional => AllocatorMode::Conventional,
            Mode::DownwashAware => AllocatorMode::DownwashAware,
        }
    }
}

#[derive(Args)]
struct Overrides {
    /// Replace the scenario platform with this platform file.
    #[arg(long, value_name = "FILE")]
    platform: Option<PathBuf>,
    /// Minimum wake clearance [m]; 0 disables avoidance.
    #[arg(long, value_name = "M")]
    o_min: Option<f64>,
    /// Linear thrust penalty.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Output {
    /// Output directory.
    #[arg(long, env = "DWA_OUT_DIR", default_value = ".", value_name = "DIR")]
    out_dir: PathBuf,
    /// Omit the generation timestamp so that repeated runs give identical files.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_name = "FILE")]
    scenario: PathBuf,
    /// Allocator mode; when given, output files are named `<name>.<mode>.*`.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct CompareArgs {
    /// Two summary files to compare.
    #[arg(num_args = 2, value_name = "SUMMARY", conflicts_with = "scenario", required_unless_present = "scenario")]
    summaries: Vec<PathBuf>,
    /// Run this scenario in both modes, in parallel, and compare the results.
    #[arg(long, value_name = "FILE")]
    scenario: Option<PathBuf>,
    /// Write the comparison as CSV here. Defaults to `<name>.compare.csv` with `--scenario`.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct FieldArgs {
    /// Take the wake constants from this scenario's `[downwash]` section.
    #[arg(long, value_name = "FILE")]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 0.02, allow_negative_numbers = true)]
    z_min: f64,
    #[arg(long, default_value_t = 0.4, allow_negative_numbers = true)]
    z_max: f64,
    #[arg(long, default_value_t = 20)]
    nz: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    r_min: f64,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    r_max: f64,
    #[arg(long, default_value_t = 21)]
    nr: usize,
    /// Write to this file instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Scenario,
    Platform,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(required = true, value_name = "FILE")]
    files: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "scenario")]
    kind: Kind,
}

enum Failure {
    /// Bad input, unreadable or unwritable files.
    Config(String),
    /// The simulation stopped before the end of the scenario.
    Aborted(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Aborted(_) => 2,
        }
    }
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Self::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage errors share the configuration exit code; 2 is reserved for aborted runs.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("DWA_LOG").init();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Field(a) => cmd_field(a),
        Command::ValidateConfig(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("error: {m}"),
                Failure::Aborted(m) => eprintln!("run aborted: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn scenario_with(path: &Path, mode: Option<Mode>, o: &Overrides) -> Result<Scenario, Failure> {
    let mut sc = load_scenario(path)?;
    if let Some(p) = &o.platform {
        sc.platform = load_platform(p)?;
    }
    if let Some(m) = mode {
        sc.mode = m.into();
    }
    if let Some(v) = o.o_min {
        sc.allocator.o_min_m = v;
    }
    if let Some(v) = o.gamma {
        sc.allocator.gamma = v;
    }
    if let Some(v) = o.seed {
        sc.seed = v;
    }
    sc.validate()?;
    Ok(sc)
}

fn timestamp() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    format!("generated unix_time={secs}")
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Writes log and summary under `out.out_dir` with file stem `stem`.
fn write_outputs(run: &SimRun, stem: &str, out: &Output) -> Result<Summary, Failure> {
    fs::create_dir_all(&out.out_dir).map_err(|e| Failure::Config(format!("{}: {e}", out.out_dir.display())))?;
    let stamp = (!out.no_timestamp).then(timestamp);

    let log_path = out.out_dir.join(format!("{stem}.log.csv"));
    let mut w = create(&log_path)?;
    sim::write_csv(&run.log, &mut w, stamp.as_deref())
        .and_then(|_| w.flush())
        .map_err(|e| Failure::Config(format!("{}: {e}", log_path.display())))?;

    let summary = sim::metrics(run, TRANSIENT_S)?;
    let summary_path = out.out_dir.join(format!("{stem}.summary"));
    let mut text = String::new();
    if let Some(s) = &stamp {
        text.push_str(&format!("# {s}\n"));
    }
    text.push_str(&toml::to_string(&summary)?);
    fs::write(&summary_path, text).map_err(|e| Failure::Config(format!("{}: {e}", summary_path.display())))?;
    log::info!("wrote {} and {}", log_path.display(), summary_path.display());
    Ok(summary)
}

fn stem(sc: &Scenario, mode_suffix: bool) -> String {
    if mode_suffix {
        format!("{}.{}", sc.name, sc.mode)
    } else {
        sc.name.clone()
    }
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let sc = scenario_with(&a.scenario, a.mode, &a.overrides)?;
    log::info!("running {} ({}, {} s)", sc.name, sc.mode, sc.duration);
    let run = sim::run(&sc);
    let summary = write_outputs(&run, &stem(&sc, a.mode.is_some()), &a.output)?;
    println!(
        "{} [{}]: rms position error {:.4} m, max z drop {:.4} m, mean efficiency {:.4}, violations {}",
        summary.scenario,
        summary.mode,
        summary.rms_position_error_m,
        summary.max_z_drop_m,
        summary.mean_efficiency,
        summary.violation_count
    );
    match run.failure {
        Some(e) => Err(Failure::Aborted(format!("t = {:.3} s: {e}", summary.duration_s))),
        None => Ok(()),
    }
}

fn read_summary(path: &Path) -> Result<Summary, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {}", path.display(), e.message())))
}

fn cmd_compare(a: CompareArgs) -> Result<(), Failure> {
    let (first, second, default_csv) = match &a.scenario {
        Some(path) => {
            let conv = scenario_with(path, Some(Mode::Conventional), &a.overrides)?;
            let aware = scenario_with(path, Some(Mode::DownwashAware), &a.overrides)?;
            let (run_c, run_a) = std::thread::scope(|s| {
                let h = s.spawn(|| sim::run(&conv));
                let run_a = sim::run(&aware);
                (h.join().expect("simulation thread panicked"), run_a)
            });
            let sc = write_outputs(&run_c, &stem(&conv, true), &a.output)?;
            let sa = write_outputs(&run_a, &stem(&aware, true), &a.output)?;
            let csv = a.output.out_dir.join(format!("{}.compare.csv", conv.name));
            (sc, sa, Some(csv))
        }
        None => (read_summary(&a.summaries[0])?, read_summary(&a.summaries[1])?, None),
    };
    compare::check_matching(&first, &second).map_err(Failure::Config)?;
    print!("{}", compare::table(&first, &second));
    if let Some(path) = a.csv.or(default_csv) {
        fs::write(&path, compare::csv(&first, &second)).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_field(a: FieldArgs) -> Result<(), Failure> {
    let model = match &a.scenario {
        Some(p) => load_scenario(p)?.downwash,
        None => DownwashModel::default(),
    };
    let z = field::Axis { min: a.z_min, max: a.z_max, count: a.nz };
    let r = field::Axis { min: a.r_min, max: a.r_max, count: a.nr };
    let rows = field::sample(&model, &z, &r).map_err(Failure::Config)?;
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            field::write_csv(&rows, &mut w).and_then(|_| w.flush())?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            field::write_csv(&rows, &mut w)?;
        }
    }
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> Result<(), Failure> {
    let mut failed = 0;
    for path in &a.files {
        let result = match a.kind {
            Kind::Scenario => load_scenario(path).map(|s| format!("scenario `{}`", s.name)),
            Kind::Platform => load_platform(path).map(|p| format!("{}-generator platform", p.n_generators)),
        };
        match result {
            Ok(what) => println!("{}: ok, {what}", path.display()),
            Err(e) => {
                eprintln!("error: {e}");
                failed += 1;
            }
        }
    }
    if failed > 0 {
        return Err(Failure::Config(format!("{failed} of {} file(s) invalid", a.files.len())));
    }
    Ok(())
}
