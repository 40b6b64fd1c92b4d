//! `ioncool`: runs cooling scenarios and writes CSV results.
//!
//! Data goes to `--out` (or stdout), messages to stderr. With `--out`, a
//! `<out>.meta.toml` sidecar records the inputs and run time, so the data
//! file itself is byte-identical between runs.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration or file error, 4 solver
//! error, 5 fit failure.

mod output;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ioncool::config::{read_file, ConfigError};
use ioncool::cooling::{temperature_scan, write_temperature_csv, CoolingError, PointStatus};
use ioncool::lsq::LmOptions;
use ioncool::scan::ScanAxis;
use ioncool::scenario::{shipped_names, Linewidths, Scenario};
use ioncool::specfit::{fit_scan, spectrum, FitError, PointFlag, ScanData, SpecError};
use ioncool::structure::{build_basis, IonModel, StructureError};
use ioncool::thermometry::{
    fit_sidebands, nbar_from_peaks, RabiMode, SidebandFitOptions, SidebandScan, ThermometryError,
    REFERENCE_CARRIER_RABI_KHZ,
};
use output::{Meta, Output};

#[derive(Parser)]
#[command(name = "ioncool", version, about = "Laser-cooling simulations of trapped ions")]
struct Cli {
    /// Worker threads for scan points.
    #[arg(long, global = true, env = "IONCOOL_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Zeeman-resolved energy levels of an ion.
    Levels(LevelsArgs),
    /// Stationary-ion fluorescence along the scenario's scan.
    Spectrum(ScenarioArgs),
    /// Equilibrium temperature along the scenario's scan.
    Temperature(TemperatureArgs),
    /// Fits the scenario's `[fit]` model to a measured scan.
    Fit(FitArgs),
    /// Mean phonon number from red and blue sideband scans.
    Thermometry(ThermometryArgs),
    /// P population and detector count rate for the cooling or readout beams.
    Fluorescence(FluorescenceArgs),
}

#[derive(Args)]
struct LevelsArgs {
    /// Bundled ion name or path to an ion TOML file.
    #[arg(long, default_value = "ca43")]
    ion: String,
    #[arg(long, default_value_t = 0.0)]
    field_gauss: f64,
    #[arg(long, value_enum, default_value_t = LevelFormat::Csv)]
    format: LevelFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelFormat {
    Csv,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum LinewidthArg {
    Fitted,
    Zero,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Shipped scenario name or path to a scenario TOML file.
    #[arg(long)]
    scenario: String,
    /// Replaces the scenario's ion (bundled name or TOML path).
    #[arg(long)]
    ion: Option<String>,
    #[arg(long)]
    field_gauss: Option<f64>,
    #[arg(long, value_enum, default_value_t = LinewidthArg::Fitted)]
    linewidths: LinewidthArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TemperatureArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Velocity step (quasi-static) or amplitude (time domain), m/s.
    #[arg(long)]
    velocity_step: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// CSV of `abscissa, signal[, sigma]`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Lineshape,
    Ratio,
}

#[derive(Args)]
struct ThermometryArgs {
    /// CSV of `detuning_khz, p_flip, shots` for the red sideband.
    #[arg(long)]
    red: PathBuf,
    #[arg(long)]
    blue: PathBuf,
    #[arg(long)]
    probe_time_us: f64,
    #[arg(long)]
    mode_khz: f64,
    #[arg(long, default_value = "mode")]
    mode_name: String,
    /// Sideband order, 1 or 2.
    #[arg(long, default_value_t = 1)]
    order: i8,
    #[arg(long, value_enum, default_value_t = MethodArg::Lineshape)]
    method: MethodArg,
    /// Carrier Rabi frequency held fixed in the fit, kHz.
    #[arg(long, default_value_t = REFERENCE_CARRIER_RABI_KHZ)]
    rabi_khz: f64,
    /// Floats the Rabi frequency, starting from --rabi-khz.
    #[arg(long)]
    float_rabi: bool,
    #[arg(long, default_value_t = 0.0)]
    decoherence_per_us: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum FluorescenceMode {
    Cooling,
    Readout,
}

#[derive(Args)]
struct FluorescenceArgs {
    #[arg(long, value_enum)]
    mode: FluorescenceMode,
    /// Defaults to table1_cooling or table1_fluorescence.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    ion: Option<String>,
    #[arg(long)]
    field_gauss: Option<f64>,
    #[arg(long, value_enum, default_value_t = LinewidthArg::Fitted)]
    linewidths: LinewidthArg,
    /// Photon detection efficiency; defaults to the scenario's.
    #[arg(long)]
    efficiency: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Solver(String),
    Fit(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 3,
            Failure::Solver(_) => 4,
            Failure::Fit(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Solver(m) | Failure::Fit(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<StructureError> for Failure {
    fn from(e: StructureError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<SpecError> for Failure {
    fn from(e: SpecError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<CoolingError> for Failure {
    fn from(e: CoolingError) -> Self {
        match e {
            CoolingError::Master(_) | CoolingError::Solve(_) | CoolingError::NotConverged { .. } => {
                Failure::Solver(e.to_string())
            }
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<FitError> for Failure {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Config(_) | FitError::TooFewPoints { .. } => Failure::Config(e.to_string()),
            FitError::Model(_) => Failure::Solver(e.to_string()),
            FitError::NotConverged { .. } | FitError::Singular { .. } => Failure::Fit(e.to_string()),
        }
    }
}

impl From<ThermometryError> for Failure {
    fn from(e: ThermometryError) -> Self {
        match e {
            ThermometryError::NotConverged { .. } | ThermometryError::Singular(_) => Failure::Fit(e.to_string()),
            ThermometryError::NotThermal { .. } => Failure::Solver(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

fn load_ion(spec: &str) -> Result<IonModel, Failure> {
    match IonModel::bundled(spec) {
        Some(ion) => Ok(ion),
        None => Ok(IonModel::from_file(Path::new(spec))?),
    }
}

fn load_scenario(
    name: &str,
    ion: Option<&str>,
    field: Option<f64>,
    linewidths: LinewidthArg,
) -> Result<Scenario, Failure> {
    let mut sc = match Scenario::shipped(name) {
        Some(s) => s?,
        None => {
            let path = Path::new(name);
            if !path.exists() {
                return Err(Failure::Config(format!(
                    "no scenario {name:?}: not a file and not one of {}",
                    shipped_names().join(", ")
                )));
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(name);
            Scenario::from_toml_str(&read_file(path)?, name, stem)?
        }
    };
    if let Some(spec) = ion {
        sc = sc.with_ion(load_ion(spec)?, spec)?;
    }
    if let Some(b) = field {
        if !(b.is_finite() && b >= 0.0) {
            return Err(Failure::Config(format!("--field-gauss must be non-negative, got {b}")));
        }
        sc.field_gauss = b;
    }
    Ok(sc.with_linewidths(match linewidths {
        LinewidthArg::Fitted => Linewidths::Fitted,
        LinewidthArg::Zero => Linewidths::Zero,
    }))
}

fn scenario_meta(meta: &mut Meta, sc: &Scenario, linewidths: LinewidthArg) {
    meta.set("scenario", sc.name.as_str());
    meta.set("ion", sc.ion_name.as_str());
    meta.set("field_gauss", sc.field_gauss);
    meta.set(
        "linewidths",
        match linewidths {
            LinewidthArg::Fitted => "fitted",
            LinewidthArg::Zero => "zero",
        },
    );
}

fn levels(args: &LevelsArgs, meta: &mut Meta) -> Result<(), Failure> {
    let ion = Arc::new(load_ion(&args.ion)?);
    let basis = build_basis(ion, args.field_gauss)?;
    let mut s = String::new();
    match args.format {
        LevelFormat::Csv => {
            s.push_str("index,level,F,M,energy_mhz,label\n");
            for st in basis.states() {
                writeln!(s, "{},{},{},{},{:.9},{}", st.index, st.level_label, st.f, st.m, st.energy_mhz, st).unwrap();
            }
        }
        LevelFormat::Text => {
            writeln!(s, "{:>5}  {:<6} {:>5} {:>5} {:>16}", "index", "level", "F", "M", "energy/MHz").unwrap();
            for st in basis.states() {
                let (f, m) = (st.f.to_string(), st.m.to_string());
                writeln!(s, "{:>5}  {:<6} {f:>5} {m:>5} {:>16.6}", st.index, st.level_label, st.energy_mhz).unwrap();
            }
        }
    }
    meta.set("ion", args.ion.as_str());
    meta.set("field_gauss", args.field_gauss);
    meta.set("states", basis.len() as i64);
    Output::new(args.out.as_deref()).write(s.as_bytes())
}

fn run_spectrum(args: &ScenarioArgs, meta: &mut Meta) -> Result<(), Failure> {
    let sc = load_scenario(&args.scenario, args.ion.as_deref(), args.field_gauss, args.linewidths)?;
    let scan = sc
        .scan
        .clone()
        .ok_or_else(|| Failure::Config(format!("scenario {} has no [scan] section", sc.name)))?;
    let basis = sc.basis()?;
    let result = spectrum(&basis, &sc.beams, &scan.axis, &scan.values, sc.efficiency.unwrap_or(0.0))?;
    let mut buf = Vec::new();
    result.write_csv(&mut buf)?;
    Output::new(args.out.as_deref()).write(&buf)?;

    scenario_meta(meta, &sc, args.linewidths);
    meta.set("points", scan.values.len() as i64);
    let best = result
        .values
        .iter()
        .zip(&result.population)
        .filter(|(_, p)| p.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1));
    if let Some((x, p)) = best {
        log::info!("minimum P population {p:.4e} at {} = {x}", scan.axis.label());
        meta.set("minimum_population", *p);
        meta.set("minimum_at", *x);
    }
    let failed: Vec<String> = result
        .values
        .iter()
        .zip(&result.flags)
        .filter_map(|(x, f)| match f {
            PointFlag::Failed(m) => Some(format!("{x}: {m}")),
            _ => None,
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Solver(format!("{} points failed; first {}", failed.len(), failed[0])))
    }
}

fn run_temperature(args: &TemperatureArgs, meta: &mut Meta) -> Result<(), Failure> {
    let a = &args.scenario;
    let mut sc = load_scenario(&a.scenario, a.ion.as_deref(), a.field_gauss, a.linewidths)?;
    if let Some(step) = args.velocity_step {
        if !(step.is_finite() && step > 0.0) {
            return Err(Failure::Config(format!("--velocity-step must be positive, got {step}")));
        }
        sc = sc.with_velocity_step(step);
    }
    let scan = sc.temperature_scan().ok_or_else(|| {
        Failure::Config(format!("scenario {} needs both [scan] and [temperature] sections", sc.name))
    })?;
    let basis = sc.basis()?;
    let points = temperature_scan(&basis, &sc.beams, &scan)?;
    let mut buf = Vec::new();
    write_temperature_csv(&mut buf, &points, scan.reoptimize.is_some())?;
    Output::new(a.out.as_deref()).write(&buf)?;

    scenario_meta(meta, &sc, a.linewidths);
    meta.set("points", points.len() as i64);
    for w in points.iter().filter_map(|p| p.warning.as_ref()) {
        log::warn!("{w}");
    }
    let coldest = points
        .iter()
        .filter(|p| p.status == PointStatus::Cooling)
        .filter_map(|p| p.temperature.map(|t| (p.value, t)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    match coldest {
        Some((x, t)) => {
            log::info!("minimum temperature {:.4} mK at {} = {x}", t * 1e3, scan.axis.label());
            meta.set("minimum_temperature_k", t);
            meta.set("minimum_at", x);
        }
        None if !points.is_empty() => log::warn!("no scan point cools"),
        None => {}
    }
    match points.iter().find_map(|p| match &p.status {
        PointStatus::Failed(m) => Some((p.value, m)),
        _ => None,
    }) {
        Some((x, m)) => Err(Failure::Solver(format!("point {x} failed: {m}"))),
        None => Ok(()),
    }
}

fn run_fit(args: &FitArgs, meta: &mut Meta) -> Result<(), Failure> {
    let a = &args.scenario;
    let sc = load_scenario(&a.scenario, a.ion.as_deref(), a.field_gauss, a.linewidths)?;
    let model = sc
        .fit_model()
        .ok_or_else(|| Failure::Config(format!("scenario {} has no [fit] section", sc.name)))??;
    let origin = args.data.display().to_string();
    let data = ScanData::from_csv_str(&read_file(&args.data)?, &origin)?;
    let basis = sc.basis()?;
    let fit = fit_scan(&basis, &sc.beams, &model, &data, &LmOptions::default())?;
    eprint!("{}", fit.report());
    Output::new(a.out.as_deref()).write(fit.key_values().as_bytes())?;
    scenario_meta(meta, &sc, a.linewidths);
    meta.set("data", origin.as_str());
    meta.set("iterations", fit.iterations as i64);
    Ok(())
}

fn read_sideband(path: &Path, order: i8, args: &ThermometryArgs) -> Result<SidebandScan, Failure> {
    Ok(SidebandScan::from_csv_str(
        &read_file(path)?,
        &path.display().to_string(),
        order,
        args.probe_time_us,
        &args.mode_name,
        args.mode_khz,
    )?)
}

fn run_thermometry(args: &ThermometryArgs, meta: &mut Meta) -> Result<(), Failure> {
    if !(1..=2).contains(&args.order) {
        return Err(Failure::Config(format!("--order must be 1 or 2, got {}", args.order)));
    }
    let red = read_sideband(&args.red, -args.order, args)?;
    let blue = read_sideband(&args.blue, args.order, args)?;
    let result = match args.method {
        MethodArg::Ratio => nbar_from_peaks(&red, &blue)?,
        MethodArg::Lineshape => {
            let options = SidebandFitOptions {
                rabi: if args.float_rabi {
                    RabiMode::Float {
                        initial_khz: args.rabi_khz,
                    }
                } else {
                    RabiMode::Fixed(args.rabi_khz)
                },
                decoherence_per_us: args.decoherence_per_us,
                ..SidebandFitOptions::default()
            };
            fit_sidebands(&[red, blue], &options)?
        }
    };
    for w in &result.warnings {
        log::warn!("{w}");
    }
    log::info!("nbar = {:.4} +- {:.4}", result.nbar, result.nbar_sigma);
    Output::new(args.out.as_deref()).write(result.key_values().as_bytes())?;
    meta.set("red", args.red.display().to_string().as_str());
    meta.set("blue", args.blue.display().to_string().as_str());
    meta.set("probe_time_us", args.probe_time_us);
    meta.set("mode_khz", args.mode_khz);
    Ok(())
}

fn run_fluorescence(args: &FluorescenceArgs, meta: &mut Meta) -> Result<(), Failure> {
    let name = args.scenario.as_deref().unwrap_or(match args.mode {
        FluorescenceMode::Cooling => "table1_cooling",
        FluorescenceMode::Readout => "table1_fluorescence",
    });
    let sc = load_scenario(name, args.ion.as_deref(), args.field_gauss, args.linewidths)?;
    let efficiency = args
        .efficiency
        .or(sc.efficiency)
        .ok_or_else(|| Failure::Config(format!("scenario {} sets no efficiency; pass --efficiency", sc.name)))?;
    let first = sc
        .beams
        .first()
        .ok_or_else(|| Failure::Config("scenario has no beams".into()))?;
    // a one-point scan at the current detuning of the first beam
    let axis = ScanAxis::new(&first.name, ioncool::scan::BeamParameter::Detuning);
    let basis = sc.basis()?;
    let r = spectrum(&basis, &sc.beams, &axis, &[first.detuning_mhz], efficiency)?;
    if let PointFlag::Failed(m) = &r.flags[0] {
        return Err(Failure::Solver(m.clone()));
    }
    let (p, rate) = (r.population[0], r.detector_rate[0]);
    log::info!("P population {p:.4}, detector rate {rate:.0} /s");
    let mode = match args.mode {
        FluorescenceMode::Cooling => "cooling",
        FluorescenceMode::Readout => "readout",
    };
    let text = format!("mode = {mode}\npopulation = {p:.9e}\nefficiency = {efficiency}\ndetector_rate = {rate:.9e}\n");
    Output::new(args.out.as_deref()).write(text.as_bytes())?;
    scenario_meta(meta, &sc, args.linewidths);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            log::error!("--workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("worker pool: {e}");
        }
    }
    let started = Instant::now();
    let mut meta = Meta::new();
    let (name, out, result) = match &cli.command {
        Command::Levels(a) => ("levels", &a.out, levels(a, &mut meta)),
        Command::Spectrum(a) => ("spectrum", &a.out, run_spectrum(a, &mut meta)),
        Command::Temperature(a) => ("temperature", &a.scenario.out, run_temperature(a, &mut meta)),
        Command::Fit(a) => ("fit", &a.scenario.out, run_fit(a, &mut meta)),
        Command::Thermometry(a) => ("thermometry", &a.out, run_thermometry(a, &mut meta)),
        Command::Fluorescence(a) => ("fluorescence", &a.out, run_fluorescence(a, &mut meta)),
    };
    if let Some(path) = out {
        meta.set("command", name);
        meta.set("version", env!("CARGO_PKG_VERSION"));
        meta.set("workers", rayon::current_num_threads() as i64);
        meta.set("elapsed_s", started.elapsed().as_secs_f64());
        meta.set("status", if result.is_ok() { "ok" } else { "error" });
        if let Err(e) = meta.write_beside(path) {
            log::warn!("could not write metadata: {e}");
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{}", f.message());
            ExitCode::from(f.code())
        }
    }
}
