//! `metronome` command line: `simulate`, `scan`, `spectrum` and `fit`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Each command
//! validates everything it can before touching the output directory, and
//! writes a `manifest.json` echoing the fully resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use metronome_core::fitting::{fit_cosine_with, fit_power_law, fit_sigmoid_points, CosineOptions};
use metronome_core::model::{
    build_geometry, bulk_effective_hamiltonian, first_order_magnus, one_period_average_hamiltonian,
    two_period_average_hamiltonian,
};
use metronome_core::observables::{spectrum_report, Observable, TraceMetadata};
use metronome_core::{
    DisorderDistribution, EffectiveHamiltonian, FitKind, FitResult, FitWindow, FloquetParams, Geometry,
    LatticeSpec, MetronomeOrientation, StateVector, Strategy, TimeTrace,
};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::experiments::{
    self, default_observables, disorder_average, effective_trace, ensemble_trace, parse_count, polarized_trace,
    GridSpec, Protocol, ScanOptions, ScanSpec, Spacing,
};
use crate::formats::{self, read_lifetime_table, read_trace_csv, write_atomic};

/// Default output directory when `--out` is absent.
pub const OUT_DIR_ENV: &str = "METRONOME_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0:#}")]
    Usage(anyhow::Error),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

trait UsageContext<T> {
    fn usage(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> UsageContext<T> for Result<T, E> {
    fn usage(self) -> CliResult<T> {
        self.map_err(usage)
    }
}

#[derive(Debug, Parser)]
#[command(name = "metronome", version, about = "Floquet Ising chains stabilised by a metronome spin")]
pub struct Cli {
    /// More progress output on standard error (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Suppress progress output.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evolve one initial-state protocol and write the trace.
    Simulate(SimulateArgs),
    /// Run or resume a parameter scan described by a TOML file.
    Scan(ScanArgs),
    /// Diagonalise an effective Hamiltonian and write its spectrum report.
    Spectrum(SpectrumArgs),
    /// Fit a stored trace or lifetime table.
    Fit(FitArgs),
}

/// Lattice and drive parameters shared by `simulate` and `spectrum`. Every
/// field may also come from `--config`; flags win.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct LatticeArgs {
    /// chain-boundary | chain-center | external.
    #[arg(long, value_parser = parse_geometry)]
    pub geometry: Option<Geometry>,
    /// Number of spins.
    #[arg(long = "L", value_name = "L")]
    #[serde(rename = "L")]
    pub spins: Option<usize>,
    /// Interaction time per cycle.
    #[arg(long)]
    pub t1: Option<f64>,
    /// Uniform Ising coupling.
    #[arg(long = "J", value_name = "J")]
    #[serde(rename = "J")]
    pub coupling: Option<f64>,
    /// Uniform longitudinal field.
    #[arg(long)]
    pub h: Option<f64>,
    /// Bulk drive deviation.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Metronome drive deviation.
    #[arg(long)]
    pub eps_prime: Option<f64>,
    /// Lattice TOML file (custom edges, per-site values) instead of a preset.
    #[arg(long, value_name = "FILE")]
    pub lattice: Option<PathBuf>,
}

impl LatticeArgs {
    fn merge(self, file: LatticeArgs) -> LatticeArgs {
        LatticeArgs {
            geometry: self.geometry.or(file.geometry),
            spins: self.spins.or(file.spins),
            t1: self.t1.or(file.t1),
            coupling: self.coupling.or(file.coupling),
            h: self.h.or(file.h),
            eps: self.eps.or(file.eps),
            eps_prime: self.eps_prime.or(file.eps_prime),
            lattice: self.lattice.or(file.lattice),
        }
    }

    /// Lattice and drive after defaults: chain-boundary, `t1 = J = 1`,
    /// `h = 0`, `ε = 0.1`, `ε′ = 1e-5`, `L = 8`.
    fn resolve(&self) -> CliResult<(LatticeSpec, FloquetParams)> {
        let params = FloquetParams::new(self.t1.unwrap_or(1.0)).usage()?;
        if let Some(path) = &self.lattice {
            let presets = [self.geometry.is_some(), self.spins.is_some(), self.coupling.is_some()];
            let values = [self.h, self.eps, self.eps_prime];
            if presets.iter().any(|x| *x) || values.iter().any(Option::is_some) {
                return Err(usage(anyhow!("--lattice replaces --geometry, --L, --J, --h, --eps and --eps-prime")));
            }
            return Ok((formats::read_lattice(path).usage()?, params));
        }
        let spec = build_geometry(
            self.geometry.unwrap_or(Geometry::ChainBoundary),
            self.spins.unwrap_or(8),
            self.coupling.unwrap_or(1.0),
            self.h.unwrap_or(0.0),
            self.eps.unwrap_or(0.1),
            self.eps_prime.unwrap_or(1e-5),
        )
        .usage()?;
        Ok((spec, params))
    }
}

fn parse_geometry(text: &str) -> Result<Geometry, String> {
    [Geometry::ChainBoundary, Geometry::ChainCenter, Geometry::External]
        .into_iter()
        .find(|g| g.name() == text)
        .ok_or_else(|| format!("unknown geometry `{text}` (chain-boundary | chain-center | external)"))
}

fn parse_periods(text: &str) -> Result<u64, String> {
    parse_count(text).map_err(|e| format!("{e:#}"))
}

fn parse_protocol(text: &str) -> Result<Protocol, String> {
    text.parse().map_err(|e: anyhow::Error| format!("{e:#}"))
}

fn parse_spacing(text: &str) -> Result<Spacing, String> {
    text.parse().map_err(|e: anyhow::Error| format!("{e:#}"))
}

fn parse_range(text: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = text.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad number `{lo}`"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad number `{hi}`"))?;
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectiveArg {
    /// Average over one period.
    OnePeriod,
    /// Average over two periods.
    TwoPeriod,
    /// First-order Magnus expansion.
    Magnus,
    /// Bulk Hamiltonian with the metronome frozen (site 1 metronome only).
    Bulk,
}

impl EffectiveArg {
    fn build(self, spec: &LatticeSpec, params: &FloquetParams, orientation: MetronomeOrientation) -> anyhow::Result<EffectiveHamiltonian> {
        Ok(match self {
            EffectiveArg::OnePeriod => one_period_average_hamiltonian(spec, params)?,
            EffectiveArg::TwoPeriod => two_period_average_hamiltonian(spec, params)?,
            EffectiveArg::Magnus => first_order_magnus(spec, params)?,
            EffectiveArg::Bulk => bulk_effective_hamiltonian(spec, params, orientation)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationArg {
    Up,
    Down,
}

impl From<OrientationArg> for MetronomeOrientation {
    fn from(o: OrientationArg) -> Self {
        match o {
            OrientationArg::Up => MetronomeOrientation::Up,
            OrientationArg::Down => MetronomeOrientation::Down,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyArg {
    Step,
    BinaryPower,
    Spectral,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Step => Strategy::Step,
            StrategyArg::BinaryPower => Strategy::BinaryPower,
            StrategyArg::Spectral => Strategy::Spectral,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SimulateOptions {
    #[command(flatten)]
    #[serde(flatten)]
    pub lattice: LatticeArgs,
    /// polarized | bitstrings:N | disorder.
    #[arg(long, value_parser = parse_protocol)]
    pub initial: Option<Protocol>,
    /// Last period (scientific notation accepted).
    #[arg(long, value_parser = parse_periods)]
    #[serde(default, deserialize_with = "de_opt_count")]
    pub periods: Option<u64>,
    /// default | log:PPD | linear:STEP.
    #[arg(long, value_parser = parse_spacing)]
    pub grid: Option<Spacing>,
    /// Keep even periods only.
    #[arg(long)]
    #[serde(default)]
    pub even_only: bool,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Evolve with an effective Hamiltonian instead of the Floquet cycle.
    #[arg(long, value_enum)]
    pub effective: Option<EffectiveArg>,
    /// Comma-separated: magnetization, parity, sz_<i>, Z_<i>.
    #[arg(long, value_delimiter = ',')]
    pub observables: Option<Vec<String>>,
    /// Base seed for bitstring ensembles and disorder.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Coupling range LO,HI for the disorder protocol.
    #[arg(long, value_parser = parse_range, value_name = "LO,HI")]
    pub disorder_j: Option<(f64, f64)>,
    /// Field range LO,HI for the disorder protocol.
    #[arg(long, value_parser = parse_range, value_name = "LO,HI")]
    pub disorder_h: Option<(f64, f64)>,
    /// Disorder realizations.
    #[arg(long)]
    pub realizations: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn de_opt_count<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        Int(u64),
        Float(f64),
    }
    Ok(match Option::<Num>::deserialize(d)? {
        None => None,
        Some(Num::Int(n)) => Some(n),
        Some(Num::Float(x)) => Some(parse_count(&x.to_string()).map_err(serde::de::Error::custom)?),
    })
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub options: SimulateOptions,
    /// TOML file with defaults for any of the flags above.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory [default: $METRONOME_OUT_DIR or ./metronome-out].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Stem of the trace files.
    #[arg(long, default_value = "trace")]
    pub name: String,
}

impl SimulateOptions {
    fn merge(self, file: SimulateOptions) -> SimulateOptions {
        SimulateOptions {
            lattice: self.lattice.merge(file.lattice),
            initial: self.initial.or(file.initial),
            periods: self.periods.or(file.periods),
            grid: self.grid.or(file.grid),
            even_only: self.even_only || file.even_only,
            strategy: self.strategy.or(file.strategy),
            effective: self.effective.or(file.effective),
            observables: self.observables.or(file.observables),
            seed: self.seed.or(file.seed),
            disorder_j: self.disorder_j.or(file.disorder_j),
            disorder_h: self.disorder_h.or(file.disorder_h),
            realizations: self.realizations.or(file.realizations),
            jobs: self.jobs.or(file.jobs),
        }
    }
}

/// What `simulate` actually ran, as echoed in its manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedSimulation {
    pub lattice: LatticeSpec,
    pub params: FloquetParams,
    pub initial: Protocol,
    pub grid: GridSpec,
    pub strategy: Strategy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effective: Option<EffectiveArg>,
    pub observables: Vec<String>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disorder: Option<DisorderDistribution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Scan description (TOML).
    pub config: PathBuf,
    /// Continue a scan already present in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Worker threads (overrides `jobs` in the config).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Base seed (overrides `seed` in the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: $METRONOME_OUT_DIR or ./metronome-out].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SpectrumOptions {
    #[command(flatten)]
    #[serde(flatten)]
    pub lattice: LatticeArgs,
    /// Which effective Hamiltonian to diagonalise [default: two-period].
    #[arg(long, value_enum)]
    pub effective: Option<EffectiveArg>,
    /// Metronome orientation for `--effective bulk` [default: up].
    #[arg(long, value_enum)]
    pub orientation: Option<OrientationArg>,
    /// Skip parity labels.
    #[arg(long)]
    #[serde(default)]
    pub no_parity: bool,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub options: SpectrumOptions,
    /// TOML file with defaults for any of the flags above.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory [default: $METRONOME_OUT_DIR or ./metronome-out].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Report file name.
    #[arg(long, default_value = "spectrum.json")]
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Cosine,
    DampedCosine,
    Sigmoid,
    PowerLaw,
    PowerLawWithOffset,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Trace CSV, or a `x,lifetime` table for power laws.
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "cosine")]
    pub model: ModelArg,
    /// Trace column to fit.
    #[arg(long, default_value = "magnetization")]
    pub series: String,
    /// First period of the fit window.
    #[arg(long, default_value_t = 100.0)]
    pub window_start: f64,
    /// Last period of the fit window.
    #[arg(long)]
    pub window_end: Option<f64>,
    /// Result file [default: <input stem>.fit.json next to the input].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a T,
    outputs: Vec<String>,
    seconds: f64,
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("metronome-out"))
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .usage()?;
    toml::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .usage()
}

fn write_manifest<T: Serialize>(dir: &Path, command: &'static str, config: &T, outputs: Vec<String>, started: Instant) -> CliResult<()> {
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        outputs,
        seconds: started.elapsed().as_secs_f64(),
    };
    write_atomic(&dir.join("manifest.json"), formats::to_json(&manifest)?.as_bytes())?;
    Ok(())
}

fn pool(jobs: Option<usize>) -> CliResult<rayon::ThreadPool> {
    if jobs == Some(0) {
        return Err(usage(anyhow!("--jobs must be at least 1")));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = jobs {
        builder = builder.num_threads(jobs);
    }
    Ok(builder.build().map_err(anyhow::Error::from)?)
}

fn resolve_simulation(options: SimulateOptions) -> CliResult<ResolvedSimulation> {
    let (lattice, params) = options.lattice.resolve()?;
    let initial = options.initial.unwrap_or(Protocol::Polarized);
    let periods = options.periods.unwrap_or(10_000);
    let spacing = options.grid.unwrap_or(Spacing::Default);
    let even_only = options.even_only || spacing == Spacing::Default || options.effective.is_some();
    let grid = GridSpec { periods, spacing, even_only };
    grid.build().usage()?;
    let strategy = options.strategy.map_or_else(|| Strategy::default_for(lattice.spins()), Strategy::from);
    if options.effective.is_some() && initial == Protocol::Disorder {
        return Err(usage(anyhow!("--effective does not combine with the disorder protocol")));
    }
    let observables: Vec<Observable> = match &options.observables {
        Some(names) => names
            .iter()
            .map(|n| Observable::parse(n.trim()))
            .collect::<Result<_, _>>()
            .usage()?,
        None => default_observables(initial, &lattice),
    };
    for obs in &observables {
        if let Observable::Site(i) | Observable::Autocorrelator(i) = *obs {
            if i == 0 || i > lattice.spins() {
                return Err(usage(anyhow!("observable {} outside 1..={}", obs.name(), lattice.spins())));
            }
        }
    }
    let seed = options.seed.unwrap_or(0);
    let disorder = match initial {
        Protocol::Disorder => Some(
            DisorderDistribution::new(
                options.disorder_j.unwrap_or((0.5, 1.5)),
                options.disorder_h.unwrap_or((-1.0, 1.0)),
                options.realizations.unwrap_or(50),
                seed,
            )
            .usage()?,
        ),
        _ => {
            if options.disorder_j.is_some() || options.disorder_h.is_some() || options.realizations.is_some() {
                return Err(usage(anyhow!("disorder options need --initial disorder")));
            }
            None
        }
    };
    if options.jobs == Some(0) {
        return Err(usage(anyhow!("--jobs must be at least 1")));
    }
    Ok(ResolvedSimulation {
        lattice,
        params,
        initial,
        grid,
        strategy,
        effective: options.effective,
        observables: observables.iter().map(Observable::name).collect(),
        seed,
        disorder,
        jobs: options.jobs,
    })
}

fn run_simulation(run: &ResolvedSimulation) -> anyhow::Result<TimeTrace> {
    let grid = run.grid.build()?;
    let observables: Vec<Observable> = run.observables.iter().map(|n| Observable::parse(n)).collect::<Result<_, _>>()?;
    if let Some(kind) = run.effective {
        let h = kind.build(&run.lattice, &run.params, MetronomeOrientation::Up)?;
        if kind == EffectiveArg::Bulk {
            bail!("the bulk Hamiltonian acts on L−1 spins; inspect it with `spectrum`");
        }
        let metadata = |label: String| TraceMetadata {
            lattice: Some(run.lattice.clone()),
            params: Some(run.params),
            initial_state: label,
            ..TraceMetadata::default()
        };
        return match run.initial {
            Protocol::Polarized => {
                let initial = StateVector::polarized(run.lattice.spins())?;
                effective_trace(&h, &initial, &grid, &observables, metadata(run.initial.to_string()))
            }
            Protocol::Bitstrings(count) => {
                let traces = (0..count as u64)
                    .map(|k| {
                        let seed = metronome_core::model::derive_seed(run.seed, k);
                        let bits = metronome_core::basis::sample_random_bitstring(
                            run.lattice.spins(),
                            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed),
                        );
                        let initial = StateVector::from_spins(&bits)?;
                        effective_trace(&h, &initial, &grid, &observables, metadata(run.initial.to_string()))
                    })
                    .collect::<anyhow::Result<Vec<_>>>()?;
                let mut trace = metronome_core::observables::average_traces(&traces)?;
                trace.metadata.seeds = (0..count as u64).map(|k| metronome_core::model::derive_seed(run.seed, k)).collect();
                Ok(trace)
            }
            Protocol::Disorder => bail!("--effective does not combine with the disorder protocol"),
        };
    }
    match run.initial {
        Protocol::Polarized => polarized_trace(&run.lattice, &run.params, &grid, run.strategy, &observables),
        Protocol::Bitstrings(count) => {
            ensemble_trace(&run.lattice, &run.params, &grid, run.strategy, count, run.seed, &observables)
        }
        Protocol::Disorder => {
            let dist = run.disorder.as_ref().ok_or_else(|| anyhow!("missing disorder distribution"))?;
            let mut trace = disorder_average(&run.lattice, dist, &run.params, &grid, run.strategy)?;
            if observables != default_observables(Protocol::Disorder, &run.lattice) {
                trace.series.retain(|k, _| run.observables.contains(k));
                trace.stderr.retain(|k, _| run.observables.contains(k));
            }
            Ok(trace)
        }
    }
}

fn cmd_simulate(args: SimulateArgs, log: &Log) -> CliResult<()> {
    let started = Instant::now();
    let file: SimulateOptions = read_config(args.config.as_deref())?;
    let resolved = resolve_simulation(args.options.merge(file))?;
    check_name(&args.name)?;
    let dir = out_dir(args.out);
    log.info(format_args!(
        "simulating L={} {} over {} periods ({})",
        resolved.lattice.spins(),
        resolved.initial,
        resolved.grid.periods,
        resolved.strategy.name()
    ));
    let trace = pool(resolved.jobs)?.install(|| run_simulation(&resolved))?;
    let csv = format!("{}.csv", args.name);
    let json = format!("{}.json", args.name);
    formats::write_trace(&trace, &dir.join(&csv), &dir.join(&json))?;
    write_manifest(&dir, "simulate", &resolved, vec![csv.clone(), json], started)?;
    log.info(format_args!("wrote {}", dir.join(csv).display()));
    Ok(())
}

fn check_name(name: &str) -> CliResult<()> {
    if name.is_empty() || name.contains(['/', '\\']) || name == "manifest" || name == "manifest.json" {
        return Err(usage(anyhow!("--name must be a plain file stem other than `manifest`")));
    }
    Ok(())
}

fn cmd_scan(args: ScanArgs, log: &Log) -> CliResult<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))
        .usage()?;
    let mut spec: ScanSpec = toml::from_str(&text)
        .with_context(|| format!("parsing {}", args.config.display()))
        .usage()?;
    if args.jobs.is_some() {
        spec.jobs = args.jobs;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate().usage()?;
    let dir = out_dir(args.out);
    if experiments::manifest_path(&dir).exists() && !args.resume {
        return Err(usage(anyhow!("{} already holds a scan; pass --resume to continue it", dir.display())));
    }
    let total = spec.epsilon.len() * spec.epsilon_prime.len();
    log.info(format_args!("scanning {total} points into {}", dir.display()));
    let result = experiments::run_scan(&spec, &dir, &ScanOptions { resume: args.resume }, &mut |p| {
        log.info(format_args!("[{}/{}] point {} {:?}", p.done, p.total, p.index.stem(), p.status));
    })?;
    let ok = result.records.iter().filter(|r| r.status == experiments::Status::Ok).count();
    log.info(format_args!("{ok}/{} points resolved", result.records.len()));
    Ok(())
}

fn cmd_spectrum(args: SpectrumArgs, log: &Log) -> CliResult<()> {
    let started = Instant::now();
    let file: SpectrumOptions = read_config(args.config.as_deref())?;
    let options = SpectrumOptions {
        lattice: args.options.lattice.merge(file.lattice),
        effective: args.options.effective.or(file.effective),
        orientation: args.options.orientation.or(file.orientation),
        no_parity: args.options.no_parity || file.no_parity,
    };
    let effective = options.effective.unwrap_or(EffectiveArg::TwoPeriod);
    let orientation = options.orientation.unwrap_or(OrientationArg::Up);
    if options.orientation.is_some() && effective != EffectiveArg::Bulk {
        return Err(usage(anyhow!("--orientation only applies to --effective bulk")));
    }
    check_name(&args.name)?;
    let (lattice, params) = options.lattice.resolve()?;
    let h = effective.build(&lattice, &params, orientation.into()).usage()?;
    let with_parity = !options.no_parity && !h.has_longitudinal_field();
    let report = spectrum_report(&h, with_parity).map_err(anyhow::Error::from)?;
    let dir = out_dir(args.out);
    formats::write_spectrum(&report, &dir.join(&args.name))?;

    #[derive(Serialize)]
    struct Resolved {
        lattice: LatticeSpec,
        params: FloquetParams,
        effective: EffectiveArg,
        #[serde(skip_serializing_if = "Option::is_none")]
        orientation: Option<OrientationArg>,
        parity: bool,
    }
    let resolved = Resolved {
        lattice,
        params,
        effective,
        orientation: (effective == EffectiveArg::Bulk).then_some(orientation),
        parity: with_parity,
    };
    write_manifest(&dir, "spectrum", &resolved, vec![args.name.clone()], started)?;
    println!("delta = {:e}", report.delta);
    log.info(format_args!("wrote {}", dir.join(&args.name).display()));
    Ok(())
}

fn cmd_fit(args: FitArgs, log: &Log) -> CliResult<()> {
    let bytes = fs::read(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))
        .usage()?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(usage(anyhow!("{} is empty", args.input.display())));
    }
    let window = FitWindow::new(args.window_start, args.window_end);
    let result: FitResult = match args.model {
        ModelArg::PowerLaw | ModelArg::PowerLawWithOffset => {
            let points = read_lifetime_table(bytes.as_slice()).usage()?;
            if points.is_empty() {
                return Err(usage(anyhow!("{} has no rows", args.input.display())));
            }
            fit_power_law(&points, args.model == ModelArg::PowerLawWithOffset).map_err(anyhow::Error::from)?
        }
        model => {
            let trace = read_trace_csv(bytes.as_slice()).usage()?;
            let points = trace.points(&args.series).map_err(anyhow::Error::from).usage()?;
            match model {
                ModelArg::Sigmoid => fit_sigmoid_points(&points, window),
                damped => fit_cosine_with(&points, window, CosineOptions { damped: damped == ModelArg::DampedCosine }),
            }
            .map_err(anyhow::Error::from)?
        }
    };
    let out = args.out.unwrap_or_else(|| args.input.with_extension("fit.json"));
    formats::write_fit(&result, &out)?;
    match (result.model, result.lifetime) {
        (FitKind::PowerLaw | FitKind::PowerLawWithOffset, _) => {
            println!("beta = {:e} ± {:e}", result.params["beta"], result.sigmas["beta"])
        }
        (_, Some(t)) => println!("lifetime = {t:e}"),
        (_, None) => println!("lifetime = none (fit did not converge)"),
    }
    log.info(format_args!("wrote {}", out.display()));
    Ok(())
}

struct Log {
    level: i8,
}

impl Log {
    fn info(&self, args: std::fmt::Arguments<'_>) {
        if self.level >= 1 {
            eprintln!("{args}");
        }
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> CliResult<()> {
    let log = Log {
        level: if cli.quiet { 0 } else { 1 + cli.verbose as i8 },
    };
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args, &log),
        Command::Scan(args) => cmd_scan(args, &log),
        Command::Spectrum(args) => cmd_spectrum(args, &log),
        Command::Fit(args) => cmd_fit(args, &log),
    }
}

/// Process entry point; returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
