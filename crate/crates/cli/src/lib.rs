//! Command-line front end: simulation, optimisation, analysis and
//! comparison of spin trajectories.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use spinsight::analysis::{self, Grouping, Projector, ScoreKind};
use spinsight::grape::{self, ControlProblem, OptimizationReport};
use spinsight::io::{self, ExperimentConfig};
use spinsight::liouville::propagate;
use spinsight::{ControlSet, ProductBasis, Trajectory};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] spinsight::Error),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        use spinsight::Error as E;
        match self {
            Self::Usage(_) => 2,
            Self::Core(E::Io(_)) => 3,
            Self::Core(E::Parse { .. } | E::BasisMismatch(_)) => 4,
            Self::Core(E::Domain(_)) => 5,
            Self::Core(E::Numeric(_)) => 6,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "spinsight", version, about = "Spin dynamics, pulse optimisation and trajectory analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Propagate an initial state under a waveform and write the trajectory.
    Simulate {
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        waveform: PathBuf,
        /// State expression, e.g. `Lz(Ha)`.
        #[arg(long)]
        initial: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimise a pulse described by a config file.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output` entry.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write subspace population series as CSV.
    Analyze {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long, value_enum, required = true, num_args = 1..)]
        spec: Vec<SpecName>,
        #[arg(long)]
        out: PathBuf,
        /// Droppability threshold for the involvement report.
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
    },
    /// Score the similarity of two trajectories over time.
    Compare {
        #[arg(long)]
        traj_a: PathBuf,
        #[arg(long)]
        traj_b: PathBuf,
        #[arg(long, value_enum)]
        score: ScoreName,
        #[arg(long, value_enum, default_value = "none")]
        grouping: GroupingName,
        #[arg(long)]
        out: PathBuf,
    },
    /// List basis states with their correlation and coherence orders.
    Basis {
        #[arg(long)]
        system: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SpecName {
    CorrOrders,
    CohOrders,
    Local,
    Involvement,
}

impl SpecName {
    fn parse(s: &str) -> Result<Self> {
        <Self as ValueEnum>::from_str(s, false).map_err(|_| {
            CliError::Core(spinsight::Error::Domain(format!(
                "unknown analysis spec {s:?} (expected corr-orders, coh-orders, local or involvement)"
            )))
        })
    }

    fn file_name(self) -> &'static str {
        match self {
            Self::CorrOrders => "corr_orders.csv",
            Self::CohOrders => "coh_orders.csv",
            Self::Local => "local.csv",
            Self::Involvement => "involvement.csv",
        }
    }

    fn projectors(self, basis: &ProductBasis) -> Vec<Projector> {
        match self {
            Self::CorrOrders => analysis::corr_order_projectors(basis),
            Self::CohOrders => analysis::coh_order_projectors(basis),
            Self::Local => analysis::local_spin_projectors(basis),
            Self::Involvement => analysis::involving_projectors(basis),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScoreName {
    Rsp,
    Rdn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GroupingName {
    None,
    Sg,
    Bsg,
}

impl From<ScoreName> for ScoreKind {
    fn from(s: ScoreName) -> Self {
        match s {
            ScoreName::Rsp => ScoreKind::Rsp,
            ScoreName::Rdn => ScoreKind::Rdn,
        }
    }
}

impl From<GroupingName> for Grouping {
    fn from(g: GroupingName) -> Self {
        match g {
            GroupingName::None => Grouping::None,
            GroupingName::Sg => Grouping::Sg,
            GroupingName::Bsg => Grouping::Bsg,
        }
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the exit status. Normal output goes to `out`, diagnostics to
/// `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let first = text.lines().next().unwrap_or("invalid arguments");
                let _ = writeln!(err, "{}", first.trim());
            }
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Simulate {
            system,
            waveform,
            initial,
            out: dir,
        } => simulate(&system, &waveform, &initial, &dir, out, err),
        Command::Optimize { config, out: dir } => optimize(&config, dir.as_deref(), out, err),
        Command::Analyze {
            trajectory,
            spec,
            out: dir,
            threshold,
        } => {
            let traj = io::read_trajectory(&io::read_text(&trajectory)?)?;
            create_dir(&dir)?;
            for s in spec {
                let path = write_analysis(&traj, s, &dir, threshold, out)?;
                say(out, format_args!("wrote {}", path.display()));
            }
            Ok(())
        }
        Command::Compare {
            traj_a,
            traj_b,
            score,
            grouping,
            out: dir,
        } => {
            let a = io::read_trajectory(&io::read_text(&traj_a)?)?;
            let b = io::read_trajectory(&io::read_text(&traj_b)?)?;
            create_dir(&dir)?;
            let path = write_comparison(&a, &b, score.into(), grouping.into(), &dir, out)?;
            say(out, format_args!("wrote {}", path.display()));
            Ok(())
        }
        Command::Basis { system } => {
            let sys = io::read_system_file(&system)?;
            let basis = ProductBasis::new(&sys);
            say(out, format_args!("index\tlabel\tcorrelation_order\tcoherence_order"));
            for (i, label) in basis.labels().iter().enumerate() {
                say(
                    out,
                    format_args!("{i}\t{label}\t{}\t{}", label.correlation_order(), label.coherence_order()),
                );
            }
            Ok(())
        }
    }
}

fn say(out: &mut dyn Write, args: std::fmt::Arguments<'_>) {
    let _ = writeln!(out, "{args}");
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| spinsight::Error::Io(format!("{}: {e}", dir.display())).into())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| spinsight::Error::Io(format!("{}: {e}", path.display())).into())
}

fn simulate(
    system: &Path,
    waveform: &Path,
    initial: &str,
    dir: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let sys = io::read_system_file(system)?;
    let controls = io::read_waveform(&io::read_text(waveform)?)?;
    let basis = Arc::new(ProductBasis::new(&sys));
    let rho0 = io::parse_state(initial, &sys, &basis)?;
    if let Some(w) = &rho0.warning {
        say(err, format_args!("warning: {w}"));
    }
    let traj = propagate(&sys, &controls, &rho0.state)?;
    create_dir(dir)?;
    let path = dir.join("trajectory.txt");
    write_file(&path, &io::write_trajectory(&traj))?;
    say(out, format_args!("wrote {}", path.display()));
    Ok(())
}

/// `report.json` contents.
#[derive(Serialize)]
struct RunReport<'a> {
    seed: u64,
    system: String,
    initial: &'a str,
    target: &'a str,
    n_steps: usize,
    dt: f64,
    power_hz: f64,
    ensemble_members: usize,
    #[serde(flatten)]
    report: &'a OptimizationReport,
}

fn optimize(config: &Path, dir: Option<&Path>, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = match dir {
        Some(d) => d.to_path_buf(),
        None => cfg
            .output
            .as_ref()
            .map(|p| cfg.resolve(p))
            .ok_or_else(|| CliError::Usage("no --out given and the config has no `output` entry".into()))?,
    };
    let sys = io::read_system_file(&cfg.system_path())?;
    let basis = Arc::new(ProductBasis::new(&sys));
    let p = &cfg.problem;
    let rho0 = io::parse_state(&p.initial, &sys, &basis)?;
    let target = io::parse_state(&p.target, &sys, &basis)?;
    for w in [&rho0.warning, &target.warning].into_iter().flatten() {
        say(err, format_args!("warning: {w}"));
    }
    let template = ControlSet::zeros(p.dt, p.power_hz, cfg.channels()?, p.n_steps)?;
    let parametrization = cfg.parametrization();
    let guess = grape::random_guess(&template, parametrization, cfg.seed)?;
    let mut problem = ControlProblem::new(sys.clone(), rho0.state.clone(), target.state, guess);
    problem.parametrization = parametrization;
    problem.ensemble = cfg.ensemble()?;
    problem.power_penalty = p.power_penalty;
    problem.max_iterations = p.max_iterations;
    problem.tolerance = p.tolerance;
    problem.gradient_mode = cfg.gradient_mode();
    let report = grape::optimize(&problem)?;

    let traj = propagate(&sys, &report.controls, &rho0.state)?;
    create_dir(&dir)?;
    write_file(&dir.join("waveform.txt"), &io::write_waveform(&report.controls))?;
    write_file(&dir.join("trajectory.txt"), &io::write_trajectory(&traj))?;
    let run = RunReport {
        seed: cfg.seed,
        system: sys.fingerprint(),
        initial: &p.initial,
        target: &p.target,
        n_steps: p.n_steps,
        dt: p.dt,
        power_hz: p.power_hz,
        ensemble_members: problem.ensemble.members().len(),
        report: &report,
    };
    let json = serde_json::to_string_pretty(&run).map_err(|e| spinsight::Error::Numeric(e.to_string()))?;
    write_file(&dir.join("report.json"), &(json + "\n"))?;
    say(
        out,
        format_args!(
            "fidelity {:.6} after {} iterations ({:?})",
            report.final_fidelity, report.iterations, report.status
        ),
    );

    let threshold = cfg.analysis.involvement_threshold.unwrap_or(0.1);
    for s in &cfg.analysis.specs {
        write_analysis(&traj, SpecName::parse(s)?, &dir, threshold, out)?;
    }
    for (k, c) in cfg.analysis.compare.iter().enumerate() {
        let load = |name: &str| -> Result<Trajectory> {
            if name == "result" {
                Ok(traj.clone())
            } else {
                Ok(io::read_trajectory(&io::read_text(&cfg.resolve(Path::new(name)))?)?)
            }
        };
        let (a, b) = (load(&c.traj_a)?, load(&c.traj_b)?);
        let sub = dir.join(format!("compare_{k}"));
        create_dir(&sub)?;
        write_comparison(&a, &b, c.score.parse()?, c.grouping.parse()?, &sub, out)?;
    }
    say(out, format_args!("wrote {}", dir.display()));
    Ok(())
}

fn write_analysis(traj: &Trajectory, spec: SpecName, dir: &Path, threshold: f64, out: &mut dyn Write) -> Result<PathBuf> {
    let projectors = spec.projectors(traj.basis());
    let names: Vec<String> = projectors.iter().map(|p| p.spec.column_name()).collect();
    let series = projectors
        .iter()
        .map(|p| analysis::population_series(p, traj))
        .collect::<spinsight::Result<Vec<_>>>()?;
    let cols: Vec<&[f64]> = series.iter().map(Vec::as_slice).collect();
    let path = dir.join(spec.file_name());
    write_file(&path, &io::write_csv(traj.times(), &names, &cols))?;
    if spec == SpecName::Involvement {
        for r in analysis::involvement_report(traj, threshold)? {
            say(
                out,
                format_args!(
                    "spin {}: max involvement {:.6}{}",
                    r.spin,
                    r.max_population,
                    if r.droppable { " (droppable)" } else { "" }
                ),
            );
        }
    }
    Ok(path)
}

fn write_comparison(
    a: &Trajectory,
    b: &Trajectory,
    score: ScoreKind,
    grouping: Grouping,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<PathBuf> {
    let report = analysis::similarity(a, b, score, grouping)?;
    let names = report.column_names();
    let path = dir.join(format!("{}.csv", names[0]));
    write_file(&path, &io::write_csv(&report.times, &names, &report.columns()))?;
    say(
        out,
        format_args!("{}: min {:.6} mean {:.6}", names[0], report.min, report.mean),
    );
    Ok(path)
}
