#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! `mfglab`: solve small common-noise mean field games and run the ε-sweeps.
//!
//! Every subcommand reads one JSON config, writes its outputs and a
//! `manifest.json` under the output directory and prints a one-line summary.
//! Exit codes: 0 success, 1 I/O failure, 2 configuration or domain error,
//! 3 fixed point not converged, 4 assumption check failed. Errors are
//! printed to stderr as JSON.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mfg_core::analysis::{
    decoupling_gap_sweep, default_probes, nash_gap, nash_gap_sweep_with, prepare_expansion, remainder_sweep_with,
    stability_check, SweepReport,
};
use mfg_core::lq::solve_riccati;
use mfg_core::mfg0::{solve_mfg0, Mfg0Solution};
use mfg_core::model::check_assumptions;
use mfg_core::rng::SeedStream;
use mfg_core::tree::solve_eps_mfg;
use mfg_core::variational::{check_antisymmetry, gaussianity_diagnostics, solve_variational};
use mfg_core::Error;

use config::{defaults_json, load_config, RunConfig};

/// Overrides the config's `output_dir`.
const OUTPUT_ENV: &str = "MFGLAB_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "mfglab", version, about = "Common-noise mean field games: solvers and ε-sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file; missing keys take the defaults below.
    #[arg(long, short, global = true, default_value = "config.json")]
    config: PathBuf,
    /// Override a config key, e.g. `--set grid.nx=400` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Ignore and do not write the 0-MFG solve cache.
    #[arg(long, global = true)]
    no_cache: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Probe the standing assumptions on the terminal cost.
    CheckModel,
    /// Closed-form Riccati coefficients a, b, s (lq family only).
    Lq,
    /// Solve the game without common noise.
    Solve0,
    /// Solve the game with common noise of intensity model.eps on the tree.
    SolveEps,
    /// Ensemble of first-order corrections (U, V) over Gaussian common paths.
    Variational,
    /// Nash gap of the corrected strategy at model.eps.
    NashGap,
    /// Sweep over sweep.eps.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
    },
    /// Mean-zero, Gaussian-shape and antisymmetry diagnostics of (U, V).
    Gaussianity,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SweepKind {
    Remainder,
    DecouplingGap,
    NashGap,
    Stability,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Core(Error::Config { .. } | Error::Domain { .. }) => 2,
            Failure::Core(Error::Convergence { .. }) => 3,
            Failure::Core(Error::Assumption { .. }) => 4,
        }
    }

    fn to_json(&self) -> Value {
        let error = match self {
            Failure::Core(e) => {
                let mut v = serde_json::to_value(e).expect("plain data");
                v["message"] = Value::String(e.to_string());
                v
            }
            Failure::Io(m) => json!({ "kind": "io", "message": m }),
        };
        json!({ "status": "error", "exit_code": self.exit_code(), "error": error })
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Output directory bookkeeping: files written and per-point timings.
struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    use_cache: bool,
    outputs: Vec<String>,
    timings: Value,
}

impl Run {
    fn create(&mut self, name: &str) -> Outcome<BufWriter<File>> {
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn write_json(&mut self, name: &str, value: &impl serde::Serialize) -> Outcome<()> {
        let mut f = self.create(name)?;
        serde_json::to_writer_pretty(&mut f, value).map_err(|e| Failure::Io(e.to_string()))?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }

    /// 0-MFG solve, read from or written to the cache keyed by its inputs.
    fn mfg0(&self) -> Outcome<Mfg0Solution> {
        let model = self.cfg.model()?;
        let grid = self.cfg.space_time()?;
        let path = self.dir.join("cache").join(format!("mfg0-{}.bin", &self.cfg.mfg0_key()[..16]));
        if self.use_cache {
            if let Ok(f) = File::open(&path) {
                if let Ok(sol) = Mfg0Solution::read_cache(std::io::BufReader::new(f)) {
                    if sol.grid == grid {
                        return Ok(sol);
                    }
                }
            }
        }
        let sol = solve_mfg0(&model, &grid, &self.cfg.fixed_point())?;
        if self.use_cache {
            std::fs::create_dir_all(path.parent().expect("cache dir"))?;
            let mut f = BufWriter::new(File::create(&path)?);
            sol.write_cache(&mut f)?;
            f.flush()?;
        }
        Ok(sol)
    }

    /// Assumption checks as a precondition of the solvers.
    fn require_assumptions(&self) -> Outcome<()> {
        let model = self.cfg.model()?;
        check_assumptions(&model, self.cfg.model.assumption_probes, SeedStream::new(self.cfg.seed, 100))?.into_result()?;
        Ok(())
    }

    fn write_report(&mut self, stem: &str, report: &SweepReport) -> Outcome<()> {
        self.write_json(&format!("{stem}.json"), report)?;
        let mut f = self.create(&format!("{stem}.csv"))?;
        report.write_csv(&mut f)?;
        f.flush()?;
        let mut f = self.create(&format!("{stem}.dat"))?;
        report.write_data(&mut f)?;
        f.flush()?;
        self.timings = json!(report.wall_clock);
        Ok(())
    }
}

fn fmt_slope(r: &SweepReport) -> String {
    match r.fitted_slope {
        Some(s) => format!("slope {s:.3} ± {:.3}", r.slope_stderr.unwrap_or(0.0)),
        None => "no slope (points at floor)".to_string(),
    }
}

fn execute(cmd: &Command, run: &mut Run) -> Outcome<String> {
    let cfg = run.cfg.clone();
    let model = cfg.model()?;
    match cmd {
        Command::CheckModel => {
            let report = check_assumptions(&model, cfg.model.assumption_probes, SeedStream::new(cfg.seed, 100))?;
            run.write_json("assumptions.json", &report)?;
            let n = report.checks.len();
            let passed = report.checks.iter().filter(|c| c.passed).count();
            report.into_result()?;
            Ok(format!("check-model: {} family, {passed}/{n} checks passed", cfg.model.family))
        }
        Command::Lq => {
            let mfg_core::model::CostFamily::Lq { q, kappa } = cfg.cost() else {
                return Err(Error::config(format!("lq needs model.family lq (got {})", cfg.model.family)).into());
            };
            let r = solve_riccati(q, kappa, cfg.model.horizon, cfg.grid.nt)?;
            let mut f = run.create("riccati.csv")?;
            writeln!(f, "t,a,b,s")?;
            for (k, t) in r.times.iter().enumerate() {
                writeln!(f, "{t},{},{},{}", r.a[k], r.b[k], r.s[k])?;
            }
            f.flush()?;
            Ok(format!(
                "lq: a(0) = {}, b(0) = {}, rk4 check {:.2e}",
                r.a[0], r.b[0], r.rk4_error
            ))
        }
        Command::Solve0 => {
            run.require_assumptions()?;
            let sol = run.mfg0()?;
            let mut f = run.create("mfg0.csv")?;
            sol.write_csv(&mut f)?;
            f.flush()?;
            let summary = json!({
                "iterations": sol.residual_history.len(),
                "last_residual": sol.last_residual(),
                "equilibrium_cost": sol.equilibrium_cost,
                "terminal_mean": sol.mean(sol.grid.nt - sol.k0),
            });
            run.write_json("solve0.json", &summary)?;
            Ok(format!(
                "solve0: {} iterations, residual {:.2e}, cost {:.6}",
                sol.residual_history.len(),
                sol.last_residual(),
                sol.equilibrium_cost
            ))
        }
        Command::SolveEps => {
            run.require_assumptions()?;
            let sol = solve_eps_mfg(&model, cfg.tree()?, &cfg.space_time()?, &cfg.fixed_point())?;
            let mut f = run.create("tree_means.csv")?;
            sol.write_means_csv(&mut f)?;
            f.flush()?;
            let mut f = run.create("tree_root.csv")?;
            sol.write_node_csv(0, &mut f)?;
            f.flush()?;
            let summary = json!({
                "eps": sol.eps,
                "iterations": sol.residual_history.len(),
                "residual_history": sol.residual_history,
                "root_cost": sol.root_cost,
                "leaf_means": sol.frozen_flow().leaf_means,
            });
            run.write_json("solve_eps.json", &summary)?;
            Ok(format!(
                "solve-eps: eps {}, {} iterations, residual {:.2e}, cost {:.6}",
                sol.eps,
                sol.residual_history.len(),
                sol.last_residual(),
                sol.root_cost
            ))
        }
        Command::Variational => {
            run.require_assumptions()?;
            let mfg0 = run.mfg0()?;
            let v = &cfg.variational;
            let ens = solve_variational(&model, &mfg0, v.n_particles, v.n_common, cfg.mode(), SeedStream::new(cfg.seed, 0), &cfg.fd())?;
            let mut f = run.create("variational.csv")?;
            ens.write_csv(&mut f, v.probe_particles)?;
            f.flush()?;
            let nt = ens.nt();
            let var_ut: Vec<f64> = (0..ens.n_particles.min(v.probe_particles))
                .map(|j| {
                    let xs: Vec<f64> = (0..ens.n_common).map(|p| ens.u_at(p, j, nt)).collect();
                    let m = xs.iter().sum::<f64>() / xs.len() as f64;
                    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
                })
                .collect();
            run.write_json("variational.json", &json!({ "mode": ens.mode, "n_common": ens.n_common, "var_u_terminal": var_ut }))?;
            Ok(format!(
                "variational: {} paths x {} particles, Var U_T of particle 0 = {:.4}",
                ens.n_common, ens.n_particles, var_ut[0]
            ))
        }
        Command::NashGap => {
            run.require_assumptions()?;
            let setup = cfg.sweep_setup()?;
            let exp = prepare_expansion(&model, &setup, Some(run.mfg0()?))?;
            let p = nash_gap(&model, &exp, &setup, cfg.model.eps)?;
            run.write_json("nash_gap.json", &p)?;
            Ok(format!(
                "nash-gap: eps {}, gap {:.3e} (uncorrected {:.3e})",
                p.eps, p.gap, p.gap_uncorrected
            ))
        }
        Command::Sweep { kind } => {
            run.require_assumptions()?;
            let setup = cfg.sweep_setup()?;
            let eps = &cfg.sweep.eps;
            let (stem, report) = match kind {
                SweepKind::Remainder => {
                    let exp = prepare_expansion(&model, &setup, Some(run.mfg0()?))?;
                    ("sweep_remainder", remainder_sweep_with(&model, eps, &setup, &exp)?)
                }
                SweepKind::DecouplingGap => {
                    let probes = default_probes(&model, &setup)?;
                    ("sweep_decoupling_gap", decoupling_gap_sweep(&model, eps, &setup, &probes)?)
                }
                SweepKind::NashGap => {
                    let exp = prepare_expansion(&model, &setup, Some(run.mfg0()?))?;
                    ("sweep_nash_gap", nash_gap_sweep_with(&model, eps, &setup, &exp)?)
                }
                SweepKind::Stability => {
                    let r = stability_check(&model, &cfg.sweep.shifts, &setup)?;
                    run.write_json("sweep_stability.json", &r)?;
                    return Ok(format!(
                        "sweep stability: eps {}, ratios {:?}, spread {:.3e}",
                        r.eps, r.ratios, r.spread
                    ));
                }
            };
            run.write_report(stem, &report)?;
            let above = report.included.iter().filter(|i| **i).count();
            Ok(format!(
                "sweep {}: {}, {above}/{} points above floor {:.2e}",
                report.experiment,
                fmt_slope(&report),
                report.eps_values.len(),
                report.discretization_floor
            ))
        }
        Command::Gaussianity => {
            run.require_assumptions()?;
            let mfg0 = run.mfg0()?;
            let v = &cfg.variational;
            let fd = cfg.fd();
            let ens = solve_variational(&model, &mfg0, v.n_particles, v.n_common, cfg.mode(), SeedStream::new(cfg.seed, 0), &fd)?;
            let horizon = cfg.model.horizon;
            let particles: Vec<usize> = (0..v.n_particles.min(v.probe_particles)).collect();
            let mut report = gaussianity_diagnostics(&ens, &[horizon / 4.0, horizon / 2.0, horizon], &particles)?;
            let anti = check_antisymmetry(&model, &mfg0, &ens, &fd)?;
            report.antisymmetric = Some(anti);
            report.all_passed &= anti;
            run.write_json("gaussianity.json", &report)?;
            Ok(format!(
                "gaussianity: {} marginals, all passed: {}, antisymmetric: {anti}",
                report.u.len() + report.v.len(),
                report.all_passed
            ))
        }
    }
}

fn command_name(cmd: &Command) -> String {
    match cmd {
        Command::CheckModel => "check-model".into(),
        Command::Lq => "lq".into(),
        Command::Solve0 => "solve0".into(),
        Command::SolveEps => "solve-eps".into(),
        Command::Variational => "variational".into(),
        Command::NashGap => "nash-gap".into(),
        Command::Sweep { kind } => format!("sweep {}", kind.to_possible_value().expect("named").get_name()),
        Command::Gaussianity => "gaussianity".into(),
    }
}

fn run_cli(cli: &Cli) -> Outcome<String> {
    let start = Instant::now();
    let mut cfg = load_config(&cli.config, &cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = std::env::var_os(OUTPUT_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::config("--workers must be positive").into());
        }
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut run = Run {
        dir: cfg.output_dir.clone(),
        cfg,
        use_cache: !cli.no_cache,
        outputs: Vec::new(),
        timings: Value::Null,
    };
    let result = execute(&cli.command, &mut run);
    let manifest = json!({
        "command": command_name(&cli.command),
        "status": if result.is_ok() { "ok" } else { "error" },
        "config_hash": run.cfg.hash(),
        "seed": run.cfg.seed,
        "versions": { "mfglab": env!("CARGO_PKG_VERSION"), "mfg_core": mfg_core::VERSION },
        "workers": rayon::current_num_threads(),
        "wall_clock_seconds": start.elapsed().as_secs_f64(),
        "point_wall_clock_seconds": run.timings,
        "outputs": run.outputs,
        "config": run.cfg,
    });
    let mut f = BufWriter::new(File::create(run.dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| Failure::Io(e.to_string()))?;
    writeln!(f)?;
    f.flush()?;
    result
}

fn main() -> ExitCode {
    let help = format!("Default configuration:\n{}", defaults_json());
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run_cli(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code())
        }
    }
}
