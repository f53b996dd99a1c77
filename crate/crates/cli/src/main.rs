use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use filterlab::assumptions::{assumption_report, Interval};
use filterlab::engine::Engine;
use filterlab::experiments::{divergence_report, run_experiment, ExperimentConfig, InitSpec};
use filterlab::fmt_f64;
use filterlab::measure::{Grid, WeightFamily, WeightSpec};
use filterlab::models::{simulate, ModelKind, ModelSpec, ObservationPath, Scenario};

#[derive(Parser)]
#[command(name = "filterlab", version, about = "Grid filters for scalar hidden Markov models and their stability in V-norm")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Filter,
    Prediction,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Filter => Scenario::Filter,
            ScenarioArg::Prediction => Scenario::Prediction,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    ExpAbs,
    ExpSquare,
}

impl From<FamilyArg> for WeightFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::ExpAbs => WeightFamily::ExpAbs,
            FamilyArg::ExpSquare => WeightFamily::ExpSquare,
        }
    }
}

#[derive(clap::Args)]
struct GridArgs {
    /// Half-width of the truncation window [-L, L]
    #[arg(long = "L", default_value_t = 12.0)]
    half_width: f64,
    /// Number of grid nodes
    #[arg(long, default_value_t = 2000)]
    points: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an observation path
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a grid filter along an observation file
    Filter {
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
        #[arg(long)]
        model: PathBuf,
        /// gaussian:M:V, uniform:A:B or point:X
        #[arg(long)]
        init: String,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Steps to run; defaults to as many as the path allows
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value = "exp-abs")]
        family: FamilyArg,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        /// Also write the per-step densities to this binary file
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Paired-filter stability experiment from a TOML config or preset name
    Stability {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Run seeds one after another instead of in parallel
        #[arg(long)]
        sequential: bool,
    },
    /// Check the stability assumptions and report the derived constants
    CheckAssumptions {
        #[arg(long)]
        model: PathBuf,
        /// Half-width of the observation set
        #[arg(long)]
        ybar: f64,
        /// Weight growth rate
        #[arg(long)]
        c: f64,
        #[arg(long)]
        out: PathBuf,
        /// Weight family; defaults to exp-square for linear models, exp-abs otherwise
        #[arg(long, value_enum)]
        family: Option<FamilyArg>,
        #[arg(long, value_enum, default_value = "filter")]
        scenario: ScenarioArg,
        /// Path length used for gamma_hat and l_hat
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest |x| sampled by the growth checks
        #[arg(long, default_value_t = 1000.0)]
        radius: f64,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Truncated V-integrals of the prediction kernel under V = exp(c x^2 / 2)
    Divergence {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        c: f64,
        #[arg(long)]
        rmax: f64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0.0)]
        x: f64,
        /// Write the ladder here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { model, n, seed, out } => {
            let spec = ModelSpec::from_file(&model).with_context(|| format!("reading model {}", model.display()))?;
            let (_, path) = simulate(&spec, n, seed)?;
            path.save(&out)?;
        }
        Command::Filter { scenario, model, init, obs, out, n, family, c, sidecar, grid } => {
            let spec = ModelSpec::from_file(&model).with_context(|| format!("reading model {}", model.display()))?;
            let path = ObservationPath::load(&obs).with_context(|| format!("reading observations {}", obs.display()))?;
            let grid = Grid::symmetric(grid.half_width, grid.points)?;
            let weight = WeightSpec::new(family.into(), c)?;
            let engine = Engine::new(&spec, scenario.into(), &grid, weight)?;
            let lambda0 = init.parse::<InitSpec>()?.measure(&grid)?;
            let steps = n.unwrap_or_else(|| engine.max_steps(&path));
            let run = engine.run(&lambda0, &path, steps)?;
            run.save_csv(&out)?;
            if let Some(p) = sidecar {
                run.save_density_sidecar(&p)?;
            }
            let worst = run.max_tail_diag();
            if worst > filterlab::measure::TAIL_TOLERANCE {
                eprintln!("warning: tail diagnostic reached {}; widen the grid", fmt_f64(worst));
            }
        }
        Command::Stability { config, out_dir, sequential } => {
            let cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            let summary = run_experiment(&cfg, &out_dir, !sequential)?;
            let mut err = io::stderr().lock();
            for s in &summary.seeds {
                let (slope, r2) = s.fit.map(|f| (f.slope, f.r2)).unwrap_or((f64::NAN, f64::NAN));
                writeln!(
                    err,
                    "seed {:>4}  slope {:>10.4}  r2 {:.4}  decay {}  bounds {}  tail {:.2e}",
                    s.seed,
                    slope,
                    r2,
                    s.decay.decreasing,
                    s.forget_bound_ok && s.echeck_bound_ok,
                    s.tail_diag_max
                )?;
            }
            writeln!(
                err,
                "accepted {}  forgetting {}  bounds {}",
                summary.all_accepted, summary.all_forgetting, summary.all_bounds_hold
            )?;
        }
        Command::CheckAssumptions { model, ybar, c, out, family, scenario, n, seed, radius, grid } => {
            let spec = ModelSpec::from_file(&model).with_context(|| format!("reading model {}", model.display()))?;
            let family = family.map(WeightFamily::from).unwrap_or(match spec.kind {
                ModelKind::Linear { .. } => WeightFamily::ExpSquare,
                ModelKind::Nonlinear { .. } => WeightFamily::ExpAbs,
            });
            let grid = Grid::symmetric(grid.half_width, grid.points)?;
            let engine = Engine::new(&spec, scenario.into(), &grid, WeightSpec::new(family, c)?)?;
            let report = assumption_report(&engine, &Interval::symmetric(ybar)?, n, seed, radius)?;
            fs::write(&out, serde_json::to_string_pretty(&report)?)?;
        }
        Command::Divergence { alpha, c, rmax, steps, x, out } => {
            if !(rmax > 0.0) {
                bail!("--rmax must be positive");
            }
            let report = divergence_report(alpha, c, rmax, steps, x)?;
            let sink: Box<dyn Write> = match &out {
                Some(p) => Box::new(fs::File::create(p)?),
                None => Box::new(io::stdout().lock()),
            };
            let mut w = BufWriter::new(sink);
            writeln!(w, "R,ln_integral,integral")?;
            for (r, v) in report.radii.iter().zip(&report.ln_values) {
                writeln!(w, "{},{},{}", fmt_f64(*r), fmt_f64(*v), fmt_f64(v.exp()))?;
            }
            w.flush()?;
            eprintln!(
                "kappa {}  strictly increasing {}  first R above 1e8 {}  stationary prediction V-moment {}",
                fmt_f64(report.kappa),
                report.strictly_increasing,
                report.first_radius_above_1e8.map(fmt_f64).unwrap_or_else(|| "none".into()),
                fmt_f64(report.prediction_v_moment)
            );
        }
    }
    Ok(())
}
