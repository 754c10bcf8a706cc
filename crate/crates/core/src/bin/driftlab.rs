use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use driftlab::bounds::Variant;
use driftlab::container::{write_atomic, Container};
use driftlab::harness::config::OUT_ENV;
use driftlab::harness::report::render;
use driftlab::harness::suites::{self, Context, Setup};
use driftlab::harness::{
    run_experiment, write_outcome, ExperimentConfig, Format, RunReport, Suite,
};
use driftlab::nash_tools::{band_limited_field, integral_riccati_oracle, riccati_oracle};
use driftlab::solver::evolve;
use driftlab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "driftlab",
    version,
    about = "Heat-kernel experiments for parabolic equations with divergence-free drift"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; defaults to $DRIFTLAB_OUT/<name> or driftlab-out/<name>.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut c = ExperimentConfig::load(&self.config)?;
        if let Some(o) = &self.out {
            c.output_dir = Some(o.clone());
        }
        let out = c.resolve_output();
        Ok((c, out))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Print an example configuration.
    Example,
    /// Evolve band-limited positive data and store the states.
    Solve(ConfigArg),
    /// Forward kernels from every source at the sample times.
    Kernel {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Also write a CSV per source (small grids only).
        #[arg(long)]
        csv: bool,
    },
    /// Envelope fitting.
    Bounds {
        #[command(subcommand)]
        cmd: BoundsCmd,
    },
    /// Nash functional trajectories and the terminal floor constant.
    Nash(ConfigArg),
    /// Riccati oracle batteries.
    Riccati {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Oscillation-decay battery and kernel Hoelder exponents.
    Regularity(ConfigArg),
    /// Verification suites.
    Suite {
        #[command(subcommand)]
        cmd: SuiteCmd,
    },
    /// Re-render a stored report.json.
    Report {
        input: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: String,
    },
}

#[derive(Subcommand)]
enum BoundsCmd {
    /// Fit the smallest lattice constants for one or more variants.
    Fit {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Variant names; defaults to every applicable one.
        #[arg(long = "variant")]
        variants: Vec<String>,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
    },
}

#[derive(Subcommand)]
enum SuiteCmd {
    /// Run suites and write report.{json,csv,md} and timing.json.
    Run {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Restrict to these suites (repeatable).
        #[arg(long = "suite")]
        only: Vec<String>,
    },
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Io(e.to_string()))
}

fn save(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    write_atomic(&p, text.as_bytes())?;
    eprintln!("wrote {}", p.display());
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Example => {
            let c = ExperimentConfig::new(
                driftlab::harness::config::GridConfig {
                    n: 2,
                    cells: 128,
                    side: 16.0,
                },
                "cellular-vortex",
                driftlab::harness::config::NormConfig {
                    l: driftlab::norms_scaling::Exponent::Infinite,
                    q: driftlab::norms_scaling::Exponent::Finite(2.0),
                },
                0.2,
            );
            print!("{}", c.to_toml()?);
        }
        Cmd::Solve(a) => {
            let (c, out) = a.load()?;
            let s = Setup::new(&c)?;
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
            let f = band_limited_field(&s.grid, &mut rng);
            let u0 =
                driftlab::solver::GridState::new(f.values.iter().map(|v| 2.0 + v).collect(), 0.0);
            let traj = evolve(&u0, &s.problem, &s.times, None)?;
            Container::from_states(&s.grid, &traj.states, "solution")?
                .write(&out.join("solution.bin"))?;
            println!("{}", json(&traj.meta)?.trim_end());
        }
        Cmd::Kernel { cfg, csv } => {
            let (c, out) = cfg.load()?;
            let ctx = Context::new(Setup::new(&c)?);
            for (i, run) in ctx.kernels()?.iter().enumerate() {
                let cont = Container::from_slices(run, &format!("kernel[{i}]"))?;
                cont.write(&out.join(format!("kernel_{i}.bin")))?;
                if csv {
                    save(&out, &format!("kernel_{i}.csv"), &cont.to_csv()?)?;
                }
                println!(
                    "{}",
                    json(&run.last().expect("nonempty times").meta)?.trim_end()
                );
            }
            Container::from_drift(&ctx.setup.problem.drift, &ctx.setup.times)?
                .write(&out.join("drift.bin"))?;
        }
        Cmd::Bounds {
            cmd:
                BoundsCmd::Fit {
                    cfg,
                    variants,
                    kappa,
                },
        } => {
            let (c, out) = cfg.load()?;
            let ctx = Context::new(Setup::new(&c)?);
            let vs: Vec<Variant> = if variants.is_empty() {
                suites::default_variants(&ctx.setup.envelope_params()?)
            } else {
                variants
                    .iter()
                    .map(|v| Variant::parse(v))
                    .collect::<Result<_>>()?
            };
            let mut code = 0;
            for v in vs {
                match suites::fit_variant(&ctx, v, kappa) {
                    Ok((_, fit)) => {
                        let text = json(&fit)?;
                        save(&out, &format!("fit_{}.json", v.name()), &text)?;
                        print!("{text}");
                    }
                    Err(Error::Infeasible(m)) => {
                        eprintln!("{}: no feasible constants ({m})", v.name());
                        code = 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            return Ok(code);
        }
        Cmd::Nash(a) => {
            let (c, out) = a.load()?;
            let s = Setup::new(&c)?;
            let trajs = suites::nash_trajectories(&s)?;
            for (i, t) in trajs.iter().enumerate() {
                save(&out, &format!("nash_{i}.csv"), &t.to_csv())?;
            }
            let max_g = trajs
                .iter()
                .map(|t| t.max_g())
                .fold(f64::NEG_INFINITY, f64::max);
            println!("max G = {max_g:e}");
            println!("floor constant = {:e}", suites::terminal_floor(&trajs)?);
            return Ok(i32::from(max_g > 0.0));
        }
        Cmd::Riccati { samples, seed } => {
            let a = riccati_oracle(samples, seed)?;
            let b = integral_riccati_oracle(samples, seed)?;
            print!("{}", json(&[&a, &b])?);
            return Ok(i32::from(a.violations + b.violations > 0));
        }
        Cmd::Regularity(a) => {
            let (c, _) = a.load()?;
            let ctx = Context::new(Setup::new(&c)?);
            let (states, dt) = suites::dense_solution(&ctx.setup)?;
            let b = suites::decay_battery(&ctx.setup, &states, dt)?;
            println!(
                "trials {} / theta < 1: {} / max theta {:.4}",
                b.trials, b.below_one, b.max_theta
            );
            println!("super-mean chain excess {:e}", b.chain_excess);
            for (i, a) in suites::kernel_alphas(&ctx)?.iter().enumerate() {
                println!("kernel alpha[{i}] = {a:.4}");
            }
            return Ok(i32::from(b.below_one < b.trials));
        }
        Cmd::Suite {
            cmd: SuiteCmd::Run { cfg, only },
        } => {
            let (mut c, out) = cfg.load()?;
            if !only.is_empty() {
                c.suites = only
                    .iter()
                    .map(|s| Suite::parse(s))
                    .collect::<Result<_>>()?;
                c.validate()?;
            }
            let outcome = run_experiment(&c)?;
            for p in write_outcome(&outcome, &out)? {
                eprintln!("wrote {}", p.display());
            }
            print!("{}", outcome.report.to_markdown());
            return Ok(outcome.report.exit_code());
        }
        Cmd::Report { input, format } => {
            let text = std::fs::read_to_string(&input)?;
            let r = RunReport::from_json(&text)?;
            print!("{}", render(&r, Format::parse(&format)?)?);
            return Ok(r.exit_code());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_)
                | Error::UnknownCatalog(_)
                | Error::CatalogParams(_)
                | Error::Argument(_) => 2,
                Error::Numerical(_) => 3,
                _ => 1,
            };
            if matches!(e, Error::Config(_)) {
                eprintln!("(output directory can be set with --out or ${OUT_ENV})");
            }
            ExitCode::from(code)
        }
    }
}
