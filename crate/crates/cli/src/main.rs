use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cfl_core::equivalence::{compare_almost_sure, compare_cross_outcome, compare_single_outcome, Level};
use cfl_core::scenario::{builtin, builtin_scenarios, load_scenario, run, RunConfig, Scenario};
use cfl_core::{Budget, Engine};

/// Run causal-model scenarios: estimands, assumption checks and
/// equivalence comparisons between structural and potential-outcome models.
#[derive(Parser, Debug)]
#[command(name = "cfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// List the bundled scenarios.
    List,
    /// Evaluate every expectation of a scenario.
    Run {
        /// Bundled scenario id or path to a scenario file.
        scenario: String,
        #[command(flatten)]
        opts: EvalOpts,
        /// Override a scenario parameter, e.g. `--param alpha=0.5`.
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, f64)>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a scenario file without running it.
    Check { path: PathBuf },
    /// Compare two models, each given as `SCENARIO:MODEL`.
    Compare {
        a: String,
        b: String,
        #[arg(long, value_parser = parse_level)]
        level: Level,
        #[command(flatten)]
        opts: EvalOpts,
    },
    /// Print a bundled scenario as a file.
    Show { id: String },
}

#[derive(clap::Args, Debug)]
struct EvalOpts {
    #[arg(long, env = "CFL_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_engine, default_value = "gaussian")]
    engine: Engine,
    /// Monte Carlo sample size.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Md,
}

fn parse_param(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or("expected NAME=VALUE")?;
    let v: f64 = v.trim().parse().map_err(|e| format!("bad value for `{k}`: {e}"))?;
    Ok((k.trim().to_string(), v))
}

fn parse_engine(s: &str) -> std::result::Result<Engine, String> {
    s.parse().map_err(|e: cfl_core::Error| e.to_string())
}

fn parse_level(s: &str) -> std::result::Result<Level, String> {
    s.parse().map_err(|e: cfl_core::Error| e.to_string())
}

/// A bundled id, or else a file path.
fn resolve(spec: &str) -> Result<Scenario> {
    if let Some(s) = builtin(spec) {
        return Ok(s);
    }
    if Path::new(spec).exists() {
        return Ok(load_scenario(spec)?);
    }
    bail!("no bundled scenario or file named `{spec}` (see `cfl list`)")
}

/// Exit codes: 0 when everything passes, 1 when an expectation fails,
/// 2 for usage and input errors.
enum Outcome {
    Pass,
    Fail,
}

fn execute(cli: Cli, buf: &mut String) -> Result<Outcome> {
    match cli.command {
        Command::List => {
            for s in builtin_scenarios() {
                writeln!(buf, "{:<12} {}", s.id, s.description)?;
            }
            Ok(Outcome::Pass)
        }
        Command::Show { id } => {
            let s = builtin(&id).ok_or_else(|| anyhow!("no bundled scenario `{id}`"))?;
            writeln!(buf, "{}", s.to_json())?;
            Ok(Outcome::Pass)
        }
        Command::Check { path } => {
            let s = load_scenario(&path)?;
            writeln!(
                buf,
                "{}: ok ({} noises, {} models, {} expectations)",
                s.id,
                s.noises.len(),
                s.models.len(),
                s.expectations.len()
            )?;
            Ok(Outcome::Pass)
        }
        Command::Run { scenario, opts, params, format, out } => {
            let s = resolve(&scenario)?;
            let cfg = RunConfig {
                seed: opts.seed,
                engine: opts.engine,
                n: opts.samples,
                params: params.into_iter().collect::<BTreeMap<_, _>>(),
            };
            let report = run(&s, &cfg)?;
            let text = match format {
                Format::Csv => report.to_csv(),
                Format::Md => report.to_markdown(),
            };
            match out {
                Some(p) => std::fs::write(&p, &text).with_context(|| format!("writing {}", p.display()))?,
                None => buf.push_str(&text),
            }
            Ok(if report.passed() { Outcome::Pass } else { Outcome::Fail })
        }
        Command::Compare { a, b, level, opts } => {
            let load = |r: &str| -> Result<cfl_core::rcm::FunctionalRcm> {
                let (sc, m) = r
                    .rsplit_once(':')
                    .ok_or_else(|| anyhow!("model reference `{r}` should look like SCENARIO:MODEL"))?;
                let s = resolve(sc)?;
                let models = s.build(&s.parameters)?;
                let built = models.get(m).ok_or_else(|| anyhow!("scenario `{sc}` has no model `{m}`"))?;
                Ok(built.rcm()?)
            };
            let (ra, rb) = (load(&a)?, load(&b)?);
            let budget = Budget::new(opts.samples, opts.seed);
            let v = match level {
                Level::AlmostSure => compare_almost_sure(&ra, &rb, opts.engine, &budget)?,
                Level::CrossOutcome => compare_cross_outcome(&ra, &rb, opts.engine, &budget)?,
                Level::SingleOutcome => compare_single_outcome(&ra, &rb, opts.engine, &budget)?,
            };
            writeln!(buf, "level:     {}", v.level.name())?;
            writeln!(buf, "verdict:   {}", v.verdict.name())?;
            writeln!(buf, "statistic: {:e}", v.statistic)?;
            writeln!(buf, "threshold: {:e}", v.threshold)?;
            if let Some(p) = v.p_value {
                writeln!(buf, "p-value:   {p:.4}")?;
            }
            for (t, s) in &v.per_t {
                writeln!(buf, "t = {t}:     {s:e}")?;
            }
            if let Some(w) = &v.witness {
                writeln!(buf, "witness:   {w}")?;
            }
            writeln!(buf, "engine:    {}", v.engine)?;
            Ok(Outcome::Pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = String::new();
    let result = execute(cli, &mut out);
    // a closed pipe (`cfl show x | head`) is not an error worth reporting
    if let Err(e) = std::io::stdout().lock().write_all(out.as_bytes()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match result {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
