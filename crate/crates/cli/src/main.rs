use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use qsphere_core::error::QsError;
use qsphere_core::scenario::{audit_directory, list_presets, preset, run_scenario, ScenarioConfig};

#[derive(Parser)]
#[command(name = "qsphere", version, about = "Quasi-spherical 3-metrics with a given scalar curvature: scenario runner and audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario from a preset or a JSON config.
    Run(RunArgs),
    /// Print the preset registry.
    ListPresets,
    /// Re-run the audits on a stored scenario directory.
    Audit {
        #[arg(long)]
        record: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Preset name, optionally followed by its parameter ("NAME VALUE" or "NAME:VALUE").
    #[arg(long)]
    preset: Option<String>,
    /// Replace the resolution ladder by a single nlat.
    #[arg(long)]
    resolution: Option<usize>,
    /// Final time of the run.
    #[arg(long)]
    tmax: Option<f64>,
    /// Output root; the scenario writes into OUT/<name>.
    #[arg(long, env = "QSPHERE_OUT", default_value = "qsphere-out")]
    out: PathBuf,
    /// Seed for random lapse perturbations.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the resolution ladder.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn load_config(args: &RunArgs) -> Result<ScenarioConfig, QsError> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ScenarioConfig::load(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => return Err(QsError::Config("need --config or --preset".into())),
    };
    if let Some(n) = args.resolution {
        cfg.resolutions = vec![n];
    }
    if let Some(t) = args.tmax {
        cfg.t_end = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs) -> anyhow::Result<i32> {
    let cfg = match load_config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(e.exit_code());
        }
    };
    let dir = args.out.join(&cfg.name);
    let outcome = match run_scenario(&cfg, &dir, args.threads) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(e.exit_code());
        }
    };
    let m = &outcome.manifest;
    println!("scenario {} -> {}", m.scenario, outcome.dir.display());
    if let Some(r) = &m.result {
        println!("result: {r}");
    }
    if let Some(e) = m.expected_mass {
        println!("expected mass: {e}");
    }
    for r in &m.resolutions {
        println!(
            "nlat {:>3}  K = {:.6e}  envelope {:.3e} [{}]  curvature {} [{}]",
            r.nlat,
            r.k,
            r.envelope_worst,
            if r.envelope_pass { "ok" } else { "FAIL" },
            r.rbar_max_err.map_or("-".into(), |v| format!("{v:.3e}")),
            if r.curvature_pass { "ok" } else { "FAIL" },
        );
        if let Some(a) = &r.adm {
            println!("          m_inf = {:.10} +/- {:.2e} (R^2 = {:.6})", a.m_inf, a.uncertainty, a.r2);
        }
        for w in &r.warnings {
            println!("          warning: {w}");
        }
    }
    if let Some(e) = &m.error {
        eprintln!("error: {e}");
    }
    Ok(outcome.exit_code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::ListPresets => {
            for p in list_presets() {
                let param = p
                    .parameter
                    .map_or(String::new(), |(n, v)| format!(" [{n}={v}]"));
                println!("{}{}  ({})  {}; expected: {}", p.name, param, p.result, p.summary, p.expected);
            }
            Ok(0)
        }
        Command::Run(args) => run(args),
        Command::Audit { record } => audit_directory(&record)
            .map(|r| {
                println!(
                    "nlat {}  envelope {:.3e}  curvature {}  -> exit {}",
                    r.nlat,
                    r.audits.envelope.worst(),
                    r.audits
                        .curvature
                        .as_ref()
                        .map_or("-".into(), |c| format!("{:.3e}", c.max_err_inf)),
                    r.exit_code
                );
                r.exit_code
            })
            .or_else(|e| {
                eprintln!("error: {e}");
                Ok::<i32, QsError>(e.exit_code())
            })
            .context("audit"),
    };
    match code {
        Ok(c) => ExitCode::from(c as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(4)
        }
    }
}
