use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use platoon_shield::config::ScenarioConfig;
use platoon_shield::pipeline::{self, DesignFile, PipelineError};
use platoon_shield::report::RunReport;
use platoon_shield::sdp::SdpError;
use platoon_shield::simulator::{SimError, TRACE_FORMAT_HELP};
use platoon_shield::synthesis::SynthesisError;

const EXIT_CONFIG: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser)]
#[command(
    name = "platoon-shield",
    version,
    about = "Attack-resilient CACC design: synthesis, safety assessment and simulation",
    after_help = "Run `platoon-shield --help trace-format` for the trace CSV columns."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file; the bundled reference scenario when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Simulation seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Outer grid step for a and c (overrides the config).
    #[arg(long)]
    grid_step: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize estimator, monitor and controller; writes design.json.
    Synthesize(Common),
    /// Certify the reachable set of a design and measure its distance to the critical states.
    Assess {
        #[command(flatten)]
        common: Common,
        /// Design file, or `baseline` / `published` for the bundled ones.
        #[arg(long)]
        design: Option<String>,
    },
    /// Simulate the platoon with a design; writes trace.csv and simulation.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        design: Option<String>,
    },
    /// Synthesize, then compare the result with the bundled baseline design.
    Reproduce(Common),
}

struct Failure {
    code: u8,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Config(_) | PipelineError::Model(_) | PipelineError::Design { .. } => EXIT_CONFIG,
            PipelineError::Synthesis(SynthesisError::Parameter(_)) => EXIT_CONFIG,
            PipelineError::Simulation(SimError::Config(_)) => EXIT_CONFIG,
            PipelineError::Simulation(SimError::Divergence { .. }) => EXIT_DIVERGENCE,
            PipelineError::Synthesis(SynthesisError::Sdp(SdpError::Malformed(_) | SdpError::Grid(_))) => EXIT_CONFIG,
            PipelineError::DesignMissing(_) | PipelineError::Synthesis(_) | PipelineError::Assessment(_) => {
                EXIT_INFEASIBLE
            }
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: format!("{}: {e}", path.display()),
    }
}

fn resolve(common: &Common) -> Result<(ScenarioConfig, PathBuf), Failure> {
    let mut cfg = match &common.config {
        Some(p) => ScenarioConfig::load(p).map_err(PipelineError::from)?,
        None => ScenarioConfig::reference(),
    };
    if let Some(seed) = common.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(step) = common.grid_step {
        cfg.synthesis.grid_step = step;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate().map_err(PipelineError::from)?;
    let out = cfg.output.dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    Ok((cfg, out))
}

fn load_design(choice: Option<&str>, out: &Path) -> Result<DesignFile, Failure> {
    match choice {
        Some("baseline") => Ok(DesignFile::baseline()),
        Some("published") => Ok(DesignFile::published()),
        Some(p) => Ok(DesignFile::load(Path::new(p))?),
        None => Ok(DesignFile::load(&out.join("design.json"))?),
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synthesize(common) => {
            let (cfg, out) = resolve(&common)?;
            let s = pipeline::synthesize(&cfg)?;
            println!(
                "K = [{:.6}, {:.6}]  a = {}  c = {}  objective = {:.4}",
                s.controller.k[0], s.controller.k[1], s.estimator.scalars.a, s.estimator.scalars.c, s.estimator.objective
            );
            write(&out.join("design.json"), &s.design.to_json())?;
            let mut report = RunReport::new("synthesize", &cfg);
            report.synthesis = Some(s);
            write(&out.join("synthesis.json"), &report.to_json())?;
        }
        Command::Assess { common, design } => {
            let (cfg, out) = resolve(&common)?;
            let d = load_design(design.as_deref(), &out)?;
            let a = pipeline::assess_design(&cfg, &d)?;
            for h in &a.verdict.distances {
                println!("{:<10} formula {:>14.6e}  oracle {:>14.6e}", h.name, h.formula, h.oracle);
            }
            println!(
                "d_inf = {:.6e} ({})",
                a.verdict.d_inf,
                if a.verdict.resilient { "resilient" } else { "at risk" }
            );
            let mut report = RunReport::new("assess", &cfg);
            report.assessments.push(a);
            write(&out.join("assessment.json"), &report.to_json())?;
        }
        Command::Simulate { common, design } => {
            let (cfg, out) = resolve(&common)?;
            let d = load_design(design.as_deref(), &out)?;
            let (trace, summary) = pipeline::simulate_design(&cfg, &d)?;
            for m in &summary.detection {
                println!(
                    "vehicle {}: alarms after k={} {}/{}  max z {:.4}",
                    m.vehicle, m.kbar_star, m.alarms_after_kbar, m.steps_after_kbar, m.max_z
                );
            }
            write(&out.join("trace.csv"), &trace.to_csv())?;
            let mut report = RunReport::new("simulate", &cfg);
            report.simulation = Some(summary);
            write(&out.join("simulation.json"), &report.to_json())?;
        }
        Command::Reproduce(common) => {
            let (cfg, out) = resolve(&common)?;
            let r = pipeline::reproduce(&cfg, &DesignFile::baseline())?;
            print!("{}", r.table());
            write(&out.join("design.json"), &r.synthesis.design.to_json())?;
            let pass = r.pass();
            let mut report = RunReport::new("reproduce", &cfg);
            report.checks = r.checks;
            report.assessments = vec![r.synthesized, r.baseline];
            report.synthesis = Some(r.synthesis);
            write(&out.join("reproduce.json"), &report.to_json())?;
            if !pass {
                return Err(Failure {
                    code: EXIT_MISMATCH,
                    message: "reproduction checks failed".into(),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.windows(2).any(|w| (w[0] == "--help" || w[0] == "help") && w[1] == "trace-format") {
        print!("{TRACE_FORMAT_HELP}");
        return ExitCode::SUCCESS;
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            // usage errors share the config exit code; clap would use 2
            return if usage { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
