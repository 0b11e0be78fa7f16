use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use emqs_core::oracle::DEFAULT_MAX_DOFS;
use emqs_core::scenario::{
    export_matrix, load_scenario, run_scenario, sweep_scenario, verify_scenario, Overrides,
    Scenario,
};
use emqs_core::{Block, FormulationId, SolverMethod};

#[derive(Parser)]
#[command(
    name = "emqs",
    version,
    about = "Low-frequency Maxwell potential formulations on hexahedral grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve every formulation at every frequency and write fields and reports.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Dense rank, symmetry and conditioning of each assembled system.
    Verify {
        scenario: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_DOFS)]
        max_dofs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run the scenario over a list of frequencies.
    Sweep {
        scenario: PathBuf,
        /// Frequencies in Hz.
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        freqs: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Write an assembled matrix in Matrix Market format.
    ExportMatrix {
        scenario: PathBuf,
        #[arg(long)]
        formulation: String,
        #[arg(long)]
        out: PathBuf,
        /// Export one block only, e.g. `a,node`.
        #[arg(long)]
        block: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    kappa_hat: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Direct,
    Iterative,
}

impl Common {
    fn load(&self, path: &Path, freqs: Option<Vec<f64>>) -> anyhow::Result<Scenario> {
        let mut sc = load_scenario(path).with_context(|| format!("loading {}", path.display()))?;
        let overrides = Overrides {
            solver: self.solver.map(|s| match s {
                SolverArg::Direct => SolverMethod::Direct,
                SolverArg::Iterative => SolverMethod::Iterative,
            }),
            tol: self.tol,
            kappa_hat: self.kappa_hat,
            out_dir: self.out_dir.clone(),
            frequencies_hz: freqs,
        };
        overrides.apply(&mut sc)?;
        Ok(sc)
    }
}

fn parse_block(s: &str) -> anyhow::Result<(Block, Block)> {
    let one = |t: &str| match t.trim() {
        "a" => Ok(Block::A),
        "node" => Ok(Block::Node),
        "multiplier" => Ok(Block::Multiplier),
        other => bail!("unknown block `{other}`; use a, node or multiplier"),
    };
    let Some((r, c)) = s.split_once(',') else {
        bail!("block must be given as `row,col`");
    };
    Ok((one(r)?, one(c)?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { scenario, common } => {
            let sc = common.load(&scenario, None)?;
            let report = run_scenario(&sc, Path::new(&sc.output.dir))?;
            print!("{}", report.table());
            Ok(if report.success() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Verify {
            scenario,
            max_dofs,
            common,
        } => {
            let sc = common.load(&scenario, None)?;
            let rows = verify_scenario(&sc, max_dofs, Some(Path::new(&sc.output.dir)))?;
            println!(
                "{:<16} {:>7} {:>6} {:>8} {:>10} {:>10} {:>9} {:>9} {:>10}",
                "formulation",
                "dofs",
                "rank",
                "nullity",
                "sym.defect",
                "condition",
                "singular",
                "symmetric",
                "consistent"
            );
            let mut ok = true;
            for r in &rows {
                match &r.outcome {
                    Ok(d) => {
                        let consistent = r.consistent().unwrap_or(false);
                        ok &= consistent;
                        println!(
                            "{:<16} {:>7} {:>6} {:>8} {:>10.2e} {:>10.2e} {:>9} {:>9} {:>10}",
                            r.formulation.as_str(),
                            r.dofs,
                            d.rank,
                            d.nullity,
                            d.symmetry_defect,
                            d.condition,
                            r.flags.expected_singular,
                            r.flags.is_symmetric,
                            consistent
                        );
                    }
                    Err(m) => println!("{:<16} {:>7} {m}", r.formulation.as_str(), r.dofs),
                }
            }
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Sweep {
            scenario,
            freqs,
            common,
        } => {
            let sc = common.load(&scenario, Some(freqs.clone()))?;
            let report = sweep_scenario(&sc, &freqs, Path::new(&sc.output.dir))?;
            print!("{}", report.table());
            Ok(if report.success() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::ExportMatrix {
            scenario,
            formulation,
            out,
            block,
            common,
        } => {
            let sc = common.load(&scenario, None)?;
            let id: FormulationId = formulation.parse()?;
            let block = block.as_deref().map(parse_block).transpose()?;
            export_matrix(&sc, id, block, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
