use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ebscfl_sim::config::RunConfig;
use ebscfl_sim::experiments::{self, BenchGrid, WorkloadKind};
use ebscfl_sim::output::gnuplot;
use ebscfl_sim::report;
use ebscfl_sim::sim::{self, Mode, RunOutput};
use ebscfl_sim::{SimError, SimResult};

/// Residual above which `equivalence` reports a failure.
const EQUIVALENCE_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "ebscfl", version, about = "Secure clustered federated learning simulator")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configuration and EBS_OUT_DIR.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate keys for the configured dimensions and check one round.
    KeygenSelftest,
    /// Train with plaintext robust aggregation.
    RunPlain,
    /// Train with the secure protocol.
    RunSecure,
    /// Attack-free twin first (defines NA), then the attacked run.
    RunAttack {
        #[arg(long, value_enum, default_value_t = ModeArg::Secure)]
        mode: ModeArg,
    },
    /// Per-client bytes and encode time against n and l.
    Bench {
        #[arg(long, value_enum, default_value_t = GridArg::Small)]
        grid: GridArg,
    },
    /// Secure against plaintext aggregates over a grid of dimensions.
    Equivalence {
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 8])]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3])]
        m: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16])]
        l: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, value_enum, default_value_t = WorkloadArg::Aligned)]
        workload: WorkloadArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Plain,
    Secure,
    Fedavg,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Plain => Mode::Plain,
            ModeArg::Secure => Mode::Secure,
            ModeArg::Fedavg => Mode::FedAvg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Small,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum WorkloadArg {
    Aligned,
    Isotropic,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            if sim::is_abort(&e) {
                // The protocol error already reads "round aborted: ...".
                eprintln!("{e}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load(cli: &Cli) -> SimResult<(RunConfig, PathBuf)> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = cli.out.clone().unwrap_or_else(|| cfg.resolved_out_dir());
    Ok((cfg, out))
}

/// `Ok(false)` means a checked property failed.
fn dispatch(cli: &Cli) -> SimResult<bool> {
    let (cfg, out) = load(cli)?;
    match &cli.command {
        Command::KeygenSelftest => {
            let dims = cfg.protocol_dims()?;
            let t = experiments::selftest(&dims, cfg.seed)?;
            println!(
                "n={} m={} l={} s={} layers={:?}: residual {:.3e}, norm deviation {:.3e}, honest accepted {}/{}, skip-normalization refused {}/{}, tampered refused {}/{}",
                dims.n, dims.m, dims.l, dims.s, dims.layers, t.residual, t.norm_dev, t.honest_accepted, t.clients, t.skip_rejected, t.clients, t.tamper_rejected, t.clients
            );
            println!("{}", if t.passed() { "PASS" } else { "FAIL" });
            Ok(t.passed())
        }
        Command::RunPlain => single(&cfg, Mode::Plain, &out),
        Command::RunSecure => single(&cfg, Mode::Secure, &out),
        Command::RunAttack { mode } => {
            let mode = Mode::from(*mode);
            let twin = sim::run(&cfg, mode, false, None)?;
            let na = twin.final_accuracy();
            report::write_run(&twin, &out.join("twin"))?;
            let attacked = sim::run(&cfg, mode, true, Some(na))?;
            let files = report::write_run(&attacked, &out)?;
            let last = attacked.metrics.last().expect("rounds >= 1");
            println!(
                "{} {} attack, {} adversaries: NA {:.2} FA {:.2} MA {:.2} ASR {:.3} AIR {:.4}; error twin {:.4} attacked {:.4}",
                mode.name(),
                cfg.attack.kind.name(),
                attacked.adversary.iter().filter(|&&a| a).count(),
                na,
                last.fa,
                last.ma,
                last.asr,
                last.air,
                twin.final_error(),
                attacked.final_error()
            );
            print_files(&files);
            Ok(true)
        }
        Command::Bench { grid } => {
            let grid = match grid {
                GridArg::Small => BenchGrid::small(),
                GridArg::Full => BenchGrid::full(),
            };
            let rep = experiments::bench(&grid, cfg.seed)?;
            let path = report::bench_table(&rep).write(&out, "bench.csv")?;
            let gp = gnuplot(&out, "bench.gp", "bench.csv", "l", &["bytes_client", "encode_secs"], "per-client cost", true)?;
            println!("bytes n={} / n={}: {:.4}", grid.n_pair[1], grid.n_pair[0], rep.bytes_n_ratio);
            println!("log-log slope in l (m=1): bytes {:.3}, encode {:.3}", rep.bytes_l_slope, rep.encode_l_slope);
            print_files(&[path, gp]);
            Ok(true)
        }
        Command::Equivalence { n, m, l, seeds, workload } => {
            let kind = match workload {
                WorkloadArg::Aligned => WorkloadKind::Aligned,
                WorkloadArg::Isotropic => WorkloadKind::Isotropic,
            };
            let mut rows = Vec::new();
            for &n in n {
                for &m in m {
                    for &l in l {
                        if n < m {
                            return Err(SimError::Config(format!("need n >= m, got n={n} m={m}")));
                        }
                        for seed in 0..*seeds {
                            rows.push(experiments::equivalence_case(kind, n, m, l, seed)?);
                        }
                    }
                }
            }
            let path = report::equivalence_table(&rows).write(&out, "equivalence.csv")?;
            let worst = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
            let over = rows.iter().filter(|r| r.residual > EQUIVALENCE_TOL || !r.all_accepted).count();
            println!("{} cases, worst residual {worst:.3e}, {over} above {EQUIVALENCE_TOL:e} or refused", rows.len());
            print_files(&[path]);
            Ok(over == 0)
        }
    }
}

fn single(cfg: &RunConfig, mode: Mode, out: &Path) -> SimResult<bool> {
    let run: RunOutput = sim::run(cfg, mode, false, None)?;
    let files = report::write_run(&run, out)?;
    let last = run.metrics.last().expect("rounds >= 1");
    println!("{} run, {} rounds: accuracy {:.2}, parameter error {:.4}", mode.name(), last.round + 1, last.fa, run.final_error());
    print_files(&files);
    Ok(true)
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}
