use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vfl_mpc::cli;
use vfl_mpc::config::{self, Config, Preset};
use vfl_mpc::data;
use vfl_mpc::dpcore::CalibrationCache;
use vfl_mpc::protocols::{self, Variant};

#[derive(Parser)]
#[command(name = "vflmpc", version, about = "Private vertical federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: a subdirectory of $VFLMPC_OUT)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plain, GShuff, GBMF, GLBMF, LdpG or LdpGL
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    setting: Option<u8>,
    #[arg(long, value_parser = ["oracle", "rep3"])]
    backend: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic vertically partitioned dataset
    GenData(Common),
    /// Train one configuration and write results
    Run(Common),
    /// Find the smallest noise multiplier meeting a privacy target
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        /// sampling rate
        #[arg(long, default_value_t = 1.0)]
        q: f64,
        /// number of compositions
        #[arg(long, default_value_t = 1)]
        steps: u64,
        #[arg(long, default_value = "gaussian")]
        mechanism: String,
        /// cache file (default: <out root>/calibration.json)
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Run variants × ε × seeds and tabulate accuracy
    Sweep {
        #[command(flatten)]
        common: Common,
        /// comma-separated variants
        #[arg(long, default_value = "GShuff,GBMF,GLBMF,LdpG")]
        variants: String,
        /// comma-separated privacy targets
        #[arg(long, default_value = "1,2,5,8,10")]
        epsilons: String,
        #[arg(long, default_value_t = 4)]
        seeds: u64,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarize results.jsonl or sweep.jsonl files in a directory
    Report { dir: PathBuf },
}

fn load(c: &Common, preset: Preset) -> Result<Config, String> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p).map_err(|e| e.to_string())?,
        None => Config::preset(preset),
    };
    let p = &mut cfg.protocol;
    if let Some(s) = c.seed {
        p.seed = s;
        cfg.data.seed = s;
    }
    if let Some(v) = &c.variant {
        p.variant = Variant::parse(v).ok_or_else(|| format!("unknown variant {v:?}"))?;
    }
    if let Some(e) = c.epsilon {
        p.epsilon = e;
    }
    if let Some(s) = c.setting {
        p.setting = s;
    }
    if let Some(b) = &c.backend {
        p.backend = config::parse_backend(b).expect("clap restricts the values");
    }
    if c.out.is_some() {
        cfg.out = c.out.clone();
    }
    let errs = cfg.validate();
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(errs.join("\n"))
    }
}

fn out_dir(cfg: &Config, leaf: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| cli::default_out_root().join(leaf))
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> Result<ExitCode, String> {
    match cli.cmd {
        Cmd::GenData(c) => {
            let cfg = load(&c, Preset::Default)?;
            if cfg.data.train_size() % cfg.protocol.batch != 0 {
                eprintln!(
                    "warning: {} training rows are not divisible by batch {}",
                    cfg.data.train_size(),
                    cfg.protocol.batch
                );
            }
            let d = data::generate(&cfg.data).map_err(|e| e.to_string())?;
            let dir = out_dir(&cfg, "data");
            for p in data::write_dataset(&d, &dir).map_err(|e| e.to_string())? {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run(c) => {
            let cfg = load(&c, Preset::Default)?;
            let d = cli::load_data(&cfg).map_err(|e| e.to_string())?;
            let out = protocols::run(&cfg.protocol, &d).map_err(|e| e.to_string())?;
            let dir = out_dir(&cfg, &format!("{}-seed{}", cfg.protocol.variant, cfg.protocol.seed));
            protocols::write_outputs(&out, &dir).map_err(|e| e.to_string())?;
            for w in &out.metrics.warnings {
                eprintln!("warning: {w}");
            }
            let m = &out.metrics;
            println!(
                "{} accuracy {:.4}  epsilon {}  sigma {}  bytes {}  rounds {}  -> {}",
                m.variant,
                m.final_accuracy,
                m.epsilon_accounted.map_or("inf".into(), |e| format!("{e:.3}")),
                m.sigma.map_or("-".into(), |s| format!("{s:.4}")),
                m.bytes_total,
                m.rounds_total,
                dir.display()
            );
            let bad = cli::check_invariants(&cfg, &out);
            for b in &bad {
                eprintln!("invariant violated: {b}");
            }
            Ok(if bad.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Cmd::Calibrate {
            epsilon,
            delta,
            q,
            steps,
            mechanism,
            cache,
        } => {
            let mut errs = Vec::new();
            if !(epsilon > 0.0) {
                errs.push(format!("epsilon must be > 0 (got {epsilon})"));
            }
            if !(delta > 0.0 && delta < 1.0) {
                errs.push(format!("delta must lie in (0, 1) (got {delta})"));
            }
            if !(q > 0.0 && q <= 1.0) {
                errs.push(format!("q must lie in (0, 1] (got {q})"));
            }
            if steps == 0 {
                errs.push("steps must be >= 1".into());
            }
            if !errs.is_empty() {
                return Err(errs.join("\n"));
            }
            let path = cache.unwrap_or_else(|| cli::default_out_root().join("calibration.json"));
            let mut cache = CalibrationCache::open(&path).map_err(|e| e.to_string())?;
            let (c, hit) = cache
                .get_or_calibrate(epsilon, delta, q, steps, &mechanism)
                .map_err(|e| e.to_string())?;
            println!(
                "sigma {:.6}  accounted epsilon {:.6}{}",
                c.sigma,
                c.epsilon_accounted,
                if hit { "  (cached)" } else { "" }
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep {
            common,
            variants,
            epsilons,
            seeds,
            workers,
        } => {
            let cfg = load(&common, Preset::Benchmark)?;
            let vs = variants
                .split(',')
                .map(|v| Variant::parse(v.trim()).ok_or_else(|| format!("unknown variant {v:?}")))
                .collect::<Result<Vec<_>, _>>()?;
            let es = epsilons
                .split(',')
                .map(|e| e.trim().parse::<f64>().map_err(|err| format!("bad epsilon {e:?}: {err}")))
                .collect::<Result<Vec<_>, _>>()?;
            let base_seed = cfg.protocol.seed;
            let ss: Vec<u64> = (base_seed..base_seed + seeds).collect();
            let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let rows = cli::sweep(&cfg, &vs, &es, &ss, workers).map_err(|e| e.to_string())?;
            let dir = out_dir(&cfg, "sweep");
            let path = cli::write_sweep(&rows, &dir).map_err(|e| e.to_string())?;
            print!("{}", cli::format_table(&cli::aggregate(&rows)));
            println!("-> {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Report { dir } => {
            let rows = cli::read_rows(&dir).map_err(|e| e.to_string())?;
            if rows.is_empty() {
                return Err(format!("no results under {}", dir.display()));
            }
            print!("{}", cli::format_table(&cli::aggregate(&rows)));
            Ok(ExitCode::SUCCESS)
        }
    }
}
