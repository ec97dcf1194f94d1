use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bbcoreset::data::{DATA_DIR_ENV, KNOWN_DATASETS};
use bbcoreset::experiment::{
    self, data_status, entropy_grid, run_continual, run_experiment, write_grid_csv, ExperimentConfig, TrialResult,
};
use bbcoreset::models::Model;
use bbcoreset::par::Exec;
use bbcoreset::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

/// Black-box coreset variational inference experiments.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed at the first configured coreset size.
    Run(Common),
    /// Train and evaluate every configured coreset size and seed.
    Sweep(Common),
    /// Class-incremental protocol from the config's `[continual]` table.
    Continual {
        #[command(flatten)]
        common: Common,
        /// Train each task on its fresh data only, without replay.
        #[arg(long)]
        fresh_only: bool,
    },
    /// Report the optional real datasets, or copy a local file into the data directory.
    FetchData {
        /// Dataset name, e.g. `phishing`.
        name: Option<String>,
        /// Local LIBSVM file to install as `<name>`.
        #[arg(long, requires = "name")]
        from: Option<PathBuf>,
    },
    /// Predictive entropy over a 2-D grid for a saved trial.
    EntropyGrid {
        /// Trial JSON written by `run` or `sweep`.
        #[arg(long)]
        trial: PathBuf,
        /// `x1_min,x1_max,x2_min,x2_max`.
        #[arg(long, value_delimiter = ',', default_values_t = [-3.0, 3.0, -3.0, 3.0], allow_hyphen_values = true)]
        bounds: Vec<f64>,
        /// Grid cells along x1 and x2.
        #[arg(long, value_delimiter = ',', default_values_t = [50, 50])]
        resolution: Vec<usize>,
        /// Posterior samples.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method, e.g. `bb-psvi` or `random-coreset`.
    #[arg(long)]
    method: Option<String>,
    /// Single coreset size.
    #[arg(long)]
    coreset_size: Option<usize>,
    /// Dotted `key=value` assignment applied to the config; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Disable the worker pool.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn load(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seeds=[{s}]"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("out_dir={}", toml_string(&o.to_string_lossy())));
        }
        if let Some(m) = &self.method {
            overrides.push(format!("method={}", toml_string(m)));
        }
        if let Some(m) = self.coreset_size {
            overrides.push(format!("coreset_sizes=[{m}]"));
            overrides.push(format!("train.coreset_size={m}"));
        }
        overrides.extend_from_slice(extra);
        let mut cfg = ExperimentConfig::load(&self.config, &overrides)?;
        cfg.train.exec = self.exec();
        Ok(cfg)
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let cfg = c.load(&[])?;
            let sizes = cfg.sizes()[..1].to_vec();
            report(&run_experiment(&cfg, &sizes, c.exec())?)
        }
        Command::Sweep(c) => {
            let cfg = c.load(&[])?;
            report(&run_experiment(&cfg, &cfg.sizes(), c.exec())?)
        }
        Command::Continual { common, fresh_only } => {
            let extra = if fresh_only { vec!["continual.fresh_only=true".to_string()] } else { vec![] };
            let cfg = common.load(&extra)?;
            if cfg.continual.is_none() {
                return Err(Error::Config("continual needs a [continual] table".into()));
            }
            let results = run_continual(&cfg, common.exec())?;
            let tasks: Vec<_> = results
                .iter()
                .map(|r| {
                    let last = r.tasks.last();
                    json!({ "seed": r.seed, "final_accuracy_all": last.map(|t| t.accuracy_all) })
                })
                .collect();
            print_json(&json!({ "dir": cfg.run_dir(), "config_hash": cfg.hash(), "seeds": tasks }));
            Ok(())
        }
        Command::FetchData { name, from } => fetch_data(name.as_deref(), from.as_deref()),
        Command::EntropyGrid { trial, bounds, resolution, samples, seed, out } => {
            let (&[x0, x1, y0, y1], &[r1, r2]) = (bounds.as_slice(), resolution.as_slice()) else {
                return Err(Error::Config("--bounds takes 4 values and --resolution takes 2".into()));
            };
            let t: TrialResult = serde_json::from_str(&fs::read_to_string(&trial)?)?;
            let model = Model::new(t.model.clone())?;
            let rows = entropy_grid(&model, &t.psi, t.correction(), [x0, x1, y0, y1], (r1, r2), samples, seed)?;
            write_grid_csv(&out, &rows)?;
            print_json(&json!({ "out": out, "rows": rows.len(), "config_hash": t.config_hash }));
            Ok(())
        }
    }
}

fn report(summary: &experiment::RunSummary) -> Result<()> {
    print_json(&json!({ "dir": summary.dir, "trials": summary.trials.len(), "aggregate": summary.rows }));
    Ok(())
}

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

fn fetch_data(name: Option<&str>, from: Option<&Path>) -> Result<()> {
    if let (Some(name), Some(src)) = (name, from) {
        if !KNOWN_DATASETS.iter().any(|k| k.0 == name) {
            log::warn!("`{name}` is not a known dataset; installing anyway");
        }
        let dir = data_dir();
        fs::create_dir_all(&dir)?;
        let dest = dir.join(name);
        fs::copy(src, &dest)?;
        log::info!("installed {} as {}", src.display(), dest.display());
    }
    let status: Vec<_> = data_status()
        .into_iter()
        .filter(|(n, _)| name.is_none_or(|want| want == n))
        .map(|(n, p)| json!({ "name": n, "path": p, "present": p.is_some() }))
        .collect();
    print_json(&json!({ "data_dir": data_dir(), "datasets": status }));
    if let Some(n) = name {
        if data_status().iter().any(|(m, p)| m == n && p.is_none()) {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("`{n}` is not in {}; download it in LIBSVM format and pass --from", data_dir().display()),
            )));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
