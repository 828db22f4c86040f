use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use nlgr::config::Config;
use nlgr::{pipeline, Error, Result};

#[derive(Parser)]
#[command(name = "nlgr", version, about = "Neighbor-list generative reranking")]
struct Cli {
    /// JSON config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate interaction logs into dataset.jsonl.
    GenData,
    /// Train the evaluator into eval.ckpt.
    TrainEval,
    /// Train the generator against a frozen evaluator into gen.ckpt.
    TrainGen,
    /// Rerank test records; writes rerank.jsonl and trace.jsonl.
    Rerank,
    /// Benchmark against the permutation oracle; writes report.csv.
    Bench,
    /// Train and benchmark one generator per parameter value.
    Sweep {
        /// Dotted config key, e.g. generator.alpha.
        #[arg(long)]
        param: String,
        /// Comma-separated values; defaults exist for generator.alpha and generator.beta.
        #[arg(long)]
        values: Option<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::Invalid("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::GenData => {
            let data = pipeline::gen_data(&cfg, out)?;
            log::info!("wrote {} records ({} train)", data.records.len(), data.manifest.train_records);
        }
        Command::TrainEval => {
            let history = pipeline::train_eval(&cfg, out)?;
            log::info!("best test AUC {:.4}", history.best_test_auc().unwrap_or(f64::NAN));
        }
        Command::TrainGen => {
            let history = pipeline::train_gen(&cfg, out)?;
            if let Some(last) = history.rows.last() {
                log::info!("final epoch loss {:.5}, validation HR@10% {:.4}", last.total, last.hr10.unwrap_or(f64::NAN));
            }
        }
        Command::Rerank => {
            let lists = pipeline::rerank(&cfg, out)?;
            log::info!("reranked {} records", lists.len());
        }
        Command::Bench => {
            let report = pipeline::bench(&cfg, out)?;
            print!("{}", report.to_table());
        }
        Command::Sweep { param, values } => {
            let values = match values {
                Some(text) => pipeline::parse_values(&text)?,
                None => pipeline::default_sweep_values(&param)
                    .ok_or_else(|| Error::Invalid(format!("no default values for `{param}`; pass --values")))?,
            };
            for (value, report) in pipeline::sweep(&cfg, out, &param, &values)? {
                let g = report.row("nlgr-g").expect("generator row");
                println!("{param}={value}: HR@10% {:.4}", g.hr10.unwrap_or(f64::NAN));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let mut line = json!({"error": err.kind(), "exit_code": err.exit_code(), "message": err.to_string()});
            match &err {
                Error::Config { key, .. } => line["key"] = json!(key),
                Error::MissingInput { path, .. } | Error::Io { path, .. } => line["path"] = json!(path),
                _ => {}
            }
            eprintln!("{line}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
