//! Command implementations shared by the binary and the tests. Every
//! command reads and writes fixed file names under one output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::{sha256_hex, Config};
use crate::datagen::{self, Dataset, InteractionRecord};
use crate::diffcore::{checkpoint, RngStream};
use crate::error::{Error, Result};
use crate::evaluator::{self, Dims, EvalHistory, Evaluator};
use crate::generator::{GenerationTrace, Generator};
use crate::oracle::{self, OracleRanking};
use crate::reward::RewardConfig;
use crate::trainer::{self, GenHistory};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const EVAL_CKPT_FILE: &str = "eval.ckpt";
pub const GEN_CKPT_FILE: &str = "gen.ckpt";
pub const REPORT_FILE: &str = "report.csv";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const RERANK_FILE: &str = "rerank.jsonl";
pub const EVAL_HISTORY_FILE: &str = "eval_history.csv";
pub const GEN_HISTORY_FILE: &str = "gen_history.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Resolved file locations for one run.
#[derive(Clone, Debug)]
pub struct Paths {
    pub out: PathBuf,
    pub dataset: PathBuf,
    pub eval_ckpt: PathBuf,
    pub gen_ckpt: PathBuf,
}

impl Paths {
    pub fn new(cfg: &Config, out: &Path) -> Self {
        let pick = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| out.join(name));
        Self {
            out: out.to_path_buf(),
            dataset: pick(&cfg.paths.dataset, DATASET_FILE),
            eval_ckpt: pick(&cfg.paths.eval_ckpt, EVAL_CKPT_FILE),
            gen_ckpt: pick(&cfg.paths.gen_ckpt, GEN_CKPT_FILE),
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn require(path: &Path, what: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput {
            what,
            path: path.to_path_buf(),
        })
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn load_data(paths: &Paths) -> Result<Dataset> {
    require(&paths.dataset, "dataset")?;
    datagen::load_dataset(&paths.dataset)
}

fn load_evaluator(cfg: &Config, paths: &Paths, data: &Dataset) -> Result<Evaluator> {
    require(&paths.eval_ckpt, "evaluator checkpoint")?;
    let params = checkpoint::load(&paths.eval_ckpt)?;
    Evaluator::from_params(&cfg.model, &Dims::from_manifest(&data.manifest), params)
}

fn load_generator(cfg: &Config, paths: &Paths, data: &Dataset) -> Result<Generator> {
    require(&paths.gen_ckpt, "generator checkpoint")?;
    let params = checkpoint::load(&paths.gen_ckpt)?;
    Generator::from_params(&cfg.model, &Dims::from_manifest(&data.manifest), data.manifest.num_candidates, params)
}

/// Reward settings with the scale fitted on the training split when unset.
pub fn resolve_reward(cfg: &Config, ev: &Evaluator, data: &Dataset) -> Result<RewardConfig> {
    let mut reward = cfg.reward.clone();
    if reward.scale.is_none() {
        reward.scale = Some(trainer::fit_reward_scale(ev, data.train(), &reward)?);
    }
    Ok(reward)
}

pub fn gen_data(cfg: &Config, out: &Path) -> Result<Dataset> {
    let paths = Paths::new(cfg, out);
    let data = datagen::gen_logs(&cfg.data)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    datagen::write_dataset(&paths.dataset, &data)?;
    Ok(data)
}

pub fn train_eval(cfg: &Config, out: &Path) -> Result<EvalHistory> {
    let paths = Paths::new(cfg, out);
    let data = load_data(&paths)?;
    let dims = Dims::from_manifest(&data.manifest);
    let (ev, history) = evaluator::train_evaluator(data.train(), data.test(), &dims, &cfg.model, &cfg.evaluator, cfg.seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    checkpoint::save(&ev.params, &paths.eval_ckpt)?;
    write(&paths.file(EVAL_HISTORY_FILE), &history.to_csv())?;
    Ok(history)
}

pub fn train_gen(cfg: &Config, out: &Path) -> Result<GenHistory> {
    let paths = Paths::new(cfg, out);
    let data = load_data(&paths)?;
    let ev = load_evaluator(cfg, &paths, &data)?;
    let reward = resolve_reward(cfg, &ev, &data)?;
    let (gen, history) = trainer::train_generator(&ev, data.train(), data.test(), &reward, &cfg.train_config(), &cfg.gumbel(), cfg.seed, cfg.seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    checkpoint::save(&gen.params, &paths.gen_ckpt)?;
    write(&paths.file(GEN_HISTORY_FILE), &history.to_csv())?;
    Ok(history)
}

fn bench_records<'a>(cfg: &Config, data: &'a Dataset) -> &'a [InteractionRecord] {
    let test = data.test();
    &test[..cfg.bench.records.unwrap_or(test.len()).min(test.len())]
}

#[derive(Serialize)]
struct RerankLine<'a> {
    record: usize,
    input: &'a [usize],
    output: &'a [usize],
}

#[derive(Serialize)]
struct TraceLine<'a> {
    record: usize,
    #[serde(flatten)]
    step: &'a crate::generator::TraceStep,
}

/// Reranks the benchmark records; writes `rerank.jsonl` and `trace.jsonl`.
pub fn rerank(cfg: &Config, out: &Path) -> Result<Vec<Vec<usize>>> {
    use rayon::prelude::*;
    let paths = Paths::new(cfg, out);
    let data = load_data(&paths)?;
    let ev = load_evaluator(cfg, &paths, &data)?;
    let gen = load_generator(cfg, &paths, &data)?;
    let records = bench_records(cfg, &data);
    let gumbel = cfg.gumbel();
    let results: Vec<(Vec<usize>, GenerationTrace)> = records
        .par_iter()
        .map(|r| gen.generate(&ev, &r.exposed, &r.candidates, &r.session_features(), &gumbel, None))
        .collect::<Result<_>>()?;
    let mut lines = String::new();
    let mut trace = String::new();
    for (i, (r, (list, tr))) in records.iter().zip(&results).enumerate() {
        let line = RerankLine {
            record: i,
            input: &r.exposed,
            output: list,
        };
        lines.push_str(&serde_json::to_string(&line).expect("serializable"));
        lines.push('\n');
        for step in &tr.steps {
            trace.push_str(&serde_json::to_string(&TraceLine { record: i, step }).expect("serializable"));
            trace.push('\n');
        }
    }
    write(&paths.file(RERANK_FILE), &lines)?;
    write(&paths.file(TRACE_FILE), &trace)?;
    Ok(results.into_iter().map(|(l, _)| l).collect())
}

/// One row of the benchmark report. Evaluator rows carry the pointwise
/// metrics, list-producing rows the hit ratios and mean list reward.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub ndcg5: Option<f64>,
    pub ndcg10: Option<f64>,
    pub hr10: Option<f64>,
    pub hr1: Option<f64>,
    pub mean_reward: Option<f64>,
}

impl ReportRow {
    fn lists(model: &str, oracles: &[OracleRanking], lists: &[Vec<usize>]) -> Self {
        let ranks = oracle::rank_lists(oracles, lists);
        let mean_reward =
            oracles.iter().zip(lists).map(|(o, l)| o.rewards[oracle::lex_index(l, o.n)]).sum::<f64>() / lists.len().max(1) as f64;
        Self {
            model: model.to_string(),
            auc: None,
            logloss: None,
            ndcg5: None,
            ndcg10: None,
            hr10: Some(oracle::hit_ratio(&ranks, 10.0)),
            hr1: Some(oracle::hit_ratio(&ranks, 1.0)),
            mean_reward: Some(mean_reward),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub config_hash: String,
    pub eval_ckpt_hash: String,
    pub gen_ckpt_hash: String,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn row(&self, model: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut out = String::new();
        let _ = writeln!(out, "# config_sha256={}", self.config_hash);
        let _ = writeln!(out, "# eval_ckpt_sha256={}", self.eval_ckpt_hash);
        let _ = writeln!(out, "# gen_ckpt_sha256={}", self.gen_ckpt_hash);
        out.push_str("model,auc,logloss,ndcg5,ndcg10,hr10,hr1,mean_reward\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.model,
                f(r.auc),
                f(r.logloss),
                f(r.ndcg5),
                f(r.ndcg10),
                f(r.hr10),
                f(r.hr1),
                r.mean_reward.map_or(String::new(), |x| format!("{x:.6e}"))
            );
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let e = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3e}"));
        let mut out = format!(
            "{:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>11}\n",
            "model", "AUC", "LogLoss", "NDCG@5", "NDCG@10", "HR@10%", "HR@1%", "mean_reward"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>11}",
                r.model,
                f(r.auc),
                f(r.logloss),
                f(r.ndcg5),
                f(r.ndcg10),
                f(r.hr10),
                f(r.hr1),
                e(r.mean_reward)
            );
        }
        out
    }
}

/// Evaluator metrics plus oracle hit ratios of the logged lists, a random
/// reranker, the greedy baseline and the generator. Writes `report.csv`.
pub fn bench(cfg: &Config, out: &Path) -> Result<Report> {
    let paths = Paths::new(cfg, out);
    let data = load_data(&paths)?;
    let ev = load_evaluator(cfg, &paths, &data)?;
    let gen = load_generator(cfg, &paths, &data)?;
    let reward = resolve_reward(cfg, &ev, &data)?;
    let records = bench_records(cfg, &data);
    let oracles = oracle::build_oracles(&ev, records, &reward, cfg.bench.cap)?;

    let m = data.manifest.list_len;
    let metrics = evaluator::evaluate_records(&ev, records, 0, "test")?;
    let logged: Vec<Vec<usize>> = records.iter().map(|r| r.exposed.clone()).collect();
    let root = RngStream::new(cfg.seed);
    let random: Vec<Vec<usize>> = records
        .iter()
        .enumerate()
        .map(|(i, r)| trainer::random_list(r.candidates.len(), m, &mut root.derive("random-baseline", i as u64)))
        .collect();
    let greedy: Vec<Vec<usize>> = records
        .iter()
        .map(|r| oracle::greedy_baseline(&r.exposed, &r.candidates, &r.session_features(), &ev))
        .collect::<Result<_>>()?;
    let generated = trainer::generate_all(&gen, &ev, records, &cfg.gumbel())?;

    let report = Report {
        config_hash: cfg.hash(),
        eval_ckpt_hash: file_hash(&paths.eval_ckpt)?,
        gen_ckpt_hash: file_hash(&paths.gen_ckpt)?,
        rows: vec![
            ReportRow {
                model: "nlgr-e".into(),
                auc: metrics.auc,
                logloss: Some(metrics.logloss),
                ndcg5: metrics.ndcg5,
                ndcg10: metrics.ndcg10,
                hr10: None,
                hr1: None,
                mean_reward: None,
            },
            ReportRow::lists("logged", &oracles, &logged),
            ReportRow::lists("random", &oracles, &random),
            ReportRow::lists("greedy", &oracles, &greedy),
            ReportRow::lists("nlgr-g", &oracles, &generated),
        ],
    };
    write(&paths.file(REPORT_FILE), &report.to_csv())?;
    Ok(report)
}

/// Default values for the two documented sweep axes.
pub fn default_sweep_values(param: &str) -> Option<Vec<Value>> {
    let vals: &[f64] = match param {
        "generator.alpha" => &[0.0, 0.01, 0.2, 0.5, 1.0],
        "generator.beta" => &[0.1, 0.5, 1.0, 2.0, 5.0],
        _ => return None,
    };
    Some(vals.iter().map(|&v| Value::from(v)).collect())
}

/// Directory name of one sweep point, e.g. `generator.alpha=0.2`.
pub fn sweep_dir(param: &str, value: &Value) -> String {
    format!("{param}={value}")
}

/// Trains and benchmarks one generator per value of `param`, sharing the
/// dataset and evaluator under `out`. Writes per-value reports and
/// `summary.csv`.
pub fn sweep(cfg: &Config, out: &Path, param: &str, values: &[Value]) -> Result<Vec<(Value, Report)>> {
    if values.is_empty() {
        return Err(Error::config(param, "sweep needs at least one value"));
    }
    let variants = values
        .iter()
        .map(|v| cfg.with_param(param, v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let paths = Paths::new(cfg, out);
    if !paths.dataset.exists() {
        gen_data(cfg, out)?;
    }
    if !paths.eval_ckpt.exists() {
        train_eval(cfg, out)?;
    }
    let mut results = Vec::with_capacity(values.len());
    let mut summary = String::from("param,value,hr10,hr1,mean_reward,config_sha256\n");
    for (value, mut variant) in values.iter().zip(variants) {
        let dir = out.join(sweep_dir(param, value));
        variant.paths.dataset = Some(paths.dataset.clone());
        variant.paths.eval_ckpt = Some(paths.eval_ckpt.clone());
        variant.paths.gen_ckpt = None;
        train_gen(&variant, &dir)?;
        let report = bench(&variant, &dir)?;
        let g = report.row("nlgr-g").expect("generator row");
        let _ = writeln!(
            summary,
            "{param},{value},{:.6},{:.6},{:.6e},{}",
            g.hr10.unwrap_or(f64::NAN),
            g.hr1.unwrap_or(f64::NAN),
            g.mean_reward.unwrap_or(f64::NAN),
            report.config_hash
        );
        results.push((value.clone(), report));
    }
    write(&out.join(SUMMARY_FILE), &summary)?;
    Ok(results)
}

/// Parses a comma-separated value list as JSON scalars.
pub fn parse_values(text: &str) -> Result<Vec<Value>> {
    text.split(',')
        .map(|v| serde_json::from_str(v.trim()).map_err(|e| Error::Invalid(format!("bad sweep value `{v}`: {e}"))))
        .collect()
}
