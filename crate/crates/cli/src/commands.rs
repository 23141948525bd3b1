use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use edgexit::config::RunConfig;
use edgexit::data::{load_checkpoint, save_checkpoint, Checkpoint, Split};
use edgexit::eval::{
    self, append_records_csv, append_records_jsonl, calibration_dump, cell_seed, compute_outcomes,
    confidence_class_stats, write_stats_csv, EvalRecord, PolicyFamily, TuneResult,
};
use edgexit::model::{count_flops, FlopPart, SplitClassifier};
use edgexit::policy::{calibrate_per_class, ClassSelect, TdNet, TdPolicy, ThresholdTable};
use edgexit::seed::derive_seed;
use edgexit::train::{stage1_train, stage2_train, stage3_train_td, Criterion, LogRecord};
use edgexit::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::{CalibrateArgs, Common, EvalArgs, FlopsArgs, PolicyArgs, StatsArgs, SweepArgs, TrainArgs};

const MODEL_INIT_STREAM: u64 = 0x1417;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Parse { .. } | Error::Dimension { .. } => 2,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => 3,
        Error::State(_) => 4,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    Ok(cfg)
}

/// Creates out_dir and echoes the effective config into it.
fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.paths.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_pretty_json()? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

fn under(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let grid = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad SNR `{v}`"))))
        .collect::<Result<Vec<_>>>()?;
    if grid.is_empty() {
        return Err(Error::Config("empty SNR grid".into()));
    }
    Ok(grid)
}

fn load_stage(path: &Path, min_stage: u8) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.stage_completed < min_stage {
        return Err(Error::State(format!(
            "{} completed stage {}, need stage {min_stage}",
            path.display(),
            ck.stage_completed
        )));
    }
    Ok(ck)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(c) = &args.criterion {
        cfg.train.criterion = Criterion::parse(c)?;
    }
    let dir = prepare_out_dir(&cfg)?;
    let stages: Vec<u8> = match args.stage.as_str() {
        "all" => vec![1, 2, 3],
        s => vec![s.parse().map_err(|_| Error::Config(format!("bad stage `{s}`")))?],
    };
    let first = stages[0];
    let mut ck = match (&args.resume, first) {
        (Some(p), _) => Some(load_stage(p, first - 1)?),
        (None, 1) => None,
        (None, s) => {
            let p = dir.join(format!("stage{}.ckpt", s - 1));
            if !p.exists() {
                return Err(Error::State(format!(
                    "stage {s} needs {} or --resume",
                    p.display()
                )));
            }
            Some(load_stage(&p, s - 1)?)
        }
    };
    let data = cfg.dataset(Split::Train)?;

    let log_path = dir.join("train_log.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(first != 1)
        .truncate(first == 1)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut write_log = |records: &[LogRecord]| -> Result<()> {
        for r in records {
            let line = serde_json::to_string(r)?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
        Ok(())
    };

    for stage in stages {
        let next = match stage {
            1 => {
                let mut model = SplitClassifier::new(
                    cfg.model.clone(),
                    cfg.channel.clone(),
                    derive_seed(cfg.train.seed, MODEL_INIT_STREAM),
                )?;
                write_log(&stage1_train(&mut model, &data, &cfg.train)?)?;
                Checkpoint { model, td: None, stage_completed: 1, seed: cfg.train.seed }
            }
            2 => {
                let mut prev = ck.take().expect("stage 1 state");
                let channel = prev.model.channel.clone();
                write_log(&stage2_train(&mut prev.model, &data, &cfg.train, &channel)?)?;
                Checkpoint { stage_completed: 2, td: None, ..prev }
            }
            _ => {
                let mut prev = ck.take().expect("stage 2 state");
                let channel = prev.model.channel.clone();
                let (td, records) = stage3_train_td(&mut prev.model, &data, &cfg.train, &channel)?;
                write_log(&records)?;
                Checkpoint { stage_completed: 3, td: Some(td), ..prev }
            }
        };
        save_checkpoint(&next, &dir.join(format!("stage{stage}.ckpt")))?;
        eprintln!("stage {stage} done");
        ck = Some(next);
    }
    Ok(())
}

/// Builds policies by name; per-class tables come from `--table` or are
/// calibrated on the training split.
struct PolicyFactory<'a> {
    cfg: &'a RunConfig,
    ck: &'a Checkpoint,
    table: Option<ThresholdTable>,
}

impl<'a> PolicyFactory<'a> {
    fn new(cfg: &'a RunConfig, ck: &'a Checkpoint, args: &PolicyArgs) -> Result<Self> {
        let table = match &args.table {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Some(serde_json::from_str(&text)?)
            }
            None => None,
        };
        Ok(PolicyFactory { cfg, ck, table })
    }

    fn calibrated(&self, select: ClassSelect) -> Result<ThresholdTable> {
        if let Some(t) = &self.table {
            return Ok(t.clone());
        }
        let e = &self.cfg.eval;
        let dump = calibration_dump(&self.ck.model, &self.cfg.dataset(Split::Train)?, &e.snr_grid, e.seed)?;
        calibrate_per_class(&dump, &e.snr_grid, e.accuracy_weight, self.ck.model.config.num_classes, select)
    }

    fn build(&self, name: &str) -> Result<TdPolicy> {
        let e = &self.cfg.eval;
        let policy = match name {
            "always_early" => TdPolicy::AlwaysEarly,
            "always_final" => TdPolicy::AlwaysFinal,
            "gt_oracle" => TdPolicy::GtOracle,
            "confidence" => TdPolicy::Confidence { threshold: e.tau },
            "entropy" => TdPolicy::Entropy { threshold: e.eta },
            "random" => TdPolicy::Random { keep_prob: e.keep_prob },
            "per_class" | "per_class_gt" => {
                let select = if name == "per_class" { ClassSelect::Argmax } else { ClassSelect::GroundTruth };
                TdPolicy::PerClass { table: self.calibrated(select)?, select }
            }
            "neural" => {
                let td = self.ck.td.clone().ok_or_else(|| {
                    Error::State("neural policy needs a stage-3 checkpoint with decision-network params".into())
                })?;
                TdPolicy::Neural(Box::new(td))
            }
            other => return Err(Error::Config(format!("unknown policy `{other}`"))),
        };
        policy.validate()?;
        Ok(policy)
    }
}

fn eval_checkpoint(path: &Path, policies: &[String]) -> Result<Checkpoint> {
    let min = if policies.iter().any(|p| p == "neural") { 3 } else { 2 };
    load_stage(path, min)
}

fn write_results(path: &Path, records: &[EvalRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    append_records_jsonl(path, records)?;
    append_records_csv(&path.with_extension("csv"), records)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let dir = prepare_out_dir(&cfg)?;
    let ck = eval_checkpoint(&args.checkpoint, std::slice::from_ref(&args.policy))?;
    let grid = match (args.snr_db, &args.snr_grid) {
        (Some(s), _) => vec![s],
        (None, Some(g)) => parse_grid(g)?,
        (None, None) => cfg.eval.snr_grid.clone(),
    };
    let policy = PolicyFactory::new(&cfg, &ck, &args.policy_args)?.build(&args.policy)?;
    let test = cfg.dataset(Split::Test)?;
    let records = eval::sweep(&ck.model, std::slice::from_ref(&policy), &grid, &test, cfg.eval.seed)?;
    for r in &records {
        println!("{} snr={} accuracy={:.4} savings={:.4}", r.policy_id, r.snr_db, r.accuracy, r.savings);
    }
    write_results(&under(&dir, &args.out), &records)
}

fn parse_neural_set(list: &str) -> Result<Vec<(f64, TdNet)>> {
    list.split(',')
        .map(|pair| {
            let (beta, path) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("neural-set entry `{pair}` is not BETA=PATH")))?;
            let beta: f64 = beta.trim().parse().map_err(|_| Error::Config(format!("bad beta `{beta}`")))?;
            let ck = load_stage(Path::new(path.trim()), 3)?;
            let td = ck.td.ok_or_else(|| Error::State(format!("{path} has no decision network")))?;
            Ok((beta, td))
        })
        .collect()
}

#[derive(Serialize)]
struct TuningReport {
    target_savings: f64,
    tolerance: f64,
    entries: Vec<TuneResult>,
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let names: Vec<String> = match &args.policies {
        Some(list) => list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
        None => cfg.eval.policies.clone(),
    };
    if names.is_empty() {
        return Err(Error::Config("empty policy list".into()));
    }
    let grid = match &args.snr_grid {
        Some(g) => parse_grid(g)?,
        None => cfg.eval.snr_grid.clone(),
    };
    if let Some(t) = args.match_savings {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("--match-savings {t} not in [0, 1]")));
        }
    }
    let dir = prepare_out_dir(&cfg)?;
    let ck = eval_checkpoint(&args.checkpoint, &names)?;
    let factory = PolicyFactory::new(&cfg, &ck, &args.policy_args)?;
    let policies = names.iter().map(|n| factory.build(n)).collect::<Result<Vec<_>>>()?;
    let k = ck.model.config.num_classes;

    let families: Vec<Option<PolicyFamily>> = match args.match_savings {
        None => vec![None; names.len()],
        Some(_) => {
            let mut dump = None;
            names
                .iter()
                .map(|n| {
                    Ok(match n.as_str() {
                        "confidence" => Some(PolicyFamily::Confidence),
                        "entropy" => Some(PolicyFamily::Entropy),
                        "random" => Some(PolicyFamily::Random),
                        "per_class" | "per_class_gt" => {
                            if dump.is_none() {
                                let train = cfg.dataset(Split::Train)?;
                                dump = Some(calibration_dump(&ck.model, &train, &cfg.eval.snr_grid, cfg.eval.seed)?);
                            }
                            Some(PolicyFamily::PerClass {
                                dump: dump.clone().expect("computed"),
                                snr_grid: cfg.eval.snr_grid.clone(),
                                select: if n == "per_class" { ClassSelect::Argmax } else { ClassSelect::GroundTruth },
                            })
                        }
                        "neural" => Some(PolicyFamily::Neural(match &args.policy_args.neural_set {
                            Some(list) => parse_neural_set(list)?,
                            None => vec![(cfg.train.beta, ck.td.clone().expect("stage 3 checked"))],
                        })),
                        _ => None,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let test = cfg.dataset(Split::Test)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let cells: Vec<(Vec<EvalRecord>, Vec<TuneResult>)> = pool.install(|| {
        grid.par_iter()
            .enumerate()
            .map(|(i, &snr)| {
                let outcomes = compute_outcomes(&ck.model, &test, snr, cell_seed(cfg.eval.seed, i))?;
                let mut records = Vec::with_capacity(policies.len());
                let mut tuned = Vec::new();
                for (policy, family) in policies.iter().zip(&families) {
                    let record = match (family, args.match_savings) {
                        (Some(fam), Some(target)) => {
                            let t = eval::tune_to_target_savings(fam, &outcomes, target, cfg.eval.savings_tol, k)?;
                            let r = eval::evaluate_outcomes(&t.policy, &outcomes)?;
                            tuned.push(t);
                            r
                        }
                        _ => eval::evaluate_outcomes(policy, &outcomes)?,
                    };
                    records.push(record);
                }
                Ok((records, tuned))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut report = Vec::new();
    let mut record_cells = Vec::new();
    for (records, tuned) in cells {
        record_cells.push(records);
        report.extend(tuned);
    }
    let records = eval::assemble_sweep(record_cells, policies.len());
    for r in &records {
        println!("{} snr={} accuracy={:.4} savings={:.4}", r.policy_id, r.snr_db, r.accuracy, r.savings);
    }
    write_results(&under(&dir, &args.out), &records)?;
    if let Some(target) = args.match_savings {
        for t in report.iter().filter(|t| !t.reached) {
            eprintln!(
                "warning: {} at {} dB reached savings {:.4}, target {target}",
                t.family, t.snr_db, t.achieved_savings
            );
        }
        let path = dir.join("tuning_report.json");
        let body = TuningReport { target_savings: target, tolerance: cfg.eval.savings_tol, entries: report };
        fs::write(&path, serde_json::to_string_pretty(&body)? + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn calibrate(args: CalibrateArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(w) = args.accuracy_weight {
        cfg.eval.accuracy_weight = w;
        cfg.validate()?;
    }
    let dir = prepare_out_dir(&cfg)?;
    let ck = load_stage(&args.checkpoint, 2)?;
    let split = if args.split == "test" { Split::Test } else { Split::Train };
    let data = cfg.dataset(split)?;
    let select = if args.use_gt_label { ClassSelect::GroundTruth } else { ClassSelect::Argmax };
    let e = &cfg.eval;
    let dump = calibration_dump(&ck.model, &data, &e.snr_grid, e.seed)?;
    let table = calibrate_per_class(&dump, &e.snr_grid, e.accuracy_weight, ck.model.config.num_classes, select)?;
    if !table.fallbacks.is_empty() {
        eprintln!("warning: {} cells used the global threshold", table.fallbacks.len());
    }
    let path = under(&dir, &args.out);
    fs::write(&path, serde_json::to_string_pretty(&table)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn stats(args: StatsArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let dir = prepare_out_dir(&cfg)?;
    let ck = load_stage(&args.checkpoint, 1)?;
    let test = cfg.dataset(Split::Test)?;
    let outcomes = compute_outcomes(&ck.model, &test, 0.0, cfg.eval.seed)?;
    let stats = confidence_class_stats(&outcomes.early, &outcomes.labels);
    write_stats_csv(&under(&dir, &args.out), &stats)
}

pub fn flops(args: FlopsArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let mut out = std::io::stdout().lock();
    let mut emit = |line: String| writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e));
    emit("part,flops,mflops".into())?;
    for part in FlopPart::ALL {
        let f = count_flops(part, &cfg.model, &cfg.train.td);
        emit(format!("{},{f},{:.3}", part.name(), f as f64 / 1e6))?;
    }
    Ok(())
}

