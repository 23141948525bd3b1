//! Accuracy and savings evaluation, sweeps, matched-savings tuning and
//! per-class confidence statistics.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::snr_db_to_noise_var;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::SplitClassifier;
use crate::nn::{Tape, Tensor};
use crate::policy::{
    argmax, calibrate_per_class, confidence, ClassSelect, Decision, DumpSample, SampleView, TdNet,
    TdPolicy,
};
use crate::seed::derive_seed;
use crate::train::forward_exits;

/// Default tolerance of matched-savings tuning.
pub const SAVINGS_TOL: f64 = 0.02;

const EVAL_BATCH: usize = 256;
const POLICY_STREAM: u64 = 0x00d0_11c7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub policy_id: String,
    pub policy_params: BTreeMap<String, f64>,
    pub snr_db: f64,
    pub accuracy: f64,
    pub savings: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Both exits' outputs for every sample of a dataset at one SNR, with one
/// fixed channel realization shared by every policy evaluated on it.
#[derive(Debug, Clone)]
pub struct ExitOutcomes {
    pub snr_db: f64,
    pub seed: u64,
    pub early: Tensor,
    pub final_: Tensor,
    pub labels: Vec<usize>,
}

impl ExitOutcomes {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn early_correct(&self, i: usize) -> bool {
        argmax(self.early.row(i)) == self.labels[i]
    }

    pub fn final_correct(&self, i: usize) -> bool {
        argmax(self.final_.row(i)) == self.labels[i]
    }

    pub fn views(&self) -> Vec<SampleView<'_>> {
        (0..self.len())
            .map(|i| SampleView {
                early_probs: self.early.row(i),
                snr_db: self.snr_db,
                label: Some(self.labels[i]),
                final_probs: Some(self.final_.row(i)),
            })
            .collect()
    }

    /// Calibration records of every sample.
    pub fn dump(&self) -> Vec<DumpSample> {
        (0..self.len())
            .map(|i| DumpSample {
                pred_class: argmax(self.early.row(i)),
                label: self.labels[i],
                confidence: confidence(self.early.row(i)),
                early_correct: self.early_correct(i),
                final_correct: self.final_correct(i),
                snr_db: self.snr_db,
            })
            .collect()
    }
}

/// Runs both exits over `dataset`; channel noise comes from a generator
/// seeded with `seed` and consumed in sample order.
pub fn compute_outcomes(
    model: &SplitClassifier,
    dataset: &Dataset,
    snr_db: f64,
    seed: u64,
) -> Result<ExitOutcomes> {
    if dataset.num_classes != model.config.num_classes {
        return Err(Error::Validation(format!(
            "dataset has {} classes, model {}",
            dataset.num_classes, model.config.num_classes
        )));
    }
    let var = snr_db_to_noise_var(snr_db, model.channel.power);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = model.config.num_classes;
    let mut early = Vec::with_capacity(dataset.len() * k);
    let mut final_ = Vec::with_capacity(dataset.len() * k);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, _, _) = dataset.batch(chunk)?;
        let mut tape = Tape::new();
        let input = tape.constant(x);
        let pass = forward_exits(model, &mut tape, input, Some((var, &mut rng)))?;
        early.extend_from_slice(tape.value(pass.early).data());
        final_.extend_from_slice(tape.value(pass.final_).data());
    }
    Ok(ExitOutcomes {
        snr_db,
        seed,
        early: Tensor::new(vec![dataset.len(), k], early)?,
        final_: Tensor::new(vec![dataset.len(), k], final_)?,
        labels: dataset.labels.clone(),
    })
}

/// Applies `policy` to precomputed outcomes.
pub fn evaluate_outcomes(policy: &TdPolicy, outcomes: &ExitOutcomes) -> Result<EvalRecord> {
    let decisions = decide(policy, outcomes)?;
    Ok(record(policy, outcomes, &decisions))
}

fn decide(policy: &TdPolicy, outcomes: &ExitOutcomes) -> Result<Vec<Decision>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(outcomes.seed, POLICY_STREAM));
    policy.decide_batch(&outcomes.views(), &mut rng)
}

fn record(policy: &TdPolicy, outcomes: &ExitOutcomes, decisions: &[Decision]) -> EvalRecord {
    let n = outcomes.len();
    let (mut correct, mut kept) = (0usize, 0usize);
    for (i, d) in decisions.iter().enumerate() {
        kept += usize::from(d.keep_early);
        correct += usize::from(if d.keep_early {
            outcomes.early_correct(i)
        } else {
            outcomes.final_correct(i)
        });
    }
    EvalRecord {
        policy_id: policy.id().to_string(),
        policy_params: policy.params(),
        snr_db: outcomes.snr_db,
        accuracy: correct as f64 / n as f64,
        savings: kept as f64 / n as f64,
        n_samples: n,
        seed: outcomes.seed,
    }
}

/// Evaluates one policy on `dataset` at `snr_db`.
pub fn evaluate(
    model: &SplitClassifier,
    policy: &TdPolicy,
    dataset: &Dataset,
    snr_db: f64,
    seed: u64,
) -> Result<EvalRecord> {
    policy.validate()?;
    let outcomes = compute_outcomes(model, dataset, snr_db, seed)?;
    evaluate_outcomes(policy, &outcomes)
}

/// Seed of SNR cell `index` of a sweep.
pub fn cell_seed(base_seed: u64, index: usize) -> u64 {
    derive_seed(base_seed, index as u64)
}

/// Evaluates every policy at one SNR on a shared channel realization.
pub fn sweep_cell(
    model: &SplitClassifier,
    policies: &[TdPolicy],
    dataset: &Dataset,
    snr_db: f64,
    seed: u64,
) -> Result<Vec<EvalRecord>> {
    let outcomes = compute_outcomes(model, dataset, snr_db, seed)?;
    policies.iter().map(|p| evaluate_outcomes(p, &outcomes)).collect()
}

/// Orders per-cell results policy-major: all SNRs of the first policy, then
/// the next.
pub fn assemble_sweep(cells: Vec<Vec<EvalRecord>>, num_policies: usize) -> Vec<EvalRecord> {
    let mut out = Vec::with_capacity(cells.len() * num_policies);
    for p in 0..num_policies {
        out.extend(cells.iter().map(|cell| cell[p].clone()));
    }
    out
}

/// Full policies-by-SNR product, evaluated serially.
pub fn sweep(
    model: &SplitClassifier,
    policies: &[TdPolicy],
    snr_grid: &[f64],
    dataset: &Dataset,
    base_seed: u64,
) -> Result<Vec<EvalRecord>> {
    if policies.is_empty() || snr_grid.is_empty() {
        return Err(Error::Validation("sweep needs at least one policy and one SNR".into()));
    }
    policies.iter().try_for_each(TdPolicy::validate)?;
    let cells = snr_grid
        .iter()
        .enumerate()
        .map(|(i, &snr)| sweep_cell(model, policies, dataset, snr, cell_seed(base_seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_sweep(cells, policies.len()))
}

/// Calibration records over `snr_grid`, cell `i` seeded as in [`sweep`].
pub fn calibration_dump(
    model: &SplitClassifier,
    dataset: &Dataset,
    snr_grid: &[f64],
    base_seed: u64,
) -> Result<Vec<DumpSample>> {
    let mut dump = Vec::with_capacity(dataset.len() * snr_grid.len());
    for (i, &snr) in snr_grid.iter().enumerate() {
        dump.extend(compute_outcomes(model, dataset, snr, cell_seed(base_seed, i))?.dump());
    }
    Ok(dump)
}

/// A policy family with a scalar knob that moves savings monotonically.
#[derive(Debug, Clone)]
pub enum PolicyFamily {
    Confidence,
    Entropy,
    Random,
    /// Knob is the calibration accuracy weight.
    PerClass {
        dump: Vec<DumpSample>,
        snr_grid: Vec<f64>,
        select: ClassSelect,
    },
    /// Networks trained with different penalty weights, keyed by that weight.
    Neural(Vec<(f64, TdNet)>),
}

impl PolicyFamily {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyFamily::Confidence => "confidence",
            PolicyFamily::Entropy => "entropy",
            PolicyFamily::Random => "random",
            PolicyFamily::PerClass { select: ClassSelect::Argmax, .. } => "per_class",
            PolicyFamily::PerClass { .. } => "per_class_gt",
            PolicyFamily::Neural(_) => "neural",
        }
    }

    pub fn knob(&self) -> &'static str {
        match self {
            PolicyFamily::Confidence => "tau",
            PolicyFamily::Entropy => "eta",
            PolicyFamily::Random => "p",
            PolicyFamily::PerClass { .. } => "accuracy_weight",
            PolicyFamily::Neural(_) => "beta",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneResult {
    pub family: String,
    pub knob: String,
    pub value: f64,
    pub target_savings: f64,
    pub achieved_savings: f64,
    pub accuracy: f64,
    pub snr_db: f64,
    /// Whether `|achieved - target| <= tol`.
    pub reached: bool,
    pub evaluations: usize,
    #[serde(skip)]
    pub policy: TdPolicy,
}

struct Probe {
    value: f64,
    policy: TdPolicy,
    rec: EvalRecord,
}

/// Searches the family's knob for savings within `tol` of `target`. The
/// endpoints are tried first; if the target lies outside their range the
/// nearer endpoint is returned unflagged. Otherwise bisection runs until the
/// tolerance is met or the interval collapses, keeping the closest probe.
pub fn tune_to_target_savings(
    family: &PolicyFamily,
    outcomes: &ExitOutcomes,
    target: f64,
    tol: f64,
    num_classes: usize,
) -> Result<TuneResult> {
    if !(0.0..=1.0).contains(&target) || !(tol >= 0.0) {
        return Err(Error::Validation(format!("target {target} / tol {tol} out of range")));
    }
    let mut evaluations = 0usize;
    let mut probe = |value: f64| -> Result<Probe> {
        evaluations += 1;
        let policy = policy_at(family, value, num_classes)?;
        let rec = evaluate_outcomes(&policy, outcomes)?;
        Ok(Probe { value, policy, rec })
    };

    let best = if let PolicyFamily::Neural(nets) = family {
        if nets.is_empty() {
            return Err(Error::Validation("neural family has no networks".into()));
        }
        let mut best: Option<Probe> = None;
        for (beta, _) in nets {
            let p = probe(*beta)?;
            if best.as_ref().is_none_or(|b| closer(&p, b, target)) {
                best = Some(p);
            }
        }
        best.expect("non-empty")
    } else {
        let (lo, hi) = knob_range(family, outcomes, num_classes);
        let a = probe(lo)?;
        let b = probe(hi)?;
        let (s_min, s_max) = (a.rec.savings.min(b.rec.savings), a.rec.savings.max(b.rec.savings));
        if target <= s_min || target >= s_max {
            let edge = if (a.rec.savings - target).abs() <= (b.rec.savings - target).abs() {
                a
            } else {
                b
            };
            return Ok(finish(family, edge, target, tol, outcomes.snr_db, evaluations));
        }
        let increasing = b.rec.savings >= a.rec.savings;
        let (mut lo, mut hi) = (lo, hi);
        let mut best = if closer(&a, &b, target) { a } else { b };
        for _ in 0..64 {
            if (best.rec.savings - target).abs() <= tol {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            let p = probe(mid)?;
            if (p.rec.savings < target) == increasing {
                lo = mid;
            } else {
                hi = mid;
            }
            if closer(&p, &best, target) {
                best = p;
            }
        }
        best
    };
    Ok(finish(family, best, target, tol, outcomes.snr_db, evaluations))
}

fn closer(a: &Probe, b: &Probe, target: f64) -> bool {
    (a.rec.savings - target).abs() < (b.rec.savings - target).abs()
}

fn finish(family: &PolicyFamily, p: Probe, target: f64, tol: f64, snr_db: f64, evaluations: usize) -> TuneResult {
    TuneResult {
        family: family.name().to_string(),
        knob: family.knob().to_string(),
        value: p.value,
        target_savings: target,
        achieved_savings: p.rec.savings,
        accuracy: p.rec.accuracy,
        snr_db,
        reached: (p.rec.savings - target).abs() <= tol,
        evaluations,
        policy: p.policy,
    }
}

fn knob_range(family: &PolicyFamily, outcomes: &ExitOutcomes, num_classes: usize) -> (f64, f64) {
    match family {
        PolicyFamily::Confidence => {
            let max_conf = outcomes.early.rows().map(confidence).fold(0.0, f64::max);
            (0.0, next_up(max_conf).min(1.0))
        }
        PolicyFamily::Entropy => (0.0, (num_classes as f64).log2()),
        _ => (0.0, 1.0),
    }
}

fn next_up(x: f64) -> f64 {
    if x.is_finite() && x >= 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        x
    }
}

fn policy_at(family: &PolicyFamily, value: f64, num_classes: usize) -> Result<TdPolicy> {
    Ok(match family {
        PolicyFamily::Confidence => TdPolicy::Confidence { threshold: value },
        PolicyFamily::Entropy => TdPolicy::Entropy { threshold: value },
        PolicyFamily::Random => TdPolicy::Random { keep_prob: value },
        PolicyFamily::PerClass { dump, snr_grid, select } => TdPolicy::PerClass {
            table: calibrate_per_class(dump, snr_grid, value, num_classes, *select)?,
            select: *select,
        },
        PolicyFamily::Neural(nets) => {
            let (_, net) = nets
                .iter()
                .find(|(b, _)| *b == value)
                .ok_or_else(|| Error::Validation(format!("no network for beta {value}")))?;
            TdPolicy::Neural(Box::new(net.clone()))
        }
    })
}

/// Mean early-exit confidence of correct and incorrect predictions for one
/// ground-truth class; means are absent when their count is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConfidence {
    pub class: usize,
    pub mean_conf_correct: Option<f64>,
    pub mean_conf_incorrect: Option<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

/// One row per class present in `labels`, ascending.
pub fn confidence_class_stats(early_probs: &Tensor, labels: &[usize]) -> Vec<ClassConfidence> {
    let mut acc: BTreeMap<usize, (f64, usize, f64, usize)> = BTreeMap::new();
    for (p, &l) in early_probs.rows().zip(labels) {
        let c = confidence(p);
        let e = acc.entry(l).or_default();
        if argmax(p) == l {
            e.0 += c;
            e.1 += 1;
        } else {
            e.2 += c;
            e.3 += 1;
        }
    }
    let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
    acc.into_iter()
        .map(|(class, (sc, nc, si, ni))| ClassConfidence {
            class,
            mean_conf_correct: mean(sc, nc),
            mean_conf_incorrect: mean(si, ni),
            n_correct: nc,
            n_incorrect: ni,
        })
        .collect()
}

/// `p * acc_early + (1 - p) * acc_final`.
pub fn expected_random_accuracy(acc_early: f64, acc_final: f64, keep_prob: f64) -> f64 {
    keep_prob * acc_early + (1.0 - keep_prob) * acc_final
}

/// Writes records as JSON lines, appending when the file exists.
pub fn append_records_jsonl(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct CsvRow<'a> {
    policy_id: &'a str,
    snr_db: f64,
    accuracy: f64,
    savings: f64,
    n_samples: usize,
    seed: u64,
}

/// CSV twin of the JSONL records; the header is written only for a new or
/// empty file.
pub fn append_records_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(CsvRow {
            policy_id: &r.policy_id,
            snr_db: r.snr_db,
            accuracy: r.accuracy,
            savings: r.savings,
            n_samples: r.n_samples,
            seed: r.seed,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Writes `class,mean_conf_correct,mean_conf_incorrect,n_correct,n_incorrect`
/// with absent means as empty fields.
pub fn write_stats_csv(path: &Path, stats: &[ClassConfidence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for s in stats {
        w.serialize(s).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Outcomes where sample `i` has early confidence `conf[i]` on its
    /// predicted class and the given correctness pattern.
    fn outcomes(conf: &[f64], early_ok: &[bool], final_ok: &[bool]) -> ExitOutcomes {
        let n = conf.len();
        let mut early = Vec::new();
        let mut final_ = Vec::new();
        for i in 0..n {
            let c = conf[i];
            if early_ok[i] {
                early.extend([c, 1.0 - c]);
            } else {
                early.extend([1.0 - c, c]);
            }
            final_.extend(if final_ok[i] { [0.9, 0.1] } else { [0.1, 0.9] });
        }
        ExitOutcomes {
            snr_db: 0.0,
            seed: 3,
            early: Tensor::new(vec![n, 2], early).unwrap(),
            final_: Tensor::new(vec![n, 2], final_).unwrap(),
            labels: vec![0; n],
        }
    }

    fn spread(n: usize) -> ExitOutcomes {
        let conf: Vec<f64> = (0..n).map(|i| 0.5 + 0.5 * (i as f64 + 0.5) / n as f64).collect();
        let early_ok: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let final_ok: Vec<bool> = (0..n).map(|i| i % 5 != 0).collect();
        outcomes(&conf, &early_ok, &final_ok)
    }

    #[test]
    fn fixed_policies() {
        let o = spread(100);
        let early = evaluate_outcomes(&TdPolicy::AlwaysEarly, &o).unwrap();
        assert_eq!(early.savings, 1.0);
        let expect = (0..100).filter(|&i| o.early_correct(i)).count() as f64 / 100.0;
        assert_eq!(early.accuracy, expect);
        assert_eq!(evaluate_outcomes(&TdPolicy::AlwaysFinal, &o).unwrap().savings, 0.0);
        let oracle = evaluate_outcomes(&TdPolicy::GtOracle, &o).unwrap();
        assert!(oracle.accuracy >= early.accuracy);
    }

    #[test]
    fn forty_of_hundred_kept() {
        let conf: Vec<f64> = (0..100).map(|i| if i < 40 { 0.95 } else { 0.6 }).collect();
        let o = outcomes(&conf, &[true; 100], &[true; 100]);
        let r = evaluate_outcomes(&TdPolicy::Confidence { threshold: 0.9 }, &o).unwrap();
        assert_eq!(r.savings, 0.4);
        assert_eq!(r.n_samples, 100);
    }

    #[test]
    fn tuning_confidence_endpoints_and_middle() {
        let o = spread(200);
        let all = tune_to_target_savings(&PolicyFamily::Confidence, &o, 1.0, SAVINGS_TOL, 2).unwrap();
        assert_eq!(all.value, 0.0);
        assert!(all.reached);
        let none = tune_to_target_savings(&PolicyFamily::Confidence, &o, 0.0, SAVINGS_TOL, 2).unwrap();
        let max_conf = o.early.rows().map(confidence).fold(0.0, f64::max);
        assert!(none.value > max_conf && none.achieved_savings == 0.0);
        let mid = tune_to_target_savings(&PolicyFamily::Confidence, &o, 0.5, SAVINGS_TOL, 2).unwrap();
        assert!(mid.reached && (mid.achieved_savings - 0.5).abs() <= SAVINGS_TOL);
    }

    #[test]
    fn tuning_other_families() {
        let o = spread(200);
        for fam in [PolicyFamily::Entropy, PolicyFamily::Random] {
            let r = tune_to_target_savings(&fam, &o, 0.3, SAVINGS_TOL, 2).unwrap();
            assert!(r.reached, "{} -> {}", fam.name(), r.achieved_savings);
        }
    }

    #[test]
    fn unreachable_target_is_flagged() {
        // every sample has the same confidence: savings is 0 or 1
        let o = outcomes(&[0.7; 10], &[true; 10], &[true; 10]);
        let r = tune_to_target_savings(&PolicyFamily::Confidence, &o, 0.5, SAVINGS_TOL, 2).unwrap();
        assert!(!r.reached);
    }

    #[test]
    fn stats_means_and_absence() {
        let probs = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.7, 0.3], vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        let stats = confidence_class_stats(&probs, &[0, 0, 0, 1]);
        assert_eq!(stats.len(), 2);
        assert!((stats[0].mean_conf_correct.unwrap() - 0.8).abs() < 1e-15);
        assert!((stats[0].mean_conf_incorrect.unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(stats[1].mean_conf_correct, None);
        assert_eq!(stats[1].n_incorrect, 1);
        let total: usize = stats.iter().map(|s| s.n_correct + s.n_incorrect).sum();
        assert_eq!(total, 4);
        assert_eq!(confidence_class_stats(&probs, &[1, 1, 1, 1]).len(), 1);
    }

    #[test]
    fn random_expectation() {
        assert!((expected_random_accuracy(0.6, 0.8, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(expected_random_accuracy(0.6, 0.8, 1.0), 0.6);
    }

    #[test]
    fn record_files() {
        let dir = tempfile::tempdir().unwrap();
        let o = spread(10);
        let recs = vec![
            evaluate_outcomes(&TdPolicy::AlwaysEarly, &o).unwrap(),
            evaluate_outcomes(&TdPolicy::Confidence { threshold: 0.8 }, &o).unwrap(),
        ];
        let jl = dir.path().join("r.jsonl");
        let cs = dir.path().join("r.csv");
        append_records_jsonl(&jl, &recs).unwrap();
        append_records_jsonl(&jl, &recs[..1]).unwrap();
        append_records_csv(&cs, &recs).unwrap();
        append_records_csv(&cs, &recs[..1]).unwrap();
        assert_eq!(read_records_jsonl(&jl).unwrap().len(), 3);
        let text = std::fs::read_to_string(&cs).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "policy_id,snr_db,accuracy,savings,n_samples,seed");
        assert_eq!(lines.len(), 4);

        let st = dir.path().join("s.csv");
        let probs = Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap();
        write_stats_csv(&st, &confidence_class_stats(&probs, &[0])).unwrap();
        let text = std::fs::read_to_string(&st).unwrap();
        assert_eq!(
            text,
            "class,mean_conf_correct,mean_conf_incorrect,n_correct,n_incorrect\n0,0.9,,1,0\n"
        );
    }
}
