//! Transmission-decision mechanisms.
//!
//! Polarity is fixed everywhere: `keep_early == true` means the early-exit
//! prediction is accepted on the device and nothing is transmitted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{tempered_sigmoid, ParamRegistry, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Decision {
    pub keep_early: bool,
}

impl Decision {
    pub const KEEP: Decision = Decision { keep_early: true };
    pub const TRANSMIT: Decision = Decision { keep_early: false };
}

/// Maximum class probability.
pub fn confidence(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the largest probability (first on ties).
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy in bits with `0 log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

/// Keep iff `confidence >= threshold`.
pub fn decide_confidence(probs: &[f64], threshold: f64) -> Decision {
    Decision {
        keep_early: confidence(probs) >= threshold,
    }
}

/// Keep iff `entropy <= threshold`.
pub fn decide_entropy(probs: &[f64], threshold: f64) -> Decision {
    Decision {
        keep_early: entropy(probs) <= threshold,
    }
}

/// Transmit only when the early exit is wrong and the final exit is right.
pub fn gt_decision(early_correct: bool, final_correct: bool) -> Decision {
    Decision {
        keep_early: early_correct || !final_correct,
    }
}

/// Keep with probability `keep_prob`.
pub fn decide_random<R: Rng + ?Sized>(keep_prob: f64, rng: &mut R) -> Decision {
    Decision {
        keep_early: rng.random::<f64>() < keep_prob,
    }
}

/// Inputs available to the decision network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TdFeature {
    /// Full early-exit class-probability vector.
    Cp,
    /// Confidence.
    C,
    /// Entropy.
    E,
    /// Channel SNR (dB / 10).
    Snr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdNnConfig {
    pub input_features: Vec<TdFeature>,
    pub hidden_width: usize,
    pub temperature: f64,
}

impl Default for TdNnConfig {
    fn default() -> Self {
        TdNnConfig {
            input_features: vec![TdFeature::Cp, TdFeature::C, TdFeature::E, TdFeature::Snr],
            hidden_width: 256,
            temperature: 10.0,
        }
    }
}

impl TdNnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_features.is_empty() {
            return Err(Error::Config("td.input_features must not be empty".into()));
        }
        if self.hidden_width == 0 {
            return Err(Error::Config("td.hidden_width must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("td.temperature must be > 0".into()));
        }
        Ok(())
    }

    fn has(&self, f: TdFeature) -> bool {
        self.input_features.contains(&f)
    }

    pub fn input_dim(&self, num_classes: usize) -> usize {
        usize::from(self.has(TdFeature::Cp)) * num_classes
            + usize::from(self.has(TdFeature::C))
            + usize::from(self.has(TdFeature::E))
            + usize::from(self.has(TdFeature::Snr))
    }
}

/// Concatenates the selected features in the fixed order CP, C, E, SNR.
pub fn assemble_td_inputs(probs: &[f64], snr_db: f64, cfg: &TdNnConfig) -> Result<Vec<f64>> {
    if cfg.input_features.is_empty() {
        return Err(Error::Config("decision network needs at least one input feature".into()));
    }
    let mut out = Vec::with_capacity(cfg.input_dim(probs.len()));
    if cfg.has(TdFeature::Cp) {
        out.extend_from_slice(probs);
    }
    if cfg.has(TdFeature::C) {
        out.push(confidence(probs));
    }
    if cfg.has(TdFeature::E) {
        out.push(entropy(probs));
    }
    if cfg.has(TdFeature::Snr) {
        out.push(snr_db / 10.0);
    }
    Ok(out)
}

/// Tempered sigmoid of the raw output and the rounded decision; exactly 0.5
/// rounds to keep.
pub fn decision_from_raw(raw: f64, temperature: f64) -> (f64, Decision) {
    let d = tempered_sigmoid(raw, temperature);
    (d, Decision { keep_early: d >= 0.5 })
}

/// Three-layer decision network `n -> hidden -> hidden -> 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdNet {
    pub config: TdNnConfig,
    pub num_classes: usize,
    pub params: ParamRegistry,
    pub trained: bool,
}

pub const TD: &str = "td";
const TD_LAYERS: [&str; 3] = ["td.fc0", "td.fc1", "td.fc2"];

impl TdNet {
    pub fn new(config: TdNnConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.input_dim(num_classes);
        let h = config.hidden_width;
        let mut params = ParamRegistry::new();
        params.insert_layer(TD_LAYERS[0], vec![n, h], n, 2.0, &mut rng)?;
        params.insert_layer(TD_LAYERS[1], vec![h, h], h, 2.0, &mut rng)?;
        params.insert_layer(TD_LAYERS[2], vec![h, 1], h, 1.0, &mut rng)?;
        Ok(TdNet {
            config,
            num_classes,
            params,
            trained: false,
        })
    }

    /// Rebuilds a network from stored parameters.
    pub fn from_params(config: TdNnConfig, num_classes: usize, params: ParamRegistry) -> Result<Self> {
        let mut net = TdNet::new(config, num_classes, 0)?;
        for (name, t) in net.params.iter_mut() {
            let stored = params.get(name)?;
            if stored.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(stored.data());
        }
        net.trained = true;
        Ok(net)
    }

    /// Raw outputs `[N, 1]` for inputs `[N, n]`.
    pub fn forward(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let mut x = inputs;
        for (i, prefix) in TD_LAYERS.iter().enumerate() {
            let w = tape.param(&self.params, &format!("{prefix}.weight"))?;
            let b = tape.param(&self.params, &format!("{prefix}.bias"))?;
            x = tape.linear(x, w, b)?;
            if i + 1 < TD_LAYERS.len() {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    pub fn raw_outputs(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(inputs)?);
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Soft decision and rounded decision for one input vector.
    pub fn decide(&self, inputs: &[f64]) -> Result<(f64, Decision)> {
        if !self.trained {
            return Err(Error::State("decision network has not been trained".into()));
        }
        let raw = self.raw_outputs(&[inputs.to_vec()])?[0];
        Ok(decision_from_raw(raw, self.config.temperature))
    }
}

/// How per-class thresholds pick their class at decision time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassSelect {
    /// Class predicted by the early exit.
    #[default]
    Argmax,
    /// Ground-truth label (analysis only).
    GroundTruth,
}

/// Per-sample record used to calibrate per-class thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DumpSample {
    pub pred_class: usize,
    pub label: usize,
    pub confidence: f64,
    pub early_correct: bool,
    pub final_correct: bool,
    pub snr_db: f64,
}

/// Candidate thresholds `0.00, 0.05, ..., 1.00`.
pub fn threshold_candidates() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackEntry {
    pub class: usize,
    pub snr_db: f64,
    pub threshold: f64,
}

/// Thresholds indexed by `[class][snr grid point]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub snr_grid: Vec<f64>,
    pub accuracy_weight: f64,
    pub select: ClassSelect,
    pub thresholds: Vec<Vec<f64>>,
    /// Cells whose class had no calibration samples.
    pub fallbacks: Vec<FallbackEntry>,
}

impl ThresholdTable {
    pub fn constant(num_classes: usize, snr_grid: Vec<f64>, threshold: f64) -> Self {
        ThresholdTable {
            thresholds: vec![vec![threshold; snr_grid.len()]; num_classes],
            snr_grid,
            accuracy_weight: f64::NAN,
            select: ClassSelect::Argmax,
            fallbacks: Vec::new(),
        }
    }

    /// Index of the grid point closest to `snr_db` (lower one on ties).
    pub fn nearest_snr(&self, snr_db: f64) -> usize {
        nearest_index(&self.snr_grid, snr_db)
    }

    pub fn threshold(&self, class: usize, snr_db: f64) -> f64 {
        self.thresholds[class][self.nearest_snr(snr_db)]
    }
}

fn nearest_index(grid: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (i, g) in grid.iter().enumerate() {
        if (g - v).abs() < (grid[best] - v).abs() {
            best = i;
        }
    }
    best
}

/// Objective value of keeping samples with confidence >= `threshold`.
pub fn calibration_objective(samples: &[&DumpSample], threshold: f64, accuracy_weight: f64) -> f64 {
    let n = samples.len() as f64;
    let (mut correct, mut kept) = (0usize, 0usize);
    for s in samples {
        let keep = s.confidence >= threshold;
        kept += usize::from(keep);
        correct += usize::from(if keep { s.early_correct } else { s.final_correct });
    }
    accuracy_weight * correct as f64 / n + (1.0 - accuracy_weight) * kept as f64 / n
}

/// Best candidate threshold; ties go to the smaller threshold.
fn best_threshold(samples: &[&DumpSample], accuracy_weight: f64) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for tau in threshold_candidates() {
        let obj = calibration_objective(samples, tau, accuracy_weight);
        if obj > best.0 {
            best = (obj, tau);
        }
    }
    best.1
}

/// Chooses, for every `(class, snr)` cell, the candidate threshold maximizing
/// `w * accuracy + (1 - w) * savings` over the dump samples of that cell.
/// Classes grouped by `select` (predicted class or label). Empty cells fall
/// back to the best single threshold over all samples at that SNR.
pub fn calibrate_per_class(
    dump: &[DumpSample],
    snr_grid: &[f64],
    accuracy_weight: f64,
    num_classes: usize,
    select: ClassSelect,
) -> Result<ThresholdTable> {
    if snr_grid.is_empty() {
        return Err(Error::Validation("calibration needs a non-empty SNR grid".into()));
    }
    if !(0.0..=1.0).contains(&accuracy_weight) {
        return Err(Error::Validation(format!("accuracy weight {accuracy_weight} not in [0, 1]")));
    }
    let mut cells: Vec<Vec<Vec<&DumpSample>>> = vec![vec![Vec::new(); snr_grid.len()]; num_classes];
    for s in dump {
        let class = match select {
            ClassSelect::Argmax => s.pred_class,
            ClassSelect::GroundTruth => s.label,
        };
        if class >= num_classes {
            return Err(Error::Validation(format!("class {class} outside [0, {num_classes})")));
        }
        cells[class][nearest_index(snr_grid, s.snr_db)].push(s);
    }
    let all: Vec<&DumpSample> = dump.iter().collect();
    let global: Vec<f64> = (0..snr_grid.len())
        .map(|j| {
            let at_snr: Vec<&DumpSample> = cells.iter().flat_map(|c| c[j].iter().copied()).collect();
            match (at_snr.is_empty(), all.is_empty()) {
                (false, _) => best_threshold(&at_snr, accuracy_weight),
                (true, false) => best_threshold(&all, accuracy_weight),
                (true, true) => 0.0,
            }
        })
        .collect();

    let mut thresholds = vec![vec![0.0; snr_grid.len()]; num_classes];
    let mut fallbacks = Vec::new();
    for (class, row) in cells.iter().enumerate() {
        for (j, samples) in row.iter().enumerate() {
            thresholds[class][j] = if samples.is_empty() {
                fallbacks.push(FallbackEntry {
                    class,
                    snr_db: snr_grid[j],
                    threshold: global[j],
                });
                global[j]
            } else {
                best_threshold(samples, accuracy_weight)
            };
        }
    }
    Ok(ThresholdTable {
        snr_grid: snr_grid.to_vec(),
        accuracy_weight,
        select,
        thresholds,
        fallbacks,
    })
}

/// Threshold looked up by class and nearest SNR, then as
/// [`decide_confidence`].
pub fn decide_per_class(
    probs: &[f64],
    snr_db: f64,
    table: &ThresholdTable,
    select: ClassSelect,
    label: Option<usize>,
) -> Result<Decision> {
    let class = match (select, label) {
        (ClassSelect::Argmax, _) => argmax(probs),
        (ClassSelect::GroundTruth, Some(l)) => l,
        (ClassSelect::GroundTruth, None) => {
            return Err(Error::State("ground-truth class selection needs labels".into()))
        }
    };
    if class >= table.thresholds.len() {
        return Err(Error::Validation(format!("class {class} not in threshold table")));
    }
    Ok(decide_confidence(probs, table.threshold(class, snr_db)))
}

/// What a policy may look at for one sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    pub early_probs: &'a [f64],
    pub snr_db: f64,
    /// Ground truth; only analysis policies use it.
    pub label: Option<usize>,
    /// Final-exit probabilities; only the oracle uses them.
    pub final_probs: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TdPolicy {
    Confidence { threshold: f64 },
    Entropy { threshold: f64 },
    PerClass { table: ThresholdTable, select: ClassSelect },
    Random { keep_prob: f64 },
    AlwaysEarly,
    AlwaysFinal,
    GtOracle,
    Neural(Box<TdNet>),
}

impl TdPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = match *self {
            TdPolicy::Confidence { threshold } => !(0.0..=1.0).contains(&threshold),
            TdPolicy::Entropy { threshold } => !(threshold >= 0.0),
            TdPolicy::Random { keep_prob } => !(0.0..=1.0).contains(&keep_prob),
            _ => false,
        };
        if bad {
            return Err(Error::Validation(format!("policy parameter out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn id(&self) -> &'static str {
        match self {
            TdPolicy::Confidence { .. } => "confidence",
            TdPolicy::Entropy { .. } => "entropy",
            TdPolicy::PerClass { select: ClassSelect::Argmax, .. } => "per_class",
            TdPolicy::PerClass { select: ClassSelect::GroundTruth, .. } => "per_class_gt",
            TdPolicy::Random { .. } => "random",
            TdPolicy::AlwaysEarly => "always_early",
            TdPolicy::AlwaysFinal => "always_final",
            TdPolicy::GtOracle => "gt_oracle",
            TdPolicy::Neural(_) => "neural",
        }
    }

    pub fn params(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        match self {
            TdPolicy::Confidence { threshold } => {
                m.insert("tau".into(), *threshold);
            }
            TdPolicy::Entropy { threshold } => {
                m.insert("eta".into(), *threshold);
            }
            TdPolicy::PerClass { table, .. } => {
                m.insert("accuracy_weight".into(), table.accuracy_weight);
            }
            TdPolicy::Random { keep_prob } => {
                m.insert("p".into(), *keep_prob);
            }
            TdPolicy::Neural(net) => {
                m.insert("temperature".into(), net.config.temperature);
            }
            _ => {}
        }
        m
    }

    /// Decides every sample; `rng` is consumed only by the random policy.
    pub fn decide_batch<R: Rng + ?Sized>(
        &self,
        samples: &[SampleView<'_>],
        rng: &mut R,
    ) -> Result<Vec<Decision>> {
        self.validate()?;
        match self {
            TdPolicy::Confidence { threshold } => Ok(samples
                .iter()
                .map(|s| decide_confidence(s.early_probs, *threshold))
                .collect()),
            TdPolicy::Entropy { threshold } => Ok(samples
                .iter()
                .map(|s| decide_entropy(s.early_probs, *threshold))
                .collect()),
            TdPolicy::PerClass { table, select } => samples
                .iter()
                .map(|s| decide_per_class(s.early_probs, s.snr_db, table, *select, s.label))
                .collect(),
            TdPolicy::Random { keep_prob } => {
                Ok(samples.iter().map(|_| decide_random(*keep_prob, rng)).collect())
            }
            TdPolicy::AlwaysEarly => Ok(vec![Decision::KEEP; samples.len()]),
            TdPolicy::AlwaysFinal => Ok(vec![Decision::TRANSMIT; samples.len()]),
            TdPolicy::GtOracle => samples
                .iter()
                .map(|s| match (s.label, s.final_probs) {
                    (Some(l), Some(f)) => Ok(gt_decision(argmax(s.early_probs) == l, argmax(f) == l)),
                    _ => Err(Error::State("oracle needs labels and final-exit outputs".into())),
                })
                .collect(),
            TdPolicy::Neural(net) => {
                if !net.trained {
                    return Err(Error::State("decision network has not been trained".into()));
                }
                let inputs = samples
                    .iter()
                    .map(|s| assemble_td_inputs(s.early_probs, s.snr_db, &net.config))
                    .collect::<Result<Vec<_>>>()?;
                Ok(net
                    .raw_outputs(&inputs)?
                    .into_iter()
                    .map(|raw| decision_from_raw(raw, net.config.temperature).1)
                    .collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(k: usize) -> Vec<f64> {
        vec![1.0 / k as f64; k]
    }

    #[test]
    fn confidence_and_entropy_values() {
        assert!((confidence(&uniform(10)) - 0.1).abs() < 1e-15);
        assert_eq!(confidence(&[0., 1., 0.]), 1.0);
        assert_eq!(confidence(&[0.7, 0.2, 0.1]), 0.7);
        assert_eq!(entropy(&[0., 1., 0.]), 0.0);
        assert!((entropy(&uniform(4)) - 2.0).abs() < 1e-12);
        assert!((entropy(&uniform(100)) - 100f64.log2()).abs() < 1e-12);
        assert!((entropy(&uniform(100)) - 6.6439).abs() < 1e-4);
    }

    #[test]
    fn confidence_threshold_rule() {
        assert_eq!(decide_confidence(&uniform(10), 0.0), Decision::KEEP);
        assert_eq!(decide_confidence(&[0.6, 0.4], 1.0), Decision::TRANSMIT);
        assert_eq!(decide_confidence(&[0.0, 1.0], 1.0), Decision::KEEP);
        assert_eq!(decide_confidence(&[0.6, 0.3, 0.1], 0.5), Decision::KEEP);
        assert_eq!(decide_confidence(&[0.5, 0.5], 0.5), Decision::KEEP);
    }

    #[test]
    fn entropy_threshold_rule() {
        assert_eq!(decide_entropy(&[0., 1., 0.], 0.1), Decision::KEEP);
        assert_eq!(decide_entropy(&uniform(10), 1.0), Decision::TRANSMIT);
        assert_eq!(decide_entropy(&uniform(10), 10f64.log2()), Decision::KEEP);
    }

    #[test]
    fn oracle_truth_table() {
        assert_eq!(gt_decision(true, true), Decision::KEEP);
        assert_eq!(gt_decision(false, true), Decision::TRANSMIT);
        assert_eq!(gt_decision(false, false), Decision::KEEP);
        assert_eq!(gt_decision(true, false), Decision::KEEP);
    }

    #[test]
    fn random_extremes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| decide_random(1.0, &mut rng).keep_early));
        assert!((0..1000).all(|_| !decide_random(0.0, &mut rng).keep_early));
        let kept = (0..100_000).filter(|_| decide_random(0.5, &mut rng).keep_early).count();
        assert!((kept as f64 / 1e5 - 0.5).abs() < 0.01);
    }

    #[test]
    fn td_input_assembly() {
        let cfg = TdNnConfig::default();
        let probs = uniform(10);
        let x = assemble_td_inputs(&probs, 5.0, &cfg).unwrap();
        assert_eq!(x.len(), 13);
        assert_eq!(x[10], 0.1);
        assert!((x[11] - 10f64.log2()).abs() < 1e-12);
        assert_eq!(x[12], 0.5);
        let cp_only = TdNnConfig {
            input_features: vec![TdFeature::Cp],
            ..TdNnConfig::default()
        };
        assert_eq!(assemble_td_inputs(&probs, 0.0, &cp_only).unwrap().len(), 10);
        assert_eq!(cfg.input_dim(100), 103);
        let empty = TdNnConfig {
            input_features: vec![],
            ..TdNnConfig::default()
        };
        assert!(matches!(assemble_td_inputs(&probs, 0.0, &empty), Err(Error::Config(_))));
        // Feature order is fixed regardless of listing order.
        let shuffled = TdNnConfig {
            input_features: vec![TdFeature::Snr, TdFeature::C],
            ..TdNnConfig::default()
        };
        assert_eq!(assemble_td_inputs(&probs, -10.0, &shuffled).unwrap(), vec![0.1, -1.0]);
    }

    #[test]
    fn raw_output_rounding() {
        for t in [0.1, 1.0, 10.0, 100.0] {
            assert_eq!(decision_from_raw(0.0, t), (0.5, Decision::KEEP));
            assert_eq!(decision_from_raw(0.3, t).1, Decision::KEEP);
            assert_eq!(decision_from_raw(-0.3, t).1, Decision::TRANSMIT);
        }
        assert!((decision_from_raw(1.0, 10.0).0 - 0.9999546).abs() < 1e-7);
    }

    #[test]
    fn untrained_network_is_state_error() {
        let net = TdNet::new(TdNnConfig::default(), 10, 0).unwrap();
        assert!(matches!(net.decide(&[0.0; 13]), Err(Error::State(_))));
        let policy = TdPolicy::Neural(Box::new(net));
        let probs = uniform(10);
        let view = SampleView {
            early_probs: &probs,
            snr_db: 0.0,
            label: None,
            final_probs: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(policy.decide_batch(&[view], &mut rng).is_err());
    }

    fn sample(pred: usize, conf: f64, early: bool, fin: bool, snr: f64) -> DumpSample {
        DumpSample {
            pred_class: pred,
            label: pred,
            confidence: conf,
            early_correct: early,
            final_correct: fin,
            snr_db: snr,
        }
    }

    #[test]
    fn calibration_with_zero_weight_keeps_everything() {
        let dump: Vec<_> = (0..30)
            .map(|i| sample(i % 3, 0.3 + 0.02 * i as f64, i % 2 == 0, true, 0.0))
            .collect();
        let table = calibrate_per_class(&dump, &[-10.0, 0.0, 10.0], 0.0, 3, ClassSelect::Argmax).unwrap();
        assert!(table.thresholds.iter().flatten().all(|&t| t == 0.0));
    }

    #[test]
    fn calibration_always_correct_class_keeps() {
        let dump: Vec<_> = (0..20)
            .flat_map(|i| {
                [-5.0, 5.0].map(|snr| sample(0, 0.4 + 0.02 * i as f64, true, i % 2 == 0, snr))
            })
            .collect();
        let table = calibrate_per_class(&dump, &[-5.0, 5.0], 0.7, 1, ClassSelect::Argmax).unwrap();
        assert_eq!(table.thresholds, vec![vec![0.0, 0.0]]);
        assert!(table.fallbacks.is_empty());
    }

    #[test]
    fn calibration_missing_class_falls_back() {
        let dump = vec![sample(0, 0.9, true, true, 0.0), sample(0, 0.2, false, true, 0.0)];
        let table = calibrate_per_class(&dump, &[0.0], 1.0, 2, ClassSelect::Argmax).unwrap();
        assert_eq!(table.fallbacks.len(), 1);
        assert_eq!(table.fallbacks[0].class, 1);
        assert_eq!(table.thresholds[1][0], table.thresholds[0][0]);
    }

    #[test]
    fn per_class_tables() {
        let zeros = ThresholdTable::constant(3, vec![0.0], 0.0);
        let ones = ThresholdTable::constant(3, vec![0.0], 1.0);
        let probs = [0.5, 0.3, 0.2];
        let d = decide_per_class(&probs, 3.0, &zeros, ClassSelect::Argmax, None).unwrap();
        assert_eq!(d, Decision::KEEP);
        let d = decide_per_class(&probs, 3.0, &ones, ClassSelect::Argmax, None).unwrap();
        assert_eq!(d, Decision::TRANSMIT);
        let d = decide_per_class(&[0., 1., 0.], 3.0, &ones, ClassSelect::Argmax, None).unwrap();
        assert_eq!(d, Decision::KEEP);
        assert!(decide_per_class(&probs, 0.0, &ones, ClassSelect::GroundTruth, None).is_err());
    }

    #[test]
    fn nearest_grid_lookup() {
        let mut table = ThresholdTable::constant(1, vec![-10.0, -5.0, 0.0, 5.0, 10.0], 0.0);
        table.thresholds[0] = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        assert_eq!(table.threshold(0, -12.0), 0.1);
        assert_eq!(table.threshold(0, 1.0), 0.3);
        assert_eq!(table.threshold(0, 3.0), 0.4);
        assert_eq!(table.threshold(0, 40.0), 0.5);
    }
}
