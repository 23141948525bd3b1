//! Three-stage training: both exits without a channel, then the codec (frozen
//! classifier, then end to end) through the channel, then the decision
//! network on the frozen system.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, snr_db_to_noise_var, ChannelConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{SplitClassifier, EARLY, EDGE, JSCC_DEC, JSCC_ENC, SERVER};
use crate::nn::{Tape, Tensor, Var};
use crate::policy::{argmax, assemble_td_inputs, TdNet, TdNnConfig};
use crate::seed::derive_seed;

/// Decision-network training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Cross-entropy of the decision-weighted mixture of both exits.
    JointCe,
    /// Binary cross-entropy against oracle decisions.
    BceGt,
    /// `JointCe` plus `alpha` times `BceGt`.
    #[default]
    Mixed,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::JointCe => "joint_ce",
            Criterion::BceGt => "bce_gt",
            Criterion::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint_ce" => Ok(Criterion::JointCe),
            "bce_gt" => Ok(Criterion::BceGt),
            "mixed" => Ok(Criterion::Mixed),
            other => Err(Error::Config(format!(
                "unknown criterion `{other}` (expected joint_ce, bce_gt or mixed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Epochs of stages 1, 2 and 3.
    pub stage_epochs: [usize; 3],
    /// Stage-2 epochs spent on the codec alone; `None` means half of stage 2.
    pub codec_only_epochs: Option<usize>,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// Decay interval in epochs for stages 1, 2 and 3.
    pub lr_decay_every: [usize; 3],
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub criterion: Criterion,
    pub td: TdNnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            stage_epochs: [30, 10, 10],
            codec_only_epochs: None,
            base_lr: 0.02,
            lr_decay_factor: 10.0,
            lr_decay_every: [30, 10, 10],
            seed: 0,
            alpha: 0.1,
            beta: 0.05,
            criterion: Criterion::Mixed,
            td: TdNnConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Epoch budget and learning rate of the original large-scale setup.
    pub fn paper_scale() -> Self {
        TrainConfig {
            stage_epochs: [90, 30, 30],
            base_lr: 0.1,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("batch_size", self.batch_size > 0),
            ("base_lr", self.base_lr > 0.0 && self.base_lr.is_finite()),
            ("lr_decay_factor", self.lr_decay_factor > 0.0),
            ("lr_decay_every", self.lr_decay_every.iter().all(|&e| e > 0)),
            ("alpha", self.alpha >= 0.0),
            ("beta", self.beta >= 0.0),
            (
                "codec_only_epochs",
                self.codec_only_epochs.is_none_or(|e| e <= self.stage_epochs[1]),
            ),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(Error::Config(format!("train.{name} out of range")));
        }
        self.td.validate()
    }

    fn codec_epochs(&self) -> usize {
        self.codec_only_epochs.unwrap_or(self.stage_epochs[1] / 2)
    }
}

/// `base_lr / decay_factor ^ floor(epoch / decay_every(stage))`.
pub fn lr_at(epoch: usize, stage: u8, cfg: &TrainConfig) -> f64 {
    let every = cfg.lr_decay_every[usize::from(stage.clamp(1, 3)) - 1];
    cfg.base_lr / cfg.lr_decay_factor.powi((epoch / every) as i32)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub phase: Option<String>,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc_early: f64,
    pub acc_final: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc_joint: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub savings: Option<f64>,
}

/// Oracle decision targets in keep-polarity: 0 (transmit) exactly when the
/// early exit is wrong and the final exit is right, else 1.
pub fn make_gt_labels(early_probs: &Tensor, final_probs: &Tensor, labels: &[usize]) -> Vec<f64> {
    early_probs
        .rows()
        .zip(final_probs.rows())
        .zip(labels)
        .map(|((e, f), &l)| if argmax(e) != l && argmax(f) == l { 0.0 } else { 1.0 })
        .collect()
}

/// `beta * mean(1 - d)`.
fn transmission_penalty(tape: &mut Tape, d: Var, beta: f64) -> Var {
    let keep_gap = tape.affine(d, -1.0, 1.0);
    let mean = tape.mean(keep_gap);
    tape.affine(mean, beta, 0.0)
}

/// Cross-entropy of `d * early + (1 - d) * final` plus `beta * mean(1 - d)`.
pub fn loss_joint(
    tape: &mut Tape,
    early: Var,
    final_: Var,
    d: Var,
    targets: &Tensor,
    beta: f64,
) -> Result<Var> {
    let mixed = tape.mix(d, early, final_)?;
    let ce = tape.cross_entropy(mixed, targets)?;
    let pen = transmission_penalty(tape, d, beta);
    tape.add(ce, pen)
}

/// Binary cross-entropy of `d` against `d_gt` plus `beta * mean(1 - d)`.
pub fn loss_gt(tape: &mut Tape, d: Var, d_gt: &[f64], beta: f64) -> Result<Var> {
    let bce = tape.binary_cross_entropy(d, d_gt)?;
    let pen = transmission_penalty(tape, d, beta);
    tape.add(bce, pen)
}

/// [`loss_joint`] plus `alpha` times the binary cross-entropy term.
#[allow(clippy::too_many_arguments)]
pub fn loss_mixed(
    tape: &mut Tape,
    early: Var,
    final_: Var,
    d: Var,
    d_gt: &[f64],
    targets: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let joint = loss_joint(tape, early, final_, d, targets, beta)?;
    let bce = tape.binary_cross_entropy(d, d_gt)?;
    let weighted = tape.affine(bce, alpha, 0.0);
    tape.add(joint, weighted)
}

/// Probabilities of both exits for one batch.
pub struct ExitPass {
    pub early: Var,
    pub final_: Var,
}

/// Forward through both exits; with `noise_var` the final exit goes through
/// encoder, channel and decoder, otherwise the backbone is unsplit.
pub fn forward_exits(
    model: &SplitClassifier,
    tape: &mut Tape,
    input: Var,
    noise_var: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<ExitPass> {
    let feats = model.forward_edge(tape, input)?;
    let early = model.early_exit(tape, feats)?;
    let server_in = match noise_var {
        None => feats,
        Some((var, rng)) => {
            let sym = model.jscc_encode(tape, feats)?;
            let rx = channel::transmit_var(tape, sym, var, rng)?;
            model.jscc_decode(tape, rx)?
        }
    };
    let final_ = model.forward_server(tape, server_in)?;
    Ok(ExitPass { early, final_ })
}

fn correct(probs: &Tensor, labels: &[usize]) -> usize {
    probs.rows().zip(labels).filter(|(p, &l)| argmax(p) == l).count()
}

fn epoch_order(n: usize, seed: u64, stage: u8, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let stream = (u64::from(stage) << 32) | epoch as u64;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, stream)));
    order
}

/// Non-finite activations surface as numeric errors before the loss exists.
fn as_loss_error(e: Error, stage: u8, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(_) => Error::NonFiniteLoss {
            stage,
            epoch,
            batch,
            loss: f64::NAN,
        },
        e => e,
    }
}

fn check_finite(loss: f64, stage: u8, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            stage,
            epoch,
            batch,
            loss,
        })
    }
}

#[derive(Default)]
struct EpochStats {
    loss_sum: f64,
    batches: usize,
    seen: usize,
    early_ok: usize,
    final_ok: usize,
    joint_ok: usize,
    kept: usize,
}

impl EpochStats {
    fn record(&self, stage: u8, phase: Option<&str>, epoch: usize, lr: f64, with_td: bool) -> LogRecord {
        let n = self.seen as f64;
        LogRecord {
            stage,
            phase: phase.map(str::to_string),
            epoch,
            lr,
            loss: self.loss_sum / self.batches as f64,
            acc_early: self.early_ok as f64 / n,
            acc_final: self.final_ok as f64 / n,
            acc_joint: with_td.then(|| self.joint_ok as f64 / n),
            savings: with_td.then(|| self.kept as f64 / n),
        }
    }
}

/// Summed cross-entropy of both exits, optionally through the channel.
fn classifier_epochs(
    model: &mut SplitClassifier,
    data: &Dataset,
    cfg: &TrainConfig,
    stage: u8,
    epochs: std::ops::Range<usize>,
    phase: Option<&str>,
    channel_cfg: Option<(&ChannelConfig, &mut ChaCha8Rng, &mut usize)>,
) -> Result<Vec<LogRecord>> {
    let mut log = Vec::new();
    let mut channel_cfg = channel_cfg;
    for epoch in epochs {
        let lr = lr_at(epoch, stage, cfg);
        let mut stats = EpochStats::default();
        let order = epoch_order(data.len(), cfg.seed, stage, epoch);
        for (batch_idx, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, targets, labels) = data.batch(idx)?;
            let mut tape = Tape::new();
            let input = tape.constant(x);
            let noise = match channel_cfg.as_mut() {
                None => None,
                Some((ch, rng, iteration)) => {
                    let snr = ch.training_snr(**iteration, &mut **rng);
                    **iteration += 1;
                    Some((snr_db_to_noise_var(snr, ch.power), &mut **rng))
                }
            };
            let pass = forward_exits(model, &mut tape, input, noise)
                .map_err(|e| as_loss_error(e, stage, epoch, batch_idx))?;
            let ce_early = tape.cross_entropy(pass.early, &targets)?;
            let ce_final = tape.cross_entropy(pass.final_, &targets)?;
            let loss = tape.add(ce_early, ce_final)?;
            let loss_value = tape.value(loss).item()?;
            check_finite(loss_value, stage, epoch, batch_idx)?;
            tape.backward(loss, &mut model.params)?;
            model.params.sgd_step(lr)?;

            stats.loss_sum += loss_value;
            stats.batches += 1;
            stats.seen += labels.len();
            stats.early_ok += correct(tape.value(pass.early), &labels);
            stats.final_ok += correct(tape.value(pass.final_), &labels);
        }
        log.push(stats.record(stage, phase, epoch, lr, false));
    }
    Ok(log)
}

/// Stage 1: both exits on the unsplit backbone, no channel.
pub fn stage1_train(model: &mut SplitClassifier, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    model.params.set_trainable(&[EDGE, EARLY, SERVER]);
    classifier_epochs(model, data, cfg, 1, 0..cfg.stage_epochs[0], None, None)
}

/// Stage 2: codec alone with the classifier frozen, then everything end to
/// end, all through the channel with the training SNR schedule.
pub fn stage2_train(
    model: &mut SplitClassifier,
    data: &Dataset,
    cfg: &TrainConfig,
    channel_cfg: &ChannelConfig,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    channel_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5747_0002));
    let mut iteration = 0usize;
    let split = cfg.codec_epochs();

    model.params.set_trainable(&[JSCC_ENC, JSCC_DEC]);
    let mut log = classifier_epochs(
        model,
        data,
        cfg,
        2,
        0..split,
        Some("codec"),
        Some((channel_cfg, &mut rng, &mut iteration)),
    )?;
    model.params.set_trainable(&[EDGE, EARLY, JSCC_ENC, JSCC_DEC, SERVER]);
    log.extend(classifier_epochs(
        model,
        data,
        cfg,
        2,
        split..cfg.stage_epochs[1],
        Some("end_to_end"),
        Some((channel_cfg, &mut rng, &mut iteration)),
    )?);
    Ok(log)
}

/// Stage 3: trains a fresh decision network on the frozen classifier with
/// the configured criterion. Exit correctness comes from the live channel at
/// each iteration's scheduled SNR, which is also the network's SNR input.
pub fn stage3_train_td(
    model: &mut SplitClassifier,
    data: &Dataset,
    cfg: &TrainConfig,
    channel_cfg: &ChannelConfig,
) -> Result<(TdNet, Vec<LogRecord>)> {
    cfg.validate()?;
    channel_cfg.validate()?;
    model.params.set_trainable(&[]);
    let k = model.config.num_classes;
    let mut td = TdNet::new(cfg.td.clone(), k, derive_seed(cfg.seed, 0x7d00_0003))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5747_0003));
    let mut iteration = 0usize;
    let mut log = Vec::new();

    for epoch in 0..cfg.stage_epochs[2] {
        let lr = lr_at(epoch, 3, cfg);
        let mut stats = EpochStats::default();
        let order = epoch_order(data.len(), cfg.seed, 3, epoch);
        for (batch_idx, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, targets, labels) = data.batch(idx)?;
            let snr = channel_cfg.training_snr(iteration, &mut rng);
            iteration += 1;
            let mut tape = Tape::new();
            let input = tape.constant(x);
            let var = snr_db_to_noise_var(snr, channel_cfg.power);
            let pass = forward_exits(model, &mut tape, input, Some((var, &mut rng)))
                .map_err(|e| as_loss_error(e, 3, epoch, batch_idx))?;
            let early_probs = tape.value(pass.early).clone();
            let final_probs = tape.value(pass.final_).clone();

            let inputs = early_probs
                .rows()
                .map(|p| assemble_td_inputs(p, snr, &td.config))
                .collect::<Result<Vec<_>>>()?;
            let td_in = tape.constant(Tensor::from_rows(&inputs)?);
            let raw = td.forward(&mut tape, td_in)?;
            let d = tape.tempered_sigmoid(raw, td.config.temperature);
            let d_gt = make_gt_labels(&early_probs, &final_probs, &labels);
            let loss = match cfg.criterion {
                Criterion::JointCe => loss_joint(&mut tape, pass.early, pass.final_, d, &targets, cfg.beta)?,
                Criterion::BceGt => loss_gt(&mut tape, d, &d_gt, cfg.beta)?,
                Criterion::Mixed => loss_mixed(
                    &mut tape,
                    pass.early,
                    pass.final_,
                    d,
                    &d_gt,
                    &targets,
                    cfg.alpha,
                    cfg.beta,
                )?,
            };
            let loss_value = tape.value(loss).item()?;
            check_finite(loss_value, 3, epoch, batch_idx)?;
            tape.backward(loss, &mut td.params)?;
            td.params.sgd_step(lr)?;

            stats.loss_sum += loss_value;
            stats.batches += 1;
            stats.seen += labels.len();
            for (((e, f), &l), &dv) in early_probs
                .rows()
                .zip(final_probs.rows())
                .zip(&labels)
                .zip(tape.value(d).data())
            {
                let (e_ok, f_ok) = (argmax(e) == l, argmax(f) == l);
                let keep = dv >= 0.5;
                stats.early_ok += usize::from(e_ok);
                stats.final_ok += usize::from(f_ok);
                stats.kept += usize::from(keep);
                stats.joint_ok += usize::from(if keep { e_ok } else { f_ok });
            }
        }
        log.push(stats.record(3, None, epoch, lr, true));
    }
    td.trained = true;
    Ok((td, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::binary_cross_entropy;

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::paper_scale();
        assert_eq!(lr_at(0, 1, &cfg), 0.1);
        assert!((lr_at(30, 1, &cfg) - 0.01).abs() < 1e-15);
        assert!((lr_at(29, 1, &cfg) - 0.1).abs() < 1e-15);
        assert!((lr_at(10, 2, &cfg) - 0.01).abs() < 1e-15);
        assert!((lr_at(25, 3, &cfg) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn gt_labels() {
        let e = Tensor::new(vec![3, 2], vec![0.9, 0.1, 0.9, 0.1, 0.2, 0.8]).unwrap();
        let f = Tensor::new(vec![3, 2], vec![0.1, 0.9, 0.9, 0.1, 0.6, 0.4]).unwrap();
        // early wrong/final right, both right, both wrong
        assert_eq!(make_gt_labels(&e, &f, &[1, 0, 1]), vec![0.0, 1.0, 1.0]);
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    fn probs(tape: &mut Tape, rows: Vec<Vec<f64>>) -> Var {
        tape.constant(Tensor::from_rows(&rows).unwrap())
    }

    #[test]
    fn joint_loss_endpoints() {
        let targets = crate::data::one_hot(&[1], 3);
        let mut tape = Tape::new();
        let early = probs(&mut tape, vec![vec![0.0, 1.0, 0.0]]);
        let final_ = probs(&mut tape, vec![vec![0.2, 0.5, 0.3]]);
        let one = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let l = loss_joint(&mut tape, early, final_, one, &targets, 0.7).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);

        let zero = tape.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let l = loss_joint(&mut tape, early, final_, zero, &targets, 0.7).unwrap();
        assert!((scalar(&tape, l) - (-(0.5f64.ln()) + 0.7)).abs() < 1e-15);

        let half = tape.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let l = loss_joint(&mut tape, early, final_, half, &targets, 0.0).unwrap();
        assert!((scalar(&tape, l) + 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gt_loss_cases() {
        let mut tape = Tape::new();
        let half = tape.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let l = loss_gt(&mut tape, half, &[1.0], 0.0).unwrap();
        assert!((scalar(&tape, l) - 2f64.ln()).abs() < 1e-15);
        let near = tape.constant(Tensor::new(vec![1, 1], vec![1.0 - 1e-9]).unwrap());
        let l = loss_gt(&mut tape, near, &[1.0], 0.0).unwrap();
        assert!(scalar(&tape, l) < 1e-8);

        let d = tape.constant(Tensor::new(vec![2, 1], vec![0.3, 0.8]).unwrap());
        let l0 = loss_gt(&mut tape, d, &[0.0, 1.0], 0.0).unwrap();
        let l1 = loss_gt(&mut tape, d, &[0.0, 1.0], 0.4).unwrap();
        let expected = 0.4 * ((1.0 - 0.3) + (1.0 - 0.8)) / 2.0;
        assert!((scalar(&tape, l1) - scalar(&tape, l0) - expected).abs() < 1e-15);
    }

    #[test]
    fn mixed_loss_cases() {
        let targets = crate::data::one_hot(&[0], 2);
        let mut tape = Tape::new();
        let early = probs(&mut tape, vec![vec![1.0, 0.0]]);
        let final_ = probs(&mut tape, vec![vec![0.3, 0.7]]);
        let d = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let mixed = loss_mixed(&mut tape, early, final_, d, &[0.0], &targets, 0.25, 0.0).unwrap();
        let expect = 0.25 * binary_cross_entropy(1.0, 0.0);
        assert!((scalar(&tape, mixed) - expect).abs() < 1e-12);

        let d = tape.constant(Tensor::new(vec![1, 1], vec![0.37]).unwrap());
        let joint = loss_joint(&mut tape, early, final_, d, &targets, 0.2).unwrap();
        let mixed = loss_mixed(&mut tape, early, final_, d, &[1.0], &targets, 0.0, 0.2).unwrap();
        assert_eq!(scalar(&tape, joint), scalar(&tape, mixed));
    }

    #[test]
    fn criterion_names_round_trip() {
        for c in [Criterion::JointCe, Criterion::BceGt, Criterion::Mixed] {
            assert_eq!(Criterion::parse(c.name()).unwrap(), c);
        }
        assert!(Criterion::parse("other").is_err());
    }
}
