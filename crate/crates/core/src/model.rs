//! Split classifier: edge backbone, early-exit head, learned channel codec and
//! server backbone, plus FLOPs accounting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamRegistry, PoolKind, Tape, Tensor, Var};
use crate::policy::TdNnConfig;

/// Parameter partitions of the classifier, in registry order.
pub const EDGE: &str = "edge";
pub const EARLY: &str = "early";
pub const JSCC_ENC: &str = "jscc_enc";
pub const JSCC_DEC: &str = "jscc_dec";
pub const SERVER: &str = "server";

/// Backbone geometry. Each stage is conv3x3 + ReLU + 2x2 max pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `(C, H, W)` of one input sample.
    pub input_shape: [usize; 3],
    pub stage_channels: Vec<usize>,
    /// Number of stages run on the edge device (1-based stage index).
    pub split_after_stage: usize,
    pub num_classes: usize,
    pub early_hidden: usize,
    /// Hidden width of the final classifier head on the server.
    pub final_hidden: usize,
    /// Channels after the codec's 1x1 reduction.
    pub jscc_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_shape: [1, 16, 16],
            stage_channels: vec![16, 32, 64],
            split_after_stage: 2,
            num_classes: 10,
            early_hidden: 64,
            final_hidden: 128,
            jscc_channels: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_channels.len();
        if stages < 2 {
            return Err(Error::Config("model.stage_channels needs at least 2 stages".into()));
        }
        if !(1..stages).contains(&self.split_after_stage) {
            return Err(Error::Config(format!(
                "model.split_after_stage must be in [1, {}), got {}",
                stages, self.split_after_stage
            )));
        }
        let [c, h, w] = self.input_shape;
        let div = 1usize << stages;
        if c == 0 || h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "model.input_shape {:?} must have H and W divisible by {div}",
                self.input_shape
            )));
        }
        let positive = [
            ("num_classes", self.num_classes >= 2),
            ("early_hidden", self.early_hidden > 0),
            ("final_hidden", self.final_hidden > 0),
            ("jscc_channels", self.jscc_channels > 0),
            ("stage_channels", self.stage_channels.iter().all(|&c| c > 0)),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, ok)| !ok) {
            return Err(Error::Config(format!("model.{name} out of range")));
        }
        Ok(())
    }

    /// `(C, H, W)` of the features leaving stage `stage` (1-based; 0 = input).
    pub fn shape_after(&self, stage: usize) -> [usize; 3] {
        let [c, h, w] = self.input_shape;
        if stage == 0 {
            return [c, h, w];
        }
        let f = 1 << stage;
        [self.stage_channels[stage - 1], h / f, w / f]
    }

    pub fn split_shape(&self) -> [usize; 3] {
        self.shape_after(self.split_after_stage)
    }

    fn final_shape(&self) -> [usize; 3] {
        self.shape_after(self.stage_channels.len())
    }

    fn stage_prefix(&self, stage: usize) -> String {
        let part = if stage < self.split_after_stage { EDGE } else { SERVER };
        format!("{part}.conv{stage}")
    }
}

/// The full classifier with a single registry partitioned by name prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitClassifier {
    pub config: ModelConfig,
    pub channel: ChannelConfig,
    pub params: ParamRegistry,
}

impl SplitClassifier {
    pub fn new(config: ModelConfig, channel: ChannelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        channel.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamRegistry::new();
        let cfg = &config;

        for (stage, &f) in cfg.stage_channels.iter().enumerate() {
            let c = cfg.shape_after(stage)[0];
            params.insert_layer(&cfg.stage_prefix(stage), vec![f, c, 3, 3], c * 9, 2.0, &mut rng)?;
        }
        let [sc, sh, sw] = cfg.split_shape();
        let k = cfg.num_classes;
        params.insert_layer("early.fc0", vec![sc, cfg.early_hidden], sc, 2.0, &mut rng)?;
        params.insert_layer("early.fc1", vec![cfg.early_hidden, k], cfg.early_hidden, 1.0, &mut rng)?;

        let jc = cfg.jscc_channels;
        let code = jc * sh * sw;
        let b = channel.bandwidth;
        params.insert_layer("jscc_enc.conv", vec![jc, sc, 1, 1], sc, 2.0, &mut rng)?;
        params.insert_layer("jscc_enc.fc", vec![code, b], code, 1.0, &mut rng)?;
        params.insert_layer("jscc_dec.fc", vec![b, code], b, 2.0, &mut rng)?;
        params.insert_layer("jscc_dec.conv", vec![sc, jc, 1, 1], jc, 2.0, &mut rng)?;

        let [fc, fh, fw] = cfg.final_shape();
        let flat = fc * fh * fw;
        params.insert_layer("server.fc0", vec![flat, cfg.final_hidden], flat, 2.0, &mut rng)?;
        params.insert_layer("server.fc1", vec![cfg.final_hidden, k], cfg.final_hidden, 1.0, &mut rng)?;

        Ok(SplitClassifier {
            config,
            channel,
            params,
        })
    }

    fn dense(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let w = tape.param(&self.params, &format!("{prefix}.weight"))?;
        let b = tape.param(&self.params, &format!("{prefix}.bias"))?;
        tape.linear(x, w, b)
    }

    fn conv(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let k = tape.param(&self.params, &format!("{prefix}.weight"))?;
        let b = tape.param(&self.params, &format!("{prefix}.bias"))?;
        tape.conv2d(x, k, b)
    }

    fn stage(&self, tape: &mut Tape, x: Var, stage: usize) -> Result<Var> {
        let y = self.conv(tape, x, &self.config.stage_prefix(stage))?;
        let y = tape.relu(y);
        tape.pool2d(y, PoolKind::Max)
    }

    fn check_sample_shape(&self, t: &Tensor, expect: [usize; 3], op: &'static str) -> Result<()> {
        match t.shape() {
            [_, rest @ ..] if rest == expect => Ok(()),
            s => Err(Error::dim(op, format!("expected [N, {expect:?}], got {s:?}"))),
        }
    }

    /// Stages `1..=split_after_stage`.
    pub fn forward_edge(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        self.check_sample_shape(tape.value(input), self.config.input_shape, "forward_edge")?;
        let mut x = input;
        for stage in 0..self.config.split_after_stage {
            x = self.stage(tape, x, stage)?;
        }
        Ok(x)
    }

    /// Global average pool, dense + ReLU, dense + softmax.
    pub fn early_exit(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let x = tape.global_avg_pool(features)?;
        let x = self.dense(tape, x, "early.fc0")?;
        let x = tape.relu(x);
        let x = self.dense(tape, x, "early.fc1")?;
        tape.softmax(x)
    }

    /// Maps split features to `B` power-normalized channel symbols per sample.
    pub fn jscc_encode(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        self.check_sample_shape(tape.value(features), self.config.split_shape(), "jscc_encode")?;
        let x = self.conv(tape, features, "jscc_enc.conv")?;
        let x = tape.relu(x);
        let x = tape.flatten(x)?;
        let x = self.dense(tape, x, "jscc_enc.fc")?;
        tape.power_normalize(x, self.channel.power)
    }

    /// Maps received symbols back to split-shaped features.
    pub fn jscc_decode(&self, tape: &mut Tape, received: Var) -> Result<Var> {
        let n = tape.value(received).shape()[0];
        if tape.value(received).shape() != [n, self.channel.bandwidth] {
            return Err(Error::dim(
                "jscc_decode",
                format!(
                    "expected [N, {}], got {:?}",
                    self.channel.bandwidth,
                    tape.value(received).shape()
                ),
            ));
        }
        let [_, sh, sw] = self.config.split_shape();
        let x = self.dense(tape, received, "jscc_dec.fc")?;
        let x = tape.reshape(x, vec![n, self.config.jscc_channels, sh, sw])?;
        let x = tape.relu(x);
        let x = self.conv(tape, x, "jscc_dec.conv")?;
        Ok(tape.relu(x))
    }

    /// Remaining stages and the final classifier head.
    pub fn forward_server(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        self.check_sample_shape(tape.value(features), self.config.split_shape(), "forward_server")?;
        let mut x = features;
        for stage in self.config.split_after_stage..self.config.stage_channels.len() {
            x = self.stage(tape, x, stage)?;
        }
        let x = tape.flatten(x)?;
        let x = self.dense(tape, x, "server.fc0")?;
        let x = tape.relu(x);
        let x = self.dense(tape, x, "server.fc1")?;
        tape.softmax(x)
    }

    /// Snapshot of one partition, for freeze checks.
    pub fn partition(&self, name: &str) -> ParamRegistry {
        self.params.partition(name)
    }
}

/// Parts reported by [`count_flops`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopPart {
    TdNn,
    EarlyHead,
    EdgePart,
    FullDnn,
}

impl FlopPart {
    pub const ALL: [FlopPart; 4] = [FlopPart::TdNn, FlopPart::EarlyHead, FlopPart::EdgePart, FlopPart::FullDnn];

    pub fn name(self) -> &'static str {
        match self {
            FlopPart::TdNn => "td_nn",
            FlopPart::EarlyHead => "early_head",
            FlopPart::EdgePart => "edge_part",
            FlopPart::FullDnn => "full_dnn",
        }
    }
}

/// `I*O + O`: one FLOP per multiply-accumulate plus the bias adds.
pub fn linear_flops(inputs: usize, outputs: usize) -> u64 {
    (inputs * outputs + outputs) as u64
}

/// `F*C*k*k*H*W + F*H*W` at the conv's (pre-pool) resolution.
pub fn conv_flops(in_ch: usize, out_ch: usize, kernel: usize, h: usize, w: usize) -> u64 {
    (out_ch * in_ch * kernel * kernel * h * w + out_ch * h * w) as u64
}

fn stage_flops(cfg: &ModelConfig, stage: usize) -> u64 {
    let [c, h, w] = cfg.shape_after(stage);
    conv_flops(c, cfg.stage_channels[stage], 3, h, w)
}

/// Backbone stages after the split plus the final head.
pub fn server_flops(cfg: &ModelConfig) -> u64 {
    let [fc, fh, fw] = cfg.final_shape();
    (cfg.split_after_stage..cfg.stage_channels.len())
        .map(|s| stage_flops(cfg, s))
        .sum::<u64>()
        + linear_flops(fc * fh * fw, cfg.final_hidden)
        + linear_flops(cfg.final_hidden, cfg.num_classes)
}

/// FLOPs of one forward pass of `part`; pooling and activations are free.
pub fn count_flops(part: FlopPart, model: &ModelConfig, td: &TdNnConfig) -> u64 {
    match part {
        FlopPart::TdNn => {
            let n = td.input_dim(model.num_classes);
            linear_flops(n, td.hidden_width)
                + linear_flops(td.hidden_width, td.hidden_width)
                + linear_flops(td.hidden_width, 1)
        }
        FlopPart::EarlyHead => {
            linear_flops(model.split_shape()[0], model.early_hidden)
                + linear_flops(model.early_hidden, model.num_classes)
        }
        FlopPart::EdgePart => (0..model.split_after_stage).map(|s| stage_flops(model, s)).sum(),
        FlopPart::FullDnn => count_flops(FlopPart::EdgePart, model, td) + server_flops(model),
    }
}
