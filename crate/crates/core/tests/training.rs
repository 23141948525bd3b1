use edgexit::channel::ChannelConfig;
use edgexit::data::{synth_generate, Checkpoint, Dataset, Split, SynthConfig};
use edgexit::model::{ModelConfig, SplitClassifier, EARLY, EDGE, JSCC_DEC, JSCC_ENC, SERVER};
use edgexit::nn::{ParamRegistry, Tape, Tensor};
use edgexit::policy::{TdFeature, TdNet, TdNnConfig};
use edgexit::train::{
    loss_gt, stage1_train, stage2_train, stage3_train_td, Criterion, TrainConfig,
};

fn model_cfg() -> ModelConfig {
    ModelConfig {
        input_shape: [1, 8, 8],
        stage_channels: vec![6, 8],
        split_after_stage: 1,
        num_classes: 3,
        early_hidden: 8,
        final_hidden: 12,
        jscc_channels: 2,
    }
}

fn channel() -> ChannelConfig {
    ChannelConfig {
        bandwidth: 8,
        ..ChannelConfig::default()
    }
}

fn data() -> Dataset {
    let cfg = SynthConfig {
        num_classes: 3,
        geometry: [1, 8, 8],
        train_per_class: 40,
        test_per_class: 10,
        difficulty: 0.5,
        max_shift: 1,
        seed: 3,
    };
    synth_generate(&cfg, Split::Train).unwrap()
}

fn train_cfg(epochs: [usize; 3]) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        stage_epochs: epochs,
        seed: 4,
        td: TdNnConfig {
            hidden_width: 16,
            ..TdNnConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn fresh() -> SplitClassifier {
    SplitClassifier::new(model_cfg(), channel(), 1).unwrap()
}

fn same_values(a: &ParamRegistry, b: &ParamRegistry) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| na == nb && ta.data() == tb.data())
}

#[test]
fn stage1_learns_and_leaves_codec_untouched() {
    let mut model = fresh();
    let before = model.clone();
    let log = stage1_train(&mut model, &data(), &train_cfg([12, 0, 0])).unwrap();
    assert_eq!(log.len(), 12);
    assert!(log.last().unwrap().loss < log[0].loss);
    assert!(log.last().unwrap().acc_final > 0.6, "{:?}", log.last());
    for part in [JSCC_ENC, JSCC_DEC] {
        assert!(same_values(&before.partition(part), &model.partition(part)), "{part} moved");
    }
    assert!(!same_values(&before.partition(EDGE), &model.partition(EDGE)));
}

#[test]
fn stage2_codec_phase_freezes_classifier() {
    let mut model = fresh();
    let before = model.clone();
    let cfg = TrainConfig {
        codec_only_epochs: Some(2),
        ..train_cfg([0, 2, 0])
    };
    let log = stage2_train(&mut model, &data(), &cfg, &channel()).unwrap();
    assert!(log.iter().all(|r| r.phase.as_deref() == Some("codec")));
    for part in [EDGE, EARLY, SERVER] {
        assert!(same_values(&before.partition(part), &model.partition(part)), "{part} moved");
    }
    assert!(!same_values(&before.partition(JSCC_ENC), &model.partition(JSCC_ENC)));
}

#[test]
fn stage2_end_to_end_phase_moves_everything() {
    let mut model = fresh();
    let before = model.clone();
    let cfg = TrainConfig {
        codec_only_epochs: Some(1),
        ..train_cfg([0, 2, 0])
    };
    let log = stage2_train(&mut model, &data(), &cfg, &channel()).unwrap();
    assert_eq!(log[1].phase.as_deref(), Some("end_to_end"));
    for part in [EDGE, EARLY, JSCC_ENC, JSCC_DEC, SERVER] {
        assert!(!same_values(&before.partition(part), &model.partition(part)), "{part} frozen");
    }
}

#[test]
fn stage3_freezes_classifier_and_marks_trained() {
    for criterion in [Criterion::JointCe, Criterion::BceGt, Criterion::Mixed] {
        let mut model = fresh();
        let before = model.clone();
        let cfg = TrainConfig {
            criterion,
            ..train_cfg([0, 0, 2])
        };
        let (td, log) = stage3_train_td(&mut model, &data(), &cfg, &channel()).unwrap();
        assert!(td.trained);
        assert!(same_values(&before.params, &model.params), "{criterion:?}");
        assert!(log.iter().all(|r| r.savings.is_some() && r.acc_joint.is_some()));
        assert!(log.iter().all(|r| r.loss >= 0.0));
    }
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut model = fresh();
        let cfg = train_cfg([2, 2, 1]);
        let d = data();
        let mut log = stage1_train(&mut model, &d, &cfg).unwrap();
        log.extend(stage2_train(&mut model, &d, &cfg, &channel()).unwrap());
        let (td, l3) = stage3_train_td(&mut model, &d, &cfg, &channel()).unwrap();
        log.extend(l3);
        let ck = Checkpoint {
            model,
            td: Some(td),
            stage_completed: 3,
            seed: cfg.seed,
        };
        (serde_json::to_string(&log).unwrap(), ck.to_bytes().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_is_reported() {
    let mut model = fresh();
    model.params.get_mut("server.fc1.weight").unwrap().data_mut()[0] = f64::NAN;
    let err = stage1_train(&mut model, &data(), &train_cfg([1, 0, 0])).unwrap_err();
    assert!(matches!(err, edgexit::Error::NonFiniteLoss { stage: 1, epoch: 0, batch: 0, .. }));
}

/// On separable targets (transmit exactly when the SNR feature is positive)
/// the Bayes BCE is zero; gradient descent on `loss_gt` with no penalty
/// should approach it.
#[test]
fn bce_criterion_fits_separable_targets() {
    let cfg = TdNnConfig {
        input_features: vec![TdFeature::Snr],
        hidden_width: 8,
        temperature: 1.0,
    };
    let mut td = TdNet::new(cfg, 3, 2).unwrap();
    let snrs: Vec<f64> = (0..40).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / 40.0).collect();
    let x = Tensor::new(vec![40, 1], snrs.clone()).unwrap();
    let targets: Vec<f64> = snrs.iter().map(|&s| if s > 0.0 { 0.0 } else { 1.0 }).collect();
    let mut loss = f64::INFINITY;
    for _ in 0..3000 {
        let mut tape = Tape::new();
        let xin = tape.constant(x.clone());
        let raw = td.forward(&mut tape, xin).unwrap();
        let d = tape.tempered_sigmoid(raw, 1.0);
        let l = loss_gt(&mut tape, d, &targets, 0.0).unwrap();
        loss = tape.value(l).item().unwrap();
        tape.backward(l, &mut td.params).unwrap();
        td.params.sgd_step(0.5).unwrap();
    }
    assert!(loss < 0.05, "final BCE {loss}");
}
