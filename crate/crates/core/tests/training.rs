use tdu_core::data::{generate_synthetic_dataset, SyntheticSpec};
use tdu_core::model::{prepare, Example};
use tdu_core::tokenizer::build_vocab;
use tdu_core::train::{train, Splits, TrainState};
use tdu_core::{Error, ModelConfig, ModelParams, TrainConfig};

struct Data {
    config: ModelConfig,
    train: Vec<Example>,
    val: Vec<Example>,
    test: Vec<Example>,
}

fn data(spec: &SyntheticSpec, hidden: usize, heads: usize) -> Data {
    let (scenes, split) = generate_synthetic_dataset(spec).unwrap();
    let corpus: Vec<&str> = scenes
        .iter()
        .flat_map(|s| s.instructions.iter().map(|i| i.text.as_str()))
        .collect();
    let vocab = build_vocab(&corpus, 4682).unwrap();
    let config = ModelConfig {
        layers: 2,
        hidden,
        heads,
        vocab_size: vocab.len(),
        feat_dim: spec.feature_dim(),
        ..ModelConfig::default()
    };
    Data {
        train: prepare(&split.train, &vocab, &config).unwrap(),
        val: prepare(&split.validation, &vocab, &config).unwrap(),
        test: prepare(&split.test, &vocab, &config).unwrap(),
        config,
    }
}

fn splits(d: &Data) -> Splits<'_> {
    Splits { train: &d.train, validation: &d.val, test: &d.test }
}

#[test]
fn runs_with_the_same_seed_are_identical() {
    let spec = SyntheticSpec { train_scenes: 30, val_scenes: 5, test_scenes: 5, seed: 9, ..SyntheticSpec::default() };
    let d = data(&spec, 16, 2);
    let tc = TrainConfig { steps: 30, eval_every: 10, seed: 9, ..TrainConfig::default() };
    let run = || {
        let params = ModelParams::new(d.config.clone(), 9).unwrap();
        train(TrainState::fresh(params), splits(&d), &tc, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log.records.len(), 3);
    assert_eq!(a.log.to_jsonl().unwrap(), b.log.to_jsonl().unwrap());
    assert_eq!(a.params, b.params);

    let other = TrainConfig { seed: 10, ..tc };
    let params = ModelParams::new(d.config.clone(), 9).unwrap();
    let c = train(TrainState::fresh(params), splits(&d), &other, None).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn eval_records_follow_the_cadence() {
    let spec = SyntheticSpec { train_scenes: 20, val_scenes: 4, test_scenes: 4, ..SyntheticSpec::default() };
    let d = data(&spec, 8, 2);
    let tc = TrainConfig { steps: 25, eval_every: 5, ..TrainConfig::default() };
    let state = train(TrainState::fresh(ModelParams::new(d.config.clone(), 0).unwrap()), splits(&d), &tc, None).unwrap();
    let steps: Vec<usize> = state.log.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, [5, 10, 15, 20, 25]);
    for r in &state.log.records {
        assert_eq!(r.val_confusion.total() as usize, d.val.len());
        assert_eq!(r.test_confusion.total() as usize, d.test.len());
    }
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let spec = SyntheticSpec { train_scenes: 10, val_scenes: 2, test_scenes: 2, ..SyntheticSpec::default() };
    let d = data(&spec, 8, 2);
    let mut params: ModelParams<f32> = ModelParams::new(d.config.clone(), 0).unwrap();
    let head = params.head.w;
    params.store.get_mut(head).data_mut()[0] = f32::NAN;
    let tc = TrainConfig { steps: 4, eval_every: 2, ..TrainConfig::default() };
    match train(TrainState::fresh(params), splits(&d), &tc, None) {
        Err(Error::Diverged { step }) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn toy_task_loss_decreases() {
    let spec = SyntheticSpec { val_scenes: 5, test_scenes: 5, ..SyntheticSpec::default() };
    let d = data(&spec, 64, 4);
    assert_eq!(d.train.len(), 2000);
    let tc = TrainConfig { steps: 3000, eval_every: 100, ..TrainConfig::default() };
    let state = train(TrainState::fresh(ModelParams::new(d.config.clone(), 0).unwrap()), splits(&d), &tc, None).unwrap();
    let at = |step: usize| state.log.records.iter().find(|r| r.step == step).unwrap().train_loss;
    assert!(at(3000) < at(100), "loss at 3000 {} vs at 100 {}", at(3000), at(100));
}
