use memwarp::eval::{evaluate, evaluate_propagation, EvalOptions, PropagationMode};
use memwarp::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, Variant};
use memwarp::training::{train, TrainConfig, TrainSet};
use memwarp::worldgen::{generate_dataset, load_dataset, save_dataset, SceneSampler};

fn tiny_train() -> TrainConfig {
    TrainConfig { epochs: 2, sequence_length: 4, ..TrainConfig::default() }
}

#[test]
fn train_save_load_evaluate() {
    let sampler = SceneSampler::default();
    let train_data = generate_dataset(&sampler, 3, 6, 11).unwrap();
    let val = generate_dataset(&sampler, 2, 10, 12).unwrap();
    let config = ModelConfig { variant: Variant::MemNet, ..ModelConfig::default() };
    let (model, params) = Model::build::<f32>(&config, 5).unwrap();
    let outcome = train(&model, params, &TrainSet::new(&train_data), None, &tiny_train(), None).unwrap();
    assert_eq!(outcome.epoch_losses.len(), 2);
    assert!(outcome.epoch_losses.iter().all(|l| l.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&config, 5, &outcome.params, dir.path().join("ck")).unwrap();
    let (loaded, loaded_params) = load_checkpoint(dir.path().join("ck")).unwrap();
    assert_eq!(loaded.config, config);

    let options = EvalOptions::default();
    let before = evaluate(&model, &outcome.params, &val, &options).unwrap();
    let after = evaluate(&loaded, &loaded_params, &val, &options).unwrap();
    assert_eq!(before, after);

    // at delta 0 both propagation modes see every frame
    let feature = evaluate_propagation(&model, &outcome.params, &val, &[0, 2], PropagationMode::FeatureProp, &options).unwrap();
    let boxes = evaluate_propagation(&model, &outcome.params, &val, &[0, 2], PropagationMode::BoxProp, &options).unwrap();
    assert_eq!(feature[0].map, boxes[0].map);
    assert_eq!(feature.len(), 2);
}

#[test]
fn datasets_round_trip_through_disk() {
    let data = generate_dataset(&SceneSampler::default(), 2, 5, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.fields, b.fields);
        assert_eq!(a.boxes, b.boxes);
    }
}

#[test]
fn loading_garbage_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("seq_0000")).unwrap();
    std::fs::write(dir.path().join("seq_0000/meta.json"), "{ not json").unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.is_data_error(), "{err}");
}
