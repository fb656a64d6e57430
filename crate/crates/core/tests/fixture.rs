use std::path::PathBuf;

use axcv::nn::{load_model, reference, Dataset, InferenceConfig, PreparedModel, QuantizedModel};
use axcv::{AxMultConfig, MultKind};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn model() -> QuantizedModel {
    load_model(fixtures().join("digits_cnn.axm")).unwrap()
}

fn dataset() -> Dataset {
    Dataset::load(fixtures().join("digits_test")).unwrap()
}

#[test]
fn fixture_loads_with_manifest() {
    let model = model();
    let lines = model.manifest_lines();
    assert_eq!(lines.len(), model.layers.len());
    assert!(lines[0].contains("conv1"));
    assert!(lines.last().unwrap().contains("class"));
    let data = dataset();
    assert_eq!(data.len(), 1000);
    assert_eq!(data.shape, model.input_shape);
}

#[test]
fn exact_accuracy_matches_recorded_reference() {
    let model = model();
    let data = dataset();
    let report = PreparedModel::new(&model, InferenceConfig::exact())
        .unwrap()
        .evaluate(&data, false)
        .unwrap();
    let recorded = model.metadata["reference_correct"].as_u64().unwrap() as usize;
    assert_eq!(report.correct, recorded);
    assert_eq!(report.accuracy, model.metadata["reference_accuracy"].as_f64().unwrap());
}

#[test]
fn engine_exact_path_matches_reference_on_every_image() {
    let model = model();
    let data = dataset();
    let prepared = PreparedModel::new(&model, InferenceConfig::exact()).unwrap();
    for i in 0..data.len() {
        let image = data.image(i);
        assert_eq!(prepared.infer(image).unwrap(), reference::infer(&model, image).unwrap(), "image {i}");
    }
}

#[test]
fn exact_logits_match_generator_reference() {
    let model = model();
    let data = dataset();
    let text = std::fs::read_to_string(fixtures().join("digits_test_logits.csv")).unwrap();
    let prepared = PreparedModel::new(&model, InferenceConfig::exact()).unwrap();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let want: Vec<i64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(prepared.infer(data.image(i)).unwrap().logits, want, "image {i}");
        rows += 1;
    }
    assert_eq!(rows, data.len());
}

#[test]
fn zero_level_configs_give_identical_predictions() {
    let model = model();
    let mut data = dataset();
    data.truncate(200);
    let exact = PreparedModel::new(&model, InferenceConfig::exact())
        .unwrap()
        .evaluate(&data, false)
        .unwrap();
    for kind in [MultKind::Perforated, MultKind::Recursive, MultKind::Truncated] {
        let cfg = AxMultConfig::new(kind, 0).unwrap();
        for variate in [false, true] {
            let report = PreparedModel::new(&model, InferenceConfig::new(cfg, variate))
                .unwrap()
                .evaluate(&data, true)
                .unwrap();
            assert_eq!(report.predictions, exact.predictions);
            assert!(report.per_layer_mse.iter().all(|l| l.mse == 0.0));
        }
    }
}
