use smnarx::dataset::{split_dataset, TrajectoryDataset};
use smnarx::model::SmnarxModel;
use smnarx::simulate::{benchmark_system, simulate, TrueSystem};

#[test]
fn dataset_csv_round_trip_is_exact() {
    let raw = (0..).find_map(|s| simulate(&benchmark_system(), 1500, s).ok()).unwrap();
    let data = split_dataset(&raw, 1000, 250, 250, 200).unwrap();
    let mut buf = Vec::new();
    data.write_csv(&mut buf, true).unwrap();
    let back = TrajectoryDataset::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back, data);

    let mut buf = Vec::new();
    data.write_csv(&mut buf, false).unwrap();
    let back = TrajectoryDataset::read_csv(buf.as_slice()).unwrap();
    assert!(!back.has_modes());
    assert_eq!(back.segments.len(), data.segments.len());
    for (a, b) in back.segments.iter().zip(&data.segments) {
        assert_eq!(a.outputs, b.outputs);
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.split, b.split);
    }
}

#[test]
fn model_and_system_json_round_trip() {
    let truth = benchmark_system();
    let json = serde_json::to_string(&truth.model).unwrap();
    let back: SmnarxModel = serde_json::from_str(&json).unwrap();
    assert_eq!(back, truth.model);

    let json = serde_json::to_string(&truth).unwrap();
    let back: TrueSystem = serde_json::from_str(&json).unwrap();
    assert_eq!(back, truth);
}

#[test]
fn invalid_model_json_is_rejected() {
    let truth = benchmark_system();
    let mut value = serde_json::to_value(&truth.model).unwrap();
    value["sigma2"] = serde_json::json!(-1.0);
    assert!(serde_json::from_value::<SmnarxModel>(value).is_err());
}
