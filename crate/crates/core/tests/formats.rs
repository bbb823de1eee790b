use std::fs;
use std::path::{Path, PathBuf};

use motion_code::data_io::{self, format_ragged, load_model, read_ragged, save_model, Format, LabelMap, ModelFile};
use motion_code::types::{Hyperparams, ValueScale};
use motion_code::{init_params, Error};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn ragged_golden_parses() {
    let file = read_ragged(golden("ragged_example.jsonl")).unwrap();
    assert_eq!(file.records.len(), 3);
    assert_eq!(file.lines, vec![3, 5, 6]);
    assert_eq!(file.records[2].y, vec![1e-3, -250.0, 0.1]);
    let loaded = data_io::load(golden("ragged_example.jsonl"), Format::Ragged).unwrap();
    assert_eq!(loaded.labels.labels, vec![3, 7]);
    let c3 = &loaded.dataset.collections()[0];
    assert_eq!(c3.len(), 2);
    assert_eq!(c3.series()[0].timestamps(), &[0.0, 0.05, 0.16]);
    assert_eq!(c3.series()[1].timestamps()[2], 1.0);
    let c7 = &loaded.dataset.collections()[1];
    assert_eq!(c7.series()[0].timestamps(), &[0.012, 0.036]);
}

#[test]
fn ragged_golden_canonical_form() {
    let file = read_ragged(golden("ragged_example.jsonl")).unwrap();
    let expected = fs::read_to_string(golden("ragged_canonical.jsonl")).unwrap();
    assert_eq!(format_ragged(&file), expected);
    let again = read_ragged(golden("ragged_canonical.jsonl")).unwrap();
    assert_eq!(again.records, file.records);
}

#[test]
fn ucr_golden() {
    let loaded = data_io::load(golden("ucr_example.tsv"), Format::Ucr).unwrap();
    assert_eq!(loaded.labels, LabelMap { labels: vec![3, 7] });
    let s = &loaded.dataset.collections()[1].series()[0];
    assert_eq!(s.timestamps(), &[0.0, 0.5, 1.0]);
    let vs = loaded.dataset.value_scale();
    let back: Vec<f64> = s.values().iter().map(|v| vs.to_original(*v)).collect();
    for (a, b) in back.iter().zip([1.0, 2.0, 3.0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn model_file_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let params = init_params(2, Hyperparams::default());
    let file = ModelFile::from_params(&params, &LabelMap::identity(2), ValueScale::identity(), None).unwrap();
    save_model(&path, &file).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.params().unwrap(), params);

    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Version { found: 99, .. })));

    fs::write(&path, text.replacen("\"lambda\": 1.0", "\"lambda\": \"x\"", 1)).unwrap();
    match load_model(&path) {
        Err(Error::Field { field, .. }) => assert_eq!(field, "hyper.lambda"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_file_names_the_path() {
    let err = data_io::load("/no/such/file.jsonl", Format::Ragged).unwrap_err();
    assert!(err.to_string().contains("/no/such/file.jsonl"));
}
