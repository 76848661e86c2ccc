//! Datasets, parameters and probability maps on disk.

use ctseg::dataset::{load_manifest, load_sample};
use ctseg::format::{load_probmap, save_probmap};
use ctseg::model::{load_params, save_params, PredictorParams, FEATURE_VERSION, NUM_FEATURES};
use ctseg::synth::{generate_cases, generate_dataset, oracle_probmap, DatasetSpec};
use ctseg::Error;

fn spec() -> DatasetSpec {
    DatasetSpec {
        n: 4,
        size: (16, 24),
        slices: (3, 6),
        seed: 12,
        ..DatasetSpec::default()
    }
}

#[test]
fn generated_dataset_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let written = generate_dataset(&spec(), dir.path()).unwrap();
    let loaded = load_manifest(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(loaded, written);
    for (record, case) in loaded.records().iter().zip(generate_cases(&spec()).unwrap()) {
        let sample = load_sample(record).unwrap();
        assert_eq!(record.id, case.id);
        assert_eq!(record.slice_count, case.volume.dims().nz);
        assert_eq!(sample.volume, case.volume);
        assert_eq!(sample.labels.unwrap(), case.labels);
    }
}

#[test]
fn params_and_probmaps_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let params = PredictorParams::random(FEATURE_VERSION, 3, NUM_FEATURES, 4).unwrap();
    let path = dir.path().join("m.prm");
    save_params(&params, &path).unwrap();
    assert_eq!(load_params(&path).unwrap(), params);

    let case = &generate_cases(&spec()).unwrap()[0];
    let map = oracle_probmap(&case.labels, 0.75).unwrap();
    let path = dir.path().join("m.pmap");
    save_probmap(&map, &path).unwrap();
    assert_eq!(load_probmap(&path).unwrap(), map);
}

#[test]
fn missing_and_truncated_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_params(dir.path().join("absent.prm")), Err(Error::Io { .. })));
    let manifest = generate_dataset(&spec(), dir.path()).unwrap();
    let record = &manifest.records()[0];
    let bytes = std::fs::read(&record.volume_path).unwrap();
    std::fs::write(&record.volume_path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(load_sample(record), Err(Error::Truncation { .. })));
}
