use std::fs;
use std::path::Path;

use oodbench::data::{load_session, payload, save_session, trial_average, Manifest, ResponseTensor};
use oodbench::synth::{generate_session, GroundTruthKind, ImageMode, SynthConfig};
use oodbench::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_session(extra_trials: usize) -> oodbench::synth::SynthSession {
    generate_session(&SynthConfig {
        n_images: 100,
        d: 12,
        n_neurons: 5,
        extra_trials,
        ground_truth: GroundTruthKind::Linear,
        ..SynthConfig::nonlinear("roundtrip", 3)
    })
    .unwrap()
}

#[test]
fn synth_session_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_session(3);
    let manifest = s.write(dir.path()).unwrap();
    let loaded = load_session(&manifest).unwrap();
    assert_eq!(loaded.n_images(), 100);
    assert_eq!(loaded.n_neurons(), 5);
    let (a, b) = (s.dataset.feature("synth/features").unwrap(), loaded.feature("synth/features").unwrap());
    assert_eq!(a.n_cols(), 12);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.data()), bits(b.data()));
    assert_eq!(s.dataset.responses, loaded.responses);
    assert_eq!(s.dataset.attributes, loaded.attributes);
}

#[test]
fn save_then_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_session(0);
    let manifest = save_session(&s.dataset, dir.path()).unwrap();
    let loaded = load_session(&manifest).unwrap();
    assert_eq!(loaded, s.dataset);
}

#[test]
fn raster_session_paths_resolve_against_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_session(&SynthConfig {
        n_images: 12,
        d: 4,
        n_neurons: 2,
        image_mode: ImageMode::ProceduralRasters,
        ..SynthConfig::nonlinear("rasters", 8)
    })
    .unwrap();
    let manifest = s.write(dir.path()).unwrap();
    let loaded = load_session(&manifest).unwrap();
    let paths = loaded.image_paths.unwrap();
    assert_eq!(paths.len(), 12);
    assert!(paths.iter().all(|p| p.is_file()), "{paths:?}");
    assert!(loaded.attributes.is_none());
}

fn edit_manifest(path: &Path, f: impl FnOnce(&mut Manifest)) {
    let mut m = Manifest::read(path).unwrap();
    f(&mut m);
    fs::write(path, serde_json::to_string(&m).unwrap()).unwrap();
}

#[test]
fn feature_rows_must_match_image_count() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_session(&small_session(0).dataset, dir.path()).unwrap();
    let short: Vec<f32> = vec![0.5; 99 * 12];
    payload::write(&dir.path().join("short.bin"), &[99, 12], &short).unwrap();
    edit_manifest(&manifest, |m| {
        m.features[0].path = "short.bin".into();
        m.features[0].dims = [99, 12];
    });
    let err = load_session(&manifest).unwrap_err();
    assert!(
        matches!(err, Error::DimensionMismatch { expected: 100, found: 99, .. }),
        "{err}"
    );
    let msg = err.to_string();
    assert!(msg.contains("100") && msg.contains("99") && msg.contains("short.bin"), "{msg}");
}

#[test]
fn declared_dims_must_match_payload() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_session(&small_session(0).dataset, dir.path()).unwrap();
    edit_manifest(&manifest, |m| m.features[0].dims = [100, 13]);
    let err = load_session(&manifest).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { expected: 13, found: 12, .. }), "{err}");
}

#[test]
fn non_finite_feature_reports_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_session(&small_session(0).dataset, dir.path()).unwrap();
    let mut data = vec![1.0f32; 100 * 12];
    data[7 * 12 + 4] = f32::NAN;
    payload::write(&dir.path().join("nan.bin"), &[100, 12], &data).unwrap();
    edit_manifest(&manifest, |m| m.features[0].path = "nan.bin".into());
    let err = load_session(&manifest).unwrap_err();
    assert!(matches!(err, Error::NonFinite { row: 7, col: 4, .. }), "{err}");
}

#[test]
fn missing_payload_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_session(&small_session(0).dataset, dir.path()).unwrap();
    edit_manifest(&manifest, |m| m.responses.path = "gone.bin".into());
    let err = load_session(&manifest).unwrap_err();
    assert!(err.to_string().contains("gone.bin"), "{err}");
}

#[test]
fn trial_count_total_must_match_response_payload() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_session(&small_session(0).dataset, dir.path()).unwrap();
    edit_manifest(&manifest, |m| m.responses.trial_counts[0] += 1);
    assert!(load_session(&manifest).is_err());
}

#[test]
fn trial_average_matches_per_cell_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (images, neurons) = (30, 4);
    let counts: Vec<usize> = (0..images).map(|_| rng.random_range(1..6)).collect();
    let mut cells = vec![vec![Vec::new(); neurons]; images];
    let mut values = Vec::new();
    for (i, &t) in counts.iter().enumerate() {
        for _ in 0..t {
            for cell in cells[i].iter_mut() {
                let v = rng.random_range(0.0..50.0);
                cell.push(v);
                values.push(v);
            }
        }
    }
    let tensor = ResponseTensor::new(neurons, counts, values).unwrap();
    let avg = trial_average(&tensor);
    for (i, row) in cells.iter().enumerate() {
        for (e, cell) in row.iter().enumerate() {
            let expected = cell.iter().sum::<f64>() / cell.len() as f64;
            assert!((avg[(i, e)] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn trial_average_examples() {
    let single = ResponseTensor::new(1, vec![1, 1], vec![3.5, 7.25]).unwrap();
    let avg = trial_average(&single);
    assert_eq!((avg[(0, 0)], avg[(1, 0)]), (3.5, 7.25));
    let pair = ResponseTensor::new(1, vec![2], vec![2.0, 4.0]).unwrap();
    assert_eq!(trial_average(&pair)[(0, 0)], 3.0);
}

#[test]
fn rejects_negative_and_nan_responses() {
    assert!(ResponseTensor::new(1, vec![2], vec![1.0, -0.5]).is_err());
    assert!(ResponseTensor::new(1, vec![2], vec![1.0, f64::NAN]).is_err());
    assert!(ResponseTensor::new(1, vec![0, 1], vec![1.0]).is_err());
}
