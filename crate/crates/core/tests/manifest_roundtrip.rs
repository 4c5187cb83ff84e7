use std::fs;

use qground_core::dataset::{load_manifest, DatasetManifest, ManifestError, Region, ViolationKind};
use qground_core::synth::{pattern_image, random_specs, synth_triplet, TextTemplates};
use qground_core::{Dims, RegionMask};

fn corpus(n: usize) -> Vec<qground_core::dataset::QualityTriplet> {
    let d = Dims::new(24, 32).unwrap();
    let base = pattern_image(32, 24, 1);
    let templates = TextTemplates::default();
    (0..n)
        .map(|i| {
            let specs = random_specs(d, 1 + i % 4, i as u64).unwrap();
            let id = format!("s{i}");
            synth_triplet(&id, &format!("{id}.png"), &base, &specs, &templates, i as u64).unwrap().triplet
        })
        .collect()
}

#[test]
fn inline_masks_survive_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let m = DatasetManifest::new(dir.path(), corpus(12));
    m.save(&path).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.items, m.items);
    assert_eq!(back.root, dir.path());
    assert_eq!(back.to_jsonl().unwrap(), fs::read_to_string(&path).unwrap());
    assert!(back.check().is_empty());
}

#[test]
fn sidecar_masks_are_written_and_resolved() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let mut items = corpus(3);
    for (i, r) in items[1].annotations[0].regions.iter_mut().enumerate() {
        r.sidecar = Some(format!("masks/s1_{i}.json"));
    }
    let m = DatasetManifest::new(dir.path(), items);
    m.save(&path).unwrap();
    assert!(dir.path().join("masks/s1_0.json").exists());
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.lines().nth(1).unwrap().contains("\"mask\":\"masks/s1_0.json\""));
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.items, m.items);

    fs::remove_file(dir.path().join("masks/s1_0.json")).unwrap();
    match load_manifest(&path) {
        Err(ManifestError::Invalid(v)) => {
            assert_eq!(v.len(), 1);
            assert_eq!(v[0].line, 2);
            assert!(matches!(&v[0].kind, ViolationKind::DanglingMask(p) if p == "masks/s1_0.json"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn inconsistent_dims_are_reported_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let mut items = corpus(2);
    let small = Dims::new(4, 4).unwrap();
    let mut extra = items[1].annotations[0].clone();
    extra.annotation_id = "other".into();
    extra.regions = vec![Region::new(extra.regions[0].class, RegionMask::full(small))];
    items[1].annotations.push(extra);
    DatasetManifest::new(dir.path(), items).save(&path).unwrap();
    match load_manifest(&path) {
        Err(ManifestError::Invalid(v)) => {
            assert_eq!(v[0].line, 2);
            assert!(matches!(v[0].kind, ViolationKind::DimsInconsistent { .. }));
        }
        other => panic!("{other:?}"),
    }
}
