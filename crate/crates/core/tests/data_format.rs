//! On-disk dataset format: round trip, integrity checks and structure.

use std::collections::HashSet;
use std::fs;

use farnet::data::{
    foreground_mask, generate_dataset, load_dataset, parse_manifest, render, save_dataset, DataError, Image, Split,
    SplitRatios, MANIFEST_FILE,
};
use tempfile::TempDir;

fn small() -> farnet::data::Dataset {
    generate_dataset(3, 60, SplitRatios::default(), 32).unwrap()
}

#[test]
fn save_load_round_trip() {
    let dir = TempDir::new().unwrap();
    let ds = small();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.images, ds.images);
}

#[test]
fn triplets_are_single_attribute_edits() {
    let ds = small();
    for t in &ds.manifest.triplets {
        let diff = ds.scene(t.reference).diff(ds.scene(t.target));
        assert_eq!(diff, vec![t.edit.attribute], "triplet {}", t.id);
        assert_eq!(ds.scene(t.target).value_name(t.edit.attribute), t.edit.value);
        let members = ds.group_members(t.subset_group);
        assert!(members.contains(&t.target) && members.contains(&t.reference));
    }
}

#[test]
fn splits_partition_triplets() {
    let ds = small();
    let mut seen = HashSet::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for &id in ds.split(split) {
            assert!(seen.insert(id), "triplet {id} in two splits");
            assert_eq!(ds.triplet(id).split, split);
        }
    }
    assert_eq!(seen.len(), ds.manifest.triplets.len());
    assert_eq!(ds.split(Split::Train).len(), 48);
}

#[test]
fn gallery_images_match_their_scenes() {
    let ds = small();
    for e in &ds.manifest.gallery {
        assert_eq!(&render(&e.scene, 32).unwrap(), ds.image(e.id));
    }
}

#[test]
fn tampered_image_is_rejected() {
    let dir = TempDir::new().unwrap();
    save_dataset(&small(), dir.path()).unwrap();
    let img = dir.path().join("images/0001.ppm");
    let mut bytes = fs::read(&img).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] = bytes[mid].wrapping_add(1);
    fs::write(&img, bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Checksum { .. })));
}

#[test]
fn missing_image_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    save_dataset(&small(), dir.path()).unwrap();
    fs::remove_file(dir.path().join("images/0000.ppm")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Io { .. })));
}

#[test]
fn manifest_structure_is_validated() {
    let dir = TempDir::new().unwrap();
    save_dataset(&small(), dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(parse_manifest(&text).is_ok());

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["format_version"] = serde_json::json!(99);
    assert!(matches!(parse_manifest(&v.to_string()), Err(DataError::Version { .. })));

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["triplets"][0]["target"] = serde_json::json!(100_000);
    assert!(parse_manifest(&v.to_string()).is_err());

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let first = v["splits"]["train"][0].clone();
    v["splits"]["val"].as_array_mut().unwrap().push(first);
    assert!(parse_manifest(&v.to_string()).is_err());

    assert!(parse_manifest("{").is_err());
    assert!(parse_manifest("[]").is_err());
}

#[test]
fn ppm_codec() {
    let ds = small();
    let img = ds.image(0);
    assert_eq!(&Image::from_ppm(&img.to_ppm()).unwrap(), img);
    let ppm = img.to_ppm();
    assert!(Image::from_ppm(&ppm[..ppm.len() - 1]).is_err());
    assert!(Image::from_ppm(b"P3\n1 1\n255\n0 0 0\n").is_err());
    assert!(Image::from_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
    assert!(Image::from_ppm(b"").is_err());
}

#[test]
fn foreground_is_nonempty_and_partial() {
    let ds = small();
    for e in &ds.manifest.gallery {
        let mask = foreground_mask(&e.scene, 32).unwrap();
        let n = mask.iter().filter(|&&m| m).count();
        assert!(n > 0 && n < mask.len() / 2, "scene {}: {n} foreground pixels", e.id);
    }
}

#[test]
fn infeasible_requests_fail() {
    assert!(generate_dataset(0, 5, SplitRatios::default(), 32).is_err());
    assert!(generate_dataset(0, 100, SplitRatios::default(), 30).is_err());
    assert!(generate_dataset(0, 100, SplitRatios([0.5, 0.5, 0.5]), 32).is_err());
}
