use std::fs;
use std::path::Path;

use proptest::prelude::*;
use tempfile::tempdir;
use thinseg::error::Error;
use thinseg::manifest::load_manifest;
use thinseg::pgm::{decode, encode, read_mask, read_prob, write_mask, write_prob, Graymap, Limits};
use thinseg_core::Tensor;

fn graymap_bytes(w: usize, h: usize, maxval: u16, samples: &[u16]) -> Vec<u8> {
    encode(&Graymap {
        width: w,
        height: h,
        maxval,
        samples: samples.to_vec(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mask_round_trip_is_exact(bits in prop::collection::vec(any::<bool>(), 64 * 64)) {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let m = Tensor::new([64, 64], bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        write_mask(&m, &path).unwrap();
        prop_assert_eq!(read_mask(&path).unwrap(), m);
    }

    #[test]
    fn prob_round_trip_within_one_quantum(v in prop::collection::vec(0.0f64..=1.0, 1..400)) {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.pgm");
        let n = v.len();
        let p = Tensor::new([1, n], v).unwrap();
        write_prob(&p, &path).unwrap();
        let back = read_prob(&path).unwrap();
        prop_assert!(back.data().iter().zip(p.data()).all(|(a, b)| (a - b).abs() <= 1.0 / 65535.0));
    }

    #[test]
    fn eight_bit_prob_files_are_accepted(v in prop::collection::vec(0.0f64..=1.0, 1..400)) {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p8.pgm");
        let samples: Vec<u16> = v.iter().map(|x| (x * 255.0).round() as u16).collect();
        fs::write(&path, graymap_bytes(v.len(), 1, 255, &samples)).unwrap();
        let back = read_prob(&path).unwrap();
        prop_assert!(back.data().iter().zip(&v).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0));
    }
}

#[test]
fn prob_endpoints_are_exact() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("e.pgm");
    fs::write(&path, graymap_bytes(2, 1, 65535, &[0, 65535])).unwrap();
    assert_eq!(read_prob(&path).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn mask_threshold_is_above_half_scale() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("t.pgm");
    fs::write(&path, graymap_bytes(3, 1, 255, &[127, 128, 255])).unwrap();
    assert_eq!(read_mask(&path).unwrap().data(), &[0.0, 1.0, 1.0]);
}

#[test]
fn truncated_file_is_malformed() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("short.pgm");
    let mut bytes = graymap_bytes(4, 4, 255, &[255; 16]);
    bytes.truncate(bytes.len() - 3);
    fs::write(&path, bytes).unwrap();
    assert!(matches!(read_mask(&path), Err(Error::Malformed { .. })));
}

#[test]
fn oversized_header_is_rejected_before_allocation() {
    let bytes = b"P5\n100000 100000\n255\n".to_vec();
    let r = decode(&bytes, Path::new("big.pgm"), Limits::default());
    assert!(matches!(r, Err(Error::DimensionOverflow { width: 100000, .. })));
    let r = decode(&graymap_bytes(8, 8, 255, &[0; 64]), Path::new("x.pgm"), Limits { max_dim: 4 });
    assert!(matches!(r, Err(Error::DimensionOverflow { .. })));
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempdir().unwrap();
    assert!(matches!(read_mask(&dir.path().join("none.pgm")), Err(Error::Io { .. })));
}

fn touch(dir: &Path, names: &[&str]) {
    for n in names {
        fs::write(dir.join(n), b"").unwrap();
    }
}

#[test]
fn manifest_lists_pairs_in_file_order() {
    let dir = tempdir().unwrap();
    touch(dir.path(), &["a.pgm", "am.pgm", "b.pgm", "bm.pgm"]);
    let path = dir.path().join("set.tsv");
    fs::write(&path, "b\tb.pgm\tbm.pgm\n# note\n\na\ta.pgm\tam.pgm\n").unwrap();
    let entries = load_manifest(&path).unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0].id, "b");
    assert_eq!(entries[0].mask, dir.path().join("bm.pgm"));
    assert_eq!(entries[1].id, "a");
}

#[test]
fn manifest_names_line_of_missing_file() {
    let dir = tempdir().unwrap();
    touch(dir.path(), &["a.pgm", "am.pgm", "b.pgm"]);
    let path = dir.path().join("set.tsv");
    fs::write(&path, "a\ta.pgm\tam.pgm\nb\tb.pgm\tbm.pgm\n").unwrap();
    match load_manifest(&path) {
        Err(e @ Error::Manifest { line: 2, .. }) => assert!(e.to_string().contains("bm.pgm")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn manifest_rejects_duplicate_ids_and_accepts_empty() {
    let dir = tempdir().unwrap();
    touch(dir.path(), &["a.pgm", "am.pgm"]);
    let path = dir.path().join("set.tsv");
    fs::write(&path, "a\ta.pgm\tam.pgm\na\ta.pgm\tam.pgm\n").unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Manifest { line: 2, .. })));
    fs::write(&path, "").unwrap();
    assert!(load_manifest(&path).unwrap().is_empty());
}
