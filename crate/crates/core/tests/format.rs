use std::path::PathBuf;

use axcv::nn::format::{encode_model, parse_model, FormatError, FORMAT_VERSION};
use axcv::nn::{load_model, save_model, Dataset, Layer};

fn fixture_bytes() -> Vec<u8> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/digits_cnn.axm");
    std::fs::read(p).unwrap()
}

fn manifest_len(bytes: &[u8]) -> usize {
    u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize
}

#[test]
fn encode_reproduces_fixture_bytes_and_tensors() {
    let bytes = fixture_bytes();
    let model = parse_model(&bytes).unwrap();
    let again = parse_model(&encode_model(&model)).unwrap();
    assert_eq!(again, model);
    // Blob section is byte-identical even though JSON formatting may differ.
    let blobs = &bytes[16 + manifest_len(&bytes)..];
    let re = encode_model(&model);
    assert_eq!(&re[16 + manifest_len(&re)..], blobs);
}

#[test]
fn save_then_load_round_trips() {
    let model = parse_model(&fixture_bytes()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.axm");
    save_model(&model, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), model);
}

#[test]
fn truncated_file_reports_offset() {
    let bytes = fixture_bytes();
    match parse_model(&bytes[..10]) {
        Err(FormatError::Truncated { offset: 8, needed: 4, .. }) => {}
        other => panic!("{other:?}"),
    }
    let cut = bytes.len() - 5;
    match parse_model(&bytes[..cut]) {
        Err(FormatError::Truncated { offset, .. }) => assert!(offset >= 16 + manifest_len(&bytes)),
        other => panic!("{other:?}"),
    }
    let err = parse_model(&bytes[..20]).unwrap_err();
    assert!(err.to_string().contains("offset 16"), "{err}");
}

#[test]
fn bad_magic_version_and_checksum_are_rejected() {
    let bytes = fixture_bytes();
    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(matches!(parse_model(&b), Err(FormatError::BadMagic { .. })));

    let mut b = bytes.clone();
    b[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(parse_model(&b), Err(FormatError::Version { found, .. }) if found == FORMAT_VERSION + 1));

    let mut b = bytes.clone();
    let last = b.len() - 1;
    b[last] ^= 1;
    assert!(matches!(parse_model(&b), Err(FormatError::Checksum { .. })));
}

#[test]
fn malformed_manifest_is_rejected() {
    let bytes = fixture_bytes();
    let mut b = bytes.clone();
    b[16] = b'[';
    assert!(matches!(parse_model(&b), Err(FormatError::Manifest(_))));
}

#[test]
fn inconsistent_shapes_are_rejected() {
    let mut model = parse_model(&fixture_bytes()).unwrap();
    if let Layer::Conv2d(c) = &mut model.layers[0] {
        c.bias.pop();
    }
    assert!(matches!(parse_model(&encode_model(&model)), Err(FormatError::Invalid(_))));
}

#[test]
fn dataset_round_trips() {
    let ds = Dataset {
        shape: [2, 3, 1],
        images: (0..18).collect(),
        labels: vec![4, 0, 9],
    };
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("tiny");
    ds.save(&stem).unwrap();
    assert!(dir.path().join("tiny.images").exists());
    let back = Dataset::load(&stem).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.image(1), &[6, 7, 8, 9, 10, 11]);
}

#[test]
fn dataset_errors() {
    let ds = Dataset {
        shape: [1, 1, 1],
        images: vec![1, 2],
        labels: vec![0, 1],
    };
    let (img, lbl) = ds.encode();
    assert!(matches!(Dataset::parse(&img[..img.len() - 1], &lbl), Err(FormatError::Truncated { .. })));
    assert!(matches!(Dataset::parse(&lbl, &lbl), Err(FormatError::BadMagic { .. })));
    let other = Dataset {
        shape: [1, 1, 1],
        images: vec![1],
        labels: vec![0],
    };
    assert!(matches!(Dataset::parse(&img, &other.encode().1), Err(FormatError::Invalid(_))));
    let missing = Dataset::load(std::env::temp_dir().join("no-such-dataset-stem"));
    assert!(matches!(missing, Err(FormatError::Io { .. })));
}
