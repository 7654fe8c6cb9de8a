use std::fs;
use std::path::Path;

use facts::dataio::{self, load_dataset, save_dataset, MatrixFile, Manifest};
use facts::Error;
use facts_core::dataset::{Dataset, Provenance, Sample, Split};
use facts_core::synth::{generate, SynthConfig};

fn small_config(seed: u64) -> SynthConfig {
    SynthConfig {
        num_classes: 3,
        num_attributes: 3,
        class_sizes: vec![200, 200, 200],
        correlation: 0.9,
        feature_dim: 8,
        embed_dim: 4,
        test_per_cell: 5,
        ..SynthConfig::nico95_like(seed)
    }
}

fn external_dataset() -> Dataset {
    let samples = (0..6)
        .map(|i| Sample {
            id: format!("img{i}"),
            split: Split::ALL[i % 3],
            features: vec![],
            embedding: vec![i as f32, -0.5, 1e-7],
            logits: Some(vec![0.25 * i as f32, -1.0]),
            label: i % 2,
            attribute: None,
            bias_conflicting: None,
        })
        .collect();
    Dataset {
        samples,
        num_classes: 2,
        mapping: None,
        provenance: Provenance::External("camera-trap export".into()),
    }
}

#[test]
fn synthetic_round_trip_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&small_config(5)).unwrap();
    let manifest = save_dataset(&ds, dir.path()).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap(), ds);
}

#[test]
fn external_round_trip_with_logits_and_missing_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let ds = external_dataset();
    let manifest = save_dataset(&ds, dir.path()).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap(), ds);
    let meta = fs::read_to_string(dir.path().join(dataio::METADATA_FILE)).unwrap();
    assert!(meta.starts_with("id,split,label,attribute,bias_conflicting\n"));
    assert!(meta.contains("img0,train,0,-1,-1"));
    let m = Manifest::read(&manifest).unwrap();
    assert!(m.matrix_blocks.contains_key(dataio::LOGITS));
    assert!(!m.matrix_blocks.contains_key(dataio::FEATURES));
}

#[test]
fn matrix_file_length_follows_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.fsmx");
    let m = MatrixFile::new(3, 5, (0..15).map(|v| v as f32).collect()).unwrap();
    m.write(&p).unwrap();
    assert_eq!(fs::metadata(&p).unwrap().len(), 24 + 4 * 3 * 5);
    assert_eq!(MatrixFile::read(&p).unwrap(), m);
}

fn saved(dir: &Path) -> std::path::PathBuf {
    save_dataset(&generate(&small_config(1)).unwrap(), dir).unwrap()
}

fn patch(path: &Path, offset: usize, bytes: &[u8]) {
    let mut b = fs::read(path).unwrap();
    b[offset..offset + bytes.len()].copy_from_slice(bytes);
    fs::write(path, b).unwrap();
}

#[test]
fn corrupted_magic_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = saved(dir.path());
    patch(&dir.path().join("features.fsmx"), 0, b"XSMF");
    assert!(matches!(load_dataset(&manifest), Err(Error::BadMagic { found, .. }) if &found == b"XSMF"));
}

#[test]
fn corrupted_dtype_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = saved(dir.path());
    patch(&dir.path().join("embedding.fsmx"), 6, &[3]);
    assert!(matches!(load_dataset(&manifest), Err(Error::DtypeMismatch { expected: 1, found: 3, .. })));
}

#[test]
fn row_count_mismatch_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = saved(dir.path());
    // Rewrite the block with one row fewer, consistent in itself.
    let p = dir.path().join("features.fsmx");
    let m = MatrixFile::read(&p).unwrap();
    let shorter = MatrixFile::new(m.rows() - 1, m.cols(), m.data()[..(m.rows() - 1) * m.cols()].to_vec()).unwrap();
    shorter.write(&p).unwrap();
    match load_dataset(&manifest) {
        Err(Error::RowCountMismatch { block, expected, found }) => {
            assert_eq!(block, "features");
            assert_eq!(found + 1, expected);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_finite_payload_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = saved(dir.path());
    let cols = Manifest::read(&manifest).unwrap().block("embedding").unwrap().cols as usize;
    patch(&dir.path().join("embedding.fsmx"), 24 + 4 * (cols + 2), &f32::INFINITY.to_le_bytes());
    assert!(matches!(load_dataset(&manifest), Err(Error::NonFinite { row: 1, col: 2, .. })));
}

#[test]
fn truncated_payload_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = saved(dir.path());
    let p = dir.path().join("features.fsmx");
    let b = fs::read(&p).unwrap();
    fs::write(&p, &b[..b.len() - 4]).unwrap();
    assert!(matches!(load_dataset(&manifest), Err(Error::PayloadSize { .. })));
}

#[test]
fn empty_split_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = saved(dir.path());
    let meta = dir.path().join(dataio::METADATA_FILE);
    let text = fs::read_to_string(&meta).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut fields: Vec<&str> = lines[3].split(',').collect();
    fields[1] = "";
    lines[3] = fields.join(",");
    fs::write(&meta, lines.join("\n") + "\n").unwrap();
    let err = load_dataset(&manifest).unwrap_err();
    assert!(matches!(err, Error::EmptySplit { row: 3, .. }), "{err:?}");
    assert!(err.to_string().contains("row 3"));
}

#[test]
fn attaching_logits_to_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = saved(dir.path());
    let n = load_dataset(&manifest).unwrap().samples.len();
    let logits = MatrixFile::new(n, 3, vec![0.5; n * 3]).unwrap();
    dataio::attach_block(&manifest, dataio::LOGITS, &logits).unwrap();
    let ds = load_dataset(&manifest).unwrap();
    assert_eq!(ds.logit_dim(), Some(3));
    let wrong = MatrixFile::new(n + 1, 3, vec![0.5; (n + 1) * 3]).unwrap();
    assert!(matches!(
        dataio::attach_block(&manifest, dataio::LOGITS, &wrong),
        Err(Error::RowCountMismatch { .. })
    ));
}
