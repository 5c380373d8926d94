//! Checked-in record streams. Set `RCOR_BLESS=1` to regenerate the synthetic ones.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rcor::data::{parse_record, read_records, record_to_line, validate_record, write_records, View};
use rcor::synth::{generate_split, random_record, stream_rng, world_manifest, Regime, Split, WorldConfig};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn bless() -> bool {
    std::env::var_os("RCOR_BLESS").is_some()
}

fn golden_config() -> WorldConfig {
    WorldConfig::preset(Regime::Shortcut, 42, 1000)
}

fn rewrite(path: &Path) -> Vec<u8> {
    let bytes = fs::read(path).unwrap();
    let records = read_records(BufReader::new(&bytes[..]), None).unwrap();
    let mut out = Vec::new();
    write_records(&mut out, &records).unwrap();
    out
}

#[test]
fn synthetic_stream_is_stable() {
    let cfg = golden_config();
    let records = generate_split(&cfg, Split::Test).unwrap();
    let mut bytes = Vec::new();
    write_records(&mut bytes, &records).unwrap();
    let path = data("golden_1000.jsonl");
    if bless() {
        fs::write(&path, &bytes).unwrap();
        fs::write(data("golden_manifest.json"), world_manifest(&cfg, "golden").to_json()).unwrap();
    }
    assert!(
        fs::read(&path).unwrap() == bytes,
        "generator output drifted from {}",
        path.display()
    );
}

#[test]
fn golden_stream_round_trips_byte_for_byte() {
    let path = data("golden_1000.jsonl");
    let original = fs::read(&path).unwrap();
    assert_eq!(rewrite(&path), original);

    let manifest =
        rcor::data::DatasetManifest::from_json(&fs::read_to_string(data("golden_manifest.json")).unwrap()).unwrap();
    let records = read_records(BufReader::new(&original[..]), Some(&manifest)).unwrap();
    assert_eq!(records.len(), 1000);
    assert!(records.iter().all(|r| validate_record(r, &manifest).is_clean()));
}

#[test]
fn packed_fixture_round_trips() {
    let path = data("packed_c80.jsonl");
    if bless() {
        let mut rng = stream_rng(80, 0);
        let records: Vec<_> = (0..3).map(|i| random_record(&mut rng, i, 4, 80)).collect();
        let mut bytes = Vec::new();
        write_records(&mut bytes, &records).unwrap();
        fs::write(&path, bytes).unwrap();
    }
    let original = fs::read(&path).unwrap();
    assert_eq!(rewrite(&path), original);
    let text = String::from_utf8(original).unwrap();
    for line in text.lines() {
        let r = parse_record(line, 1).unwrap();
        let packed = r.logits[&View::Full].len() >= 64;
        assert_eq!(line.contains("\"dtype\":\"f32le\""), packed);
    }
}

#[test]
fn single_record_fixture() {
    let text = fs::read_to_string(data("single.jsonl")).unwrap();
    let r = parse_record(text.trim_end(), 1).unwrap();
    assert_eq!(r.image_id, "n01440764_18");
    assert_eq!(r.candidates.len(), 2);
    assert_eq!(record_to_line(&r), text.trim_end());
}

#[test]
fn unsorted_fixture_is_canonicalized() {
    let unsorted = fs::read_to_string(data("unsorted.jsonl")).unwrap();
    let canonical = fs::read_to_string(data("single.jsonl")).unwrap();
    let r = parse_record(unsorted.trim_end(), 1).unwrap();
    assert_eq!(record_to_line(&r), canonical.trim_end());
}
