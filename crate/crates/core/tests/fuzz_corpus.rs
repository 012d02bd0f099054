//! Replays the checked-in fuzz corpus through the same checks the cargo-fuzz
//! targets run, plus mutated copies of every seed.

use std::path::PathBuf;

use cina::data::{Dataset, Manifest};
use cina::harness::ExperimentConfig;
use cina::model::Checkpoint;
use proptest::prelude::*;

fn check(target: &str, data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    match target {
        "csv_dataset" => {
            if let Ok(d) = Dataset::from_csv_str("fuzz", text) {
                assert_eq!(Dataset::from_csv_str("fuzz", &d.to_csv_string()).unwrap(), d);
            }
        }
        "json_dataset" => {
            if let Ok(d) = Dataset::from_json_str("fuzz", text) {
                assert_eq!(Dataset::from_json_str("fuzz", &d.to_json_string()).unwrap(), d);
            }
        }
        "checkpoint" => {
            if let Ok(c) = Checkpoint::from_json_str(text) {
                assert_eq!(Checkpoint::from_json_str(&c.to_json_string()).unwrap(), c);
            }
        }
        "config_toml" => {
            if let Ok(c) = ExperimentConfig::from_toml_str(text) {
                let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
                assert_eq!(back.hash(), c.hash());
            }
        }
        "manifest" => {
            if let Ok(m) = Manifest::from_json_str(text) {
                assert_eq!(Manifest::from_json_str(&m.to_json_string()).unwrap(), m);
            }
        }
        other => panic!("unknown fuzz target `{other}`"),
    }
}

const TARGETS: [&str; 5] = ["csv_dataset", "json_dataset", "checkpoint", "config_toml", "manifest"];

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.into_iter().map(|p| { let b = std::fs::read(&p).unwrap(); (p, b) }).collect()
}

#[test]
fn every_target_has_seeds() {
    for t in TARGETS {
        assert!(corpus(t).len() >= 2, "{t}");
    }
}

#[test]
fn replay_seeds() {
    for t in TARGETS {
        for (path, bytes) in corpus(t) {
            eprintln!("{}", path.display());
            check(t, &bytes);
        }
    }
}

#[test]
fn well_formed_seeds_parse() {
    assert!(Dataset::from_csv_str("s", &String::from_utf8(corpus("csv_dataset").into_iter().find(|(p, _)| p.ends_with("small.csv")).unwrap().1).unwrap()).is_ok());
    for (p, b) in corpus("config_toml") {
        let ok = ExperimentConfig::from_toml_str(std::str::from_utf8(&b).unwrap()).is_ok();
        assert_eq!(ok, !p.ends_with("bad_dx.toml"), "{}", p.display());
    }
    for (p, b) in corpus("checkpoint") {
        let ok = Checkpoint::from_json_str(std::str::from_utf8(&b).unwrap()).is_ok();
        assert_eq!(ok, p.ends_with("single.json"), "{}", p.display());
    }
}

fn mutate(seed: &[u8], edits: &[(usize, u8, u8)]) -> Vec<u8> {
    let mut out = seed.to_vec();
    for &(pos, byte, op) in edits {
        if out.is_empty() {
            out.push(byte);
            continue;
        }
        let i = pos % out.len();
        match op % 3 {
            0 => out[i] = byte,
            1 => out.insert(i, byte),
            _ => {
                out.remove(i);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mutated_seeds_never_panic(
        target in 0usize..5,
        pick in any::<usize>(),
        edits in prop::collection::vec((any::<usize>(), any::<u8>(), any::<u8>()), 1..8),
    ) {
        let t = TARGETS[target];
        let seeds = corpus(t);
        let (_, seed) = &seeds[pick % seeds.len()];
        check(t, &mutate(seed, &edits));
    }

    #[test]
    fn arbitrary_text_never_panics(target in 0usize..5, text in "\\PC{0,200}") {
        check(TARGETS[target], text.as_bytes());
    }
}
