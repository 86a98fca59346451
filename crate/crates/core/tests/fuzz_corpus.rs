//! Replays the checked-in fuzz corpus, plus truncated and bit-flipped
//! variants of every seed, through the decoders on the stable toolchain.

use std::fs;
use std::path::PathBuf;

use compressed_soba::experiment::ExperimentConfig;
use compressed_soba::simnet::MessageLog;
use compressed_soba::{CompressedMessage, RunTrace};

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<Vec<u8>> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| fs::read(e.unwrap().path()).unwrap())
        .collect();
    assert!(!out.is_empty(), "no seeds for {target}");
    out.sort();
    out
}

fn variants(seed: &[u8]) -> Vec<Vec<u8>> {
    let mut out = vec![seed.to_vec()];
    for cut in 0..seed.len().min(64) {
        out.push(seed[..cut].to_vec());
    }
    for i in 0..seed.len().min(256) {
        for bit in [0u8, 3, 7] {
            let mut v = seed.to_vec();
            v[i] ^= 1 << bit;
            out.push(v);
        }
    }
    out
}

#[test]
fn message_seeds_decode_and_mutants_do_not_panic() {
    for seed in seeds("decode_message") {
        assert!(CompressedMessage::from_bytes(&seed).is_ok());
        for v in variants(&seed) {
            if let Ok(m) = CompressedMessage::from_bytes(&v) {
                assert_eq!(m.to_bytes(), v);
                let _ = m.materialize();
            }
        }
    }
}

#[test]
fn log_seeds_decode_and_mutants_do_not_panic() {
    for seed in seeds("decode_message_log") {
        let log = MessageLog::from_bytes(&seed).unwrap();
        assert_eq!(log.to_bytes(), seed);
        for v in variants(&seed) {
            if let Ok(l) = MessageLog::from_bytes(&v) {
                let _ = l.replay_uplink_bits();
            }
        }
    }
}

#[test]
fn config_seeds_parse_and_mutants_do_not_panic() {
    for seed in seeds("parse_config") {
        let text = String::from_utf8(seed.clone()).unwrap();
        ExperimentConfig::from_toml_str(&text).unwrap();
        for v in variants(&seed) {
            if let Ok(t) = std::str::from_utf8(&v) {
                let _ = ExperimentConfig::from_toml_str(t);
            }
        }
    }
}

#[test]
fn csv_seeds_round_trip_and_mutants_do_not_panic() {
    for seed in seeds("read_csv") {
        let text = String::from_utf8(seed.clone()).unwrap();
        let t = RunTrace::from_csv_str(&text).unwrap();
        assert_eq!(t.to_csv_string(), text);
        for v in variants(&seed) {
            if let Ok(s) = std::str::from_utf8(&v) {
                if let Ok(t) = RunTrace::from_csv_str(s) {
                    assert_eq!(RunTrace::from_csv_str(&t.to_csv_string()).unwrap(), t);
                }
            }
        }
    }
}
