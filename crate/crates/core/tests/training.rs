mod common;

use std::collections::HashMap;

use common::checks::{ablation_mismatches, tiny_trainer};
use dialflow::corpus::DialogueSession;
use dialflow::model::FLOW_GROUPS;
use dialflow::nn::to_vec;
use dialflow::trainer::Trainer;
use dialflow::Variant;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn digests(tr: &Trainer) -> HashMap<String, String> {
    tr.model
        .params
        .iter()
        .map(|(name, var)| {
            let mut h = Sha256::new();
            for x in to_vec(var.as_tensor()).unwrap() {
                h.update(x.to_le_bytes());
            }
            (name.to_string(), hex::encode(h.finalize()))
        })
        .collect()
}

#[test]
fn checkpoint_round_trip_continues_identically() {
    let (data, mut tr) = tiny_trainer(Variant::Full, false);
    for _ in 0..3 {
        let tb = tr.next_batch(&data).unwrap();
        tr.train_step(&data, &tb).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    tr.save(dir.path(), &data).unwrap();
    let mut back = Trainer::resume(dir.path()).unwrap();
    assert_eq!(back.step, 3);
    assert_eq!(digests(&back), digests(&tr));

    let refs: Vec<&DialogueSession> = data.train.iter().collect();
    let tb = data.train_batch(&refs, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let a = tr.train_step(&data, &tb).unwrap();
    let b = back.train_step(&data, &tb).unwrap();
    assert_eq!(a, b);
    assert_eq!(digests(&back), digests(&tr));
}

#[test]
fn frozen_flow_is_bit_identical_after_training() {
    let (data, mut tr) = tiny_trainer(Variant::Full, true);
    let flow: Vec<String> = FLOW_GROUPS.iter().flat_map(|g| tr.model.params.group(g)).collect();
    assert!(!flow.is_empty());
    assert_eq!(tr.frozen.iter().cloned().collect::<Vec<_>>(), {
        let mut f = flow.clone();
        f.sort();
        f
    });
    let before = digests(&tr);
    tr.train(&data, None, &mut std::io::sink()).unwrap();
    let after = digests(&tr);
    for name in before.keys() {
        let same = before[name] == after[name];
        assert_eq!(same, flow.contains(name), "{name}");
    }
}

#[test]
fn every_variant_logs_only_its_own_terms() {
    assert_eq!(ablation_mismatches(), vec![]);
}

#[test]
fn training_log_is_jsonl() {
    let (data, mut tr) = tiny_trainer(Variant::NoDisentangle, false);
    let mut buf = Vec::new();
    tr.train(&data, None, &mut buf).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.iter().any(|v| v["split"] == "train"));
    assert!(lines.iter().any(|v| v["split"] == "val"));
    for v in lines.iter().filter(|v| v["split"] == "train") {
        assert_eq!(v["l_hid"], 0.0);
        assert_eq!(v["l_dir"], 0.0);
        assert_eq!(v["l_mim"], 0.0);
    }
}
