use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn idxdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idxdiff")).args(args).output().expect("binary runs")
}

fn logs(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).expect("JSON line")).collect()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// A four-image 8x8 dataset and a model small enough to train in seconds.
fn tiny_setup(dir: &Path) -> PathBuf {
    assert!(idxdiff(&["synth", &s(&dir.join("img")), "--count", "4", "--side", "8", "--seed", "1"]).status.success());
    assert!(idxdiff(&["prepare", &s(&dir.join("img")), &s(&dir.join("m.csv")), "--seed", "3"]).status.success());
    let config = dir.join("tiny.toml");
    std::fs::write(
        &config,
        "dataset_name = \"tiny\"\nmanifest = \"m.csv\"\noutput_dir = \"out\"\ndepth = 1\nhidden_size = 16\n\
         patch_size = 2\nsteps = 10\nepochs = 2\nlr = 1e-3\nbatch_size = 4\n",
    )
    .unwrap();
    config
}

#[test]
fn usage_error_exits_1() {
    assert_eq!(idxdiff(&["pack"]).status.code(), Some(1));
    assert_eq!(idxdiff(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn invalid_config_lists_every_problem_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "depth = 0\nlr = -1.0\nembedding = \"fourier\"\nbogus_key = 3\n").unwrap();
    let out = idxdiff(&["train", &s(&config)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus_key"), "{err}");
}

#[test]
fn missing_archive_exits_2_and_corrupt_archive_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let png = s(&dir.path().join("o.png"));
    let missing = idxdiff(&["decode", &s(&dir.path().join("none.ldur")), "--index", "0", &png]);
    assert_eq!(missing.status.code(), Some(2));
    let junk = dir.path().join("junk.ldur");
    std::fs::write(&junk, b"LDUR definitely not an archive").unwrap();
    let corrupt = idxdiff(&["decode", &s(&junk), "--index", "0", &png]);
    assert_eq!(corrupt.status.code(), Some(3));
    assert!(!dir.path().join("o.png").exists());
}

#[test]
fn prepare_is_a_seeded_permutation() {
    let dir = tempfile::tempdir().unwrap();
    assert!(idxdiff(&["synth", &s(&dir.path().join("img")), "--count", "5", "--side", "8"]).status.success());
    let read = |seed: &str| {
        let m = dir.path().join(format!("m{seed}.csv"));
        assert!(idxdiff(&["prepare", &s(&dir.path().join("img")), &s(&m), "--seed", seed]).status.success());
        let mut rdr = csv::Reader::from_path(&m).unwrap();
        let mut idx: Vec<u64> = rdr.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
        let order = idx.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        order
    };
    assert_eq!(read("9"), read("9"));
}

#[test]
fn train_pack_decode_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_setup(dir.path());
    let out = idxdiff(&["train", &s(&config)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = logs(&out);
    assert_eq!(log.iter().filter(|v| v["event"] == "epoch").count(), 2);
    let run = dir.path().join("out").join("tiny-4_H16_W32");
    for f in ["model.idxt", "loss.csv", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let archive = dir.path().join("a.ldur");
    let out = idxdiff(&["pack", &s(&run.join("model.idxt")), &s(&archive), "--e", "5", "--m", "10"]);
    assert!(out.status.success());
    let packed = logs(&out).pop().unwrap();
    let params = packed["params"].as_u64().unwrap();
    assert_eq!(packed["model_bits"].as_u64().unwrap(), params * 16);
    assert_eq!(packed["total_bits"].as_u64().unwrap(), std::fs::metadata(&archive).unwrap().len() * 8);

    let png = dir.path().join("y2.png");
    assert!(idxdiff(&["decode", &s(&archive), "--index", "2", "--seed", "5", &s(&png)]).status.success());
    assert!(png.exists());
    let bad_index = idxdiff(&["decode", &s(&archive), "--index", "4", &s(&dir.path().join("no.png"))]);
    assert_eq!(bad_index.status.code(), Some(1));

    let per_index = dir.path().join("verify.csv");
    let out = idxdiff(&["verify", &s(&archive), &s(&dir.path().join("m.csv")), "--out", &s(&per_index)]);
    assert!(out.status.success());
    let v = logs(&out).pop().unwrap();
    assert_eq!(v["num_images"], 4);
    assert_eq!(csv::Reader::from_path(&per_index).unwrap().records().count(), 4);
}

#[test]
fn report_combines_archives_and_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_setup(dir.path());
    assert!(idxdiff(&["train", &s(&config)]).status.success());
    let archive = dir.path().join("tiny.ldur");
    let ckpt = dir.path().join("out/tiny-4_H16_W32/model.idxt");
    assert!(idxdiff(&["pack", &s(&ckpt), &s(&archive)]).status.success());
    let baselines = dir.path().join("b.csv");
    std::fs::write(&baselines, "scheme,image_id,code_bits,model_bits\nEIC:jpeg,a,900,0\nEIC:jpeg,b,1100,0\n").unwrap();
    let table = dir.path().join("r.csv");
    let out = idxdiff(&[
        "report",
        &s(&archive),
        "--baselines",
        &s(&baselines),
        "--m-values",
        "4,4000",
        "--out",
        &s(&table),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(&table).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    // Unicorn at M = 4000 pays ceil(log2 4000) = 12 bits per extra image.
    let unicorn_4000 = rows.iter().find(|r| &r[0] == "Unicorn" && &r[2] == "4000").unwrap();
    assert_eq!(unicorn_4000.iter().last().unwrap(), "12");
}

#[test]
fn ablate_quantization_trains_once_and_shrinks_model_bits() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_setup(dir.path());
    let out_dir = dir.path().join("abl");
    let out = idxdiff(&[
        "ablate",
        &s(&config),
        "--axis",
        "quantization",
        "--values",
        "8:23,e5m10,4:7",
        "--out-dir",
        &s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = logs(&out);
    assert_eq!(log.iter().filter(|v| v["event"] == "epoch").count(), 2, "one training for all values");
    let mut rdr = csv::Reader::from_path(out_dir.join("ablation.csv")).unwrap();
    let bits: Vec<u64> = rdr.deserialize::<std::collections::HashMap<String, String>>()
        .map(|r| r.unwrap()["model_bits"].parse().unwrap())
        .collect();
    assert_eq!(bits.len(), 3);
    assert!(bits.windows(2).all(|w| w[0] > w[1]), "{bits:?}");
}

#[test]
fn ablate_rejects_bad_values_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_setup(dir.path());
    let out = idxdiff(&[
        "ablate",
        &s(&config),
        "--axis",
        "embedding",
        "--values",
        "grf,wavelet",
        "--out-dir",
        &s(&dir.path().join("abl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(logs(&out).iter().all(|v| v["event"] != "epoch"));
}
