//! End-to-end tests of the command-line surface: happy paths, exit codes,
//! manifests, and byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mol-mamba")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn mol-mamba")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "# tiny run\nepochs = 2\nstage1_epochs = 1\nbatch = 4\nlr = 0.001\nd = 8\nd_hidden = 16\nn_state = 4\ngin_layers = 2\nschnet_layers = 2\nmt_layers = 1\nattn_heads = 2\nrbf_count = 8\npe_width = 4\npe_frag_slots = 64\npe_intra_slots = 32\npatience = 0\n",
    )
    .unwrap();
    path
}

fn setup_corpus(dir: &Path, n: usize, seed: u64) -> (PathBuf, PathBuf) {
    let corpus = dir.join("corpus.jsonl");
    let vocab = dir.join("vocab.jsonl");
    assert_ok(&run_in(
        dir,
        &["synth-data", "--molecules", &n.to_string(), "--seed", &seed.to_string(), "--out", corpus.to_str().unwrap()],
    ));
    assert_ok(&run_in(
        dir,
        &["build-vocab", "--in", corpus.to_str().unwrap(), "--size", "10", "--out", vocab.to_str().unwrap()],
    ));
    (corpus, vocab)
}

#[test]
fn synth_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    assert_ok(&run_in(dir.path(), &["synth-data", "--molecules", "40", "--seed", "7", "--out", a.to_str().unwrap()]));
    assert_ok(&run_in(dir.path(), &["synth-data", "--molecules", "40", "--seed", "7", "--out", b.to_str().unwrap()]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.path().join("c.jsonl");
    assert_ok(&run_in(dir.path(), &["synth-data", "--molecules", "40", "--seed", "8", "--out", c.to_str().unwrap()]));
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn pretrain_writes_outputs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, vocab) = setup_corpus(dir.path(), 16, 3);
    let cfg = write_small_config(dir.path());
    let out = dir.path().join("run");
    assert_ok(&run_in(
        dir.path(),
        &[
            "pretrain",
            "--config", cfg.to_str().unwrap(),
            "--corpus", corpus.to_str().unwrap(),
            "--vocab", vocab.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ],
    ));
    assert!(out.join("model.ckpt").exists());
    assert!(out.join("curves.csv").exists());
    let manifests: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            name.contains("manifest").then_some(name)
        })
        .collect();
    assert_eq!(manifests, vec!["manifest.json"], "exactly one manifest per output directory");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pretrain");
    // manifest digests match the inputs on disk
    let recorded = manifest["inputs"]["corpus"]["sha256"].as_str().unwrap();
    let actual = sha256_hex(&std::fs::read(&corpus).unwrap());
    assert_eq!(recorded, actual);
    // curves have the documented header
    let curves = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,loss_d,loss_s,loss_f,loss_mask,total"));
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn pretrain_is_reproducible_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, vocab) = setup_corpus(dir.path(), 12, 5);
    let cfg = write_small_config(dir.path());
    let corpus_before = std::fs::read(&corpus).unwrap();
    let mut digests = Vec::new();
    for name in ["r1", "r2"] {
        let out = dir.path().join(name);
        assert_ok(&run_in(
            dir.path(),
            &[
                "pretrain",
                "--config", cfg.to_str().unwrap(),
                "--corpus", corpus.to_str().unwrap(),
                "--vocab", vocab.to_str().unwrap(),
                "--out", out.to_str().unwrap(),
                "--seed", "11",
            ],
        ));
        digests.push((
            sha256_hex(&std::fs::read(out.join("model.ckpt")).unwrap()),
            sha256_hex(&std::fs::read(out.join("curves.csv")).unwrap()),
        ));
    }
    assert_eq!(digests[0], digests[1], "same seed must reproduce identical artifacts");
    // inputs were not mutated
    assert_eq!(corpus_before, std::fs::read(&corpus).unwrap());
}

#[test]
fn finetune_evaluate_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, vocab) = setup_corpus(dir.path(), 20, 9);
    let cfg = write_small_config(dir.path());
    let pre = dir.path().join("pre");
    assert_ok(&run_in(
        dir.path(),
        &[
            "pretrain",
            "--config", cfg.to_str().unwrap(),
            "--corpus", corpus.to_str().unwrap(),
            "--vocab", vocab.to_str().unwrap(),
            "--out", pre.to_str().unwrap(),
        ],
    ));
    let ft = dir.path().join("ft");
    assert_ok(&run_in(
        dir.path(),
        &[
            "finetune",
            "--config", cfg.to_str().unwrap(),
            "--corpus", corpus.to_str().unwrap(),
            "--vocab", vocab.to_str().unwrap(),
            "--checkpoint", pre.join("model.ckpt").to_str().unwrap(),
            "--task", "planted",
            "--out", ft.to_str().unwrap(),
        ],
    ));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ft.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["task"], "planted");
    assert_eq!(metrics["metric"], "roc_auc");
    assert_eq!(metrics["folds"].as_array().unwrap().len(), 1);

    let ev = dir.path().join("ev");
    assert_ok(&run_in(
        dir.path(),
        &[
            "evaluate",
            "--config", cfg.to_str().unwrap(),
            "--corpus", corpus.to_str().unwrap(),
            "--vocab", vocab.to_str().unwrap(),
            "--checkpoint", ft.join("model.ckpt").to_str().unwrap(),
            "--task", "planted",
            "--out", ev.to_str().unwrap(),
        ],
    ));
    assert!(ev.join("metrics.json").exists());

    let insp = dir.path().join("insp");
    assert_ok(&run_in(
        dir.path(),
        &[
            "inspect",
            "--config", cfg.to_str().unwrap(),
            "--corpus", corpus.to_str().unwrap(),
            "--vocab", vocab.to_str().unwrap(),
            "--checkpoint", ft.join("model.ckpt").to_str().unwrap(),
            "--out", insp.to_str().unwrap(),
        ],
    ));
    let dump = std::fs::read_to_string(insp.join("node_weights.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
    assert!(first["id"].is_string());
    assert!(first["node_weights"].as_array().unwrap().len() >= 4);
}

#[test]
fn missing_required_flag_exits_one_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["pretrain", "--corpus", "x.jsonl", "--out", "run"],
    );
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--vocab"));
}

#[test]
fn unknown_flag_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["synth-data", "--molecules", "2", "--out", "x.jsonl", "--nope"]);
    assert_eq!(exit_code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage") || stderr.contains("usage"), "{stderr}");
}

#[test]
fn strict_mode_rejects_unknown_keys_lenient_warns() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("weird.jsonl");
    std::fs::write(
        &file,
        "{\"id\":\"x\",\"atoms\":[{\"z\":6,\"charge\":0}],\"pos\":[[0,0,0]],\"bonds\":[],\"extra\":1}\n",
    )
    .unwrap();
    let strict = run_in(
        dir.path(),
        &["build-vocab", "--in", file.to_str().unwrap(), "--size", "1", "--out", "v.jsonl"],
    );
    assert_eq!(exit_code(&strict), 1);
    let lenient = run_in(
        dir.path(),
        &["build-vocab", "--in", file.to_str().unwrap(), "--size", "1", "--out", "v.jsonl", "--lenient"],
    );
    assert_eq!(exit_code(&lenient), 0);
    assert!(String::from_utf8_lossy(&lenient.stderr).contains("warning"));
}

#[test]
fn bad_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, vocab) = setup_corpus(dir.path(), 8, 1);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "not_a_real_key = 5\n").unwrap();
    let out = run_in(
        dir.path(),
        &[
            "pretrain",
            "--config", cfg.to_str().unwrap(),
            "--corpus", corpus.to_str().unwrap(),
            "--vocab", vocab.to_str().unwrap(),
            "--out", dir.path().join("r").to_str().unwrap(),
        ],
    );
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn fragment_command_emits_partitions() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, vocab) = setup_corpus(dir.path(), 10, 2);
    let out = dir.path().join("frags.jsonl");
    assert_ok(&run_in(
        dir.path(),
        &[
            "fragment",
            "--in", corpus.to_str().unwrap(),
            "--vocab", vocab.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ],
    ));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 10);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let h = v["h"].as_u64().unwrap() as usize;
        let assignment = v["assignment"].as_array().unwrap();
        assert!(h >= 1);
        assert!(assignment.iter().all(|a| (a.as_u64().unwrap() as usize) < h));
        assert_eq!(v["frag_vocab_ids"].as_array().unwrap().len(), h);
    }
    assert!(dir.path().join("frags.jsonl.manifest.json").exists());
}
