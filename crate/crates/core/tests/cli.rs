use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tclnet::config::RunConfig;
use tclnet::dump::{read_index, read_matrix_csv};
use tclnet::pipeline::Checkpoint;
use tclnet::Tensor;

fn tiny(out: &Path) -> RunConfig {
    RunConfig {
        out_dir: out.to_string_lossy().into_owned(),
        identities: 4,
        clips_per_identity: 4,
        gallery_clips: 2,
        query_clips: 1,
        frames_per_clip: 6,
        frame_height: 32,
        frame_width: 16,
        pose_jitter: 1,
        stage_channels: vec![4, 6, 8],
        blocks_per_stage: 1,
        head_channels: 8,
        block_height: 2,
        epochs: 2,
        lr: 3e-3,
        ids_per_batch: 2,
        clips_per_id: 2,
        eval_every: 0,
        ..RunConfig::default()
    }
}

fn tclnet(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tclnet"));
    c.args(args).env_remove("TCL_SEED");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the tiny config, generates its corpus and trains on it.
struct Trained {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    corpus: PathBuf,
    run: PathBuf,
}

fn trained(extra: &[&str]) -> Trained {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    tiny(tmp.path()).save(&config).unwrap();
    let corpus = tmp.path().join("corpus");
    let run = tmp.path().join("run");
    ok(&tclnet(&["generate", "--config", s(&config), "--out", s(&corpus)], &[]));
    let mut args = vec!["train", "--config", s(&config), "--corpus", s(&corpus), "--out", s(&run)];
    args.extend_from_slice(extra);
    ok(&tclnet(&args, &[]));
    Trained {
        _tmp: tmp,
        config,
        corpus,
        run,
    }
}

fn digest_of(stdout: &str) -> String {
    stdout.split("digest ").nth(1).unwrap().trim_end_matches([')', '\n']).to_string()
}

#[test]
fn generate_writes_the_default_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a/nested");
    let b = tmp.path().join("b");
    let out = ok(&tclnet(&["generate", "--out", s(&a)], &[]));
    assert!(out.starts_with("96 clips of 16 identities"), "{out}");
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.is_empty()).count(), 97);
    assert!(a.join("config.toml").exists());
    let out_b = ok(&tclnet(&["generate", "--out", s(&b)], &[]));
    assert_eq!(digest_of(&out), digest_of(&out_b));
    let out_c = ok(&tclnet(&["generate", "--out", s(&b), "--seed", "1"], &[]));
    assert_ne!(digest_of(&out), digest_of(&out_c));
}

#[test]
fn unwritable_output_is_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain");
    fs::write(&file, b"x").unwrap();
    let o = tclnet(&["generate", "--out", s(&file.join("sub"))], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = tclnet(&["train", "--lr", "abc"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = tclnet(&["eval", "--checkpoint", s(&tmp.path().join("none")), "--corpus", s(tmp.path())], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_of = |dir: &str, seed_flag: Option<&str>, env: Option<&str>| {
        let out = tmp.path().join(dir);
        let mut args = vec!["generate", "--out", s(&out)];
        if let Some(f) = seed_flag {
            args.extend(["--seed", f]);
        }
        let envs: Vec<(&str, &str)> = env.map(|v| ("TCL_SEED", v)).into_iter().collect();
        ok(&tclnet(&args, &envs));
        RunConfig::load(&out.join("config.toml")).unwrap().seed
    };
    assert_eq!(cfg_of("plain", None, None), 0);
    assert_eq!(cfg_of("env", None, Some("7")), 7);
    assert_eq!(cfg_of("both", Some("3"), Some("7")), 3);
    let o = tclnet(&["generate", "--out", s(&tmp.path().join("bad"))], &[("TCL_SEED", "x")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_and_dump() {
    let t = trained(&[]);
    for f in ["checkpoint.tclc", "metrics.csv", "eval.csv", "config.toml"] {
        assert!(t.run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(t.run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    // self retrieval on the gallery
    let ck = t.run.join("checkpoint.tclc");
    let e1 = t.run.join("self");
    ok(&tclnet(&["eval", "--checkpoint", s(&ck), "--corpus", s(&t.corpus), "--out", s(&e1), "--self-retrieval"], &[]));
    let text = fs::read_to_string(e1.join("eval.csv")).unwrap();
    assert!(text.contains("mAP,1.000000000000"), "{text}");

    // fixed checkpoint and corpus give the same bytes
    let (e2, e3) = (t.run.join("e2"), t.run.join("e3"));
    for e in [&e2, &e3] {
        ok(&tclnet(&["eval", "--checkpoint", s(&ck), "--corpus", s(&t.corpus), "--out", s(e)], &[]));
    }
    assert_eq!(fs::read(e2.join("eval.csv")).unwrap(), fs::read(e3.join("eval.csv")).unwrap());
    assert_eq!(fs::read(e2.join("eval.csv")).unwrap(), fs::read(t.run.join("eval.csv")).unwrap());

    let maps = t.run.join("maps");
    ok(&tclnet(&["dump-maps", "--checkpoint", s(&ck), "--corpus", s(&t.corpus), "--clip", "3", "--out", s(&maps)], &[]));
    let index = read_index(&maps).unwrap();
    for e in &index {
        assert!(maps.join(&e.file).exists(), "{}", e.file);
    }
    let kinds: Vec<&str> = index.iter().map(|e| e.kind.as_str()).collect();
    for k in ["R21", "B21", "B2", "G2", "erased2", "G1", "A"] {
        assert!(kinds.contains(&k), "{k}");
    }
    for seg in 0..3 {
        let load = |k: &str| Tensor::load(&maps.join(format!("seg{seg}_{k}.tclt"))).unwrap();
        let (b, g) = (load("B21"), load("G2"));
        assert_eq!(b, load("B2"));
        let hw = b.numel();
        assert!(hw > 0 && g.numel() % hw == 0);
        let mut erased = 0;
        for (k, &m) in b.data().iter().enumerate() {
            let cells = g.data().iter().skip(k).step_by(hw);
            // B marks kept cells with 1
            if m == 0.0 {
                erased += 1;
                assert!(cells.clone().all(|&v| v == 0.0));
            } else {
                assert!(cells.clone().any(|&v| v != 0.0));
            }
        }
        assert!(erased > 0);
    }
    for e in index.iter().filter(|e| e.kind == "A") {
        let a = read_matrix_csv(&maps.join(&e.file)).unwrap();
        let c = a.shape()[1];
        for row in a.data().chunks(c) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let o = tclnet(&["dump-maps", "--checkpoint", s(&ck), "--corpus", s(&t.corpus), "--clip", "999", "--out", s(&maps)], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn rerun_from_written_config_is_bit_identical() {
    let t = trained(&[]);
    let written = RunConfig::load(&t.run.join("config.toml")).unwrap();
    let mut original = RunConfig::load(&t.config).unwrap();
    original.out_dir = written.out_dir.clone();
    assert_eq!(written, original);
    let again = t.run.with_file_name("again");
    ok(&tclnet(
        &["train", "--config", s(&t.run.join("config.toml")), "--corpus", s(&t.corpus), "--out", s(&again)],
        &[],
    ));
    for f in ["metrics.csv", "eval.csv"] {
        assert_eq!(fs::read(t.run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
    // the embedded config differs only in out_dir
    let load = |d: &Path| Checkpoint::load(&d.join("checkpoint.tclc")).unwrap();
    let (a, b) = (load(&t.run), load(&again));
    assert_eq!(a.records, b.records);
    assert_eq!((a.epoch, a.seed), (b.epoch, b.seed));
}

fn shapes(run: &Path) -> Vec<(String, Vec<usize>)> {
    let ck = Checkpoint::load(&run.join("checkpoint.tclc")).unwrap();
    ck.records.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
}

#[test]
fn ablation_flags_touch_only_their_mechanism() {
    let full = shapes(&trained(&[]).run);
    assert_eq!(full, shapes(&trained(&["--no-seo"]).run));
    assert_eq!(full, shapes(&trained(&["--loss", "ce+triplet"]).run));

    let no_tsb = shapes(&trained(&["--no-tsb"]).run);
    let removed: Vec<_> = full.iter().filter(|r| !no_tsb.contains(r)).collect();
    assert!(!removed.is_empty());
    assert!(removed.iter().all(|(n, _)| n.starts_with("tsb.")), "{removed:?}");
    assert!(no_tsb.iter().all(|r| full.contains(r)));

    let base = shapes(&trained(&["--n-learners", "1", "--no-tsb"]).run);
    let extra: Vec<_> = no_tsb.iter().filter(|r| !base.contains(r)).collect();
    assert!(extra.iter().all(|(n, _)| n.starts_with("learners.head2") || n.starts_with("head2.")), "{extra:?}");
    assert!(base.iter().all(|r| no_tsb.contains(r)));
}

#[test]
fn ablate_writes_one_row_per_arm_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    tiny(tmp.path()).save(&config).unwrap();
    let out = tmp.path().join("abl");
    let stdout = ok(&tclnet(
        &["ablate", "--config", s(&config), "--out", s(&out), "--seeds", "2", "--arms", "base,tclnet-tri"],
        &[],
    ));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "arm,seed,mAP,top1,seconds");
    assert_eq!(rows.len(), 5);
    assert!(stdout.contains("base") && stdout.contains("tclnet-tri"));
    let o = tclnet(&["ablate", "--config", s(&config), "--out", s(&out), "--arms", "nope"], &[]);
    assert_eq!(o.status.code(), Some(2));
}
