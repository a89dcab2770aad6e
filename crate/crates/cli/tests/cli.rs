use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn apr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apr"))
        .args(args)
        .env("APR_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn apr")
}

fn ok(args: &[&str]) -> Output {
    let out = apr(args);
    assert!(
        out.status.success(),
        "apr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 40 users, 25 items, 6-9 timestamped interactions each.
fn write_log(dir: &Path) -> PathBuf {
    let mut text = String::new();
    let mut state: u64 = 12345;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as usize
    };
    for u in 0..40 {
        let n = 6 + next() % 4;
        let mut items: Vec<usize> = Vec::new();
        while items.len() < n {
            let i = (u / 10 * 6 + next() % 10) % 25;
            if !items.contains(&i) {
                items.push(i);
            }
        }
        for (t, i) in items.iter().enumerate() {
            text.push_str(&format!("user{u}\titem{i}\t{}\n", 1000 + t));
        }
    }
    let path = dir.join("log.tsv");
    fs::write(&path, text).unwrap();
    path
}

fn split(dir: &Path) -> PathBuf {
    let log = write_log(dir);
    let prefix = dir.join("data");
    ok(&["split", "--input", s(&log), "--output", s(&prefix), "--validation", "--seed", "3"]);
    prefix
}

fn config(dir: &Path) -> PathBuf {
    let path = dir.join("run.conf");
    fs::write(
        &path,
        "factors = 4\neta = 0.05\nbatch_size = 16\nepochs = 6\neval_every = 2\nlambda_reg = 0.001\nseed = 5\npretrain_epochs = 4\n",
    )
    .unwrap();
    path
}

#[test]
fn split_writes_files_and_summary() {
    let dir = TempDir::new().unwrap();
    let prefix = split(dir.path());
    for ext in ["train", "valid", "test", "user.map", "item.map", "summary"] {
        assert!(dir.path().join(format!("data.{ext}")).exists(), "missing .{ext}");
    }
    let summary = fs::read_to_string(dir.path().join("data.summary")).unwrap();
    for field in ["Interaction#:", "Item#:", "User#:", "Sparsity:"] {
        assert!(summary.contains(field), "{summary}");
    }

    let again = dir.path().join("again");
    ok(&["split", "--input", s(&dir.path().join("log.tsv")), "--output", s(&again), "--validation", "--seed", "3"]);
    for ext in ["train", "valid", "test"] {
        assert_eq!(
            fs::read(format!("{}.{ext}", s(&prefix))).unwrap(),
            fs::read(format!("{}.{ext}", s(&again))).unwrap()
        );
    }
}

#[test]
fn missing_input_fails() {
    let dir = TempDir::new().unwrap();
    let out = apr(&["split", "--input", s(&dir.path().join("nope.tsv")), "--output", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.tsv"));
}

#[test]
fn zero_epochs_emits_initial_checkpoint() {
    let dir = TempDir::new().unwrap();
    let prefix = split(dir.path());
    let model = dir.path().join("init.bin");
    ok(&[
        "train", "--split", s(&prefix), "--stage", "bpr", "--set", "factors=4", "--set", "epochs=0", "--output", s(&model),
    ]);
    let bytes = fs::read(&model).unwrap();
    assert_eq!(&bytes[..8], b"APRMF\0\0\x01");
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0, "stage code");
    let history = fs::read_to_string(dir.path().join("init.bin.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
}

#[test]
fn training_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let prefix = split(dir.path());
    let conf = config(dir.path());
    let strip = |p: PathBuf| -> String {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut cols: Vec<&str> = l.split(',').collect();
                cols.remove(6);
                cols.join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let mut runs = Vec::new();
    for name in ["a.bin", "b.bin"] {
        let out = dir.path().join(name);
        ok(&["train", "--split", s(&prefix), "--stage", "bpr", "--config", s(&conf), "--output", s(&out)]);
        runs.push((fs::read(&out).unwrap(), strip(dir.path().join(format!("{name}.history.csv")))));
        assert!(dir.path().join(format!("{name}.best")).exists());
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn apr_without_init_pretrains_first() {
    let dir = TempDir::new().unwrap();
    let prefix = split(dir.path());
    let conf = config(dir.path());
    let out = dir.path().join("apr.bin");
    ok(&["train", "--split", s(&prefix), "--stage", "apr", "--config", s(&conf), "--output", s(&out)]);
    let history = fs::read_to_string(dir.path().join("apr.bin.history.csv")).unwrap();
    let mut lines = history.lines();
    assert!(lines.next().unwrap().ends_with(",mean_batch_ladv_gain"));
    let stages: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(stages.iter().filter(|s| **s == "bpr").count(), 5);
    assert_eq!(stages.iter().filter(|s| **s == "apr").count(), 7);
    assert_eq!(u32::from_le_bytes(fs::read(&out).unwrap()[12..16].try_into().unwrap()), 2);

    let cont = dir.path().join("cont.bin");
    ok(&[
        "train", "--split", s(&prefix), "--stage", "apr", "--config", s(&conf), "--init", s(&out), "--output", s(&cont),
    ]);
}

#[test]
fn unknown_config_key_fails() {
    let dir = TempDir::new().unwrap();
    let prefix = split(dir.path());
    let out = apr(&[
        "train", "--split", s(&prefix), "--stage", "bpr", "--set", "learning_rate=0.1", "--output", s(&dir.path().join("m")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn probe_outputs_and_errors() {
    let dir = TempDir::new().unwrap();
    let prefix = split(dir.path());
    let conf = config(dir.path());
    let model = dir.path().join("m.bin");
    ok(&["train", "--split", s(&prefix), "--stage", "bpr", "--config", s(&conf), "--output", s(&model)]);

    let csv = dir.path().join("probe.csv");
    ok(&[
        "probe", "--checkpoint", s(&model), "--split", s(&prefix), "--epsilons", "0,0.5,1,2", "--output", s(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("epsilon,mode,repeat,hr@100,ndcg@100,train_acc,ndcg_drop_pct\n"));
    assert_eq!(text.lines().count(), 1 + 4 * (1 + 5));
    for line in text.lines().filter(|l| l.starts_with("0,")) {
        assert!(line.ends_with(",0"), "{line}");
    }
    assert!(dir.path().join("probe.mean.csv").exists());

    let first_rows = |repeats: &str, name: &str| -> String {
        let out = dir.path().join(name);
        ok(&[
            "probe", "--checkpoint", s(&model), "--split", s(&prefix), "--epsilons", "0.5", "--modes", "random",
            "--repeats", repeats, "--seed", "8", "--output", s(&out),
        ]);
        fs::read_to_string(out).unwrap().lines().nth(1).unwrap().to_string()
    };
    assert_eq!(first_rows("1", "r1.csv"), first_rows("5", "r5.csv"));

    let out = apr(&[
        "probe", "--checkpoint", s(&model), "--split", s(&prefix), "--epsilons", "", "--output", s(&csv),
    ]);
    assert!(!out.status.success());
}

#[test]
fn eval_itempop_and_cutoffs() {
    let dir = TempDir::new().unwrap();
    let prefix = split(dir.path());
    let out = dir.path().join("pop.csv");
    let per_user = dir.path().join("ranks.csv");
    ok(&[
        "eval", "--model", "itempop", "--split", s(&prefix), "--cutoffs", "50,100", "--output", s(&out),
        "--per-user", s(&per_user),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "cutoff,hr,ndcg,n_users");
    assert!(lines[1].starts_with("50,") && lines[2].starts_with("100,"));
    assert!(fs::read_to_string(per_user).unwrap().starts_with("user,rank\n"));

    let stdout = ok(&["eval", "--model", "itempop", "--split", s(&prefix), "--cutoffs", "10"]).stdout;
    assert!(String::from_utf8(stdout).unwrap().starts_with("cutoff,hr,ndcg,n_users\n10,"));

    let bad = apr(&["eval", "--model", "itempop", "--split", s(&prefix), "--cutoffs", "0,10"]);
    assert!(!bad.status.success());
}
