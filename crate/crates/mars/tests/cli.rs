use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mars::checkpoint::Checkpoint;
use mars::commands::{facet_file_name, read_export};

fn mars(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mars")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    ok_in(Path::new("."), args)
}

fn ok_in(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mars")).current_dir(dir).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file below `dir` by relative path, minus wall-clock timings.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timing.tsv" {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// synth-conflict, split, train (3 epochs) and eval inside `root`, with
/// relative paths so that recorded paths agree across roots.
fn pipeline(root: &Path) {
    let run = |args: &[&str]| ok_in(root, args);
    run(&["synth-conflict", "--blocks", "20", "--out", "synth", "--seed", "3"]);
    run(&["split", "--input", "synth/conflict.tsv", "--out", "data", "--seed", "3"]);
    run(&[
        "train", "--data", "data", "--out", "run", "--variant", "mars", "--k", "2", "--dim", "6",
        "--epochs", "3", "--batch-size", "8", "--eval-negatives", "20", "--seed", "3", "--quiet",
    ]);
    run(&[
        "eval", "--data", "data", "--checkpoint", "run/best.json", "--negatives", "20", "--cutoffs",
        "1,5,10", "--seed", "3", "--out", "eval.json", "--ranks", "ranks.tsv",
    ]);
}

#[test]
fn pipeline_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs", k.display());
    }
    assert!(sa.contains_key(Path::new("eval.json")));
    assert!(sa.contains_key(Path::new("run/train_log.jsonl")));
}

#[test]
fn workers_do_not_change_eval() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path());
    let data = d.path().join("data");
    let ck = d.path().join("run/best.json");
    let many = d.path().join("eval4.json");
    ok(&[
        "eval", "--data", s(&data), "--checkpoint", s(&ck), "--negatives", "20", "--cutoffs", "1,5,10",
        "--seed", "3", "--workers", "4", "--out", s(&many),
    ]);
    assert_eq!(fs::read(d.path().join("eval.json")).unwrap(), fs::read(&many).unwrap());
}

#[test]
fn export_reimports_the_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path());
    let ck_path = d.path().join("run/best.json");
    let out = d.path().join("export");
    ok(&["export", "--checkpoint", s(&ck_path), "--out", s(&out)]);
    let p = Checkpoint::load(&ck_path).unwrap().params;
    for k in 0..p.n_facets() {
        let rows = read_export(&out.join(facet_file_name(k))).unwrap();
        assert_eq!(rows.len(), p.n_users() + p.n_items());
        for (u, (tag, row)) in rows.iter().take(p.n_users()).enumerate() {
            assert_eq!(tag, &format!("u:{u}"));
            assert_eq!(row.as_slice(), p.user_facets(u).facet(k));
        }
        for (v, (tag, row)) in rows.iter().skip(p.n_users()).enumerate() {
            assert_eq!(tag, &format!("i:{v}"));
            assert_eq!(row.as_slice(), p.item_facets(v).facet(k));
        }
    }
    let weights = read_export(&out.join("facet_weights.tsv")).unwrap();
    assert_eq!(weights[0].1, p.facet_weights(0));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path());
    let data = d.path().join("data");
    let again = d.path().join("again");
    ok(&["train", "--data", s(&data), "--out", s(&again), "--config", s(&d.path().join("run/config.resolved")), "--quiet"]);
    assert_eq!(
        fs::read(d.path().join("run/best.json")).unwrap(),
        fs::read(again.join("best.json")).unwrap()
    );
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    for variant in ["mar", "mars"] {
        let out = ok(&["gradcheck", "--variant", variant]);
        assert!(!out.stdout.is_empty());
    }
    let bad = mars(&["gradcheck", "--variant", "mars", "--corrupt", "user_emb[2,1]=1e-3"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("user_emb[2,1]"));
}

#[test]
fn missing_input_is_a_clean_error() {
    let d = tempfile::tempdir().unwrap();
    let out = mars(&["split", "--input", s(&d.path().join("nope.tsv")), "--out", s(&d.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("nope.tsv"), "{err}");
}

#[test]
fn bad_rows_report_their_line() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("x.tsv");
    fs::write(&input, "a\tb\t1\nc\n").unwrap();
    let out = mars(&["split", "--input", s(&input), "--out", s(&d.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x.tsv:2"));
}

#[test]
fn cml_forces_one_facet() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path());
    let run = d.path().join("cml");
    let out = ok(&[
        "train", "--data", s(&d.path().join("data")), "--out", s(&run), "--variant", "cml", "--k", "4",
        "--epochs", "1", "--quiet",
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("forces k = 1"));
    assert_eq!(Checkpoint::load(&run.join("best.json")).unwrap().k, 1);
}
