use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use retro_core::molgraph::{canonical_smiles, parse_smiles};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name)
}

fn retro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retro")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = retro(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TARGET: &str = "CC(=O)NCc1ccc(-c2ccccc2)cc1";
const REACTION: &str = "O[C:1](=[O:2])[CH3:4].[NH2:3][CH2:5][c:6]1[cH:7][cH:9][c:11](-[c:12]2[cH:13][cH:15][cH:17][cH:16][cH:14]2)[cH:10][cH:8]1>>[C:1](=[O:2])([NH:3][CH2:5][c:6]1[cH:7][cH:9][c:11](-[c:12]2[cH:13][cH:15][cH:17][cH:16][cH:14]2)[cH:10][cH:8]1)[CH3:4]";

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("model.ckpt");
    let log = dir.path().join("train.log");
    let vocab = dir.path().join("lg.tsv");
    let corpus = data("route_grammar.csv");

    let stats = ok(&["vocab", "--corpus", s(&corpus), "--out", s(&vocab)]);
    assert!(stats.contains("leaving_groups\t"));
    assert!(vocab.exists());

    ok(&[
        "train", "--corpus", s(&corpus), "--vocab", s(&vocab), "--out", s(&ck), "--log", s(&log), "--steps", "300", "--epochs", "1000",
        "--d", "32", "--d-k", "8", "--heads", "4", "--layers", "2", "--max-hop", "2",
    ]);
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 300);
    // step, four losses, three weights, total
    assert!(lines.lines().all(|l| l.split('\t').count() == 9));

    let pred = ok(&["predict", "--checkpoint", s(&ck), "--smiles", TARGET, "--topk", "3"]);
    let rows: Vec<Vec<&str>> = pred.lines().map(|l| l.split('\t').collect()).collect();
    assert!(!rows.is_empty() && rows.len() <= 3);
    let mut last = f64::NEG_INFINITY;
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 7);
        assert_eq!(r[0], (i + 1).to_string());
        let total: f64 = r[1].parse().unwrap();
        let sum: f64 = r[2..6].iter().map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((total - sum).abs() < 1e-5);
        assert!(total >= last);
        last = total;
    }
    let query = ok(&["query", "--checkpoint", s(&ck), "--product", TARGET, "--reactants", rows[0][6]]);
    assert_eq!(query.split('\t').nth(1), Some(rows[0][1]));

    let plan = ok(&[
        "plan", "--checkpoint", s(&ck), "--target", TARGET, "--blocks", s(&data("route_grammar_blocks.smi")),
        "--max-expansions", "30",
    ]);
    let json_start = plan.find("\n[").unwrap() + 1;
    let routes: serde_json::Value = serde_json::from_str(&plan[json_start..]).unwrap();
    let canonical = canonical_smiles(&parse_smiles(TARGET).unwrap());
    assert_eq!(routes[0]["target"], canonical.as_str());
    assert!(plan[..json_start].starts_with(&canonical));

    let apex = ok(&["explain", "apex", "--checkpoint", s(&ck), "--reaction", REACTION, "--task", "rcp"]);
    assert_eq!(apex.lines().count(), 17);
    let trace = retro(&["explain", "trace", "--checkpoint", s(&ck), "--reaction", REACTION]);
    assert!(!trace.status.success());
    let report = dir.path().join("heads.json");
    let heads = ok(&["explain", "heads", "--checkpoint", s(&ck), "--smiles", TARGET, "--json", s(&report)]);
    assert_eq!(heads.lines().count(), 4);
    assert!(report.exists());

    let resumed = dir.path().join("more.ckpt");
    ok(&["train", "--corpus", s(&corpus), "--resume", s(&ck), "--out", s(&resumed), "--steps", "5", "--log", s(&log)]);
    assert!(resumed.exists());
}

#[test]
fn bad_input_fails_cleanly() {
    let out = retro(&["predict", "--checkpoint", "/nonexistent.ckpt", "--smiles", "CC"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("loading checkpoint"));
    let out = retro(&["serve"]);
    assert!(!out.status.success());
}
