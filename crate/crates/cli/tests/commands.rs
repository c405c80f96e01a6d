use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use byzdistill::metrics::{self, Line};

const TINY: &str = "\
clients=4
alpha=0.25
rounds=2
model.hidden=8
data.classes=3
data.dim=4
data.per_class=60
client.epochs=1
server.epochs=3
attack.kind=LMA
defence.kind=GM
";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_byzdistill")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_one_line_per_round_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", TINY);
    let out = dir.path().join("m.jsonl");
    let o = bin(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = metrics::read_lines(&fs::read(&out).unwrap()[..]).unwrap();
    assert_eq!(lines.len(), 3);
    assert!(matches!(&lines[2], Line::Summary(s) if s.defence == "GM" && s.attack == "LMA" && s.byzantine == vec![3]));
}

#[test]
fn repeated_runs_match_apart_from_wall_time() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", &format!("{TINY}defence.expguard=true\ndefence.kind=FILTER_SCORE\n").replace("defence.kind=GM\n", ""));
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let o = bin(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read_to_string(a).unwrap();
    let b = fs::read_to_string(b).unwrap();
    assert_eq!(metrics::without_wall_times(&a), metrics::without_wall_times(&b));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.jsonl");
    let out = out.to_str().unwrap();

    let half = write_config(dir.path(), "half.txt", "alpha=0.5\n");
    assert_eq!(bin(&["run", "--config", &half, "--out", out]).status.code(), Some(2));

    let typo = write_config(dir.path(), "typo.txt", "atack.kind=LMA\n");
    let o = bin(&["run", "--config", &typo, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("atack.kind"), "{}", stderr(&o));

    let missing = dir.path().join("nope.txt");
    assert_eq!(bin(&["run", "--config", missing.to_str().unwrap(), "--out", out]).status.code(), Some(2));
}

#[test]
fn default_config_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "empty.txt", "");
    let out = dir.path().join("m.jsonl");
    let o = bin(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = metrics::read_lines(&fs::read(&out).unwrap()[..]).unwrap();
    assert_eq!(lines.len(), 11);
    match &lines[10] {
        Line::Summary(s) => {
            assert_eq!((s.clients, s.rounds, s.alpha), (20, 10, 0.45));
            assert_eq!((s.attack.as_str(), s.defence.as_str()), ("LMA", "EGF"));
        }
        other => panic!("expected summary, got {other:?}"),
    }
}

fn table(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("summary.tsv"))
        .unwrap()
        .lines()
        .map(|l| l.split('\t').map(String::from).collect())
        .collect()
}

#[test]
fn alpha_sweep_writes_a_file_per_value_and_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY
        .replace("clients=4\nalpha=0.25\n", "clients=20\nalpha=0\n")
        .replace("attack.kind=LMA", "attack.kind=RLF")
        .replace("defence.kind=GM", "defence.kind=MEAN");
    let cfg = write_config(dir.path(), "c.txt", &text);
    let out = dir.path().join("sweep");
    let o = bin(&["sweep", "--config", &cfg, "--axis", "alpha", "--values", "0,0.1,0.45", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "jsonl")).count();
    assert_eq!(files, 3);
    let t = table(&out);
    assert_eq!(t[0], ["alpha", "attack", "defence", "acc_mean", "acc_std"]);
    assert_eq!(t.len(), 4);
    assert!(t[1..].iter().all(|r| r[1] == "RLF" && r[2] == "MEAN"));
}

#[test]
fn client_sweep_with_two_seeds_fills_std() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", &format!("{TINY}seeds=1,2\n"));
    let out = dir.path().join("sweep");
    let o = bin(&["sweep", "--config", &cfg, "--axis", "clients", "--values", "4,20", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = table(&out);
    assert_eq!(t.iter().skip(1).map(|r| r[0].as_str()).collect::<Vec<_>>(), ["4", "20"]);
    for row in &t[1..] {
        let std: f64 = row[4].parse().unwrap();
        assert!(std.is_finite() && std >= 0.0);
    }
    assert_eq!(fs::read_dir(&out).unwrap().count(), 5);
    assert!(t[1..].iter().any(|r| r[4].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn invalid_sweep_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", TINY);
    let out = dir.path().join("sweep");
    let o = bin(&["sweep", "--config", &cfg, "--axis", "alpha", "--values", "0,0.5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_command_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("checks.jsonl");
    let o = bin(&["check", "--names", "median_counterexample", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("\"passed\":true"));

    assert_eq!(bin(&["check", "--names", "no_such_check"]).status.code(), Some(2));
}

#[test]
fn check_all_emits_every_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("checks.jsonl");
    let o = bin(&["check", "--names", "all", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines = fs::read_to_string(&out).unwrap().lines().count();
    assert!(lines >= 5);
}
