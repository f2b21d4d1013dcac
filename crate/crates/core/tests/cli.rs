use std::path::Path;
use std::process::{Command, Output};

use tatt::synth::corpus::read_manifest;
use tatt::synth::pnm::read_pnm;

fn tatt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tatt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = tatt(&["train", "--bogus"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(!tatt(&["nonsense"], dir.path()).status.success());
}

#[test]
fn synth_train_eval_infer_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(tatt(
        &["synth", "--n", "20", "--seed", "7", "--out", "corpus/"],
        d,
    ));
    let m = read_manifest(&d.join("corpus")).unwrap();
    assert_eq!(m.records.len(), 20);

    ok(tatt(
        &[
            "train", "--phase", "tpg", "--steps", "2", "--batch", "2", "--out", "tpg.ckpt",
        ],
        d,
    ));
    ok(tatt(
        &[
            "train", "--corpus", "corpus/", "--steps", "3", "--batch", "2", "--beta", "0.1",
            "--ckpt", "tpg.ckpt", "--out", "m.ckpt",
        ],
        d,
    ));
    assert!(d.join("m.ckpt").is_file());
    let log = std::fs::read_to_string(d.join("m.ckpt.metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for key in ["step", "l_sr", "l_tp", "l_tsc", "total"] {
        assert!(lines[2].get(key).is_some(), "{key}");
    }

    // resuming continues from the saved step
    ok(tatt(
        &[
            "train", "--corpus", "corpus/", "--steps", "4", "--ckpt", "m.ckpt", "--out", "m4.ckpt",
        ],
        d,
    ));
    let resumed = std::fs::read_to_string(d.join("m4.ckpt.metrics.jsonl")).unwrap();
    assert_eq!(resumed.lines().count(), 1);

    let first = ok(tatt(
        &["eval", "--ckpt", "m.ckpt", "--corpus", "corpus/"],
        d,
    ));
    let second = ok(tatt(
        &["eval", "--ckpt", "m.ckpt", "--corpus", "corpus/"],
        d,
    ));
    assert_eq!(first, second);

    ok(tatt(
        &[
            "infer", "--ckpt", "m.ckpt", "--sample", "1", "--out", "sr.ppm",
        ],
        d,
    ));
    assert_eq!(read_pnm(&d.join("sr.ppm")).unwrap().shape(), &[32, 128, 3]);

    ok(tatt(
        &[
            "heatmap", "--ckpt", "m.ckpt", "--sample", "3", "--char", "0", "--out", "h.pgm",
        ],
        d,
    ));
    assert_eq!(read_pnm(&d.join("h.pgm")).unwrap().shape(), &[16, 64]);
    let bad = tatt(
        &[
            "heatmap", "--ckpt", "m.ckpt", "--sample", "3", "--char", "40",
        ],
        d,
    );
    assert!(!bad.status.success());
}

#[test]
fn gradcheck_subcommand_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(tatt(&["gradcheck", "--n", "1"], dir.path()));
    let last: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(last["pass"], true);
}
