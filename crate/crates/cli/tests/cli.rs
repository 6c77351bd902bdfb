use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

fn faultscope(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_faultscope")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "faultscope {args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// 28x28 CSV where the label is the brightest quadrant's index mod 10.
fn write_csv(path: &Path, n: usize) {
    let mut s = String::new();
    for i in 0..n {
        let label = i % 4;
        let _ = write!(s, "{label}");
        for p in 0..784 {
            let (r, c) = (p / 28, p % 28);
            let q = (r / 14) * 2 + c / 14;
            let v = if q == label { 200 + (p * 7 + i) % 50 } else { (p * 13 + i * 3) % 60 };
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn train_harden_inject_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_csv(&dir.join("data.csv"), 48);

    let o = faultscope(dir, &["train", "--data", "data.csv", "--test", "data.csv", "--arch", "mnist-micro", "--epochs", "2", "--out", "m.fsnn"]);
    assert!(stdout(&o).contains("test accuracy"));

    for t in ["ranger", "clipper", "relu6"] {
        let out = format!("{t}.fsnn");
        faultscope(dir, &["harden", "--model", "m.fsnn", "--technique", t, "--calib", "data.csv", "--calib-size", "16", "--out", &out]);
        assert!(dir.join(format!("{t}.manifest.txt")).exists());
    }

    let o = faultscope(dir, &["inject-app", "--model", "ranger.fsnn", "--data", "data.csv", "--target", "neurons", "--bler", "0.1", "--ner", "0.1", "--bit", "30", "--runs", "5", "--out", "app.jsonl"]);
    assert!(stdout(&o).starts_with("runs 5:"));
    assert_eq!(std::fs::read_to_string(dir.join("app.jsonl")).unwrap().lines().count(), 5);

    let o = faultscope(dir, &["inject-app", "--model", "m.fsnn", "--data", "data.csv", "--target", "weights", "--mode", "mbf", "--ber", "0.001,0.01", "--out", "mbf.jsonl"]);
    assert!(stdout(&o).starts_with("runs 2:"));

    let o = faultscope(dir, &["inject-isa", "--model", "m.fsnn", "--data", "data.csv", "--eval-subset", "4", "--fault", "reg:R0:bit31:sa1", "--dump-asm", "m.s"]);
    let line = stdout(&o);
    assert!(line.contains("\"label\":\"due\""), "{line}");
    assert!(std::fs::read_to_string(dir.join("m.s")).unwrap().contains("HALT"));

    let o = faultscope(dir, &["inject-isa", "--model", "m.fsnn", "--data", "data.csv", "--eval-subset", "2", "--target", "fus", "--exhaustive", "--out", "fus.jsonl"]);
    assert!(stdout(&o).starts_with("runs "));

    std::fs::write(
        dir.join("c.toml"),
        "seed = 1\neval_subset = 8\nout = \"camp\"\ninjectors = [\"isa-regs\", \"app-weights-sbf\"]\n\
         [[model]]\nname = \"m\"\npath = \"m.fsnn\"\n[data]\ntest_csv = \"data.csv\"\ncalib_csv = \"data.csv\"\ncalibration = 8\n\
         [hardening]\nlist = [\"baseline\", \"swap_relu6\"]\n[sizing]\nmargin = 0.2\n[isa]\ninputs = 2\n",
    )
    .unwrap();
    let o = faultscope(dir, &["campaign", "--config", "c.toml"]);
    assert!(stdout(&o).contains("[critical_sdc ranking per injector, best first]"));
    let before = std::fs::read(dir.join("camp/records.jsonl")).unwrap();
    let o = faultscope(dir, &["campaign", "--config", "c.toml", "--resume"]);
    assert!(stdout(&o).contains(" 0 executed"), "{}", stdout(&o));
    assert_eq!(std::fs::read(dir.join("camp/records.jsonl")).unwrap(), before);

    faultscope(dir, &["report", "--records", "camp/records.jsonl", "--out", "rep"]);
    assert_eq!(std::fs::read(dir.join("rep/fault_distribution.csv")).unwrap(), std::fs::read(dir.join("camp/fault_distribution.csv")).unwrap());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| Command::new(env!("CARGO_BIN_EXE_faultscope")).current_dir(tmp.path()).args(args).output().unwrap();
    assert!(!run(&["train", "--data", "x", "--arch", "vgg", "--out", "m"]).status.success());
    let o = run(&["inject-isa", "--model", "missing.fsnn"]);
    assert!(!o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    std::fs::write(tmp.path().join("c.toml"), "seed = 1\ninjectors = []\n[[model]]\nname = \"m\"\npath = \"m\"\n").unwrap();
    assert!(!run(&["campaign", "--config", "c.toml"]).status.success());
    assert!(!tmp.path().join("out").exists());
}
