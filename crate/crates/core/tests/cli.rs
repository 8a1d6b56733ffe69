mod common;

use cadistill::cli::{read_rollouts, robustness_table, weight_table, write_robustness_table, write_weight_table};
use cadistill::kernel::KernelParams;
use cadistill::sim::{build_world, train, write_metrics, WeightScheme};
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadistill")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn golden_path() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/golden.toml").display().to_string()
}

const ROLLOUTS: &str = "{\"problem_id\":\"a\",\"outcomes\":[true,false,false,false]}
{\"problem_id\":\"b\",\"outcomes\":[true,true,false,false]}
{\"problem_id\":\"c\",\"outcomes\":[false,false,false,false]}
";

#[test]
fn robustness_matches_library() {
    let mut expected = Vec::new();
    write_robustness_table(&mut expected, &robustness_table(&[0.2]).unwrap()).unwrap();
    assert_eq!(stdout(&run(&["robustness", "--delta", "0.2"])), String::from_utf8(expected).unwrap());
}

#[test]
fn weight_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    std::fs::write(&path, ROLLOUTS).unwrap();
    let records = read_rollouts(ROLLOUTS.as_bytes()).unwrap();
    for (args, scheme) in [
        (vec!["--alpha", "2", "--beta", "1"], WeightScheme::Beta(KernelParams { alpha: 2.0, beta: 1.0 })),
        (vec!["--hard-filter", "0.2", "0.8"], WeightScheme::HardFilter { lo: 0.2, hi: 0.8 }),
    ] {
        let mut expected = Vec::new();
        write_weight_table(&mut expected, &weight_table(&records, scheme, 0.0).unwrap().0).unwrap();
        let out = dir.path().join("w.csv");
        let mut full = vec!["weight", path.to_str().unwrap(), "--out", out.to_str().unwrap()];
        full.extend(args);
        stdout(&run(&full));
        assert_eq!(std::fs::read(&out).unwrap(), expected);
    }
}

#[test]
fn errors_carry_codes_and_lines() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, format!("{ROLLOUTS}{{\"problem_id\":\"a\",\"outcomes\":[true]}}\n")).unwrap();
    let o = run(&["weight", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error[parse]: line 4"), "{err}");

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let err = String::from_utf8_lossy(&run(&["weight", empty.to_str().unwrap()]).stderr).to_string();
    assert!(err.contains("no records"), "{err}");

    let o = run(&["variance-ratio", "--gamma1", "-1", "--gamma2", "0"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[domain]"));

    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[training]\nstepz = 3\n").unwrap();
    let o = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[config]"));
}

#[test]
fn select_exponents_reports_invalid_without_failing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    // in-band pass rates 1/8 and 7/8 only: variance above the flat limit
    std::fs::write(
        &path,
        "{\"problem_id\":\"a\",\"outcomes\":[true,false,false,false,false,false,false,false]}\n{\"problem_id\":\"b\",\"outcomes\":[true,true,true,true,true,true,true,false]}\n",
    )
    .unwrap();
    let out = stdout(&run(&["select-exponents", path.to_str().unwrap()]));
    assert!(out.lines().nth(1).unwrap().ends_with("invalid,flat"), "{out}");
}

#[test]
fn variance_ratio_from_signal_exponents() {
    let a = stdout(&run(&["variance-ratio", "--a-s", "0.25", "--b-s", "0.25", "--a-prime", "1", "--b-prime", "1"]));
    let b = stdout(&run(&["variance-ratio", "--gamma1", "-0.5", "--gamma2", "-0.5"]));
    assert_eq!(a, b);
    assert!(b.lines().nth(1).unwrap().contains(",0.84375,"), "{b}");
}

#[test]
fn simulate_matches_library_and_feeds_the_snr_pipeline() {
    let config = common::golden_config();
    let mut expected = Vec::new();
    write_metrics(&mut expected, &train(&mut build_world(&config).unwrap(), &config).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let dumps = dir.path().join("dumps");
    let out = stdout(&run(&["simulate", "--config", &golden_path(), "--dump-gradients", dumps.to_str().unwrap()]));
    assert_eq!(out.as_bytes(), expected.as_slice());

    let profile = dir.path().join("profile.csv");
    let o = run(&[
        "snr-profile",
        dumps.join("gradients_step0.csv").to_str().unwrap(),
        "--bins",
        "10",
        "--out",
        profile.to_str().unwrap(),
    ]);
    assert!(stdout(&o).starts_with("bell: is_bell=true"));
    let fit = stdout(&run(&["fit-snr", profile.to_str().unwrap()]));
    assert!(fit.starts_with("a_prime,b_prime,c0,c1,delta,efficiency_floor,points\n"));
    assert!(dumps.join("gradients_step20.csv").exists());
}

#[test]
fn simulate_flag_overrides() {
    let o = run(&[
        "simulate",
        "--steps",
        "4",
        "--schedule",
        "two_stage",
        "--stage1-fraction",
        "0.5",
        "--seed",
        "3",
        "--k",
        "4",
    ]);
    let out = stdout(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("recomputed at steps [2]"));
    let stages: Vec<&str> = out.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(stages, ["forward", "reverse"]);
    let o = run(&["simulate", "--steps", "4", "--stage1-fraction", "0.5"]);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[config]"));
}
