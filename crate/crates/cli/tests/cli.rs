use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paradjoint"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn simulate_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "simulate",
        "builtin:rectifier",
        "--tend",
        "0.1",
        "--dt",
        "1e-6",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = dir.path().join("trajectory.csv");
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("t,v(in),v(out),i(Vin)\n"));
    assert_eq!(data_rows(&path).len(), 100_001);
}

#[test]
fn sens_has_one_column_per_parameter_and_one_solve_per_instant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "sens",
        "builtin:rectifier",
        "--window",
        "0.08:0.1",
        "--qoi",
        "v(out)",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = dir.path().join("sensitivity.csv");
    let text = fs::read_to_string(&path).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "t_m,C1,R1");
    let rows = data_rows(&path);
    assert_eq!(rows.len(), 2001);
    assert!(rows.iter().all(|r| r.split(',').count() == 3));
    let log = String::from_utf8_lossy(&o.stderr);
    assert!(log.contains("2001 instants, 2001 adjoint solves"), "{log}");
}

#[test]
fn sens_output_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(&[
            "sens",
            "builtin:rectifier",
            "--window",
            "0.098:0.1",
            "--workers",
            "1",
            "--seed",
            "3",
            "--N",
            "4",
            "--out",
            d.path().to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("sensitivity.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert!(a.path().join("parareal_reports.json").exists());
}

#[test]
fn spectrum_writes_psd_ranking_and_stack() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "spectrum",
        "builtin:rectifier",
        "--window",
        "0.097:0.1",
        "--top",
        "2",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ranking: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ranking.json")).unwrap())
            .unwrap();
    let ranking = ranking.as_array().unwrap();
    assert_eq!(ranking.len(), 2);
    assert!(ranking[0]["score"].as_f64().unwrap() >= ranking[1]["score"].as_f64().unwrap());
    let psd = fs::read_to_string(dir.path().join("psd.csv")).unwrap();
    let first = ranking[0]["param"].as_str().unwrap();
    assert!(psd
        .lines()
        .next()
        .unwrap()
        .starts_with(&format!("f_hz,{first},")));
    assert_eq!(psd.lines().count(), 1 + 129);
    for line in fs::read_to_string(dir.path().join("relative.csv"))
        .unwrap()
        .lines()
        .skip(1)
    {
        let cells: Vec<f64> = line
            .split(',')
            .skip(1)
            .take(2)
            .map(|c| c.parse().unwrap())
            .collect();
        assert!((cells.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn bench_rows_satisfy_the_efficiency_identity() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "bench",
        "builtin:rectifier",
        "--tm",
        "0.05",
        "--N",
        "1,2,4",
        "--reps",
        "1",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("sequential solution"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    let records = report["records"].as_array().unwrap();
    assert_eq!(records.len(), 3);
    for r in records {
        let n = r["n_subintervals"].as_f64().unwrap();
        let s = r["speedup"].as_f64().unwrap();
        let e = r["efficiency"].as_f64().unwrap();
        assert_eq!(
            s,
            r["sequential_wall_s"].as_f64().unwrap() / r["total_wall_s"].as_f64().unwrap()
        );
        assert_eq!(e, s / n);
        assert!(r["iterations"].as_u64().unwrap() >= 1);
    }
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn fixture_text_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["fixture", "b6"]);
    assert!(o.status.success());
    let path = dir.path().join("b6.cir");
    fs::write(&path, &o.stdout).unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "sens",
        path.to_str().unwrap(),
        "--tm",
        "19.1e-6",
        "--params",
        "C_DS_uh,L_uh-vh3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = data_rows(&out.join("sensitivity.csv"));
    assert_eq!(rows.len(), 1);
}

#[test]
fn input_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["simulate", "does-not-exist.cir"],
        vec!["simulate", "builtin:rectifier", "--bogus"],
        vec!["simulate", "builtin:nosuch"],
        vec![
            "sens",
            "builtin:rectifier",
            "--qoi",
            "v(nowhere)",
            "--out",
            out,
        ],
        vec![
            "sens",
            "builtin:rectifier",
            "--window",
            "0.1:0.08",
            "--out",
            out,
        ],
        vec![
            "sens",
            "builtin:rectifier",
            "--tm",
            "0.2",
            "--tend",
            "0.1",
            "--out",
            out,
        ],
        vec![
            "simulate",
            "builtin:rectifier",
            "--dt",
            "3e-7",
            "--tend",
            "1e-6",
            "--out",
            out,
        ],
        vec![
            "bench",
            "builtin:rectifier",
            "--tm",
            "0.05",
            "--N",
            "0",
            "--out",
            out,
        ],
    ] {
        let o = run(&args);
        assert_eq!(
            o.status.code(),
            Some(1),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn solver_failures_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loop.cir");
    fs::write(
        &path,
        "* parallel voltage sources\nV1 a 0 DC 1\nV2 a 0 DC 2\nR1 a 0 1\n.tran 1m 10m\n",
    )
    .unwrap();
    let o = run(&[
        "simulate",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn help_exits_with_0() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("simulate"));
}
