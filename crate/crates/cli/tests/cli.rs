use std::path::Path;
use std::process::{Command, Output};

fn dcmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcmap")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_then_fit_and_classify() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let sim = dcmap(&["simulate", "--out", p(&data), "--rows", "4", "--cols", "4", "--years", "3", "--seed", "5"]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    for f in ["counts.csv", "population.csv", "graph.tsv", "truth.csv", "area_meta.csv", "partition_labels.csv"] {
        assert!(data.join(f).is_file(), "{f}");
    }

    let out = dir.path().join("fit");
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "counts = \"{}\"\npopulation = \"{}\"\ngraph = \"{}\"\narea_meta = \"{}\"\nn_draws = 100\n",
            p(&data.join("counts.csv")),
            p(&data.join("population.csv")),
            p(&data.join("graph.tsv")),
            p(&data.join("area_meta.csv")),
        ),
    )
    .unwrap();
    let fit = dcmap(&[
        "fit",
        "--config",
        p(&config),
        "--out",
        p(&out),
        "--prior",
        "bym2",
        "--interaction",
        "1",
        "--partition-labels",
        p(&data.join("partition_labels.csv")),
        "--workers",
        "1",
    ]);
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"prior\": \"bym2\"") || manifest.contains("\"prior\":\"bym2\""));
    assert!(out.join("risks.csv").is_file());

    let classes = dir.path().join("classes");
    let classify = dcmap(&["classify", "--config", p(&config), "--out", p(&classes), "--year", "2001"]);
    assert!(classify.status.success(), "{}", String::from_utf8_lossy(&classify.stderr));
    let body = std::fs::read_to_string(classes.join("risk_classes.csv")).unwrap();
    assert_eq!(body.lines().count(), 1 + 16);
}

#[test]
fn missing_input_exits_with_input_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("absent.csv");
    let r = dcmap(&["fit", "--counts", p(&missing), "--population", p(&missing), "--graph", p(&missing), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("absent.csv"));
    assert!(!out.exists());
}

#[test]
fn invalid_flag_value_is_rejected() {
    let r = dcmap(&["fit", "--prior", "car"]);
    assert!(!r.status.success());
    let r = dcmap(&["fit", "--config", "/nonexistent/run.toml"]);
    assert_eq!(r.status.code(), Some(2));
}
