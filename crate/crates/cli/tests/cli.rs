use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn ltsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltsa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ltsa(args);
    assert!(
        out.status.success(),
        "ltsa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, preset: &str, patients: usize, seed: u64) -> String {
    ok(&["simulate", "--preset", preset, "--patients", &patients.to_string(), "--seed", &seed.to_string(), "--out", s(dir)])
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn same_files(a: &Path, b: &Path, names: &[&str]) {
    for n in names {
        assert_eq!(read(a.join(n)), read(b.join(n)), "{n} differs");
    }
}

struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path().to_path_buf();
        Fixture { _tmp: tmp, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn help_works_for_every_subcommand() {
    for sub in ["simulate", "train", "evaluate", "compare", "attention", "plot"] {
        let out = ltsa(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help");
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("--seed") && text.contains("--out") && text.contains("--config"), "{sub}");
    }
}

#[test]
fn simulate_is_reproducible_and_prints_a_summary() {
    let f = Fixture::new();
    let a = simulate(&f.path("a"), "smoke", 60, 5);
    let b = simulate(&f.path("b"), "smoke", 60, 5);
    assert_eq!(a, b);
    assert!(a.contains("Censored cases, n (%)"));
    same_files(&f.path("a"), &f.path("b"), &["manifest.csv", "cohort.json", "truth.csv", "splits.csv", "summary.txt"]);
    simulate(&f.path("c"), "smoke", 60, 6);
    assert_ne!(read(f.path("a/manifest.csv")), read(f.path("c/manifest.csv")));
}

#[test]
fn zero_hazard_preset_reports_no_events() {
    let f = Fixture::new();
    let text = simulate(&f.path("z"), "zero-hazard", 20, 1);
    assert!(text.contains("0 events"), "{text}");
}

#[test]
fn exit_codes_follow_error_kinds() {
    let f = Fixture::new();
    let out = ltsa(&["simulate", "--out", s(&f.path("x"))]);
    assert_eq!(out.status.code(), Some(2), "missing seed");

    let out = ltsa(&["evaluate", "--model", "oracle", "--data", s(&f.path("nowhere")), "--seed", "1", "--out", s(&f.path("o"))]);
    assert_eq!(out.status.code(), Some(3), "missing dataset");

    let cfg = f.path("bad.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 1}}"#).unwrap();
    simulate(&f.path("d"), "smoke", 20, 1);
    let out = ltsa(&["train", "--data", s(&f.path("d")), "--config", s(&cfg), "--seed", "1", "--out", s(&f.path("t"))]);
    assert_eq!(out.status.code(), Some(2), "unknown config key");

    fs::write(f.path("d/manifest.csv"), "not,a,manifest\n").unwrap();
    let out = ltsa(&["evaluate", "--model", "oracle", "--data", s(&f.path("d")), "--seed", "1", "--out", s(&f.path("o"))]);
    assert_eq!(out.status.code(), Some(3), "corrupt manifest");
}

#[test]
fn training_resumes_bit_exactly() {
    let f = Fixture::new();
    let data = f.path("data");
    simulate(&data, "smoke", 40, 3);
    let d = s(&data);
    ok(&["train", "--kind", "ltsa", "--data", d, "--epochs", "3", "--seed", "9", "--out", s(&f.path("straight"))]);
    ok(&["train", "--kind", "ltsa", "--data", d, "--epochs", "2", "--seed", "9", "--out", s(&f.path("half"))]);
    ok(&[
        "train", "--kind", "ltsa", "--data", d, "--epochs", "3", "--resume", s(&f.path("half")), "--seed", "9", "--out",
        s(&f.path("resumed")),
    ]);
    same_files(&f.path("straight"), &f.path("resumed"), &["tensors.bin", "manifest.txt", "config.json", "history.csv"]);
    let history = String::from_utf8(read(f.path("straight/history.csv"))).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_metric,lr\n"));
    assert_eq!(history.lines().count(), 4);
}

#[test]
fn baseline_trains_and_checkpoints_evaluate() {
    let f = Fixture::new();
    let data = f.path("data");
    simulate(&data, "smoke", 40, 4);
    ok(&["train", "--kind", "baseline", "--data", s(&data), "--epochs", "1", "--seed", "2", "--out", s(&f.path("ck"))]);
    let cfg = String::from_utf8(read(f.path("ck/config.json"))).unwrap();
    assert!(cfg.contains("\"baseline\""));
    let text = ok(&["evaluate", "--model", s(&f.path("ck")), "--data", s(&data), "--boot", "10", "--seed", "1", "--out", s(&f.path("ev"))]);
    assert!(text.starts_with("baseline:"));
}

#[test]
fn evaluate_writes_reproducible_reports() {
    let f = Fixture::new();
    let data = f.path("data");
    simulate(&data, "smoke", 80, 2);
    for out in ["e1", "e2"] {
        ok(&["evaluate", "--model", "oracle", "--data", s(&data), "--boot", "20", "--seed", "4", "--out", s(&f.path(out))]);
    }
    same_files(&f.path("e1"), &f.path("e2"), &["concordance.csv", "brier.csv", "samples.csv"]);
    let report = String::from_utf8(read(f.path("e1/concordance.csv"))).unwrap();
    assert!(report.starts_with("model,t,dt,estimate,boot_mean,ci_lo,ci_hi,p_adjusted,stars,n_pairs,n_risk_set\n"));
    assert!(report.lines().count() - 1 <= 20);
}

#[test]
fn comparing_a_model_with_itself_is_never_significant() {
    let f = Fixture::new();
    let data = f.path("data");
    simulate(&data, "smoke", 80, 2);
    ok(&["compare", "--a", "oracle", "--b", "oracle", "--data", s(&data), "--boot", "30", "--seed", "1", "--out", s(&f.path("c"))]);
    let mut rdr = csv::Reader::from_path(f.path("c/comparison.csv")).unwrap();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        if !rec[4].is_empty() {
            assert_eq!(rec[4].parse::<f64>().unwrap(), 1.0);
            assert_eq!(&rec[5], "ns");
        }
    }
}

#[test]
fn oracle_beats_anti_oracle_everywhere() {
    let f = Fixture::new();
    let data = f.path("data");
    simulate(&data, "areds", 400, 8);
    let text = ok(&["compare", "--a", "oracle", "--b", "anti-oracle", "--data", s(&data), "--boot", "200", "--seed", "3", "--out", s(&f.path("c"))]);
    let mut rdr = csv::Reader::from_path(f.path("c/comparison.csv")).unwrap();
    let mut checked = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        if &rec[0] == "concordance" && !rec[4].is_empty() {
            assert_eq!(&rec[5], "****", "cell t={} dt={}\n{text}", &rec[1], &rec[2]);
            checked += 1;
        }
    }
    assert!(checked > 10);
}

#[test]
fn attention_scores_peak_at_one_per_eye() {
    let f = Fixture::new();
    let data = f.path("data");
    simulate(&data, "smoke", 40, 6);
    ok(&["train", "--data", s(&data), "--epochs", "1", "--seed", "5", "--out", s(&f.path("ck"))]);
    let text = ok(&["attention", "--model", s(&f.path("ck")), "--data", s(&data), "--seed", "1", "--out", s(&f.path("att"))]);
    assert!(text.contains("Pearson r"));
    let mut rdr = csv::Reader::from_path(f.path("att/attention_scores.csv")).unwrap();
    let mut max: std::collections::BTreeMap<(String, String), f64> = Default::default();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let v: f64 = rec[4].parse().unwrap();
        assert!(v > 0.0 && v <= 1.0);
        let m = max.entry((rec[0].to_string(), rec[1].to_string())).or_insert(0.0);
        *m = m.max(v);
    }
    assert!(!max.is_empty());
    assert!(max.values().all(|&m| m == 1.0));
    let bins = String::from_utf8(read(f.path("att/attention_bins.csv"))).unwrap();
    assert!(bins.starts_with("offset,n,median\n0,"));

    let out = ltsa(&["attention", "--model", "oracle", "--data", s(&data), "--seed", "1", "--out", s(&f.path("x"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plots_are_deterministic_and_complain_when_empty() {
    let f = Fixture::new();
    let data = f.path("data");
    simulate(&data, "smoke", 60, 2);
    ok(&["evaluate", "--model", "oracle", "--data", s(&data), "--boot", "20", "--seed", "4", "--out", s(&f.path("ev"))]);
    let samples = f.path("ev/samples.csv");
    for out in ["p1", "p2"] {
        ok(&["plot", "box", "--samples", s(&samples), "--out", s(&f.path(out))]);
    }
    same_files(&f.path("p1"), &f.path("p2"), &["concordance_box.svg"]);
    assert!(String::from_utf8(read(f.path("p1/concordance_box.svg"))).unwrap().starts_with("<svg"));

    let empty = f.path("empty.csv");
    fs::write(&empty, "model,metric,t,dt,sample,value\n").unwrap();
    let out = ltsa(&["plot", "box", "--samples", s(&empty), "--out", s(&f.path("p3"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ltsa evaluate"));

    let manifest = String::from_utf8(read(data.join("manifest.csv"))).unwrap();
    let mut eyes: Vec<String> = manifest
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            format!("{}:{}", c[0], c[1])
        })
        .collect();
    eyes.dedup();
    ok(&[
        "plot", "curves", "--model", "oracle", "--model", "anti-oracle", "--data", s(&data), "--eye", &eyes[0], "--eye", &eyes[1],
        "--out", s(&f.path("curves")),
    ]);
    let svg = String::from_utf8(read(f.path("curves/survival_curves.svg"))).unwrap();
    assert_eq!(svg.matches(r#"data-model="oracle""#).count(), 2);
    assert_eq!(svg.matches(r#"data-model="anti-oracle""#).count(), 2);
}

#[test]
fn run_config_fuzz_seeds_are_valid_configs() {
    use ltsa::cohort::CohortConfig;
    use ltsa::model::ModelKind;
    use ltsa::trainer::TrainConfig;
    use ltsa_cli::config::RunConfig;
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/run_config");
    for e in fs::read_dir(dir).unwrap() {
        let text = fs::read_to_string(e.unwrap().path()).unwrap();
        let rc = RunConfig::parse(&text).unwrap();
        rc.cohort(CohortConfig::areds_like(10, 0)).unwrap();
        rc.train(TrainConfig::desk(ModelKind::Ltsa)).unwrap();
        rc.grid().unwrap();
        rc.n_boot().unwrap();
        rc.split().unwrap();
    }
}
