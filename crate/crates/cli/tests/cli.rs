use std::path::Path;
use std::process::{Command, Output};

use fedpart::problems::{make_quadratic_ensemble, QuadraticEnsembleSpec};
use fedpart_cli::{ExperimentConfig, Manifest, MetricRecord};

fn fedpart(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedpart"))
        .args(args)
        .current_dir(dir)
        .env_remove("FEDPART_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn records(path: &Path) -> Vec<MetricRecord> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const SMALL: &str = r#"
seed = 21

[problem]
kind = "quadratic"
n = 6
d0 = 3
personal_dim = 2

[shared]
rounds = 4
cohort_size = 3
gamma_u = 0.1
gamma_v = 0.1
tau = 2

[personalized]
algorithm = "fedalt"
rounds = 7
cohort_size = 3
gamma_u = 0.1
gamma_v = 0.1
tau = 2
noise = { mode = "additive-gaussian", sigma_u = 0.1, sigma_v = 0.1 }

[finetune]
epochs = 2
lr = 0.05
"#;

#[test]
fn zero_round_config_writes_manifest_and_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "seed = 1\n[problem]\nkind = \"quadratic\"\nn = 3\nd0 = 2\n\n[personalized]\nalgorithm = \"fedsim\"\nrounds = 0\ncohort_size = 1\ngamma_u = 0.1\ngamma_v = 0.1\n";
    std::fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let o = fedpart(&["run", "c.toml", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert!(out.join("manifest.toml").exists());
    assert_eq!(std::fs::read_to_string(out.join("metrics.jsonl")).unwrap(), "");
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3 + 1);
    assert!(summary.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn replay_reproduces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o = fedpart(&["run", "c.toml", "--out", "a"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = fedpart(&["replay", "a/manifest.toml", "--out", "b"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.jsonl", "summary.csv", "manifest.toml"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs after replay");
    }
    let recs = records(&dir.path().join("a/metrics.jsonl"));
    assert_eq!(recs.len(), 4 + 7);
    assert!(recs.iter().all(|r| r.schema_version == 1 && r.cohort.len() == 3));
    assert_eq!(recs[0].stage, "shared");
    assert_eq!(recs[4].stage, "personalized");
}

#[test]
fn manifest_spells_out_every_default() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    assert!(fedpart(&["run", "c.toml", "--out", "a"], dir.path()).status.success());
    let m = Manifest::load(&dir.path().join("a/manifest.toml")).unwrap();
    assert_eq!(m.config.resolved(), m.config);
    let text = std::fs::read_to_string(dir.path().join("a/manifest.toml")).unwrap();
    for key in ["tau_u", "metric_cadence", "statefulness", "coupling", "personal_dims"] {
        assert!(text.contains(key), "manifest lacks {key}:\n{text}");
    }
}

#[test]
fn seed_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fedpart"))
        .args(["run", "c.toml", "--out", "s"])
        .current_dir(dir.path())
        .env("FEDPART_SEED", "99")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let m = Manifest::load(&dir.path().join("s/manifest.toml")).unwrap();
    assert_eq!(m.config.seed, 99);
    assert_eq!(m.config.personalized.as_ref().unwrap().seed, Some(99));
    assert!(fedpart(&["run", "c.toml", "--out", "d"], dir.path()).status.success());
    assert_ne!(
        std::fs::read(dir.path().join("s/metrics.jsonl")).unwrap(),
        std::fs::read(dir.path().join("d/metrics.jsonl")).unwrap()
    );
}

#[test]
fn cadence_keeps_the_last_round() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), format!("metric_cadence = 3\n{SMALL}")).unwrap();
    assert!(fedpart(&["run", "c.toml", "--out", "a"], dir.path()).status.success());
    let rounds: Vec<_> = records(&dir.path().join("a/metrics.jsonl"))
        .iter()
        .map(|r| (r.stage.clone(), r.round))
        .collect();
    let want: Vec<_> = [("shared", 0), ("shared", 3), ("personalized", 0), ("personalized", 3), ("personalized", 6)]
        .iter()
        .map(|(s, r)| (s.to_string(), *r))
        .collect();
    assert_eq!(rounds, want);
}

#[test]
fn divergence_leaves_valid_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replacen("gamma_u = 0.1", "gamma_u = 40.0", 1);
    std::fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let o = fedpart(&["run", "c.toml", "--out", "a"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("shared"));
    // Every written line still parses.
    let recs = records(&dir.path().join("a/metrics.jsonl"));
    assert!(recs.len() < 4);
    assert!(!dir.path().join("a/summary.csv").exists());
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL.replace("tau = 2\nnoise", "tua = 2\nnoise")).unwrap();
    let o = fedpart(&["run", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tua"), "{}", stderr(&o));
    let o = fedpart(&["run", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.toml"));
}

#[test]
fn problem_container_loads_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let ens = make_quadratic_ensemble(&QuadraticEnsembleSpec::uniform(5, 3, 2, 8)).unwrap();
    std::fs::create_dir(dir.path().join("conf")).unwrap();
    std::fs::write(dir.path().join("conf/p.txt"), ens.to_container().to_text()).unwrap();
    let cfg = "[problem]\nkind = \"file\"\npath = \"p.txt\"\n\n[personalized]\nalgorithm = \"fedsim\"\nrounds = 3\ncohort_size = 2\ngamma_u = 0.1\ngamma_v = 0.1\n";
    std::fs::write(dir.path().join("conf/c.toml"), cfg).unwrap();
    let o = fedpart(&["run", "conf/c.toml", "--out", "a"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = records(&dir.path().join("a/metrics.jsonl"));
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.stationarity.is_some()));
}

#[test]
fn comparison_table_has_both_algorithms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "seed = 4\n[problem]\nkind = \"quadratic\"\nn = 8\nd0 = 3\npersonal_dim = 1\n\n[compare]\nrounds = 30\ncohort_size = 2\neta = 0.2\ntau = 2\nthreshold = 1e-2\n";
    std::fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let o = fedpart(&["run", "c.toml", "--out", "a"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("a/comparison.csv")).unwrap();
    let rows: Vec<_> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("fedalt,30,") && rows[1].starts_with("fedsim,30,"));
    let stages: std::collections::BTreeSet<_> =
        records(&dir.path().join("a/metrics.jsonl")).into_iter().map(|r| r.stage).collect();
    assert_eq!(stages.into_iter().collect::<Vec<_>>(), ["compare-fedalt", "compare-fedsim"]);
}

#[test]
fn verify_suite_selector_and_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedpart(&["verify", "--suite", "sampling", "--report", "r.txt"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("check=sampling/lemma status=pass"), "{text}");
    assert_eq!(std::fs::read_to_string(dir.path().join("r.txt")).unwrap(), text);

    let o = fedpart(&["verify", "--suite", "sampling", "--inject-fault", "sampling-sign"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("status=fail"));

    let o = fedpart(&["verify", "--suite", "nonsense"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn tune_reports_every_argument() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "seed = 3\n[problem]\nkind = \"quadratic\"\nn = 8\nd0 = 3\npersonal_dim = 2\n\n[tune]\nalgorithm = \"fedsim\"\nrounds = 500\ncohort_size = 2\ntau = 4\nnoise = { mode = \"additive-gaussian\", sigma_u = 0.1, sigma_v = 0.2 }\n";
    std::fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let o = fedpart(&["tune", "c.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for key in ["eta = ", "gamma_u = ", "gamma_v = ", "argument.noise", "argument.drift", "active = ", "regime = "] {
        assert!(text.contains(key), "missing {key}:\n{text}");
    }
    let cfg = ExperimentConfig::from_toml(&std::fs::read_to_string(dir.path().join("c.toml")).unwrap()).unwrap();
    let report = fedpart_cli::tune(&cfg).unwrap();
    let r = &report.recommendation;
    assert!(r.eta > 0.0 && r.eta <= r.step.cap);
    assert_eq!(report.inputs.profile.sigma_u2, 0.1f64.powi(2));

    // Additive models have no closed form, so the constants must be given.
    let additive = "[problem]\nkind = \"additive\"\nn = 4\nd0 = 2\npersonal_dim = 1\nsamples = 10\n\n[tune]\nalgorithm = \"fedalt\"\nrounds = 10\ncohort_size = 2\n";
    std::fs::write(dir.path().join("a.toml"), additive).unwrap();
    let o = fedpart(&["tune", "a.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tune.profile.l_u"), "{}", stderr(&o));
}
