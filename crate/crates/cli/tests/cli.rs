use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sparse_prs::genotype::read_gts;
use sparse_prs::pipeline::write_external_scores;
use sparse_prs::simulate::{simulate_genotypes, simulate_phenotype, synthetic_external_scores, SimConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sparse-prs"));
    c.env("RUST_LOG", "info");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["simulate", "--n", "300", "--p", "200", "--n-causal", "5", "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn fit(sim: &Path, out: &Path, extra: &[&str]) -> Output {
    let g = sim.join("genotypes.gts");
    let p = sim.join("phenotype.csv");
    let mut args = vec!["fit", "--genotypes", s(&g), "--phenotype", s(&p), "--out", s(out)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn simulate_writes_files_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "a", &[]);
    let b = simulate(dir.path(), "b", &[]);
    for f in ["genotypes.gts", "phenotype.csv", "truth.csv"] {
        assert!(a.join(f).exists(), "{f}");
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let truth = fs::read_to_string(a.join("truth.csv")).unwrap();
    assert_eq!(truth.lines().next(), Some("variant_id,true_beta"));
    assert_eq!(truth.lines().count(), 6);
    assert_eq!(read_gts(a.join("genotypes.gts")).unwrap().n_individuals(), 300);
}

#[test]
fn usage_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = run(&["simulate", "--n", "-5", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n:"), "{}", stderr(&o));

    let o = run(&["simulate", "--set", "bogus=1", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus"));

    let o = run(&["simulate", "--n", "100", "--set", "heritability=1.5", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("heritability"), "{}", stderr(&o));

    let o = run(&["frobnicate"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_then_flags_last_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.cfg");
    fs::write(&cfg, "n = 120\np = 60\nn_causal = 3\nseed = 9\n").unwrap();
    let out = dir.path().join("sim");
    let o = run(&["simulate", "--config", s(&cfg), "--p", "80", "--set", "p=90", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let g = read_gts(out.join("genotypes.gts")).unwrap();
    assert_eq!((g.n_individuals(), g.n_variants()), (120, 90));
    let meta = fs::read_to_string(out.join("metadata.txt")).unwrap();
    assert!(meta.contains("seed = 9") && meta.contains("p = 90"));
}

#[test]
fn fit_unilasso_reports_zero_sign_changes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sim", &[]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = fit(&sim, &a, &["--method", "unilasso", "--workers", "1"]);
    assert_eq!(code(&oa), 0, "{}", stderr(&oa));
    assert!(stderr(&oa).contains("sign_changes=0"));
    for tag in ["[SPLIT]", "[UNIV]", "[SOLVE]", "[EVAL]"] {
        assert!(stderr(&oa).contains(tag), "missing {tag}");
    }
    let ob = fit(&sim, &b, &["--method", "unilasso", "--workers", "8"]);
    assert_eq!(code(&ob), 0);
    for f in ["model.tsv", "path.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("timings.csv").exists());

    let c = dir.path().join("c");
    let meta = a.join("metadata.txt");
    let oc = run(&["fit", "--config", s(&meta), "--out", s(&c)]);
    assert_eq!(code(&oc), 0, "{}", stderr(&oc));
    assert_eq!(fs::read(a.join("model.tsv")).unwrap(), fs::read(c.join("model.tsv")).unwrap());
}

#[test]
fn fit_es_needs_external_scores() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sim", &[]);
    let o = fit(&sim, &dir.path().join("f"), &["--method", "unilasso_es"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("external"));

    let config = SimConfig {
        n: 300,
        p: 200,
        n_causal: 5,
        ..SimConfig::default()
    };
    let g = simulate_genotypes(&config).unwrap();
    let (_, truth) = simulate_phenotype(&g, &config).unwrap();
    let scores = synthetic_external_scores(&truth, g.variant_ids(), 5.0, 1, false).unwrap();
    let path = dir.path().join("scores.tsv");
    write_external_scores(&scores, &path).unwrap();
    let out = dir.path().join("es");
    let o = fit(&sim, &out, &["--method", "unilasso_es", "--external-scores", s(&path)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("sign_changes=0"));
    assert!(fs::read_to_string(out.join("model.tsv")).unwrap().starts_with("#method=unilasso_es"));
}

#[test]
fn fit_runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sim", &[]);
    let missing = dir.path().join("nope.gts");
    let p = sim.join("phenotype.csv");
    let o = run(&["fit", "--genotypes", s(&missing), "--phenotype", s(&p), "--out", s(&dir.path().join("f"))]);
    assert_eq!(code(&o), 1);

    let samples = dir.path().join("samples.txt");
    let ids: Vec<String> = (0..300).map(|i| format!("other{i}")).collect();
    fs::write(&samples, ids.join("\n")).unwrap();
    let o = fit(&sim, &dir.path().join("g"), &["--samples", s(&samples)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing from phenotype"), "{}", stderr(&o));
}

#[test]
fn eval_reports_and_similarity() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sim", &[]);
    let mut models = Vec::new();
    for m in ["lasso", "unilasso", "unilasso"] {
        let out = dir.path().join(format!("fit{}", models.len()));
        let extra: &[&str] = if models.len() == 2 { &["--seed", "3"] } else { &[] };
        let mut args = vec!["--method", m];
        args.extend_from_slice(extra);
        assert_eq!(code(&fit(&sim, &out, &args)), 0);
        models.push(out.join("model.tsv"));
    }
    let g = sim.join("genotypes.gts");
    let p = sim.join("phenotype.csv");
    let ev = dir.path().join("ev");
    let mut args = vec!["eval", "--genotypes", s(&g), "--phenotype", s(&p), "--out", s(&ev)];
    for m in &models {
        args.extend(["--model", s(m)]);
    }
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(ev.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next(),
        Some("method,family,metric_name,metric_value,n_nonzero,sign_changes,runtime_preprocess_s,runtime_train_s")
    );
    assert_eq!(lines.count(), 3);
    let sim_csv = fs::read_to_string(ev.join("similarity.csv")).unwrap();
    let rows: Vec<&str> = sim_csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], ",lasso,unilasso,unilasso_2");
    assert!(rows.iter().skip(1).all(|r| r.split(',').count() == 4));

    let ev2 = dir.path().join("ev2");
    let o = run(&["eval", "--genotypes", s(&g), "--phenotype", s(&p), "--out", s(&ev2), "--model", s(&models[0])]);
    assert_eq!(code(&o), 0);
    assert!(!ev2.join("similarity.csv").exists());
    let again = fs::read_to_string(ev2.join("report.csv")).unwrap();
    assert_eq!(again.lines().nth(1), report.lines().nth(1));

    let o = run(&["eval", "--metric", "auc", "--genotypes", s(&g), "--phenotype", s(&p), "--model", s(&models[0])]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_binomial_uses_auc() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sim", &["--family", "binomial"]);
    let out = dir.path().join("fit");
    let o = fit(&sim, &out, &["--family", "binomial", "--method", "unilasso"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let g = sim.join("genotypes.gts");
    let p = sim.join("phenotype.csv");
    let m = out.join("model.tsv");
    let ev = dir.path().join("ev");
    let o = run(&["eval", "--metric", "auc", "--genotypes", s(&g), "--phenotype", s(&p), "--model", s(&m), "--out", s(&ev)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(ev.join("report.csv")).unwrap();
    assert!(report.lines().nth(1).unwrap().starts_with("unilasso,binomial,auc,"));
}

#[test]
fn bench_summary_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--n", "200", "--p", "100", "--set", "n_causal=4", "--methods", "lasso,unilasso,unilasso_es"];
    let a = dir.path().join("a");
    let mut args = vec!["bench", "--seeds", "1-2", "--workers", "1", "--out", s(&a)];
    args.extend_from_slice(&common);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert_eq!(fs::read_to_string(a.join("runs.csv")).unwrap().lines().count(), 7);

    let b = dir.path().join("b");
    let mut args = vec!["bench", "--seeds", "1-2", "--workers", "2", "--out", s(&b)];
    args.extend_from_slice(&common);
    assert_eq!(code(&run(&args)), 0);
    for f in ["runs.csv", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let c = dir.path().join("c");
    let mut args = vec!["bench", "--seeds", "5", "--out", s(&c)];
    args.extend_from_slice(&common);
    assert_eq!(code(&run(&args)), 0);
    for line in fs::read_to_string(c.join("summary.csv")).unwrap().lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[6], "", "metric_sd should be empty: {line}");
        assert_eq!(cols[8], "", "n_nonzero_sd should be empty: {line}");
    }
}

#[test]
fn bench_records_failed_runs_without_aborting() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = run(&[
        "bench", "--seeds", "1-2", "--n", "200", "--p", "100", "--set", "n_causal=4", "--set", "max_iter=1",
        "--set", "kkt_tol=1e-15", "--methods", "lasso,unilasso", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5);
    assert!(runs.lines().skip(1).all(|l| l.contains("failed: ")), "{runs}");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.contains(",0,2,,,,,0")), "{summary}");
}
