use std::path::Path;
use std::process::{Command, Output};

fn yieldbayes(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_yieldbayes"))
        .args(args)
        .current_dir(dir)
        .env_remove("YIELDBAYES_OUT_DIR")
        .output()
        .expect("run yieldbayes")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

fn generated(dir: &Path) {
    let out = yieldbayes(dir, &["--seed", "1", "generate", "--preset", "winter-barley"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_writes_header_and_169_rows() {
    let dir = tempfile::tempdir().unwrap();
    generated(dir.path());
    let text = read(dir.path(), "data.csv");
    assert!(text.starts_with("# yieldbayes "));
    assert!(text.contains("# seed: 1\n"));
    let lines = data_lines(&text);
    assert_eq!(lines[0], "crop,N,P,steepness,soil,weather,yield");
    assert_eq!(lines.len() - 1, 169);
}

#[test]
fn generate_rejects_unknown_preset_and_missing_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = yieldbayes(dir.path(), &["--seed", "1", "generate", "--preset", "winter-barly"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("winter-barly"));
    let out = yieldbayes(dir.path(), &["generate", "--preset", "winter-barley"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("data.csv").exists());
}

#[test]
fn config_file_overrides_preset_defaults() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("g.conf"), "crop = maize\nn_grid = 4\np_grid = 2\nreplicates = 3\n").unwrap();
    let out = yieldbayes(dir.path(), &["--seed", "9", "generate", "--config", "g.conf"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = read(dir.path(), "data.csv");
    let rows = &data_lines(&text)[1..];
    assert_eq!(rows.len(), 24);
    assert!(rows.iter().all(|r| r.starts_with("maize,")));

    std::fs::write(dir.path().join("bad.conf"), "n_grid = 4\ncolour = red\n").unwrap();
    let out = yieldbayes(dir.path(), &["--seed", "9", "generate", "--config", "bad.conf", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn tiny_fit_flags_unreliable_rhat_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    generated(dir.path());
    let out = yieldbayes(dir.path(), &["--seed", "2", "fit", "--data", "data.csv", "--iter", "40", "--warmup", "20"]);
    // the divergence gate decides the exit code; outputs are written either way
    let stats = read(dir.path(), "sampler.csv");
    let draws: Vec<&str> = data_lines(&stats)[1..].to_vec();
    let divergent = draws.iter().filter(|l| l.split(',').nth(2) == Some("1")).count();
    let expected = if divergent as f64 > 0.1 * draws.len() as f64 { 3 } else { 0 };
    assert_eq!(out.status.code(), Some(expected), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.to_lowercase().contains("unreliable"), "{stdout}");
    for f in ["samples.csv", "summary.csv", "sampler.csv", "density.csv", "autocorrelation.csv"] {
        assert!(read(dir.path(), f).starts_with("# yieldbayes "), "{f}");
    }
    let samples = read(dir.path(), "samples.csv");
    assert!(samples.contains("# spec: variant=np factor=none"));
    // 4 chains x 20 kept x 6 parameters
    assert_eq!(data_lines(&samples).len() - 1, 480);
}

#[test]
fn fit_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    generated(dir.path());
    for args in [
        vec!["--seed", "1", "fit", "--data", "missing.csv"],
        vec!["--seed", "1", "fit", "--data", "data.csv", "--variant", "q"],
        vec!["--seed", "1", "fit", "--data", "data.csv", "--factor", "soil"],
        vec!["--seed", "1", "fit", "--data", "data.csv", "--iter", "10", "--warmup", "20"],
        vec!["fit", "--data", "data.csv"],
    ] {
        let out = yieldbayes(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn predict_rejects_mismatched_samples() {
    let dir = tempfile::tempdir().unwrap();
    generated(dir.path());
    let fit = ["--seed", "3", "fit", "--data", "data.csv", "--variant", "n", "--iter", "60", "--warmup", "30"];
    assert_eq!(yieldbayes(dir.path(), &fit).status.code(), Some(0));
    let ok = yieldbayes(dir.path(), &["predict", "--samples", "samples.csv", "--data", "data.csv", "--grid", "n=0,100"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let pred = read(dir.path(), "predictions.csv");
    let lines = data_lines(&pred);
    assert_eq!(lines[0], "n,p,level,mean,mu_lo,mu_hi,pred_lo,pred_hi");
    assert_eq!(lines.len() - 1, 2 * 13);

    let samples = read(dir.path(), "samples.csv").replace("variant=n ", "variant=np ");
    std::fs::write(dir.path().join("edited.csv"), samples).unwrap();
    let bad = yieldbayes(dir.path(), &["predict", "--samples", "edited.csv", "--data", "data.csv"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn single_variant_compare_has_no_bayes_factor() {
    let dir = tempfile::tempdir().unwrap();
    generated(dir.path());
    let out = yieldbayes(
        dir.path(),
        &["--seed", "4", "--format", "json", "compare", "--data", "data.csv", "--variants", "n", "--iter", "300", "--warmup", "150"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&read(dir.path(), "comparison.json")).unwrap();
    assert_eq!(doc["provenance"]["seed"], 4);
    let rows = doc["comparison"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    let row = &rows[0];
    assert!(row["bayes_factor"].is_null());
    for key in ["model", "elpd_loo", "se_elpd_loo", "p_loo", "looic", "elpd_waic", "p_waic", "waic", "max_pareto_k", "log_marginal_likelihood"] {
        assert!(!row[key].is_null(), "{key}");
    }
}

#[test]
fn nls_reports_every_model() {
    let dir = tempfile::tempdir().unwrap();
    generated(dir.path());
    let out = yieldbayes(dir.path(), &["nls", "--data", "data.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = read(dir.path(), "nls.csv");
    assert!(text.contains("# seed: none"));
    let lines = data_lines(&text);
    assert_eq!(lines[0], "model,parameter,estimate,rse,sse,converged,iterations");
    for model in ["linear", "quadratic", "mb", "nlvl"] {
        assert!(lines.iter().any(|l| l.starts_with(&format!("{model},"))), "{model}");
    }
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_yieldbayes"))
        .args(["--seed", "1", "generate", "--preset", "silage"])
        .current_dir(dir.path())
        .env("YIELDBAYES_OUT_DIR", "results")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("results/data.csv").exists());
}
