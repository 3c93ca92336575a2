use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn chanpred(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chanpred")).args(args).current_dir(cwd).output().expect("binary runs")
}

const SMALL: &[&str] = &["--snr", "15,25", "--horizon-lambda", "0.5,1", "--trials", "6", "--seed", "7"];

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    fs::write(&path, "# small grid\nn_time = 16\nn_freq = 12\nr = 8\nt = 6\n").unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn experiment_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut outputs = Vec::new();
    for (threads, out) in [("1", "a"), ("8", "b"), ("8", "c")] {
        let mut args = vec!["experiment", "--config", &cfg, "--threads", threads, "--out", out];
        args.extend_from_slice(SMALL);
        let o = chanpred(&args, dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(dir.path().join(out));
    }
    for name in ["results.csv", "nse_samples.csv", "nse_cdf.csv", "results.json"] {
        let a = fs::read(outputs[0].join(name)).unwrap();
        for other in &outputs[1..] {
            assert_eq!(a, fs::read(other.join(name)).unwrap(), "{name} differs");
        }
    }
    let csv = fs::read_to_string(outputs[0].join("results.csv")).unwrap();
    assert!(csv.starts_with("model,snr_db,horizon_lambda,metric,value,n_trials,seed\n"));
    for model in ["doddoa", "tssm", "mssm", "crb"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{model},"))), "{model}");
    }

    let o = chanpred(&["report", "--input", "a"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["nmse_vs_snr.csv", "rmse_vs_snr.csv", "order_selection.csv", "failures.csv", "nse_cdf.csv"] {
        assert!(outputs[0].join("figures").join(name).exists(), "{name}");
    }
    assert_eq!(
        fs::read(outputs[0].join("figures/nse_cdf.csv")).unwrap(),
        fs::read(outputs[0].join("nse_cdf.csv")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "frobnicate = 3\n").unwrap();
    let cases: [&[&str]; 5] = [
        &["experiment", "--trials", "0"],
        &["experiment", "--profile", "huge"],
        &["experiment", "--model", "nope"],
        &["fit", "--config", bad.to_str().unwrap()],
        &["bound", "--config", "missing.cfg"],
    ];
    for args in cases {
        let o = chanpred(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn degraded_run_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tight.cfg");
    // The order exceeds what the small mss window can resolve, so every fit fails.
    fs::write(&cfg, "n_time = 8\nn_freq = 8\nr = 4\nt = 4\nz_override = 40\nmodels = mssm\n").unwrap();
    let o = chanpred(&["experiment", "--config", cfg.to_str().unwrap(), "--trials", "2", "--snr", "20", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("out/results.csv").exists());
}

#[test]
fn simulate_fit_and_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = chanpred(&["simulate", "--config", &cfg, "--snr", "20,inf", "--out", "sim"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let tensor = fs::read_to_string(dir.path().join("sim/tensor_snr_inf.csv")).unwrap();
    // header + Q*K*N*M entries
    assert_eq!(tensor.lines().count(), 1 + 16 * 12 * 2 * 2);
    assert!(fs::read_to_string(dir.path().join("sim/paths.txt")).unwrap().lines().count() >= 6);

    let o = chanpred(&["fit", "--config", &cfg, "--snr", "inf", "--model", "doddoa", "--z", "6"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let fit = &doc["fits"][0];
    assert_eq!(fit["model"], "doddoa");
    assert_eq!(fit["estimate"]["z_hat"], 6);

    let o = chanpred(&["bound", "--config", &cfg, "--snr", "10,20", "--horizon-lambda", "1"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("snr_db,quantity,horizon_lambda,value\n"));
    let pb: Vec<f64> = text
        .lines()
        .filter(|l| l.contains("prediction_bound_db"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(pb.len(), 2);
    // ten dB more SNR lowers the bound by ten dB
    assert!((pb[0] - pb[1] - 10.0).abs() < 1e-6, "{pb:?}");
}
