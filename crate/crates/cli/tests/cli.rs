use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 8] = ["dataset-gen", "train", "refine", "sample", "sort", "init", "render", "eval"];

fn vsd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsd")).args(args).current_dir(dir).env_remove("VSD_THREADS").output().expect("spawn vsd")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = vsd(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn golden_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

#[test]
fn help_matches_golden_text() {
    let dir = tempfile::tempdir().unwrap();
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for sub in std::iter::once("vsd").chain(SUBCOMMANDS) {
        let args: Vec<&str> = if sub == "vsd" { vec!["--help"] } else { vec![sub, "--help"] };
        let text = String::from_utf8(ok(&args, dir.path()).stdout).unwrap();
        let path = golden_dir().join(format!("{sub}.txt"));
        if update {
            std::fs::write(&path, &text).unwrap();
        }
        let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(text, want, "help text for `{sub}` changed");
        if sub != "vsd" {
            for line in text.lines().filter(|l| l.trim_start().starts_with("--")) {
                assert!(line.contains("[default:"), "flag without a default in `{sub}`: {line}");
            }
        }
    }
}

fn error_json(out: &Output) -> serde_json::Value {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "stderr must be one line: {err}");
    serde_json::from_str(err.trim()).expect("stderr is JSON")
}

#[test]
fn exit_codes_and_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = vsd(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "usage");

    let out = vsd(&["render", "--svg", "missing.svg", "--out", "x.png"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["code"], 2);

    std::fs::write(dir.path().join("bad.json"), r#"{"no_such_key": 1}"#).unwrap();
    let out = vsd(&["dataset-gen", "--out", "ds", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("no_such_key"));

    let out = Command::new(env!("CARGO_BIN_EXE_vsd"))
        .args(["dataset-gen", "--out", "ds"])
        .current_dir(dir.path())
        .env("VSD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dataset_sort_init_render() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["dataset-gen", "--out", "ds", "--n-samples", "4", "--seed", "3"], d);
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ds/run_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 3);
    assert_eq!(cfg["toy"]["n_samples"], 4);

    // Same seed, same dataset.
    ok(&["dataset-gen", "--out", "ds2", "--n-samples", "4", "--seed", "3"], d);
    for f in ["toy-00002/sketch.svg", "toy-00002/image.png", "manifest.json"] {
        assert_eq!(std::fs::read(d.join("ds").join(f)).unwrap(), std::fs::read(d.join("ds2").join(f)).unwrap(), "{f}");
    }

    let s = "ds/toy-00001";
    let (svg, mask, attn) = (format!("{s}/sketch.svg"), format!("{s}/mask.png"), format!("{s}/attention.png"));
    ok(&["sort", "--svg", &svg, "--mask", &mask, "--attention", &attn, "--out", "sorted.svg"], d);
    ok(&["render", "--svg", &svg, "--out", "a.png"], d);
    ok(&["render", "--svg", "sorted.svg", "--out", "b.png"], d);
    assert_eq!(std::fs::read(d.join("a.png")).unwrap(), std::fs::read(d.join("b.png")).unwrap());
    ok(&["render", "--svg", "sorted.svg", "--out", "soft.png", "--soft", "--res", "64"], d);

    ok(&["init", "--mask", &mask, "--attention", &attn, "--n", "32", "--out", "init.svg"], d);
    let text = std::fs::read_to_string(d.join("init.svg")).unwrap();
    assert_eq!(vsd_core::geometry::from_svg(&text).unwrap().len(), 32);
    ok(&["init", "--mask", &mask, "--attention", &attn, "--n", "32", "--out", "init2.svg"], d);
    assert_eq!(text, std::fs::read_to_string(d.join("init2.svg")).unwrap());
}

#[test]
fn train_refine_sample_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = serde_json::json!({
        "denoiser": {"d_model": 16, "n_layers": 1, "n_heads": 2, "ff_mult": 2},
        "train": {"batch": 2, "raster_scales": [[16, 1.5]]},
        "refine": {"batch": 2, "raster_scales": [[16, 1.5]]}
    });
    std::fs::write(d.join("cfg.json"), config.to_string()).unwrap();
    ok(&["dataset-gen", "--out", "ds", "--n-samples", "12"], d);
    ok(&["train", "--config", "cfg.json", "--data", "ds", "--out", "run", "--steps", "3"], d);
    let log = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "loss", "points", "raster", "cfg_dropped"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
    assert!(d.join("run/final.vsdc").exists() && d.join("run/run_config.json").exists());

    ok(&["refine", "--config", "cfg.json", "--data", "ds", "--model", "run/final.vsdc", "--out", "ref", "--steps", "2", "--source", "gaussian_perturb"], d);
    assert!(d.join("ref/refiner.vsdc").exists());

    let img = "ds/toy-00000/image.png";
    let base = ["sample", "--model", "run/final.vsdc", "--image", img, "--seed", "9"];
    ok(&[&base[..], &["--no-refine", "--out", "s1.svg"]].concat(), d);
    ok(&[&base[..], &["--no-refine", "--out", "s2.svg"]].concat(), d);
    assert_eq!(std::fs::read(d.join("s1.svg")).unwrap(), std::fs::read(d.join("s2.svg")).unwrap());
    ok(&[&base[..], &["--refiner", "ref/refiner.vsdc", "--out", "r.svg", "--png", "r.png", "--steps-dir", "steps"]].concat(), d);
    assert!(d.join("r.png").exists());
    assert_eq!(std::fs::read_dir(d.join("steps")).unwrap().count(), 51);
    let out = vsd(&[&base[..], &["--out", "x.svg"]].concat(), d);
    assert_eq!(out.status.code(), Some(1), "refinement without a refiner is a usage error");

    ok(&["sample", "--model", "run/final.vsdc", "--data", "ds", "--split", "train", "--no-refine", "--out", "outs"], d);
    ok(&["eval", "--data", "ds", "--split", "train", "--outputs", "outs", "--out", "ev"], d);
    let report: vsd_core::evalkit::EvalReport =
        serde_json::from_str(&std::fs::read_to_string(d.join("ev/eval_report.json")).unwrap()).unwrap();
    assert!(!report.samples.is_empty());
    assert!(report.samples.iter().all(|m| (0.0..=1.0).contains(&m.ms_ssim) && m.chamfer >= 0.0));
}
