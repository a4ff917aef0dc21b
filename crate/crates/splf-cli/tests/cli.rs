//! End-to-end checks of the `splf` binary: every subcommand is spawned as a
//! subprocess and judged by its exit code, stdout shape and on-disk output,
//! the same way a shell script would drive it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use splf_core::config::Config;
use splf_core::data::load_dataset;
use splf_core::graph::Graph;
use splf_core::model::SplfModel;
use splf_core::train::evaluate;
use splf_core::{checkpoint, metrics, netpbm};
use tempfile::TempDir;

fn splf(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_splf"));
    cmd.args(args);
    cmd.env_remove("SPLF_SEED");
    cmd.env_remove("SPLF_GRADCHECK_CORRUPT");
    cmd
}

fn run_ok(args: &[&str]) -> Output {
    let out = splf(args).output().expect("spawn splf");
    assert!(
        out.status.success(),
        "`splf {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).trim_end().to_string();
    assert!(text.starts_with("error: "), "diagnostic must start with `error: `, got {text:?}");
    assert_eq!(text.lines().count(), 1, "diagnostic must be a single line, got {text:?}");
    text
}

fn synth_into(dir: &Path, seed: u64, count: usize) {
    run_ok(&["synth", "--seed", &seed.to_string(), "--count", &count.to_string(), "--out", dir.to_str().unwrap()]);
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, body).unwrap();
    path
}

/// Small-but-real training setup shared by the round-trip tests: two
/// synthetic samples, two epochs.
fn trained_checkpoint(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let data = dir.join("data");
    synth_into(&data, 5, 2);
    let cfg = write_config(dir, r#"{ "epochs": 2, "batch_size": 2, "seed": 11 }"#);
    let ckpt = dir.join("model.ckpt");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    (ckpt, data, cfg)
}

#[test]
fn synth_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth_into(&a, 9, 3);
    synth_into(&b, 9, 3);

    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7, "3 images + 3 masks + index");
    for name in names {
        let left = fs::read(a.join(&name)).unwrap();
        let right = fs::read(b.join(&name)).unwrap();
        assert_eq!(left, right, "{name:?} differs between identical synth runs");
    }
}

#[test]
fn synth_rejects_zero_count() {
    let tmp = TempDir::new().unwrap();
    let out = splf(&["synth", "--count", "0", "--out", tmp.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).contains("count"));
}

#[test]
fn unknown_flag_exits_with_usage_code() {
    let out = splf(&["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_logs_epochs_and_reproduces_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, data, cfg) = trained_checkpoint(tmp.path());

    let stdout = {
        let second = tmp.path().join("second.ckpt");
        let out = run_ok(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            second.to_str().unwrap(),
        ]);
        assert_eq!(
            fs::read(&ckpt).unwrap(),
            fs::read(&second).unwrap(),
            "identical configs and data must give byte-identical checkpoints"
        );
        String::from_utf8(out.stdout).unwrap()
    };

    let epoch_lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with("epoch=")).collect();
    assert_eq!(epoch_lines.len(), 2);
    for (i, line) in epoch_lines.iter().enumerate() {
        assert!(line.starts_with(&format!("epoch={} loss=", i + 1)), "bad epoch line {line:?}");
        for key in ["loss=", "mae=", "fbeta=", "smeasure=", "emeasure="] {
            let field = line.split_whitespace().find(|f| f.starts_with(key));
            let value: f64 = field.unwrap()[key.len()..].parse().unwrap();
            assert!(value.is_finite(), "{key} not finite in {line:?}");
        }
    }
}

#[test]
fn train_rejects_out_of_range_tap() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, 5, 1);
    let cfg = write_config(tmp.path(), r#"{ "tap_indices": [2, 5, 8, 13] }"#);
    let out = splf(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("x.ckpt").to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).contains("tap_indices"));
}

#[test]
fn train_reports_json_error_position() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, 5, 1);
    let cfg = write_config(tmp.path(), "{ \"epochs\": }\n");
    let out = splf(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("x.ckpt").to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr_line(&out);
    assert!(msg.contains("run.json:1:"), "message should carry file:line:column, got {msg:?}");
}

#[test]
fn splf_seed_env_overrides_config_seed() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, 5, 2);
    let cfg_a = write_config(tmp.path(), r#"{ "epochs": 1, "batch_size": 2, "seed": 11 }"#);
    let via_env = tmp.path().join("env.ckpt");
    let mut cmd = splf(&[
        "train",
        "--config",
        cfg_a.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        via_env.to_str().unwrap(),
    ]);
    cmd.env("SPLF_SEED", "77");
    assert!(cmd.output().unwrap().status.success());

    let cfg_b = tmp.path().join("b.json");
    fs::write(&cfg_b, r#"{ "epochs": 1, "batch_size": 2, "seed": 77 }"#).unwrap();
    let via_cfg = tmp.path().join("cfg.ckpt");
    run_ok(&[
        "train",
        "--config",
        cfg_b.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        via_cfg.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(&via_env).unwrap(),
        fs::read(&via_cfg).unwrap(),
        "SPLF_SEED=77 must behave exactly like seed 77 in the config"
    );
}

#[test]
fn eval_table_matches_library_metrics() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, data, _) = trained_checkpoint(tmp.path());
    let out = run_ok(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();

    let header: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(header, ["image", "s_alpha", "f_beta", "e_phi", "mae"]);
    assert_eq!(lines.len(), 4, "header + 2 images + mean");
    assert!(lines[3].starts_with("mean"));

    let mut cfg = Config::default();
    cfg.seed = 11;
    let model = SplfModel::new(&cfg).unwrap();
    checkpoint::load(&ckpt, &model.params()).unwrap();
    let samples = load_dataset(&data).unwrap();
    let reports = evaluate(&model, &samples).unwrap();
    let mean = metrics::mean_reports(&reports);

    let parse_row = |line: &str| -> Vec<f64> {
        line.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect()
    };
    for (i, report) in reports.iter().enumerate() {
        let row = parse_row(lines[1 + i]);
        let expect = [report.s_alpha, report.f_beta, report.e_phi, report.mae];
        for (col, (got, want)) in row.iter().zip(expect).enumerate() {
            assert!((got - want).abs() <= 1e-6, "row {i} col {col}: {got} vs {want}");
        }
    }
    let mean_row = parse_row(lines[3]);
    for (got, want) in mean_row.iter().zip([mean.s_alpha, mean.f_beta, mean.e_phi, mean.mae]) {
        assert!((got - want).abs() <= 1e-6);
    }
}

#[test]
fn eval_rejects_truncated_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, data, _) = trained_checkpoint(tmp.path());
    let bytes = fs::read(&ckpt).unwrap();
    let cut = tmp.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let out = splf(&["eval", "--ckpt", cut.to_str().unwrap(), "--data", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "runtime failure, not a usage error");
    assert!(stderr_line(&out).contains("checkpoint"));
}

#[test]
fn infer_writes_sigmoid_of_finest_logits_as_pgm() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, data, _) = trained_checkpoint(tmp.path());
    let image = data.join("img_0000.ppm");
    let map = tmp.path().join("saliency.pgm");
    run_ok(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--out", map.to_str().unwrap()]);

    let (loaded, h, w) = netpbm::read_pgm(&map).unwrap();
    assert_eq!((h, w), (64, 64));

    let mut cfg = Config::default();
    cfg.seed = 11;
    let model = SplfModel::new(&cfg).unwrap();
    checkpoint::load(&ckpt, &model.params()).unwrap();
    let (rgb, ih, iw) = netpbm::read_ppm(&image).unwrap();
    let input = splf_core::Tensor::new(rgb, &[1, 3, ih, iw]);
    let mut g = Graph::<f32>::inference();
    let fwd = model.forward(&mut g, &input).unwrap();

    let mut worst = 0.0f32;
    for (&byte_val, &logit) in loaded.iter().zip(fwd.logits[3].data().iter()) {
        let sig = 1.0 / (1.0 + (-logit).exp());
        worst = worst.max((byte_val - sig).abs());
    }
    assert!(worst <= 0.5 / 255.0 + 1e-6, "8-bit quantization must stay within half a step, got {worst}");
}

#[test]
fn pgm_quantization_rounds_half_up() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("q.pgm");
    netpbm::write_pgm(&path, &[0.5, 0.0, 1.0, 127.4 / 255.0], 1, 4).unwrap();
    let bytes = fs::read(&path).unwrap();
    let pixels = &bytes[bytes.len() - 4..];
    assert_eq!(pixels, &[128, 0, 255, 127]);
}

#[test]
fn infer_rejects_images_not_divisible_by_32() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, _, _) = trained_checkpoint(tmp.path());
    let odd = tmp.path().join("odd.ppm");
    netpbm::write_ppm(&odd, &vec![0.5f32; 3 * 48 * 48], 48, 48).unwrap();
    let out = splf(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        odd.to_str().unwrap(),
        "--out",
        tmp.path().join("y.pgm").to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).contains("32"));
}

/// One full gradcheck run with a deliberately corrupted component: the
/// corrupted row must flip to fail and the exit code must go nonzero, while
/// every line keeps the `component= maxrel= status=` shape.
#[test]
fn gradcheck_corrupt_hook_flips_exit_code() {
    let mut cmd = splf(&["gradcheck", "--seed", "42"]);
    cmd.env("SPLF_GRADCHECK_CORRUPT", "conv2d");
    let out = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut saw_fail = false;
    let mut count = 0;
    for line in stdout.lines() {
        count += 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 3, "bad gradcheck line {line:?}");
        assert!(fields[0].starts_with("component="));
        assert!(fields[1].starts_with("maxrel="));
        let val: f64 = fields[1]["maxrel=".len()..].parse().expect("maxrel parses as float");
        assert!(val.is_finite());
        assert!(fields[2] == "status=pass" || fields[2] == "status=fail");
        if line.starts_with("component=conv2d") {
            assert_eq!(fields[2], "status=fail", "corrupted component must fail");
            saw_fail = true;
        }
    }
    assert!(saw_fail);
    assert_eq!(count, splf_core::gradcheck::component_names().len());
}

#[test]
fn ablation_prints_six_rows_and_signed_delta() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, 5, 2);
    let out = run_ok(&["ablation", "--data", data.to_str().unwrap(), "--epochs", "1"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 8, "header + 6 rows + delta");
    assert_eq!(lines[0].split_whitespace().collect::<Vec<_>>(), ["model", "f_beta", "mae"]);

    let expected = ["finetune-all", "frozen-base", "mafa-conv", "mafa-fourier", "prompts", "full-model"];
    for (i, label) in expected.iter().enumerate() {
        let fields: Vec<&str> = lines[1 + i].split_whitespace().collect();
        assert_eq!(fields[0], *label);
        let f: f64 = fields[1].parse().unwrap();
        let m: f64 = fields[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&f), "f_beta out of range in {:?}", lines[1 + i]);
        assert!((0.0..=1.0).contains(&m), "mae out of range in {:?}", lines[1 + i]);
    }
    let delta = lines[7];
    assert!(delta.starts_with("delta full-model vs frozen-base:"));
    assert!(delta.contains("fbeta=+") || delta.contains("fbeta=-"), "delta must be signed: {delta:?}");
}

#[test]
fn config_json_roundtrip_is_a_fixed_point() {
    let tmp = TempDir::new().unwrap();
    let path = write_config(tmp.path(), r#"{ "embed_dim": 16, "epochs": 3, "tap_indices": [1, 2, 3, 4], "encoder_layers": 4 }"#);
    let first = Config::load(&path).unwrap();
    let text = serde_json::to_string(&first).unwrap();
    let second: Config = serde_json::from_str(&text).unwrap();
    assert_eq!(first, second);
    assert_eq!(text, serde_json::to_string(&second).unwrap());

    let default_text = serde_json::to_string(&Config::default()).unwrap();
    let reparsed: Config = serde_json::from_str(&default_text).unwrap();
    assert_eq!(reparsed, Config::default());
}
