use std::path::Path;
use std::process::{Command, Output};

use gradfilter::cli::checkpoint;
use gradfilter::conv::ConvCfg;
use gradfilter::tensor::Kernel4;
use gradfilter::train::{Layer, Model};

fn gradfilter(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradfilter"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn cell<'a>(csv: &'a str, row: usize, col: &str) -> &'a str {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == col).unwrap();
    lines.nth(row).unwrap().split(',').nth(idx).unwrap()
}

fn single_conv_model(kernel: Kernel4) -> Model {
    let [co, ..] = kernel.dims();
    Model::new(
        (kernel.in_channels(), 4, 4),
        vec![
            Layer::conv(kernel, vec![0.0; co], ConvCfg::same(3)),
            Layer::Flatten,
            Layer::linear(vec![0.0; co * 16 * 2], vec![0.0; 2], co * 16, 2),
        ],
    )
    .unwrap()
}

#[test]
fn train_writes_summary_and_config_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.cfg");
    std::fs::write(&cfg, "command = train\nmode = vanilla\nlayers = 2\nepochs = 1 # quick\nper_class = 20\n").unwrap();
    let out = tmp.path().join("run");
    let o = gradfilter(&out, &["--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read(out.join("summary.csv"));
    assert_eq!(cell(&summary, 0, "mode"), "vanilla");
    assert_eq!(cell(&summary, 0, "layers"), "2");
    let metrics = read(out.join("metrics.csv"));
    assert_eq!(metrics.lines().next().unwrap(), "epoch,train_loss,train_acc,val_acc,lr");
    assert_eq!(metrics.lines().count(), 2);
    let echo = read(out.join("resolved-config.txt"));
    assert!(echo.contains("command = train\n"));
    assert!(echo.contains("momentum = 0.9\n"), "defaults are echoed");
    assert!(echo.contains("per_class = 20\n"));
    assert!(out.join("model.ckpt").exists());
}

#[test]
fn validation_failures_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    for args in [
        vec!["train", "--set", "mode=filtered", "--set", "r=0"],
        vec!["train", "--set", "colour=red"],
        vec!["plot"],
        vec!["dc-ratio"],
        vec!["cost-sweep", "--set", "c_x=0"],
    ] {
        let o = gradfilter(&out, &args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
}

#[test]
fn cost_sweep_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    assert!(gradfilter(&out, &["cost-sweep", "--set", "r_list=4"]).status.success());
    let csv = read(out.join("sweep.csv"));
    assert_eq!(cell(&csv, 0, "leading_term"), "29260800");
    assert_eq!(cell(&csv, 0, "min_flops"), "24384");

    assert!(gradfilter(&out, &["cost-sweep", "--set", "r_list=1"]).status.success());
    let csv = read(out.join("sweep.csv"));
    let total: u64 = cell(&csv, 0, "total").parse().unwrap();
    let vanilla: u64 = cell(&csv, 0, "vanilla").parse().unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(total * 18 >= vanilla);

    let degenerate = ["c_x=1", "c_y=1", "h_y=1", "w_y=1", "h_k=1", "w_k=1", "h_x=1", "w_x=1"];
    let mut args = vec!["cost-sweep"];
    for kv in &degenerate {
        args.extend(["--set", kv]);
    }
    assert!(gradfilter(&out, &args).status.success());
    assert_eq!(cell(&read(out.join("sweep.csv")), 0, "min_flops"), "1");
}

#[test]
fn prop1_trial_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p");
    let o = gradfilter(&out, &["verify-prop1", "--set", "trials=50"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(read(out.join("summary.csv")).ends_with("50,50,0,true\n"));

    assert!(gradfilter(&out, &["verify-prop1", "--set", "trials=3", "--set", "trial_kind=impulse"]).status.success());
    let csv = read(out.join("trials.csv"));
    for row in 0..3 {
        let gy: f64 = cell(&csv, row, "snr_gy").parse().unwrap();
        let gx: f64 = cell(&csv, row, "snr_gx").parse().unwrap();
        assert!((gx - gy).abs() <= 1e-9 * gy.max(1.0));
    }

    assert!(gradfilter(&out, &["verify-prop1", "--set", "trials=2", "--set", "trial_kind=constant"]).status.success());
    let csv = read(out.join("trials.csv"));
    assert_eq!(cell(&csv, 0, "snr_gy"), "inf");
    assert_eq!(cell(&csv, 0, "snr_gx"), "inf");
}

#[test]
fn dc_ratio_special_kernels() {
    let tmp = tempfile::tempdir().unwrap();
    let ones = tmp.path().join("ones.ckpt");
    checkpoint::save(&single_conv_model(Kernel4::from_fn([2, 1, 3, 3], |_| 1.0)), &ones).unwrap();
    let impulse = tmp.path().join("impulse.ckpt");
    let k = Kernel4::from_fn([2, 1, 3, 3], |[_, _, i, j]| if (i, j) == (1, 1) { 1.0 } else { 0.0 });
    checkpoint::save(&single_conv_model(k), &impulse).unwrap();

    let out = tmp.path().join("d");
    let set = format!("checkpoint={}", ones.display());
    assert!(gradfilter(&out, &["dc-ratio", "--set", &set]).status.success());
    let csv = read(out.join("dc_ratio.csv"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",inf")));

    let set = format!("checkpoint={}", impulse.display());
    assert!(gradfilter(&out, &["dc-ratio", "--set", &set]).status.success());
    let csv = read(out.join("dc_ratio.csv"));
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",1")));
    assert!(read(out.join("dc_summary.csv")).ends_with("all,1\n"));
}

#[test]
fn snr_probe_rejects_empty_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("m.ckpt");
    checkpoint::save(&Model::desk((1, 16, 16), 10, 0).unwrap(), &ckpt).unwrap();
    let set = format!("checkpoint={}", ckpt.display());
    let out = tmp.path().join("s");
    let o = gradfilter(&out, &["snr-probe", "--set", &set, "--set", "probe_batch=0"]);
    assert_eq!(o.status.code(), Some(1));

    let o = gradfilter(&out, &["snr-probe", "--set", &set, "--set", "per_class=20"]);
    assert!(o.status.success());
    let csv = read(out.join("snr.csv"));
    assert_eq!(csv.lines().next().unwrap(), "layer,r,snr,snr_gx");
    assert_eq!(csv.lines().count(), 1 + 3 * 3);
}

#[test]
fn idx_data_source() {
    use gradfilter::data::{encode_idx_images, encode_idx_labels, IdxImages};
    let tmp = tempfile::tempdir().unwrap();
    let (n, side) = (40, 8);
    let pixels: Vec<u8> = (0..n * side * side).map(|i| ((i * 37) % 251) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let imgs = tmp.path().join("img.idx");
    let lbls = tmp.path().join("lbl.idx");
    std::fs::write(&imgs, encode_idx_images(&IdxImages { count: n, rows: side, cols: side, pixels })).unwrap();
    std::fs::write(&lbls, encode_idx_labels(&labels)).unwrap();
    let out = tmp.path().join("t");
    let a = format!("idx_images={}", imgs.display());
    let b = format!("idx_labels={}", lbls.display());
    let o = gradfilter(
        &out,
        &["train", "--set", "data=idx", "--set", &a, "--set", &b, "--set", "epochs=1", "--set", "widths=4,4"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
