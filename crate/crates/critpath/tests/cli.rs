use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use critpath::model_file::save_model;
use critpath::pnm::parse_pnm;
use critpath_core::{build_model, ArchSpec, InputShape, LayerKind};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_critpath"));
    c.env_remove("CRITPATH_DATA_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_idx(dir: &Path, prefix: &str, per_class: usize, seed: u8) {
    let n = 10 * per_class;
    let mut images = Vec::new();
    for v in [0x803u32, n as u32, 28, 28] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = Vec::new();
    for v in [0x801u32, n as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..n {
        let class = (i % 10) as u8;
        labels.push(class);
        // a class-dependent bright bar plus deterministic noise
        for p in 0..784usize {
            let (y, x) = (p / 28, p % 28);
            let bar = y / 3 == class as usize && x > 3 && x < 24;
            let noise = (p as u32 * 31 + i as u32 * 17 + seed as u32 * 7) % 40;
            images.push(if bar { 200 + (noise as u8) } else { noise as u8 });
        }
    }
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: String,
    model: String,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    std::fs::create_dir(&data).unwrap();
    write_idx(&data, "train", 3, 1);
    write_idx(&data, "t10k", 2, 2);
    let data = data.to_str().unwrap().to_string();
    let out = root.join("train");
    ok(&["train", "--data-dir", &data, "--epochs", "1", "--batch-size", "10", "--learning-rate", "0.01", "--out", out.to_str().unwrap()]);
    let model = out.join("model.cpdm").to_str().unwrap().to_string();
    Fixture { _tmp: tmp, root, data, model }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let r = run(&["train", "--epochs", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8(r.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: ") && err.contains("CRITPATH_DATA_DIR"), "{err}");

    let missing = tmp.path().join("nope.cpdm");
    let r = run(&["paramcount", "--model", missing.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));

    // label file passed where images are expected
    let data = tmp.path().join("d");
    std::fs::create_dir(&data).unwrap();
    write_idx(&data, "train", 1, 0);
    write_idx(&data, "t10k", 1, 0);
    std::fs::copy(data.join("train-labels-idx1-ubyte"), data.join("train-images-idx3-ubyte")).unwrap();
    let r = run(&["train", "--data-dir", data.to_str().unwrap(), "--epochs", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("wrong magic"));
}

#[test]
fn data_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    write_idx(tmp.path(), "train", 1, 0);
    write_idx(tmp.path(), "t10k", 1, 0);
    let out = tmp.path().join("o");
    let r = bin()
        .env("CRITPATH_DATA_DIR", tmp.path())
        .args(["train", "--epochs", "1", "--batch-size", "5", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("model.cpdm").is_file());
}

#[test]
fn pipeline_outputs_and_determinism() {
    let fx = fixture();
    let d = |name: &str| fx.root.join(name).to_str().unwrap().to_string();

    // train: history and manifest
    let history = std::fs::read_to_string(fx.root.join("train/history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,loss,test_accuracy"));
    assert_eq!(history.lines().count(), 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.root.join("train/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["model_digest"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["config"]["train"]["learning_rate"].as_f64().unwrap() as f32, 0.01f32);

    ok(&["train", "--data-dir", &fx.data, "--epochs", "1", "--batch-size", "10", "--learning-rate", "0.01", "--out", &d("train2")]);
    assert_eq!(files(&fx.root.join("train")), files(&fx.root.join("train2")));

    // analyze
    for out in ["an1", "an2"] {
        ok(&["analyze", "--data-dir", &fx.data, "--model", &fx.model, "--layers", "7,8", "--per-class-cap", "2", "--out", &d(out)]);
    }
    let an = files(&fx.root.join("an1"));
    assert_eq!(an, files(&fx.root.join("an2")));
    assert_eq!(an.len(), 12);
    let csv = String::from_utf8(std::fs::read(fx.root.join("an1/conv8_product.csv")).unwrap()).unwrap();
    assert_eq!(csv.lines().next(), Some("filter,0,1,2,3,4,5,6,7,8,9"));
    assert_eq!(csv.lines().count(), 129);
    let side: serde_json::Value =
        serde_json::from_slice(&std::fs::read(fx.root.join("an1/conv8_product.json")).unwrap()).unwrap();
    assert_eq!(side["per_class_cap"], 2);
    assert_eq!(side["kind"], "product");

    // stats
    let text = ok(&["stats", "--data-dir", &fx.data, "--model", &fx.model, "--per-class-cap", "2", "--out", &d("st")]);
    assert_eq!(text.lines().next(), Some("conv,normalized_std"));
    assert_eq!(text.lines().count(), 9);

    // distill
    for out in ["di1", "di2"] {
        ok(&["distill", "--data-dir", &fx.data, "--model", &fx.model, "--target-class", "3", "--ratio", "0.1", "--per-class-cap", "2", "--out", &d(out)]);
    }
    assert_eq!(files(&fx.root.join("di1")), files(&fx.root.join("di2")));
    let path: serde_json::Value =
        serde_json::from_slice(&std::fs::read(fx.root.join("di1/critical_path.json")).unwrap()).unwrap();
    let layers = path["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 4);
    assert!(layers.iter().all(|l| l["reserved"].as_array().unwrap().len() == 13));
    assert!(fx.root.join("di1/class3.cpdm").is_file());

    // eval, single and multi-threaded
    let table = ok(&["eval", "--data-dir", &fx.data, "--model", &fx.model, "--per-class-cap", "2", "--out", &d("ev1")]);
    ok(&["--threads", "3", "eval", "--data-dir", &fx.data, "--model", &fx.model, "--per-class-cap", "2", "--out", &d("ev2")]);
    assert_eq!(files(&fx.root.join("ev1")), files(&fx.root.join("ev2")));
    let report = std::fs::read_to_string(fx.root.join("ev1/report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("class,tp,fp,bytes"));
    assert_eq!(report.lines().count(), 11);
    assert!(table.starts_with("Class"));
    assert!(table.contains("chance FP (1/(n-1)): 0.111"));

    // am
    ok(&["am", "--model", &fx.model, "--layer", "8", "--filters", "0,5,9", "--steps", "5", "--out", &d("am1")]);
    ok(&["--threads", "2", "am", "--model", &fx.model, "--layer", "8", "--filters", "0,5,9", "--steps", "5", "--out", &d("am2")]);
    assert_eq!(files(&fx.root.join("am1")), files(&fx.root.join("am2")));
    let img = std::fs::read(fx.root.join("am1/conv8_f005.pgm")).unwrap();
    let (h, px) = parse_pnm(&img).unwrap();
    assert_eq!((h.channels, h.width, h.height), (1, 28, 28));
    assert_eq!(px.len(), 784);
    let trace = std::fs::read_to_string(fx.root.join("am1/conv8_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3 * 6);
    assert!(run(&["am", "--model", &fx.model, "--layer", "8", "--filters", "128", "--out", &d("am3")]).status.code() == Some(1));
}

#[test]
fn distill_keeps_52_of_512() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_idx(&data, "train", 1, 0);
    write_idx(&data, "t10k", 1, 0);
    let arch = ArchSpec {
        input: InputShape::MNIST,
        layers: vec![
            LayerKind::Conv3x3 { in_channels: 1, out_channels: 4 },
            LayerKind::Relu,
            LayerKind::MaxPool2x2,
            LayerKind::Conv3x3 { in_channels: 4, out_channels: 512 },
            LayerKind::Relu,
            LayerKind::MaxPool2x2,
            LayerKind::MaxPool2x2,
            LayerKind::Flatten,
            LayerKind::Dense { in_features: 512 * 9, out_features: 10 },
        ],
        num_classes: 10,
    };
    let model_path = tmp.path().join("wide.cpdm");
    save_model(&build_model(arch, 0).unwrap(), &model_path).unwrap();
    let out = tmp.path().join("o");
    ok(&[
        "distill",
        "--data-dir",
        data.to_str().unwrap(),
        "--model",
        model_path.to_str().unwrap(),
        "--target-class",
        "0",
        "--ratio",
        "0.1",
        "--distill-layers",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    let path: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("critical_path.json")).unwrap()).unwrap();
    assert_eq!(path["layers"][0]["reserved"].as_array().unwrap().len(), 52);
    assert_eq!(path["layers"][0]["filters"], 512);
}

#[test]
fn paramcount_reports_vgg16_sizes() {
    let text = ok(&["paramcount", "--arch", "vgg16", "--dataset", "cifar10", "--ratio", "0.1"]);
    assert!(text.contains("conv weights:     14710464  (58.842 MB)"), "{text}");
    assert!(text.contains("conv params:      14714688  (58.859 MB)"), "{text}");
    assert!(text.contains("distilled at ratio 0.1, layers [8, 9, 10, 11, 12, 13]"));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("pc");
    ok(&["paramcount", "--arch", "vgg-desk", "--out", out.to_str().unwrap()]);
    let csv = std::fs::read_to_string(out.join("paramcount.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("layer,weights,biases,total"));
    assert_eq!(csv.lines().count(), 1 + 10);
}
