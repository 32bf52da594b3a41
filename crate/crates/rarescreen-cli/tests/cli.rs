use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rarescreen"))
}

fn synth_spec_json() -> &'static str {
    r#"{
        "p": 10,
        "n_frequent": 3,
        "n_rare": 1,
        "samples_per_frequent": 40,
        "samples_per_rare": 8,
        "n_normal": 30,
        "separation": 10.0,
        "label_noise": 0.0,
        "co_occurrence": 0.0,
        "seed": 3
    }"#
}

fn make_dataset(dir: &Path) {
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, synth_spec_json()).unwrap();
    let status = bin()
        .args(["synth", "--spec"])
        .arg(&spec_path)
        .arg("--out")
        .arg(dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.join("features.csv").exists());
    assert!(dir.join("labels.csv").exists());
}

#[test]
fn split_writes_assignments() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let out = dir.path().join("splits");
    let status = bin()
        .args(["--seed", "7", "split", "--m", "3", "--folds", "5"])
        .arg("--features")
        .arg(dir.path().join("features.csv"))
        .arg("--labels")
        .arg(dir.path().join("labels.csv"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for name in ["balanced.csv", "splits.csv", "folds_valid.csv", "folds_test.csv"] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let splits = std::fs::read_to_string(out.join("splits.csv")).unwrap();
    assert!(splits.starts_with("sample_id,assignment"));
    assert!(splits.contains("LEARN") && splits.contains("VALID") && splits.contains("TEST"));
}

#[test]
fn pca_tsne_density_chain() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());

    let pca_out = dir.path().join("pca");
    assert!(bin()
        .args(["pca", "--p-prime", "5"])
        .arg("--features")
        .arg(dir.path().join("features.csv"))
        .arg("--out")
        .arg(&pca_out)
        .status()
        .unwrap()
        .success());
    assert!(pca_out.join("pca.json").exists());
    let pi = pca_out.join("pi.csv");
    assert!(pi.exists());

    let tsne_out = dir.path().join("tsne");
    assert!(bin()
        .args(["--seed", "5", "tsne", "--perplexity", "10", "--iters", "300"])
        .arg("--in")
        .arg(&pi)
        .arg("--out")
        .arg(&tsne_out)
        .status()
        .unwrap()
        .success());
    let embedding = tsne_out.join("embedding.csv");
    assert!(embedding.exists());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tsne_out.join("embedding_meta.json")).unwrap())
            .unwrap();
    assert!(meta["final_cost"].as_f64().unwrap() < meta["initial_cost"].as_f64().unwrap());

    let dens_out = dir.path().join("density");
    assert!(bin()
        .arg("fit-density")
        .arg("--embedding")
        .arg(&embedding)
        .arg("--labels")
        .arg(dir.path().join("labels.csv"))
        .arg("--out")
        .arg(&dens_out)
        .status()
        .unwrap()
        .success());
    assert!(dens_out.join("reference_q.csv").exists());
    let models: Vec<_> = std::fs::read_dir(dens_out.join("density")).unwrap().collect();
    assert_eq!(models.len(), 4);
}

fn run_config_json(dir: &Path) -> String {
    serde_json::json!({
        "features": dir.join("features.csv"),
        "labels": dir.join("labels.csv"),
        "params": {
            "m": 3, "p_prime": 5, "output_dim": 2, "perplexity": 5.0, "k": 3,
            "tsne_iterations": 250, "tsne_learning_rate": 200.0,
            "kernel_variant": "student_t", "kernel_mode": "normalized",
            "n_folds": 5, "seed": 11
        },
        "protocol": "test"
    })
    .to_string()
}

#[test]
fn run_predict_gradient_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, run_config_json(dir.path())).unwrap();

    let out = dir.path().join("run");
    let output = bin()
        .arg("run")
        .arg("--config")
        .arg(&config_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    // stderr is line-delimited JSON events
    let stderr = String::from_utf8_lossy(&output.stderr);
    for line in stderr.lines() {
        let event: serde_json::Value = serde_json::from_str(line).expect("event line parses");
        assert!(event["stage"].is_string());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    for artifact in manifest["artifacts"].as_array().unwrap() {
        assert!(out.join(artifact.as_str().unwrap()).exists());
    }

    // Score three fresh query vectors.
    let mut query = String::from("sample_id,patient_id,f0,f1,f2,f3,f4,f5,f6,f7,f8,f9\n");
    query.push_str("q0,qp0,0.1,0.2,-0.3,0.4,0.5,-0.6,0.7,0.8,-0.9,1.0\n");
    query.push_str("q1,qp1,5.0,4.0,3.0,2.0,1.0,0.0,-1.0,-2.0,-3.0,-4.0\n");
    query.push_str("q2,qp2,-2.0,1.5,0.0,0.5,-1.0,2.0,3.0,-0.5,0.25,0.75\n");
    let query_path = dir.path().join("query.csv");
    std::fs::write(&query_path, query).unwrap();

    let scores_path = dir.path().join("scores.csv");
    assert!(bin()
        .arg("predict")
        .arg("--model")
        .arg(out.join("predictor.json"))
        .arg("--features")
        .arg(&query_path)
        .arg("--out")
        .arg(&scores_path)
        .status()
        .unwrap()
        .success());
    let scores = std::fs::read_to_string(&scores_path).unwrap();
    assert!(scores.starts_with("sample_id,q_1,q_2,q_3,q_4"));
    assert_eq!(scores.lines().count(), 4);

    let grads_path = dir.path().join("grads.csv");
    assert!(bin()
        .arg("gradient")
        .arg("--model")
        .arg(out.join("predictor.json"))
        .arg("--features")
        .arg(&query_path)
        .args(["--condition", "rare00"])
        .arg("--out")
        .arg(&grads_path)
        .status()
        .unwrap()
        .success());
    let grads = std::fs::read_to_string(&grads_path).unwrap();
    assert!(grads.starts_with("sample_id,g0"));
    assert_eq!(grads.lines().count(), 4);
    // gradient rows have the full input dimension
    assert_eq!(grads.lines().next().unwrap().split(',').count(), 11);
}

#[test]
fn evaluate_cv_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let out = dir.path().join("eval");
    let status = bin()
        .args(["--seed", "13", "evaluate", "--mode", "cv", "--m", "3"])
        .args(["--p-prime", "5", "--perplexity", "5", "--iters", "250", "--folds", "5"])
        .arg("--features")
        .arg(dir.path().join("features.csv"))
        .arg("--labels")
        .arg(dir.path().join("labels.csv"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "cross_validation");
    assert!(report["average_auc"].as_f64().is_some());
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let out = dir.path().join("sweep");
    let status = bin()
        .args(["--seed", "17", "sweep", "--param", "k", "--values", "1,3", "--m", "3"])
        .args(["--p-prime", "5", "--perplexity", "5", "--iters", "200", "--folds", "5"])
        .arg("--features")
        .arg(dir.path().join("features.csv"))
        .arg("--labels")
        .arg(dir.path().join("labels.csv"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let table = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(table.starts_with("param,value,avg_auc,avg_auc_rare"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn missing_labels_exits_with_dataset_code() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let output = bin()
        .args(["run", "--m", "3"])
        .arg("--features")
        .arg(dir.path().join("features.csv"))
        .arg("--labels")
        .arg(dir.path().join("missing.csv"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "dataset stage exit code");
    let stderr = String::from_utf8_lossy(&output.stderr);
    let last = stderr.lines().last().unwrap();
    let event: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(event["stage"], "dataset");
}

#[test]
fn preprocess_directory_of_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    let out = dir.path().join("out");
    std::fs::create_dir_all(&input).unwrap();
    for (name, shade) in [("a.png", 120u8), ("b.png", 90)] {
        let img = gray_png(64, 48, shade);
        std::fs::write(input.join(name), img).unwrap();
    }
    let status = bin()
        .arg("preprocess")
        .arg("--in")
        .arg(&input)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("a.png").exists());
    assert!(out.join("b.png").exists());
}

fn gray_png(width: u32, height: u32, shade: u8) -> Vec<u8> {
    use std::io::Cursor;
    let mut buffer = Cursor::new(Vec::new());
    {
        let mut encoder = png::Encoder::new(&mut buffer, width, height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().unwrap();
        let data = vec![shade; (width * height * 3) as usize];
        writer.write_image_data(&data).unwrap();
    }
    buffer.into_inner()
}
