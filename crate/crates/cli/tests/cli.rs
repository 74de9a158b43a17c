//! End-to-end tests of the command-line surface: exit codes, file
//! outputs, spec'd flag defaults, and idempotence of reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segdecide_core::io::{
    read_tensor, write_label_map, write_prior_stack, write_probability_map,
};
use segdecide_core::synth::rng::Rng;
use segdecide_core::tensor::{LabelMap, PriorStack, ProbabilityMap};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_segdecide"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().unwrap_or(-1)
}

fn synth_config_json() -> String {
    serde_json::json!({
        "height": 24,
        "width": 24,
        "num_classes": 3,
        "background_class": 0,
        "noise_correlation_sigma": 0.0,
        "classes": [
            {"count_mean": 0.0, "size_range": [1, 1], "placement_mean": [12.0, 12.0],
             "placement_std": [1.0, 1.0], "feature_mean": 0.0, "feature_std": 1.0},
            {"count_mean": 1.5, "size_range": [12, 30], "placement_mean": [16.0, 12.0],
             "placement_std": [3.0, 4.0], "feature_mean": 3.0, "feature_std": 1.0},
            {"count_mean": 1.0, "size_range": [15, 40], "placement_mean": [7.0, 12.0],
             "placement_std": [3.0, 5.0], "feature_mean": 6.0, "feature_std": 1.0}
        ]
    })
    .to_string()
}

fn random_probability_map(rng: &mut Rng, h: usize, w: usize, n: usize) -> ProbabilityMap {
    let mut data = vec![0.0f32; h * w * n];
    for pixel in 0..h * w {
        let raw: Vec<f64> = (0..n).map(|_| rng.next_open01() + 1e-6).collect();
        let sum: f64 = raw.iter().sum();
        for k in 0..n {
            data[pixel * n + k] = (raw[k] / sum) as f32;
        }
    }
    ProbabilityMap::new(h, w, n, data).unwrap()
}

#[test]
fn exit_codes_follow_the_contract() {
    // Unknown subcommand: usage error.
    assert_eq!(code(&run(&["frobnicate"])), 1);
    // Unknown flag: usage error.
    assert_eq!(code(&run(&["decide", "--nonsense"])), 1);
    // Help is not an error.
    assert_eq!(code(&run(&["--help"])), 0);
    // Missing input file: data error.
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.sgt");
    let out = tmp.path().join("out.sgt");
    assert_eq!(
        code(&run(&[
            "decide",
            "--probs",
            missing.to_str().unwrap(),
            "--rule",
            "bayes",
            "--out",
            out.to_str().unwrap(),
        ])),
        2
    );
    // Corrupt file: data error.
    let bad = tmp.path().join("bad.sgt");
    std::fs::write(&bad, b"XXXX000000000000").unwrap();
    assert_eq!(
        code(&run(&[
            "decide",
            "--probs",
            bad.to_str().unwrap(),
            "--rule",
            "bayes",
            "--out",
            out.to_str().unwrap(),
        ])),
        2
    );
    // ml without priors: usage error.
    let probs_path = tmp.path().join("p.sgt");
    let mut rng = Rng::new(1);
    write_probability_map(&probs_path, &random_probability_map(&mut rng, 4, 4, 3)).unwrap();
    assert_eq!(
        code(&run(&[
            "decide",
            "--probs",
            probs_path.to_str().unwrap(),
            "--rule",
            "ml",
            "--out",
            out.to_str().unwrap(),
        ])),
        1
    );
}

#[test]
fn ml_with_uniform_priors_matches_bayes_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(77);
    let probs = random_probability_map(&mut rng, 12, 10, 4);
    let probs_path = tmp.path().join("p.sgt");
    write_probability_map(&probs_path, &probs).unwrap();

    let uniform = PriorStack::new_raw(12, 10, 4, vec![0.25; 12 * 10 * 4]).unwrap();
    let priors_path = tmp.path().join("uniform.sgt");
    write_prior_stack(&priors_path, &uniform).unwrap();

    let bayes_out = tmp.path().join("bayes.sgt");
    let ml_out = tmp.path().join("ml.sgt");
    assert!(run(&[
        "decide",
        "--probs",
        probs_path.to_str().unwrap(),
        "--rule",
        "bayes",
        "--out",
        bayes_out.to_str().unwrap(),
    ])
    .status
    .success());
    assert!(run(&[
        "decide",
        "--probs",
        probs_path.to_str().unwrap(),
        "--rule",
        "ml",
        "--priors",
        priors_path.to_str().unwrap(),
        "--out",
        ml_out.to_str().unwrap(),
    ])
    .status
    .success());
    assert_eq!(
        std::fs::read(&bayes_out).unwrap(),
        std::fs::read(&ml_out).unwrap()
    );
}

#[test]
fn decide_averages_multiple_probability_maps() {
    let tmp = tempfile::tempdir().unwrap();
    // Two maps whose mean flips the argmax at the only pixel.
    let a = ProbabilityMap::new(1, 1, 2, vec![0.9, 0.1]).unwrap();
    let b = ProbabilityMap::new(1, 1, 2, vec![0.3, 0.7]).unwrap();
    let pa = tmp.path().join("a.sgt");
    let pb = tmp.path().join("b.sgt");
    write_probability_map(&pa, &a).unwrap();
    write_probability_map(&pb, &b).unwrap();
    let out = tmp.path().join("pred.sgt");
    assert!(run(&[
        "decide",
        "--probs",
        pa.to_str().unwrap(),
        pb.to_str().unwrap(),
        "--rule",
        "bayes",
        "--out",
        out.to_str().unwrap(),
    ])
    .status
    .success());
    let pred = read_tensor(&out).unwrap().into_label_map(2).unwrap();
    // Mean is (0.6, 0.4): class 0 despite map b preferring class 1.
    assert_eq!(pred.data(), &[0]);
}

#[test]
fn synth_is_deterministic_and_splits_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let config_path = tmp.path().join("synth.json");
    std::fs::write(&config_path, synth_config_json()).unwrap();
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    for dir in [&dir_a, &dir_b] {
        assert!(run(&[
            "synth",
            "--config",
            config_path.to_str().unwrap(),
            "--seed",
            "5",
            "--count",
            "4",
            "--out-dir",
            dir.to_str().unwrap(),
        ])
        .status
        .success());
    }
    for sub in ["gt", "features"] {
        for index in 0..4 {
            let name = format!("{sub}/scene_{index:04}.sgt");
            let a = std::fs::read(dir_a.join(&name)).unwrap();
            let b = std::fs::read(dir_b.join(&name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }
    // A different seed changes the scenes.
    let dir_c = tmp.path().join("c");
    assert!(run(&[
        "synth",
        "--config",
        config_path.to_str().unwrap(),
        "--seed",
        "6",
        "--count",
        "1",
        "--out-dir",
        dir_c.to_str().unwrap(),
    ])
    .status
    .success());
    assert_ne!(
        std::fs::read(dir_a.join("gt/scene_0000.sgt")).unwrap(),
        std::fs::read(dir_c.join("gt/scene_0000.sgt")).unwrap()
    );
}

fn write_label_dir(dir: &Path, maps: &[LabelMap]) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    maps.iter()
        .enumerate()
        .map(|(i, m)| {
            let path = dir.join(format!("img_{i:03}.sgt"));
            write_label_map(&path, m).unwrap();
            path
        })
        .collect()
}

#[test]
fn priors_pipeline_produces_valid_smoothed_stack() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(9);
    let maps: Vec<LabelMap> = (0..10)
        .map(|_| {
            let data: Vec<u8> = (0..16 * 16)
                .map(|_| (rng.next_u64() % 3) as u8)
                .collect();
            LabelMap::new(16, 16, 3, data).unwrap()
        })
        .collect();
    let labels_dir = tmp.path().join("labels");
    write_label_dir(&labels_dir, &maps);

    let out = tmp.path().join("priors.sgt");
    let raw_out = tmp.path().join("raw.sgt");
    let global_out = tmp.path().join("global.json");
    // Spec'd defaults: sigma 80, cutoff 1e-5.
    let output = run(&[
        "priors",
        "--labels",
        labels_dir.to_str().unwrap(),
        "--num-classes",
        "3",
        "--sigma",
        "80",
        "--cutoff",
        "1e-5",
        "--out",
        out.to_str().unwrap(),
        "--raw-out",
        raw_out.to_str().unwrap(),
        "--global-out",
        global_out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));

    let smoothed = read_tensor(&out)
        .unwrap()
        .into_smoothed_prior_stack(1e-5)
        .unwrap();
    assert!(smoothed.data().iter().all(|&v| v >= 1e-5));
    let raw = read_tensor(&raw_out).unwrap().into_raw_prior_stack().unwrap();
    assert_eq!(raw.num_classes(), 3);
    let global: segdecide_core::tensor::GlobalPriors =
        serde_json::from_str(&std::fs::read_to_string(&global_out).unwrap()).unwrap();
    assert_eq!(global.num_classes(), 3);

    // Identical rerun produces identical bytes.
    let before = std::fs::read(&out).unwrap();
    assert!(run(&[
        "priors",
        "--labels",
        labels_dir.to_str().unwrap(),
        "--num-classes",
        "3",
        "--sigma",
        "80",
        "--cutoff",
        "1e-5",
        "--out",
        out.to_str().unwrap(),
    ])
    .status
    .success());
    assert_eq!(std::fs::read(&out).unwrap(), before);
}

#[test]
fn eval_and_analyze_emit_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(31);
    let make_maps = |rng: &mut Rng, bias: u64| -> Vec<LabelMap> {
        (0..5)
            .map(|_| {
                let data: Vec<u8> = (0..20 * 20)
                    .map(|_| {
                        let v = rng.next_u64() % 10;
                        if v < 6 + bias {
                            0
                        } else {
                            (1 + v % 2) as u8
                        }
                    })
                    .collect();
                LabelMap::new(20, 20, 3, data).unwrap()
            })
            .collect()
    };
    let gts = make_maps(&mut rng, 0);
    let preds_a = make_maps(&mut rng, 1);
    let preds_b = make_maps(&mut rng, 2);
    let gt_dir = tmp.path().join("gt");
    let a_dir = tmp.path().join("pred_a");
    let b_dir = tmp.path().join("pred_b");
    write_label_dir(&gt_dir, &gts);
    write_label_dir(&a_dir, &preds_a);
    write_label_dir(&b_dir, &preds_b);

    let report_path = tmp.path().join("eval.json");
    let output = run(&[
        "eval",
        "--pred",
        a_dir.to_str().unwrap(),
        "--gt",
        gt_dir.to_str().unwrap(),
        "--num-classes",
        "3",
        "--min-size",
        "2",
        "--max-gap",
        "3",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["images"].as_array().unwrap().len(), 5);
    assert!(report["aggregate"]["confusion"].is_array());
    assert!(report["aggregate"]["segment_summary"]["per_class"].is_array());
    // Perfect self-evaluation sanity check.
    let self_path = tmp.path().join("self.json");
    assert!(run(&[
        "eval",
        "--pred",
        gt_dir.to_str().unwrap(),
        "--gt",
        gt_dir.to_str().unwrap(),
        "--num-classes",
        "3",
        "--out",
        self_path.to_str().unwrap(),
    ])
    .status
    .success());
    let self_report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&self_path).unwrap()).unwrap();
    assert_eq!(self_report["aggregate"]["miou_skip_pooled"], 1.0);

    let analyze_dir = tmp.path().join("analysis");
    let output = run(&[
        "analyze",
        "--pred-bayes",
        a_dir.to_str().unwrap(),
        "--pred-ml",
        b_dir.to_str().unwrap(),
        "--gt",
        gt_dir.to_str().unwrap(),
        "--num-classes",
        "3",
        "--class",
        "1",
        "--min-size",
        "2",
        "--max-gap",
        "3",
        "--bin-edges",
        "2,8,32,128",
        "--out-dir",
        analyze_dir.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    for name in [
        "cdf_recall.csv",
        "cdf_precision.csv",
        "hist_false_detection.csv",
        "hist_non_detection.csv",
        "nondetection_pixel_bayes.pgm",
        "nondetection_object_ml.pgm",
        "nondetection_pixel_ml.pgm.meta.json",
        "summary.json",
    ] {
        assert!(analyze_dir.join(name).exists(), "{name} missing");
    }
    let csv = std::fs::read_to_string(analyze_dir.join("hist_false_detection.csv")).unwrap();
    assert!(csv.starts_with("bin_lo,bin_hi,bayes,ml,ratio\n"));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json"),
        )
        .unwrap(),
    )
    .unwrap();
    config["corpus"]["train_scenes"] = serde_json::json!(40);
    config["corpus"]["test_scenes"] = serde_json::json!(15);
    config.as_object_mut().unwrap().remove("scenario");
    let config_path = tmp.path().join("small.json");
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();

    let mut reports = Vec::new();
    for threads in ["1", "4"] {
        let out_dir = tmp.path().join(format!("t{threads}"));
        let output = run(&[
            "--threads",
            threads,
            "experiment",
            "--config",
            config_path.to_str().unwrap(),
            "--seed",
            "12",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
        reports.push(std::fs::read(out_dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn experiment_check_gates_on_verdicts() {
    let tmp = tempfile::tempdir().unwrap();
    // A deliberately degenerate config: uniform priors make the rules
    // identical, so the ML-advantage verdicts cannot pass and --check
    // must exit with code 3.
    let mut config: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json"),
        )
        .unwrap(),
    )
    .unwrap();
    config["force_uniform_priors"] = serde_json::Value::Bool(true);
    config["corpus"]["train_scenes"] = serde_json::json!(30);
    config["corpus"]["test_scenes"] = serde_json::json!(10);
    config.as_object_mut().unwrap().remove("scenario");
    let config_path = tmp.path().join("degenerate.json");
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();

    let out_dir = tmp.path().join("out");
    let output = run(&[
        "experiment",
        "--config",
        config_path.to_str().unwrap(),
        "--seed",
        "3",
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--check",
    ]);
    assert_eq!(code(&output), 3, "{}", String::from_utf8_lossy(&output.stderr));
    // Without --check the same run exits 0 and still writes the report.
    let output = run(&[
        "experiment",
        "--config",
        config_path.to_str().unwrap(),
        "--seed",
        "3",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0);
    assert!(out_dir.join("report.json").exists());
    assert!(out_dir.join("run_meta.json").exists());
}
