use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcqa::cli::{RunConfig, EXIT_IO, EXIT_WEIGHTS};
use pcqa::network::{param_count, ModelConfig, ModelWeights};
use pcqa::patching::{extract_patches, PatchSet};
use pcqa::pointcloud::{normalize, save_ply, PlyFormat};
use pcqa::synthetic::{blob_cloud, blob_dataset};
use pcqa::training::ScheduleConfig;
use tempfile::TempDir;

fn pcqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcqa")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, config: &RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

/// A PLY cloud, a config file and matching weights.
struct Scoring {
    _dir: TempDir,
    ply: PathBuf,
    config: PathBuf,
    weights: PathBuf,
}

fn scoring(model: ModelConfig, points: usize) -> Scoring {
    let dir = tempfile::tempdir().unwrap();
    let ply = dir.path().join("cloud.ply");
    save_ply(&blob_cloud(3, points, 4).unwrap(), &ply, PlyFormat::BinaryLittleEndian).unwrap();
    let weights = dir.path().join("w.pstw");
    ModelWeights::init(&model, 5).unwrap().save(&weights).unwrap();
    let config = write_config(
        dir.path(),
        &RunConfig {
            model,
            ..RunConfig::default()
        },
    );
    Scoring {
        _dir: dir,
        ply,
        config,
        weights,
    }
}

#[test]
fn info_prints_table_and_total() {
    let o = pcqa(&["info"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let total: usize = text.lines().last().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    assert_eq!(total, param_count(&ModelConfig::default()));
    assert!(text.lines().any(|l| l.starts_with("cbe.conv")));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &RunConfig {
            model: ModelConfig {
                use_sfe: false,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        },
    );
    let o = pcqa(&["info", "--json", "--config", p(&cfg)]);
    assert!(o.status.success());
    let j: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((j["total"].as_u64().unwrap() as usize) < total);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ \"model\": ").unwrap();
    let o = pcqa(&["info", "--config", p(&bad)]);
    assert_eq!(o.status.code(), Some(EXIT_IO));
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);

    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, "{ \"modle\": {} }").unwrap();
    assert_eq!(pcqa(&["info", "--config", p(&unknown)]).status.code(), Some(EXIT_IO));
    assert_eq!(pcqa(&["info", "--config", "/nonexistent/c.json"]).status.code(), Some(EXIT_IO));
}

#[test]
fn score_default_config_format() {
    let s = scoring(ModelConfig::default(), 20_000);
    let o = pcqa(&["score", p(&s.weights), p(&s.ply)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 17);
    let score: f64 = lines[0].strip_prefix("score: ").unwrap().parse().unwrap();
    assert!(score.is_finite());
    for (i, l) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = l.split_whitespace().collect();
        assert_eq!(f[..2], ["patch", &i.to_string()]);
        assert_eq!(f[2], "weight");
        assert_eq!(f[4], "score");
        f[3].parse::<f64>().unwrap();
        f[5].parse::<f64>().unwrap();
    }
}

#[test]
fn score_is_deterministic_and_json_aggregates() {
    let s = scoring(ModelConfig::compact(), 3000);
    let args = ["score", "--config", p(&s.config), p(&s.weights), p(&s.ply)];
    let a = pcqa(&args);
    let b = pcqa(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);

    let o = pcqa(&["score", "--json", "--config", p(&s.config), p(&s.weights), p(&s.ply)]);
    let j: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let w: Vec<f64> = serde_json::from_value(j["patch_weights"].clone()).unwrap();
    let y: Vec<f64> = serde_json::from_value(j["patch_scores"].clone()).unwrap();
    let g = j["global_score"].as_f64().unwrap();
    assert_eq!(w.len(), ModelConfig::compact().k);
    let expect = w.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / w.len() as f64;
    assert!((g - expect).abs() <= 1e-6 * expect.abs().max(1e-12));
    assert_eq!(j["seed"].as_u64(), Some(ModelConfig::compact().seed));
    let text_score: f64 = stdout(&a).lines().next().unwrap()[7..].parse().unwrap();
    assert_eq!(text_score, g);
}

#[test]
fn score_error_exit_codes() {
    let s = scoring(ModelConfig::toy(), 500);
    let bytes = fs::read(&s.weights).unwrap();
    let corrupt = s.weights.with_file_name("corrupt.pstw");
    let mut c = bytes.clone();
    let mid = c.len() / 2;
    c[mid] ^= 0xff;
    fs::write(&corrupt, &c).unwrap();
    let o = pcqa(&["score", "--config", p(&s.config), p(&corrupt), p(&s.ply)]);
    assert_eq!(o.status.code(), Some(EXIT_WEIGHTS));
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);

    let truncated = s.weights.with_file_name("short.pstw");
    fs::write(&truncated, &bytes[..bytes.len() / 3]).unwrap();
    assert_eq!(
        pcqa(&["score", "--config", p(&s.config), p(&truncated), p(&s.ply)]).status.code(),
        Some(EXIT_WEIGHTS)
    );
    // Valid file for another architecture.
    assert_eq!(pcqa(&["score", p(&s.weights), p(&s.ply)]).status.code(), Some(EXIT_WEIGHTS));

    let missing = s.ply.with_file_name("missing.ply");
    assert_eq!(
        pcqa(&["score", "--config", p(&s.config), p(&s.weights), p(&missing)]).status.code(),
        Some(EXIT_IO)
    );
    let garbage = s.ply.with_file_name("garbage.ply");
    fs::write(&garbage, "not a ply").unwrap();
    assert_eq!(
        pcqa(&["score", "--config", p(&s.config), p(&s.weights), p(&garbage)]).status.code(),
        Some(EXIT_IO)
    );
    assert_eq!(
        pcqa(&["score", "--config", p(&s.config), "/nonexistent.pstw", p(&s.ply)]).status.code(),
        Some(EXIT_IO)
    );
}

#[test]
fn patches_writes_pstp() {
    let s = scoring(ModelConfig::compact(), 3000);
    let out = s.ply.with_file_name("cloud.pstp");
    let o = pcqa(&["patches", "--config", p(&s.config), "--out", p(&out), p(&s.ply)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"PSTP");
    let config = ModelConfig::compact();
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize, config.k);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, config.np);
    let loaded = PatchSet::load(&out).unwrap();
    let cloud = pcqa::pointcloud::load_ply(&s.ply).unwrap();
    let direct = extract_patches(&normalize(&cloud), &config.patch_config()).unwrap();
    assert_eq!((loaded.k(), loaded.np()), (direct.k(), direct.np()));
    let bits = |ps: &PatchSet| ps.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&loaded), bits(&direct));

    assert_eq!(pcqa(&["patches", p(&s.ply)]).status.code(), Some(EXIT_IO));
}

#[test]
fn eval_recomputes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("pairs.csv");
    fs::write(&csv, "predicted,ground_truth\n0.1,0.2\n0.5,0.4\n0.9,0.95\n0.3,0.25\n").unwrap();
    let o = pcqa(&["eval", p(&csv)]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().any(|l| l == "srcc=1.0000000000"), "{text}");
    assert!(text.lines().any(|l| l == "n=4"));
    assert_eq!(pcqa(&["eval", "/nonexistent.csv"]).status.code(), Some(EXIT_IO));
}

/// The blob set as PLY files with labels and a LOCO manifest.
fn dataset(dir: &Path, epochs: usize, split_file: Option<&str>) -> PathBuf {
    let clouds = dir.join("clouds");
    fs::create_dir_all(&clouds).unwrap();
    let mut labels = String::from("path,mos,content_id,distortion_tag\n");
    for (i, s) in blob_dataset(1024, 11).unwrap().iter().enumerate() {
        let name = format!("{i}.ply");
        save_ply(&s.cloud, clouds.join(&name), PlyFormat::BinaryLittleEndian).unwrap();
        labels.push_str(&format!("{name},{},{},{}\n", s.mos, s.content_id, s.distortion_tag));
    }
    fs::write(dir.join("labels.csv"), labels).unwrap();
    let config = RunConfig {
        model: ModelConfig {
            np: 256,
            ns: 64,
            nt: 128,
            ..ModelConfig::toy()
        },
        schedule: ScheduleConfig {
            epochs,
            t_max: epochs,
            ..ScheduleConfig::default()
        },
        ..RunConfig::default()
    };
    write_config(dir, &config);
    let mut manifest = serde_json::json!({
        "config_path": "config.json",
        "dataset_root": "clouds",
        "label_file": "labels.csv",
        "seed": 11,
        "output_dir": "out",
        "checkpoint_every": 1,
    });
    if let Some(f) = split_file {
        manifest["split_file"] = f.into();
    }
    let path = dir.join("manifest.json");
    fs::write(&path, manifest.to_string()).unwrap();
    path
}

#[test]
fn train_writes_fold_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 2, None);
    let o = pcqa(&["train", p(&manifest)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 11);
    assert_eq!(run["folds"], 4);
    for f in 0..4 {
        let fold = out.join(format!("fold{f}"));
        for file in ["weights.pstw", "log.txt", "report.txt", "scatter.csv", "scaler.json", "checkpoint_0002.pstw"] {
            assert!(fold.join(file).exists(), "fold{f}/{file}");
        }
        let log = fs::read_to_string(fold.join("log.txt")).unwrap();
        assert!(log.starts_with("seed=11\n"));
        assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
        assert!(fs::read_to_string(fold.join("report.txt")).unwrap().contains("srcc="));
        assert_eq!(fs::read_to_string(fold.join("scatter.csv")).unwrap().lines().count(), 3);
        assert_eq!(
            fs::read(fold.join("weights.pstw")).unwrap(),
            fs::read(fold.join("checkpoint_0002.pstw")).unwrap()
        );
    }
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("pooled.n=8"));

    let first = fs::read(out.join("fold1/weights.pstw")).unwrap();
    let again = dir.path().join("again");
    let o = pcqa(&["train", "--out", p(&again), p(&manifest)]);
    assert!(o.status.success());
    for f in 0..4 {
        let name = format!("fold{f}/weights.pstw");
        assert_eq!(fs::read(out.join(&name)).unwrap(), fs::read(again.join(&name)).unwrap());
    }
    assert_eq!(first, fs::read(again.join("fold1/weights.pstw")).unwrap());
    assert_eq!(report, fs::read_to_string(again.join("report.txt")).unwrap());
}

#[test]
fn train_rejects_leaking_split_before_training() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("split.json"),
        r#"{"scheme":"fixed","train_contents":["blob0","blob1"],"test_contents":["blob1"]}"#,
    )
    .unwrap();
    let manifest = dataset(dir.path(), 1, Some("split.json"));
    let o = pcqa(&["train", p(&manifest)]);
    assert_eq!(o.status.code(), Some(EXIT_IO));
    assert!(String::from_utf8_lossy(&o.stderr).contains("both train and test"), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("out").exists());

    let missing = dir.path().join("m2.json");
    fs::write(
        &missing,
        r#"{"dataset_root":"nowhere","label_file":"labels.csv","output_dir":"out"}"#,
    )
    .unwrap();
    assert_eq!(pcqa(&["train", p(&missing)]).status.code(), Some(EXIT_IO));
}

#[test]
fn usage_errors() {
    assert_eq!(pcqa(&["frobnicate"]).status.code(), Some(EXIT_IO));
    assert!(pcqa(&["--help"]).status.success());
}
