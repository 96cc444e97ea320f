//! Writes the blob dataset to disk as PLY files with a label CSV, a compact
//! run config and a leave-one-content-out manifest, ready for `pcqa train`.
//!
//! Usage: `cargo run --example synthetic_dataset -- <dir> [epochs]`

use std::fs;
use std::path::PathBuf;

use pcqa::cli::RunConfig;
use pcqa::network::ModelConfig;
use pcqa::pointcloud::{save_ply, PlyFormat};
use pcqa::synthetic::blob_dataset;
use pcqa::training::ScheduleConfig;

fn main() -> pcqa::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synthetic_run".into()));
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let clouds = dir.join("clouds");
    fs::create_dir_all(&clouds)?;

    let mut labels = String::from("path,mos,content_id,distortion_tag\n");
    for (i, s) in blob_dataset(4096, 11)?.iter().enumerate() {
        let name = format!("{}_{}_{i}.ply", s.content_id, s.distortion_tag);
        save_ply(&s.cloud, clouds.join(&name), PlyFormat::BinaryLittleEndian)?;
        labels.push_str(&format!("{name},{},{},{}\n", s.mos, s.content_id, s.distortion_tag));
    }
    fs::write(dir.join("labels.csv"), labels)?;

    let config = RunConfig {
        model: ModelConfig::compact(),
        schedule: ScheduleConfig {
            epochs,
            t_max: epochs,
            ..ScheduleConfig::default()
        },
        ..RunConfig::default()
    };
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config).expect("config serializes"))?;
    let manifest = serde_json::json!({
        "config_path": "config.json",
        "dataset_root": "clouds",
        "label_file": "labels.csv",
        "split": { "scheme": "leave-one-content-out" },
        "seed": 11,
        "output_dir": "out",
        "checkpoint_every": 10,
    });
    fs::write(dir.join("manifest.json"), format!("{manifest:#}\n"))?;
    println!("wrote {}", dir.display());
    println!("next: pcqa train {}", dir.join("manifest.json").display());
    Ok(())
}
