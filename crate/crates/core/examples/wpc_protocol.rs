//! Runs the full-size protocol on an external corpus such as WPC.
//!
//! The corpus is not shipped. Supply the cloud directory, a label CSV with
//! columns `path,mos,content_id,distortion_tag` and a JSON split file naming
//! the train and test contents:
//!
//! ```text
//! {"scheme":"fixed","train_contents":["bag","banana"],"test_contents":["cake"]}
//! ```
//!
//! Usage: `cargo run --release --example wpc_protocol -- <clouds> <labels.csv> <split.json> <out>`
//!
//! The default config (400 epochs, batch 4, cosine schedule from 1e-3) is
//! written next to the manifest; edit it before launching to shorten the run.

use std::fs;
use std::path::{Path, PathBuf};

use pcqa::cli::{run, RunConfig};

fn absolute(p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().expect("working directory").join(p)
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [clouds, labels, split, out] = &args[..] else {
        eprintln!("usage: wpc_protocol <clouds> <labels.csv> <split.json> <out>");
        std::process::exit(2);
    };
    let out = absolute(out);
    fs::create_dir_all(&out).expect("create output directory");
    let config = out.join("config.json");
    if !config.exists() {
        let text = serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes");
        fs::write(&config, text).expect("write config");
    }
    let manifest = serde_json::json!({
        "config_path": config,
        "dataset_root": absolute(clouds),
        "label_file": absolute(labels),
        "split_file": absolute(split),
        "seed": 0,
        "output_dir": out.join("run"),
        "checkpoint_every": 50,
    });
    let manifest_path = out.join("manifest.json");
    fs::write(&manifest_path, format!("{manifest:#}\n")).expect("write manifest");
    println!("manifest: {}", manifest_path.display());

    let code = run(
        ["pcqa", "train", manifest_path.to_str().expect("utf-8 path")],
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    if code == 0 {
        println!("reference: plcc 0.8821 srcc 0.8624 krcc 0.6854 rmse 10.5769");
    }
    std::process::exit(code);
}
