//! Leave-one-content-out runs of the four component ablations on the blob
//! set: no patch-wise loss, unit patch weights, no texture branch and no
//! structure branch.
//!
//! Usage: `cargo run --release --example ablations -- [epochs]`

use pcqa::network::ModelConfig;
use pcqa::synthetic::blob_dataset;
use pcqa::training::{
    ablation_variants, cross_validate, make_splits, prepare_patches, LossConfig, ScheduleConfig, SplitScheme,
};

fn main() -> pcqa::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let samples = blob_dataset(4096, 11)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.mos).collect();
    let plans = make_splits(&samples, &SplitScheme::LeaveOneContentOut)?;
    let sched = ScheduleConfig {
        epochs,
        t_max: epochs,
        ..ScheduleConfig::default()
    };
    let base = ModelConfig::compact();
    let mut runs = vec![("full", base.clone(), LossConfig::default())];
    runs.extend(ablation_variants(&base, &LossConfig::default()));
    for (name, config, loss_cfg) in runs {
        let sets = prepare_patches(&samples, &config, None)?;
        let cv = cross_validate(&sets, &labels, &plans, &config, &loss_cfg, &sched, 11)?;
        println!("== {name}");
        print!("{}", cv.to_kv());
    }
    Ok(())
}
