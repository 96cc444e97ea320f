//! Extracts patches from a synthetic cloud and scores them with freshly
//! initialised weights at the default model size.

use std::time::Instant;

use pcqa::network::{forward, Mode, ModelConfig, ModelWeights};
use pcqa::patching::extract_patches;
use pcqa::pointcloud::normalize;
use pcqa::synthetic::blob_cloud;

fn main() -> pcqa::Result<()> {
    let config = ModelConfig::default();
    let cloud = normalize(&blob_cloud(0, 200_000, 1)?);
    let t = Instant::now();
    let patches = extract_patches(&cloud, &config.patch_config())?;
    println!("extracted {}x{} patches in {:.2?}", patches.k(), patches.np(), t.elapsed());

    let weights = ModelWeights::init(&config, 7)?;
    let t = Instant::now();
    let bundle = forward(&patches, &config, &weights, Mode::Eval)?;
    println!("scored in {:.2?}", t.elapsed());
    println!("score: {:.6}", bundle.global_score);
    for (w, y) in bundle.patch_weights.iter().zip(&bundle.patch_scores) {
        println!("  weight {w:>10.6}  score {y:>10.6}");
    }
    Ok(())
}
