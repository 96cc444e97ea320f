//! Times patch extraction (farthest point sampling plus one k-NN query per
//! patch) on a large synthetic cloud with one and with eight worker threads.
//!
//! Usage: `cargo run --release --example extract_patches -- [n_points]`

use std::time::Instant;

use pcqa::patching::{extract_patches, PatchConfig};
use pcqa::pointcloud::normalize;
use pcqa::synthetic::blob_cloud;

fn main() -> pcqa::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1_000_000);
    let cloud = normalize(&blob_cloud(0, n, 1)?);
    let config = PatchConfig::default();
    let mut first = None;
    for threads in [1, 8] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        let start = Instant::now();
        let ps = pool.install(|| extract_patches(&cloud, &config))?;
        println!(
            "{n} points, {threads} thread(s): {}x{} patches in {:.2?}",
            ps.k(),
            ps.np(),
            start.elapsed()
        );
        match &first {
            None => first = Some(ps),
            Some(f) => assert_eq!(f, &ps, "thread count changed the result"),
        }
    }
    Ok(())
}
