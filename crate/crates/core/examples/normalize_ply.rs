//! Loads a PLY file (or writes a synthetic one first), normalizes it into the
//! ball of radius 1000 about (1001, 1001, 1001) and saves the result.
//!
//! Usage: `cargo run --example normalize_ply -- [in.ply] [out.ply]`

use pcqa::pointcloud::{load_ply, normalize, save_ply, PlyFormat};
use pcqa::synthetic::blob_cloud;

fn main() -> pcqa::Result<()> {
    let mut args = std::env::args().skip(1);
    let input = match args.next() {
        Some(p) => p.into(),
        None => {
            let p = std::env::temp_dir().join("pcqa_blob.ply");
            save_ply(&blob_cloud(2, 5000, 4)?, &p, PlyFormat::Ascii)?;
            p
        }
    };
    let output = args
        .next()
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("pcqa_blob_normalized.ply"));
    let cloud = load_ply(&input)?;
    let n = normalize(&cloud);
    let lo = n.points().iter().fold([f64::INFINITY; 3], |m, p| std::array::from_fn(|a| m[a].min(p[a])));
    let hi = n.points().iter().fold([f64::NEG_INFINITY; 3], |m, p| std::array::from_fn(|a| m[a].max(p[a])));
    println!("{} points, centroid {:?}", n.len(), n.centroid());
    println!("bounds {lo:.1?} .. {hi:.1?}");
    save_ply(&n, &output, PlyFormat::BinaryLittleEndian)?;
    println!("wrote {}", output.display());
    Ok(())
}
