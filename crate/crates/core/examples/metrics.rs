//! Correlation and error metrics on a noisy monotone relation, with the
//! logistic mapping used for PLCC and a scatter CSV.

use pcqa::evaluation::{krcc, plcc, rmse, scatter_csv, srcc, EvalReport};
use pcqa::training::MosScaler;
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> pcqa::Result<()> {
    let mut rng = pcqa::seed::rng(3);
    let truth: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..100.0)).collect();
    let pred: Vec<f64> = truth
        .iter()
        .map(|t| (t / 25.0).tanh() * 4.0 + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();

    println!("raw plcc {:.4}", plcc(&pred, &truth, false)?.0);
    let (mapped, params) = plcc(&pred, &truth, true)?;
    println!("logistic plcc {mapped:.4} with {params:?}");
    println!("srcc {:.4}", srcc(&pred, &truth)?);
    println!("krcc {:.4}", krcc(&pred, &truth)?);
    println!("rmse of unmapped scores {:.4}", rmse(&pred, &truth)?);

    let report = EvalReport::from_pairs(pred.into_iter().zip(truth).collect())?.with_scaler(MosScaler {
        min: 0.0,
        max: 100.0,
    });
    let path = std::env::temp_dir().join("pcqa_scatter.csv");
    scatter_csv(&report, &path)?;
    println!("scatter data in {}", path.display());
    Ok(())
}
