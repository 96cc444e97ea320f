//! Overfits the compact network on the eight-cloud blob set and reports the
//! loss curve and the correlation of the fitted scores with the labels.

use std::time::Instant;

use pcqa::evaluation::{krcc, plcc, srcc};
use pcqa::network::{forward, Mode, ModelConfig};
use pcqa::synthetic::blob_dataset;
use pcqa::training::{bundle_loss, fit_patches, predict, prepare_patches, LossConfig, ScheduleConfig};

fn main() -> pcqa::Result<()> {
    let samples = blob_dataset(4096, 7)?;
    let config = ModelConfig::compact();
    let sets = prepare_patches(&samples, &config, None)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.mos).collect();
    let train: Vec<usize> = (0..samples.len()).collect();
    // Two steps per epoch.
    let sched = ScheduleConfig {
        epochs: 250,
        t_max: 250,
        ..ScheduleConfig::default()
    };
    let loss_cfg = LossConfig::default();
    let start = Instant::now();
    let out = fit_patches(&sets, &labels, &train, &config, &loss_cfg, &sched, 7, |r, _| {
        if r.epoch % 25 == 0 {
            println!("{r}");
        }
        Ok(())
    })?;
    println!("trained in {:.1?}", start.elapsed());
    println!("final train-mode loss {:.3e}", out.log.final_loss().unwrap_or(f64::NAN));

    let mut eval_loss = 0.0;
    for (ps, y) in sets.iter().zip(&labels) {
        let b = forward(ps, &config, &out.weights, Mode::Eval)?;
        eval_loss += bundle_loss(&b, out.scaler.scale(*y), &loss_cfg) / sets.len() as f64;
    }
    println!("eval-mode loss {eval_loss:.3e}");

    let pred = predict(&sets, &config, &out.weights, &out.scaler)?;
    for (p, s) in pred.iter().zip(&samples) {
        println!("{:>6} {:>9} mos {:.2} predicted {:.4}", s.content_id, s.distortion_tag, s.mos, p);
    }
    println!("plcc {:.4}", plcc(&pred, &labels, false)?.0);
    println!("srcc {:.4}", srcc(&pred, &labels)?);
    println!("krcc {:.4}", krcc(&pred, &labels)?);
    Ok(())
}
