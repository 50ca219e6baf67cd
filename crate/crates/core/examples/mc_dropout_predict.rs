//! Variational dropout: train with Gaussian weight noise, then average
//! Monte Carlo forward passes to get predictive mean and variance. The
//! variance splits into a parameter part (spread of the sampled means) and
//! an intrinsic part (mean of the predicted sigma squared).
//!
//! ```bash
//! cargo run --release --example mc_dropout_predict
//! ```

use biqt::data::{block_mean_downsample, generate_phantom, PhantomSpec};
use biqt::infer::{mc_predict, McOptions};
use biqt::model::Variant;
use biqt::trainer::{sample_training_set, train, TrainConfig};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() -> biqt::Result<()> {
    let phantom = |seed| PhantomSpec {
        dims: [32; 3],
        seed,
        ..Default::default()
    };
    let volumes = (0..2).map(|s| generate_phantom(&phantom(s))).collect::<biqt::Result<Vec<_>>>()?;
    let lr = block_mean_downsample(&generate_phantom(&phantom(50))?, 2)?;

    for variant in [Variant::BaselineVd1, Variant::BaselineVd2, Variant::HeteroVd1] {
        let config = TrainConfig {
            variant,
            epochs: 3,
            batch_size: 8,
            patches_per_volume: 60,
            ..Default::default()
        };
        let out = train(&config, &sample_training_set(&config, &volumes, config.seed)?)?;
        for samples in [4, 16] {
            let pred = mc_predict(&out.params, &lr, samples, 3, McOptions::default())?;
            println!(
                "{variant:<13} T={samples:<3} mean variance {:.3e}, {} components clamped",
                mean(pred.variance.data()),
                pred.provenance.clamped
            );
        }
    }
    Ok(())
}
