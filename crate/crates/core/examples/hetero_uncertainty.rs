//! Heteroscedastic network: a second branch predicts a per-voxel standard
//! deviation, trained jointly with the mean under a Gaussian likelihood.
//! The predicted variance is compared with the actual squared error.
//!
//! ```bash
//! cargo run --release --example hetero_uncertainty
//! ```

use biqt::data::{block_mean_downsample, generate_phantom, PhantomSpec};
use biqt::eval::{channel_sum, region_masks, squared_error, uncertainty_correlation};
use biqt::infer::{mc_predict, McOptions};
use biqt::model::Variant;
use biqt::trainer::{sample_training_set, train, TrainConfig};

fn main() -> biqt::Result<()> {
    let phantom = |seed| PhantomSpec {
        dims: [64; 3],
        seed,
        noise_amplitude: 0.02,
        ..Default::default()
    };
    let volumes = (0..16).map(|s| generate_phantom(&phantom(s))).collect::<biqt::Result<Vec<_>>>()?;
    let config = TrainConfig {
        variant: Variant::Hetero,
        epochs: 8,
        batch_size: 8,
        patches_per_volume: 60,
        include_exterior: false,
        seed: 3,
        ..Default::default()
    };
    let out = train(&config, &sample_training_set(&config, &volumes, config.seed)?)?;
    let last = out.log.last().unwrap();
    println!(
        "final epoch: mahalanobis {:.4} entropy {:.4}",
        last.train.mahalanobis.unwrap_or(f64::NAN),
        last.train.entropy.unwrap_or(f64::NAN)
    );

    let truth = generate_phantom(&phantom(1000))?;
    let lr = block_mean_downsample(&truth, 2)?;
    // One pass suffices: without weight noise the variance is the predicted sigma squared.
    let pred = mc_predict(&out.params, &lr, 1, 0, McOptions::default())?;
    let regions = region_masks(truth.mask().unwrap(), truth.dims(), 4)?;
    let err = channel_sum(&squared_error(&pred.mean, &truth)?);
    let var = channel_sum(&pred.variance);
    let inside: Vec<f64> = var.data().iter().zip(&regions.interior).filter(|p| *p.1).map(|p| *p.0).collect();
    println!(
        "predicted variance over the interior: min {:.2e} max {:.2e}",
        inside.iter().copied().fold(f64::INFINITY, f64::min),
        inside.iter().copied().fold(0.0, f64::max)
    );
    println!("Spearman(variance, squared error) = {:.3}", uncertainty_correlation(&var, &err, &regions.interior)?);
    Ok(())
}
