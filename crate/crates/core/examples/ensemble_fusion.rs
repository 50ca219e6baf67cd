//! Train an ensemble on independently drawn patch sets and fuse the
//! members' predictive distributions by inverse-variance weighting.
//!
//! ```bash
//! cargo run --release --example ensemble_fusion
//! ```

use biqt::data::{block_mean_downsample, generate_phantom, PhantomSpec, Volume};
use biqt::infer::{ensemble_combine, mc_predict, McOptions, PredictiveResult, Provenance};
use biqt::model::Variant;
use biqt::trainer::{train_ensemble, TrainConfig};

fn scalar(mean: f64, variance: f64) -> biqt::Result<PredictiveResult> {
    Ok(PredictiveResult {
        mean: Volume::new(1, [1, 1, 1], vec![mean], None)?,
        variance: Volume::new(1, [1, 1, 1], vec![variance], None)?,
        provenance: Provenance::default(),
    })
}

fn main() -> biqt::Result<()> {
    // Two single-voxel members: means 0 and 10, variances 1 and 4.
    let fused = ensemble_combine(&[scalar(0.0, 1.0)?, scalar(10.0, 4.0)?])?;
    println!(
        "hand example: mean {} variance {}",
        fused.mean.data()[0],
        fused.variance.data()[0]
    );

    let phantom = |seed| PhantomSpec {
        dims: [32; 3],
        seed,
        ..Default::default()
    };
    let volumes = (0..2).map(|s| generate_phantom(&phantom(s))).collect::<biqt::Result<Vec<_>>>()?;
    let config = TrainConfig {
        variant: Variant::Hetero,
        epochs: 3,
        batch_size: 8,
        patches_per_volume: 60,
        ensemble_size: 3,
        ..Default::default()
    };
    let members = train_ensemble(&config, &volumes)?;
    let lr = block_mean_downsample(&generate_phantom(&phantom(50))?, 2)?;
    let preds = members
        .iter()
        .map(|m| mc_predict(&m.params, &lr, 1, 0, McOptions::default()))
        .collect::<biqt::Result<Vec<_>>>()?;
    let avg = |v: &Volume| v.data().iter().sum::<f64>() / v.data().len() as f64;
    for (k, p) in preds.iter().enumerate() {
        println!("member {k}: mean variance {:.3e}", avg(&p.variance));
    }
    let fused = ensemble_combine(&preds)?;
    println!("fused:    mean variance {:.3e}", avg(&fused.variance));
    Ok(())
}
