//! Train the deterministic 3D subpixel network on phantom patches and
//! compare its reconstruction with trilinear interpolation on held-out
//! phantoms.
//!
//! ```bash
//! cargo run --release --example train_baseline            # 10 epochs, 30 patches/volume
//! cargo run --release --example train_baseline -- 20 125  # the acceptance-suite schedule
//! ```
//!
//! The short default run finishes in a few minutes on one core but stays
//! behind trilinear; the longer schedule is the one that beats it.

use biqt::data::{block_mean_downsample, generate_phantom, trilinear_upsample, PhantomSpec};
use biqt::eval::{region_masks, rmse};
use biqt::infer::{super_resolve, DEFAULT_TILE};
use biqt::model::Variant;
use biqt::par::Parallelism;
use biqt::trainer::{sample_training_set, train, TrainConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|a| a.parse().ok()).unwrap_or(default)
}

fn main() -> biqt::Result<()> {
    // smooth, inclusion-free phantoms
    let phantom = |seed| PhantomSpec {
        dims: [64; 3],
        seed,
        band_limit: 0.15,
        field_amplitude: 1.0,
        inclusions: 0,
        ..Default::default()
    };
    let volumes = (0..16).map(|s| generate_phantom(&phantom(s))).collect::<biqt::Result<Vec<_>>>()?;
    let config = TrainConfig {
        variant: Variant::Baseline,
        epochs: arg(1, 10),
        batch_size: 8,
        patches_per_volume: arg(2, 30),
        include_exterior: false,
        seed: 3,
        ..Default::default()
    };
    let pairs = sample_training_set(&config, &volumes, config.seed)?;
    let out = train(&config, &pairs)?;
    for e in &out.log {
        println!("epoch {} train {:.4} valid {:.4}{}", e.epoch, e.train.total, e.valid, if e.best { " *" } else { "" });
    }
    println!("{} parameters, best epoch {}", out.params.num_parameters(), out.best_epoch);

    for seed in [1000, 1001] {
        let truth = generate_phantom(&phantom(seed))?;
        let lr = block_mean_downsample(&truth, 2)?;
        let sr = super_resolve(&out.params, &lr, DEFAULT_TILE, Parallelism::Serial)?;
        let regions = region_masks(truth.mask().unwrap(), truth.dims(), 4)?;
        println!(
            "phantom {seed} interior RMSE: network {:.5}, trilinear {:.5}",
            rmse(&sr, &truth, &regions.interior)?,
            rmse(&trilinear_upsample(&lr, 2), &truth, &regions.interior)?
        );
    }
    Ok(())
}
