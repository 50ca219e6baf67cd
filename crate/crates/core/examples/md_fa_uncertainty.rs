//! Propagate predictive uncertainty from a 6-channel tensor reconstruction
//! to mean diffusivity and fractional anisotropy by Monte Carlo sampling.
//!
//! ```bash
//! cargo run --release --example md_fa_uncertainty
//! ```

use biqt::data::{block_mean_downsample, generate_phantom, PhantomSpec};
use biqt::eval::region_masks;
use biqt::infer::{fractional_anisotropy, mean_diffusivity, scalar_map, scalar_map_propagate, McOptions, ScalarMap};
use biqt::model::Variant;
use biqt::trainer::{sample_training_set, train, TrainConfig};

fn main() -> biqt::Result<()> {
    let iso = [0.7, 0.0, 0.0, 0.7, 0.0, 0.7];
    let stick = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    println!("isotropic: MD {} FA {}", mean_diffusivity(&iso), fractional_anisotropy(&iso));
    println!("stick:     MD {:.4} FA {}", mean_diffusivity(&stick), fractional_anisotropy(&stick));

    let phantom = |seed| PhantomSpec {
        dims: [32; 3],
        seed,
        ..Default::default()
    };
    let volumes = (0..2).map(|s| generate_phantom(&phantom(s))).collect::<biqt::Result<Vec<_>>>()?;
    let config = TrainConfig {
        variant: Variant::HeteroVd1,
        epochs: 3,
        batch_size: 8,
        patches_per_volume: 60,
        ..Default::default()
    };
    let out = train(&config, &sample_training_set(&config, &volumes, config.seed)?)?;

    let truth = generate_phantom(&phantom(77))?;
    let lr = block_mean_downsample(&truth, 2)?;
    let inside = region_masks(truth.mask().unwrap(), truth.dims(), 4)?.interior;
    for map in [ScalarMap::Md, ScalarMap::Fa] {
        let (mean, var) = scalar_map_propagate(&out.params, &lr, 16, 5, map, McOptions::default())?;
        let reference = scalar_map(&truth, map)?;
        let (mut err, mut sd, mut n) = (0.0, 0.0, 0.0);
        for i in (0..inside.len()).filter(|&i| inside[i]) {
            err += (mean.data()[i] - reference.data()[i]).abs();
            sd += var.data()[i].sqrt();
            n += 1.0;
        }
        println!("{map:?}: mean abs error {:.4}, mean predictive sd {:.4}", err / n, sd / n);
    }
    Ok(())
}
