//! Interior/exterior RMSE, PSNR and mean SSIM of a reconstruction, written
//! as JSON lines.
//!
//! ```bash
//! cargo run --release --example evaluate_metrics
//! ```

use biqt::data::{block_mean_downsample, generate_phantom, trilinear_upsample, PhantomSpec};
use biqt::eval::{evaluate, region_masks, to_jsonl};

fn main() -> biqt::Result<()> {
    let truth = generate_phantom(&PhantomSpec {
        dims: [32; 3],
        seed: 3,
        ..Default::default()
    })?;
    let r = 2;
    let lr = block_mean_downsample(&truth, r)?;
    let recon = trilinear_upsample(&lr, r);
    // The interior is the foreground eroded by the receptive-field margin on the HR grid.
    let regions = region_masks(truth.mask().unwrap(), truth.dims(), 2 * r)?;
    println!(
        "interior {} voxels, exterior {} voxels",
        regions.interior.iter().filter(|&&b| b).count(),
        regions.exterior.iter().filter(|&&b| b).count()
    );
    let records = evaluate(&recon, &truth, &regions, None, true)?;
    print!("{}", to_jsonl(&records));
    Ok(())
}
