//! Generate a synthetic tensor phantom, downsample it and draw training
//! patch pairs.
//!
//! ```bash
//! cargo run --release --example phantom_and_patches
//! ```

use biqt::data::{
    audit_positive_definite, block_mean_downsample, generate_phantom, sample_patch_pairs, trilinear_upsample,
    PhantomSpec, TENSOR_CHANNELS,
};
use biqt::eval::{region_masks, rmse};

fn main() -> biqt::Result<()> {
    let spec = PhantomSpec {
        dims: [32; 3],
        seed: 7,
        ..Default::default()
    };
    let hr = generate_phantom(&spec)?;
    let fg = hr.mask().map_or(0, |m| m.iter().filter(|&&b| b).count());
    println!("HR phantom {:?} x {} channels, {fg} foreground voxels", hr.dims(), hr.channels());
    println!("non-positive-definite masked voxels: {}", audit_positive_definite(&hr)?);

    let lr = block_mean_downsample(&hr, 2)?;
    println!("LR volume {:?}", lr.dims());

    for (ch, name) in TENSOR_CHANNELS.iter().enumerate() {
        let v = hr.channel(ch);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("  {name}: mean {mean:.4}");
    }

    let pairs = sample_patch_pairs(&hr, 2, 16, 1, true, 0)?;
    let p = &pairs[0];
    println!(
        "{} pairs; LR patch {:?}, HR target {:?} at HR corner {:?}",
        pairs.len(),
        p.lr.shape(),
        p.hr.shape(),
        p.hr_corner
    );

    let regions = region_masks(hr.mask().unwrap(), hr.dims(), 4)?;
    let tri = trilinear_upsample(&lr, 2);
    println!("trilinear interior RMSE {:.5}", rmse(&tri, &hr, &regions.interior)?);
    Ok(())
}
