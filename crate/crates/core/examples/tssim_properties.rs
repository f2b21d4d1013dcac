//! The triplex SSIM: identities that hold exactly and the bound it obeys.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tatt::losses::{ssim_value, tssim_value, Windowing, C1};
use tatt::Tensor;

fn main() -> tatt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut img = || Tensor::from_fn([16, 32, 3], |_| rng.gen::<f64>());
    let (x, y, z) = (img(), img(), img());
    let w = Windowing::default();

    println!("tssim(x,x,x)       = {:.15}", tssim_value(&x, &x, &x, w)?);
    println!("tssim(x,y,z)       = {:.15}", tssim_value(&x, &y, &z, w)?);
    println!("tssim(z,x,y)       = {:.15}", tssim_value(&z, &x, &y, w)?);
    println!("ssim(x,y)          = {:.15}", ssim_value(&x, &y, w)?);
    println!("tssim(x,x,y)       = {:.15}", tssim_value(&x, &x, &y, w)?);

    let c = [0.2, 0.5, 0.9];
    let flat: Vec<Tensor<f64>> = c.iter().map(|&v| Tensor::full([8, 8], v)).collect();
    let closed = (c[0] * c[1] + c[1] * c[2] + c[0] * c[2] + C1)
        / (c[0] * c[0] + c[1] * c[1] + c[2] * c[2] + C1);
    println!(
        "flat images        = {:.15} (closed form {closed:.15})",
        tssim_value(&flat[0], &flat[1], &flat[2], w)?
    );
    Ok(())
}
