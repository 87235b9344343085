//! Compression factor of a stored sample for a few common image and latent shapes.

use aqm::aqm::{compression_rate, InputShape};

fn main() -> aqm::Result<()> {
    let cases = [
        ("32x32 RGB, 16x16 latent, K=128", InputShape::new(3, 32, 32), 16, 16, 1, 128),
        ("128x128 RGB, 64x64 latent, K=16", InputShape::new(3, 128, 128), 64, 64, 1, 16),
        ("128x128 RGB, 32x32 latent, K=256", InputShape::new(3, 128, 128), 32, 32, 1, 256),
        ("128x128 RGB, 32x32 latent, K=32", InputShape::new(3, 128, 128), 32, 32, 1, 32),
        ("28x28 gray, 7x7 latent, 2 codebooks of 64", InputShape::new(1, 28, 28), 7, 7, 2, 64),
    ];
    for (name, input, h, w, nc, k) in cases {
        let r = compression_rate(input, h, w, nc, k)?;
        println!("{name:<44} {:>8.3}  ({}/{})", r.value(), r.numerator, r.denominator);
    }
    Ok(())
}
