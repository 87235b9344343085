//! Tape autodiff on a small conv net, checked against central differences.

use aqm::autodiff::{Conv2dSpec, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(x: &Tensor, w: &Tensor, target: &Tensor) -> f64 {
    let mut t = Tape::new();
    let (xv, wv, tv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(target.clone()));
    let y = t.conv2d(xv, wv, None, Conv2dSpec { stride: 2, pad: 1 }).unwrap();
    let y = t.relu(y);
    let l = t.mse(y, tv).unwrap();
    t.value(l).item()
}

fn main() -> aqm::Result<()> {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(&[2, 3, 8, 8], |_| r.gen_range(0.0..1.0));
    let w = Tensor::from_fn(&[4, 3, 3, 3], |_| r.gen_range(-0.5..0.5));
    let target = Tensor::from_fn(&[2, 4, 4, 4], |_| r.gen_range(0.0..1.0));

    let mut tape = Tape::new();
    let (xv, wv, tv) = (tape.constant(x.clone()), tape.param(w.clone()), tape.constant(target.clone()));
    let y = tape.conv2d(xv, wv, None, Conv2dSpec { stride: 2, pad: 1 })?;
    let y = tape.relu(y);
    let l = tape.mse(y, tv)?;
    let grads = tape.backward(l)?;
    let g = grads.get(wv);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in (0..w.numel()).step_by(7) {
        let (mut up, mut down) = (w.clone(), w.clone());
        up.data_mut()[i] += h;
        down.data_mut()[i] -= h;
        let fd = (loss(&x, &up, &target) - loss(&x, &down, &target)) / (2.0 * h);
        let a = g.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-12));
        println!("w[{i:>3}]  analytic {a:>12.8}  numeric {fd:>12.8}");
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
