//! Builds a small two-layer expression on the tape, prints its reverse-mode
//! gradient and checks it against central finite differences.
//!
//! cargo run --example autodiff_gradcheck

use mvfuse::autodiff::{grad_check, Tape};
use mvfuse::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mvfuse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let w1 = Tensor::randn(&[3, 5], 0.5, &mut rng);
    let w2 = Tensor::randn(&[5, 2], 0.5, &mut rng);
    let target = Tensor::randn(&[4, 2], 1.0, &mut rng);

    let f = |t: &mut Tape, v: &[mvfuse::autodiff::Var]| {
        let xv = t.input(x.clone());
        let h = t.matmul(xv, v[0])?;
        let h = t.sigmoid(h);
        let y = t.matmul(h, v[1])?;
        let tv = t.input(target.clone());
        t.mse(y, tv)
    };

    let mut tape = Tape::new();
    let a = tape.param("w1", w1.clone());
    let b = tape.param("w2", w2.clone());
    let loss = f(&mut tape, &[a, b])?;
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.scalar(loss));
    for (name, g) in grads.params() {
        println!(
            "d loss / d {name}: shape {:?}, max |g| = {:.4e}",
            g.shape(),
            g.map(f64::abs).max()
        );
    }

    let err = grad_check(&[w1, w2], f)?;
    println!("max relative error vs finite differences: {err:.2e}");
    assert!(err < 1e-6);
    Ok(())
}
