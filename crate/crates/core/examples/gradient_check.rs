//! Compares tape gradients of the training loss with central differences.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use banditmt::seq2seq::{ModelDims, NmtParams};
use banditmt::supervised::{batch_nll, Example};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> banditmt::Result<()> {
    let dims = ModelDims {
        src_vocab: 10,
        tgt_vocab: 10,
        embed: 6,
        hidden: 6,
        layers: 1,
    };
    let params = NmtParams::init(dims, 0.5, &mut ChaCha8Rng::seed_from_u64(3))?;
    let batch = vec![
        Example::new(vec![4, 5, 6], vec![7, 8]),
        Example::new(vec![9], vec![4, 5, 6]),
    ];

    let loss = batch_nll(&params, &batch, 0.0, 0)?;
    let analytic = loss.gradients(&params)?.flatten();
    let theta = params.store.flatten();
    println!("loss {:.6} over {} parameters", loss.loss, theta.len());

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for i in 0..theta.len() {
        let mut x = theta.clone();
        x[i] += h;
        probe.store.set_flat(&x)?;
        let up = batch_nll(&probe, &batch, 0.0, 0)?.loss;
        x[i] -= 2.0 * h;
        probe.store.set_flat(&x)?;
        let down = batch_nll(&probe, &batch, 0.0, 0)?.loss;
        let numeric = (up - down) / (2.0 * h);
        let scale = numeric.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((numeric - analytic[i]).abs() / scale);
    }
    println!("max relative error {worst:.2e}");
    Ok(())
}
