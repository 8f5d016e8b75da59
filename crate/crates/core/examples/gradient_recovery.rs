//! Reconstructing per-sample gradients from a noisy batch aggregate, and the
//! predicted error of the ridge estimate.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use vfl_mpc::estimation;

fn main() {
    let mut r = ChaCha20Rng::seed_from_u64(2);
    let mut z = move || -> f64 { StandardNormal.sample(&mut r) };
    let (batch, d, n, draws) = (4, 3, 48, 200);
    let jac: Vec<DMatrix<f64>> = (0..batch).map(|_| DMatrix::from_fn(n, d, |_, _| z())).collect();
    let g = DVector::from_fn(batch * d, |_, _| 0.3 * z());
    let mut clean = DVector::zeros(n);
    for (j, h) in jac.iter().enumerate() {
        clean += h * g.rows(j * d, d);
    }
    for sigma_t in [0.0, 0.05, 0.5] {
        let mut total = 0.0;
        let mut bound = 0.0;
        for _ in 0..draws {
            // the release is the batch mean; observation noise on B·g̃ has std σ_t / B
            let release = clean.map(|v| (v + sigma_t / batch as f64 * z()) / batch as f64);
            let sys = estimation::assemble(&jac, release.as_slice(), sigma_t).unwrap();
            let rec = estimation::ridge_solve(&sys, sys.default_lambda()).unwrap();
            total += (&rec.g_hat - &g).norm_squared();
            bound = estimation::error_bound(&sys, 1.0);
        }
        println!("sigma_t {sigma_t}: mean squared error {:.3e}  bound {bound:.3e}", total / draws as f64);
    }
}
