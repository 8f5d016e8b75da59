//! Distributed Gaussian noise generation and privacy accounting.

use vfl_mpc::abb::Cohort;
use vfl_mpc::dpcore::{self, Accountant};
use vfl_mpc::numerics::FixedPointSpec;

fn main() {
    let mut c = Cohort::oracle(FixedPointSpec::default(), 9);
    let table = dpcore::gs_protocol(&mut c, 4, 1000, 1.0).unwrap();
    let v = c.probe(&table.value).unwrap();
    let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    println!("noise table {}x{}  empirical variance {var:.3} (expected {:.3})", table.steps(), table.width(), table.honest_variance());

    for (q, steps) in [(1.0, 1), (128.0 / 2560.0, 400)] {
        let sigma = dpcore::calibrate_sigma(8.0, 1e-5, q, steps).unwrap();
        let eps = Accountant::new(sigma, q, steps, 1e-5).unwrap().epsilon();
        println!("q={q:.3} T={steps}: sigma {sigma:.4} gives epsilon {eps:.4}");
    }
}
