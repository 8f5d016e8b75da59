//! Banded square-root factorization, its sensitivity and the correlated noise stream.

use vfl_mpc::abb::Cohort;
use vfl_mpc::bandmf::{self, CorrelatedNoise, ParticipationSchema, WorkloadParams};
use vfl_mpc::dpcore;
use vfl_mpc::numerics::FixedPointSpec;

fn main() {
    let steps = 40;
    for setting in [1, 2] {
        let w = WorkloadParams::setting(setting, 0.01, steps).unwrap();
        let c = bandmf::bsr_coeffs(&w, 10).unwrap();
        let schema = ParticipationSchema { kappa: 4, b: 10 };
        let sens = bandmf::sensitivity(&c, &schema, steps).unwrap();
        println!("setting {setting}: c[..4] = {:?}  sensitivity {sens:.4}", &c.c[..4]);
    }
    let c = bandmf::bsr_coeffs(&WorkloadParams::setting(1, 0.01, steps).unwrap(), 10).unwrap();
    let mut cohort = Cohort::oracle(FixedPointSpec::default(), 5);
    let table = dpcore::gs_protocol(&mut cohort, steps, 3, 1.0).unwrap();
    let noise = CorrelatedNoise::new(&table, &c).unwrap();
    let row = noise.row(&mut cohort, 5).unwrap();
    let row = cohort.trunc_to(&row, 16, "row").unwrap();
    println!("correlated noise row 5: {:?}", cohort.probe(&row).unwrap());
    println!("norm of inverse row 5: {:.4}", noise.inverse_row(5).iter().map(|v| v * v).sum::<f64>().sqrt());
}
