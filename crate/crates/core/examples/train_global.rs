//! G-Shuff and G-BMF: frozen local models, global head trained inside the cohort.

use vfl_mpc::config::{Config, Preset};
use vfl_mpc::data;
use vfl_mpc::protocols::{self, Variant};

fn main() {
    let cfg = Config::preset(Preset::Benchmark);
    let d = data::generate(&cfg.data).unwrap();
    for v in [Variant::GShuff, Variant::GBmf] {
        let mut p = cfg.protocol.clone();
        p.variant = v;
        p.epochs = 3;
        p.epsilon = 2.0;
        let out = protocols::run(&p, &d).unwrap();
        let m = &out.metrics;
        println!(
            "{v}: accuracy {:.4}  sigma {:.3}  epsilon {:.3}  bytes/step {:.0}  opens {}",
            m.final_accuracy,
            m.sigma.unwrap(),
            m.epsilon_accounted.unwrap(),
            m.bytes_per_step,
            out.leakage.len()
        );
    }
}
