//! Local-DP baselines: clients perturb embeddings before sending them in the clear.

use vfl_mpc::config::{Config, Preset};
use vfl_mpc::data;
use vfl_mpc::protocols::{self, Variant};

fn main() {
    let cfg = Config::preset(Preset::Benchmark);
    let d = data::generate(&cfg.data).unwrap();
    for v in [Variant::LdpG, Variant::LdpGl] {
        for eps in [1.0, 10.0] {
            let mut p = cfg.protocol.clone();
            p.variant = v;
            p.epsilon = eps;
            p.epochs = 5;
            let out = protocols::run(&p, &d).unwrap();
            println!("{v} epsilon {eps}: sigma {:.3}  accuracy {:.4}", out.metrics.sigma.unwrap(), out.metrics.final_accuracy);
        }
    }
}
