//! GL-BMF: joint head and adapter training with client-side gradient recovery.

use vfl_mpc::config::{Config, Preset};
use vfl_mpc::data::{self, DatasetSpec};
use vfl_mpc::protocols::{self, Variant};

fn main() {
    let mut cfg = Config::preset(Preset::Benchmark);
    cfg.data = DatasetSpec { samples_total: 400, ..DatasetSpec::default() };
    let d = data::generate(&cfg.data).unwrap();
    let mut p = cfg.protocol.clone();
    p.variant = Variant::GlBmf;
    p.batch = 8;
    p.epochs = 2;
    p.emit_bounds = true;
    p.audit = true;
    let out = protocols::run(&p, &d).unwrap();
    for w in &out.metrics.warnings {
        println!("warning: {w}");
    }
    for r in out.recovery.iter().take(4) {
        println!(
            "step {} client {}: realized {:.3e}  bound {:.3e}",
            r.step,
            r.client,
            r.realized_sq.unwrap(),
            r.bound.unwrap()
        );
    }
    println!(
        "accuracy {:.4}  slices opened {}  max clipped norm {:.4}",
        out.metrics.final_accuracy,
        out.leakage.len() - 1,
        out.metrics.max_clipped_norm.unwrap()
    );
}
