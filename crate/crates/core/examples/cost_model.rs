//! Communication ledgers and LAN/WAN runtime estimates per protocol.

use vfl_mpc::config::{Config, Preset};
use vfl_mpc::data::{self, DatasetSpec};
use vfl_mpc::protocols::{self, Variant};

fn main() {
    let mut cfg = Config::preset(Preset::Benchmark);
    cfg.data = DatasetSpec { samples_total: 640, ..DatasetSpec::default() };
    let d = data::generate(&cfg.data).unwrap();
    println!("{:<7} {:>14} {:>8} {:>10} {:>10}", "variant", "bytes/step", "rounds", "LAN s", "WAN s");
    for v in [Variant::GShuff, Variant::GBmf, Variant::GlBmf] {
        let mut p = cfg.protocol.clone();
        p.variant = v;
        p.epochs = 2;
        p.batch = 64;
        let m = protocols::run(&p, &d).unwrap().metrics;
        println!(
            "{:<7} {:>14.0} {:>8} {:>10.2} {:>10.2}",
            m.variant, m.bytes_per_step, m.rounds_total, m.walltime_lan_est, m.walltime_wan_est
        );
    }
}
