//! The plaintext reference trainer on the synthetic linear-teacher data.

use vfl_mpc::config::{Config, Preset};
use vfl_mpc::data;
use vfl_mpc::protocols::{self, LocalUpdate, PlainOptions};

fn main() {
    let cfg = Config::preset(Preset::Benchmark);
    let d = data::generate(&cfg.data).unwrap();
    let mut p = cfg.protocol.clone();
    p.epochs = 5;
    for local in [LocalUpdate::Frozen, LocalUpdate::Adapters, LocalUpdate::Full] {
        let opts = PlainOptions { clip: None, joint: None, local };
        let out = protocols::plaintext_train(&p, &d, &opts).unwrap();
        let accs: Vec<String> = out.epochs.iter().map(|e| format!("{:.3}", e.test_accuracy.unwrap())).collect();
        println!("{local:?}: per-epoch test accuracy {}", accs.join(" "));
    }
}
