//! Loading a TOML run configuration and writing the result files.

use vfl_mpc::cli;
use vfl_mpc::config::Config;
use vfl_mpc::protocols;

const TOML: &str = r#"
[run]
variant = "GBMF"
preset = "benchmark"
epochs = 2
seed = 7

[privacy]
epsilon = 5.0

[data]
samples = 800
"#;

fn main() {
    let cfg = Config::parse(TOML).unwrap();
    let d = cli::load_data(&cfg).unwrap();
    let out = protocols::run(&cfg.protocol, &d).unwrap();
    let dir = std::env::temp_dir().join("vflmpc-config-example");
    protocols::write_outputs(&out, &dir).unwrap();
    println!("invariant violations: {:?}", cli::check_invariants(&cfg, &out));
    for entry in std::fs::read_dir(&dir).unwrap() {
        println!("{}", entry.unwrap().path().display());
    }
    match Config::parse("[run]\nbatch = 0\ntypo = 1\n") {
        Err(e) => println!("rejected config:\n{e}"),
        Ok(_) => unreachable!(),
    }
}
