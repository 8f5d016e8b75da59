//! Replicated three-party sharing: share, compute and open with cost accounting.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use vfl_mpc::abb::Cohort;
use vfl_mpc::numerics::FixedPointSpec;
use vfl_mpc::rep3;
use vfl_mpc::transport::PartyId;

fn main() {
    let spec = FixedPointSpec::default();
    let ring = spec.ring();
    let shares = rep3::share(&[7, 11], ring, &mut ChaCha20Rng::seed_from_u64(1));
    println!("reconstructed {:?}", rep3::reconstruct(&shares, ring).unwrap());

    let mut c = Cohort::rep3(spec, 42);
    let x = c.input(&[1.0, 2.0, 3.0, 4.0], 2, 2, PartyId::Client(0), "x").unwrap();
    let y = c.input(&[0.5, -1.0, 2.0, 0.25], 2, 2, PartyId::Client(1), "y").unwrap();
    let xy = c.matmul_fx(&x, &y, "xy").unwrap();
    let s = c.add(&xy, &x).unwrap();
    println!("x·y + x = {:?}", c.open(&s, "result").unwrap());
    let l = c.ledger();
    println!("rounds {}  bytes {}", l.rounds, l.total_bytes());
    for e in c.leakage() {
        println!("opened {:?} ({}x{}) to {:?}", e.label, e.rows, e.cols, e.recipient);
    }
}
