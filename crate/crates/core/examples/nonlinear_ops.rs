//! Secure softmax, division, square root and per-row clipping.

use vfl_mpc::abb::Cohort;
use vfl_mpc::numerics::FixedPointSpec;
use vfl_mpc::transport::PartyId;

fn main() {
    let mut c = Cohort::rep3(FixedPointSpec::default(), 3);
    let owner = PartyId::Client(0);
    let z = c.input(&[1.0, 2.0, 0.5, -3.0, 0.0, 3.0], 2, 3, owner, "z").unwrap();
    let p = c.softmax_rows(&z, "softmax").unwrap();
    println!("softmax {:?}", c.open(&p, "p").unwrap());

    let a = c.input(&[1.0, 9.0], 2, 1, owner, "a").unwrap();
    let b = c.input(&[3.0, 0.5], 2, 1, owner, "b").unwrap();
    let q = c.div(&a, &b, "div").unwrap();
    let r = c.sqrt(&a, "sqrt").unwrap();
    println!("a/b {:?}  sqrt(a) {:?}", c.open(&q, "q").unwrap(), c.open(&r, "r").unwrap());

    let g = c.input(&[3.0, 4.0, 0.3, 0.4], 2, 2, owner, "g").unwrap();
    let clipped = c.clip_rows(&g, 1.2, "clip").unwrap();
    println!("clipped to 1.2 {:?}", c.open(&clipped, "clipped").unwrap());
}
