//! Fixed-point encoding over Z_2^k and truncated multiplication.

use vfl_mpc::numerics::{self, FixedPointSpec};

fn main() {
    let spec = FixedPointSpec::default();
    for x in [1.5, -1.0, 3.14159, -0.000_01] {
        let r = spec.encode(x).unwrap();
        println!("{x:>10} -> {:#018x} -> {}", r.value(), spec.decode(r));
    }
    let (a, b) = (spec.encode(2.25).unwrap(), spec.encode(-1.5).unwrap());
    let p = numerics::fixed_mul(a, b, spec).unwrap();
    println!("2.25 * -1.5 = {}", spec.decode(p));
    println!("ulp {}  largest magnitude {}", spec.ulp(), spec.max_abs());
    assert!(spec.encode(1e300).is_err());
}
