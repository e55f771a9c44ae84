// Usage: cargo run --example approximations
//
// Hardware-friendly exp, log, division and softmax against libm.

use fastcaps::fxp::{
    div_approx, exp_approx, log_approx, quantize, softmax_approx, softmax_exact, Fx16, FxFormat, HwMath,
};

fn main() {
    println!("{:>8} {:>14} {:>14} {:>10}", "x", "exp_approx", "exp", "rel err");
    for x in [-20.0, -5.0, -1.0, -0.25, 0.0, 0.5, 0.69, 2.0, 5.0] {
        let (a, e) = (exp_approx(x), f64::exp(x));
        println!("{x:>8} {a:>14.6e} {e:>14.6e} {:>10.2e}", ((a - e) / e).abs());
    }

    for x in [0.01, 0.5, 1.0, 7.0, 1000.0] {
        let l = log_approx(x).unwrap();
        println!("log({x}) = {l:.6} (libm {:.6})", x.ln());
    }

    for (a, b) in [(1.0, 3.0), (22.0, 7.0), (0.004, 900.0)] {
        let q = div_approx(a, b).unwrap();
        println!("{a}/{b} = {q:.8} (exact {:.8})", a / b);
    }
    println!("division by zero: {:?}", div_approx(1.0, 0.0).unwrap_err());

    let logits = [2.0, 1.0, 0.1, -1.0, 3.5];
    let p = softmax_approx(&logits);
    let e = softmax_exact(&logits);
    println!("softmax approx {p:.4?} sum {:.6}", p.iter().sum::<f64>());
    println!("softmax exact  {e:.4?}");

    // The same primitives on 16-bit fixed point.
    let fmt = FxFormat::Q8_8;
    let x = quantize(-1.25, fmt);
    println!(
        "fixed exp(-1.25) = {} ({:?})",
        Fx16::exp_approx(x).to_f64(),
        Fx16::exp_approx(x)
    );
}
