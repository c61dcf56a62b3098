use nlt_core::*;
use std::time::Instant;
fn main() {
    let net = build_counter(NetConfig::DeskSmall, 1);
    let x = Tensor::full(&[12, 1, 64, 64], 0.3);
    let t = Tensor::full(&[12, 1, 64, 64], 0.01);
    let iters: usize = std::env::var("ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(20);
    let (mut f, mut b) = (0.0, 0.0);
    for _ in 0..iters {
        let s = Instant::now();
        let mut tape = GradientTape::new();
        let pv = net.register_params(&mut tape, &net.params, true);
        let xi = tape.leaf(x.clone());
        let ti = tape.leaf(t.clone());
        let y = net.forward_on_tape(&mut tape, &pv, xi).unwrap();
        let l = tape.mse_loss(y, ti, 12).unwrap();
        f += s.elapsed().as_secs_f64();
        let s = Instant::now();
        tape.backward(l).unwrap();
        b += s.elapsed().as_secs_f64();
    }
    println!("fwd {:.1} ms bwd {:.1} ms per 12 images", f * 1e3 / iters as f64, b * 1e3 / iters as f64);
}
