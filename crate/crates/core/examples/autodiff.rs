//! Reverse-mode tape: build a small expression, read its gradients and
//! compare them with central differences.

use gfla::tensor::{grad_check, nn, ops, GradCheckConfig, Tape, Tensor};

fn main() -> gfla::error::Result<()> {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f64 * 0.7).sin()));
    let w = tape.leaf(Tensor::from_fn(&[4, 2, 3, 3], |i| (i as f64 * 0.3).cos() * 0.2));

    let y = nn::conv2d(x, w, None, 1, 1)?;
    let y = nn::leaky_relu(nn::instance_norm(y, 1e-5)?, 0.2);
    let loss = ops::mean(ops::square(y));
    let grads = tape.backward(loss)?;

    println!("loss        {:.6}", loss.value().item());
    println!("|dL/dx|max  {:.6}", grads.wrt(x).max_abs());
    println!("|dL/dw|max  {:.6}", grads.wrt(w).max_abs());

    let report = grad_check(
        |_, v| {
            let y = nn::conv2d(v[0], v[1], None, 1, 1)?;
            Ok(ops::mean(ops::square(nn::leaky_relu(nn::instance_norm(y, 1e-5)?, 0.2))))
        },
        &[x.value(), w.value()],
        &GradCheckConfig::default(),
    )?;
    println!(
        "finite differences: max rel err {:.2e}, {} kink(s) skipped, {}",
        report.max_rel_err(),
        report.kinks(),
        if report.passed() { "pass" } else { "FAIL" }
    );
    Ok(())
}
