//! Finite-difference audit of every differentiable operator.
//!
//! Usage: `cargo run --release --example gradcheck [glob] [seeds]`

fn main() {
    let mut args = std::env::args().skip(1);
    let filter = args.next().unwrap_or_else(|| "*".into());
    let seeds = args.next().and_then(|s| s.parse().ok()).unwrap_or(gfla::audit::AUDIT_SEEDS);
    let start = std::time::Instant::now();
    match gfla::cli::cmd_gradcheck(&filter, seeds, &mut std::io::stdout()) {
        Ok(rows) => {
            let failed = rows.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed, {:.1} s", rows.len(), start.elapsed().as_secs_f64());
            std::process::exit(if failed == 0 { 0 } else { 1 });
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(gfla::cli::exit_code(&e));
        }
    }
}
