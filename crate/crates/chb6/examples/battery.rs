//! Run the full verification battery and print one line per check.
//!
//!     cargo run --release --example battery

fn main() {
    let report = chb6::verify::run_selected(None, false).expect("known check names");
    println!("{:<14} {:>12} {:>10} {:>6} {:>8}  detail", "check", "value", "threshold", "pass", "seconds");
    for c in &report.checks {
        println!(
            "{:<14} {:>12.4e} {:>10.1e} {:>6} {:>8.2}  {}",
            c.name,
            c.value,
            c.threshold,
            if c.pass { "PASS" } else { "FAIL" },
            c.seconds,
            c.detail
        );
    }
    std::process::exit(if report.all_pass() { 0 } else { 1 });
}
