//! Branched vs linear training over several seeds on the default game.
//!
//! cargo run --release -p scf-core --example compare -- [seeds]

use scf_core::experiment::{run_comparison, ComparisonConfig};

fn main() {
    let seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let started = std::time::Instant::now();
    let report = run_comparison(&ComparisonConfig::new(seeds)).expect("comparison failed");
    println!("seed  base   linear branched | broad lin  broad br | tail lin tail br");
    for s in &report.per_seed {
        println!(
            "{:>4}  {:>5.1}  {:>5.1}  {:>5.1}    | {:>8.3}  {:>8.3} | {:>7.3}  {:>7.3}",
            s.seed,
            s.base.percentage,
            s.linear.eval.percentage,
            s.branched.eval.percentage,
            s.linear.eval.mean_broadness,
            s.branched.eval.mean_broadness,
            s.linear.curve_tail_mean,
            s.branched.curve_tail_mean,
        );
    }
    println!("accuracy  {:?}", report.accuracy_test);
    println!("broadness {:?}", report.broadness_test);
    println!("vs base   {:?}", report.base_test);
    println!("curve win rate {:.2}, winner {}", report.curve_win_rate, report.winner);
    println!("elapsed {:.1?}", started.elapsed());
}
