use lobcal::sim::{simulate, PgpsParams, SimConfig};
use std::time::Instant;
fn main() {
    let params = PgpsParams::midpoint();
    let config = SimConfig { horizon: 50_000, warmup: 0, seed: 1, ..SimConfig::default() };
    let t = Instant::now();
    let snaps = simulate(&params, &config).unwrap();
    let dt = t.elapsed().as_secs_f64();
    let last = snaps.last().unwrap();
    println!("50k steps in {dt:.2}s; final mid spread: bid {:?} ask {:?}", last.best_bid(), last.best_ask());
}
