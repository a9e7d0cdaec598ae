use lobcal::data::{NormStats, Segment, SEGMENT_FEATURES};
use lobcal::model::{encode, reconstruct, train_on_segments, ModelConfig, ModelWeights, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let config = ModelConfig::desk(32);
    let weights = ModelWeights::init(&config, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seg = Segment::from_values(
        100,
        (0..100 * SEGMENT_FEATURES)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();

    let n = 50;
    let t = Instant::now();
    for _ in 0..n {
        let _ = encode(&weights, &seg).unwrap();
    }
    println!("encode:      {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t = Instant::now();
    for _ in 0..n {
        let _ = reconstruct(&weights, &seg).unwrap();
    }
    println!("fwd (e+d):   {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // one-sample train step (fwd+bwd+extract) via a 1-epoch 1-batch run
    let train: Vec<Segment> = (0..n).map(|_| seg.clone()).collect();
    let t = Instant::now();
    let _ = train_on_segments(
        &config,
        &train,
        &[],
        &NormStats::default(),
        &TrainOptions {
            epochs: 1,
            batch: n,
            lr: 1e-9,
            seed: 3,
        },
    )
    .unwrap();
    println!("train step:  {:.2} ms/sample (incl adam over batch)", t.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
