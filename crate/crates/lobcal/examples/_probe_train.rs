use lobcal::data::{build_dataset, BuildOptions, DatasetManifest, Split};
use lobcal::model::{train_on_segments, ModelConfig, TrainOptions};
use std::time::Instant;

fn main() {
    env_logger::init();
    let dir = std::path::PathBuf::from("/tmp/probe_corpus");
    let opts = BuildOptions {
        n_tuples: 20,
        steps: 5000,
        split: 0.8,
        seed: 99,
        ..BuildOptions::default()
    };
    let manifest = if dir.join("manifest.toml").exists() {
        DatasetManifest::load(&dir).unwrap()
    } else {
        let t = Instant::now();
        let m = build_dataset(&opts, &dir).unwrap();
        println!("corpus built in {:.1}s", t.elapsed().as_secs_f64());
        m
    };
    let norm = manifest.norm;
    let train: Vec<_> = manifest
        .load_split(&dir, Split::Train)
        .unwrap()
        .iter()
        .map(|s| norm.apply(s))
        .collect();
    let test: Vec<_> = manifest
        .load_split(&dir, Split::Test)
        .unwrap()
        .iter()
        .map(|s| norm.apply(s))
        .collect();
    println!("train {} test {}", train.len(), test.len());

    // per-segment mean-predictor baseline on the test split
    let mut baseline = 0.0;
    for seg in &test {
        let n = seg.as_slice().len() as f64;
        let mean: f64 = seg.as_slice().iter().sum::<f64>() / n;
        baseline += seg
            .as_slice()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
    }
    baseline /= test.len() as f64;
    println!("baseline (per-segment mean predictor): {baseline:.6}");

    let config = ModelConfig::desk(32);
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(32);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);
    println!("epochs {epochs} lr {lr} batch {batch} seed {seed}");
    let t = Instant::now();
    let (_, report) = train_on_segments(
        &config,
        &train,
        &test,
        &norm,
        &TrainOptions {
            epochs,
            batch,
            lr,
            seed,
        },
    )
    .unwrap();
    let dt = t.elapsed().as_secs_f64();
    for (e, (tr, te)) in report.train_err.iter().zip(&report.test_err).enumerate() {
        println!(
            "epoch {e:2}: train {tr:.6} test {te:.6}  (ratio {:.3})",
            te / baseline
        );
    }
    println!(
        "total {dt:.1}s ({:.1}s/epoch); best test {:.6} ratio {:.3}",
        dt / epochs as f64,
        report.best_test_err,
        report.best_test_err / baseline
    );
}
