//! Trains tunnel and budding networks on every spiral variant and prints
//! epochs, sizes and timing per run.
//!
//! `cargo run --release -p grownet --example spirals_sweep -- [seeds] [arch] [variant] [points per class]`

use std::time::Instant;

use grownet::data::{generate_two_spirals, SpiralSpec, SpiralVariant};
use grownet::{train, Architecture, TrainConfig};

fn main() -> grownet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let points: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let archs: Vec<Architecture> = match args.get(2) {
        Some(a) => vec![a.parse()?],
        None => vec![Architecture::Tunnel, Architecture::Budding],
    };
    for arch in archs {
        let variants: Vec<SpiralVariant> = match args.get(3) {
            Some(v) => vec![v.parse()?],
            None => SpiralVariant::ALL.to_vec(),
        };
        for &variant in &variants {
            for seed in 0..seeds {
                let mut spec = SpiralSpec::new(variant, seed);
                spec.points_per_class = points;
                let data = generate_two_spirals(&spec)?;
                let config = TrainConfig {
                    seed,
                    ..TrainConfig::spirals(arch)
                };
                let start = Instant::now();
                let out = train(&config, &data, None)?;
                let best = out.best_record();
                let first_zero = out.log.iter().find(|r| r.train_error == 0.0).map(|r| r.epoch);
                let peak = out
                    .log
                    .iter()
                    .filter_map(|r| r.total_soft_size)
                    .fold(f64::NEG_INFINITY, f64::max);
                let last = out.log.last().unwrap();
                println!(
                    "{} {} seed={seed} epochs={} first_zero={first_zero:?} best_epoch={} best_err={} soft@best={:.3} hard@best={:?} peak={:.3} final_soft={:.3} layers@best={:?} secs={:.1}",
                    arch.name(),
                    variant.name(),
                    out.log.len(),
                    out.best_epoch,
                    best.train_error,
                    best.total_soft_size.unwrap_or(f64::NAN),
                    best.hard_size,
                    peak,
                    last.total_soft_size.unwrap_or(f64::NAN),
                    best.layer_soft_sizes.iter().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>(),
                    start.elapsed().as_secs_f64()
                );
            }
        }
    }
    Ok(())
}
