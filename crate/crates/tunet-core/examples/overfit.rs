//! Overfit a tiny TUnet on a handful of synthetic samples and print the
//! per-epoch training loss/Dice. Usage:
//!
//!   cargo run --release -p tunet-core --example overfit [steps] [f32|f64]

use tunet_core::config::ModelConfig;
use tunet_core::synth::synth_dataset;
use tunet_core::train::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let f64_mode = args.get(2).map(|s| s == "f64").unwrap_or(true);

    let cfg = ModelConfig::tiny();
    let samples = synth_dataset(cfg.seed, 8, cfg.height, cfg.width).unwrap();
    let tcfg = TrainConfig {
        epochs: steps / 2, // batch 4 over 8 samples → 2 steps per epoch
        batch_size: 4,
        milestones: vec![60, 100],
        gradcheck_mode: f64_mode,
        ..Default::default()
    };
    let started = std::time::Instant::now();
    let dir = std::env::temp_dir().join("tunet-overfit");
    let summary = train(&cfg, &tcfg, &samples, &[], &dir).unwrap();
    let elapsed = started.elapsed();

    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 || i % 10 == 1 || i == csv.lines().count() - 1 {
            println!("{line}");
        }
    }
    println!(
        "steps: {}, final train loss {:.6}, dice {:.6}, elapsed {elapsed:?}",
        summary.steps,
        summary.final_train.as_ref().map(|e| e.loss).unwrap_or(f64::NAN),
        summary
            .final_train
            .as_ref()
            .map(|e| e.report.dice)
            .unwrap_or(f64::NAN),
    );
    // disjoint 20-step window means of the per-step training loss
    let windows: Vec<f64> = summary
        .step_losses
        .chunks(20)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    let monotone = windows.windows(2).all(|w| w[1] <= w[0]);
    println!("20-step window means monotone non-increasing: {monotone}");
    if !monotone {
        for (i, w) in windows.iter().enumerate() {
            println!("  window {i}: {w:.6}");
        }
    }

    // first epoch reaching the overfit targets
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[1] == "train" {
            let epoch: usize = f[0].parse().unwrap();
            let loss: f64 = f[2].parse().unwrap();
            let dice: f64 = f[4].parse().unwrap();
            if loss < 0.05 && dice > 0.95 {
                println!("targets reached at epoch {epoch} = {} steps", (epoch + 1) * 2);
                break;
            }
        }
    }
}
