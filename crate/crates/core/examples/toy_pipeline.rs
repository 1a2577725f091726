//! Runs the whole desk-scale pipeline from a config file.
//!
//! cargo run --release -p unitflow --example toy_pipeline -- configs/tiny.cfg /tmp/toy [units|mel]

use std::path::PathBuf;
use std::time::Instant;

use unitflow::pipeline::run_all;
use unitflow::vfnet::InputMode;
use unitflow::RunConfig;

fn main() -> unitflow::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let cfg_path = PathBuf::from(args.get(1).map_or("configs/tiny.cfg", String::as_str));
    let dir = PathBuf::from(args.get(2).map_or("/tmp/toy", String::as_str));
    let mut cfg = RunConfig::load(&cfg_path)?;
    if args.get(3).map(String::as_str) == Some("mel") {
        cfg.model.input_mode = InputMode::MelInput;
    }

    let clock = Instant::now();
    let out = run_all(&cfg, &dir)?;
    let tail: Vec<f64> = out.finetune.state.loss_history.iter().rev().take(50).map(|x| x.1).collect();
    for e in out.report.entries.iter().filter(|e| e.reference != e.decoded) {
        println!("{} ref {:?} got {:?} mse {:.3}", e.id, e.reference, e.decoded, e.mel_mse);
    }
    println!(
        "finetune loss (last 50) {:.4} pseudo_wer {:.3} mel_mse {:.4} baseline {:.4} in {:.0}s",
        tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        out.report.pseudo_wer,
        out.report.mel_mse,
        out.report.baseline_mse,
        clock.elapsed().as_secs_f64()
    );
    Ok(())
}
