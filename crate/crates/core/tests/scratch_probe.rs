//! Manual probe for training dynamics (ignored by default).

use rdnet_core::config::RunConfig;
use rdnet_core::data::{synth_generate, SynthConfig};
use rdnet_core::train::{train, TrainConfig};

#[test]
#[ignore]
fn overfit_probe() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let synth = SynthConfig {
        num_images: 8,
        image_size: 96,
        seed: 7,
        val_fraction: 0.0,
        objects_per_image: (1, 2),
        ..Default::default()
    };
    synth_generate(&synth, &data_dir).unwrap();
    let mut cfg = RunConfig::default();
    cfg.model.input_size = 96;
    cfg.model.stage_channels = vec![16, 32, 64];
    cfg.train = TrainConfig::overfit8(0);
    cfg.data = synth;
    let t0 = std::time::Instant::now();
    let outcome = train(&cfg, &data_dir, &dir.path().join("run")).unwrap();
    println!(
        "steps {} best_map50 {:.4} in {:.1}s",
        outcome.steps_run,
        outcome.best_map_50,
        t0.elapsed().as_secs_f64()
    );
    let history = std::fs::read_to_string(dir.path().join("run/history.jsonl")).unwrap();
    for line in history.lines() {
        if line.contains("eval") {
            println!("{line}");
        }
    }
    let first_steps: Vec<&str> = history.lines().filter(|l| l.contains("\"step\"")).take(6).collect();
    for l in first_steps {
        println!("{l}");
    }
}
