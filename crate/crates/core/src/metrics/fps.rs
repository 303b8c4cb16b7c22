//! Wall-clock throughput measurement.
//!
//! Benchmarks must run single-threaded and alone on the machine; the numbers
//! are only as quiet as the host.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub fps: f64,
    pub median_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub trials: usize,
    pub warmup: usize,
}

/// Times `trials` calls of `f` after `warmup` discarded calls.
pub fn measure_fps_fn(mut f: impl FnMut(), trials: usize, warmup: usize) -> Result<FpsReport> {
    if trials == 0 {
        return Err(Error::Config("fps measurement needs trials >= 1".into()));
    }
    for _ in 0..warmup {
        f();
    }
    let mut latencies = Vec::with_capacity(trials);
    let start = Instant::now();
    for _ in 0..trials {
        let t0 = Instant::now();
        f();
        latencies.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let total = start.elapsed().as_secs_f64();
    latencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = latencies[latencies.len() / 2];
    let p95 = latencies[((latencies.len() as f64 * 0.95) as usize).min(latencies.len() - 1)];
    Ok(FpsReport {
        fps: trials as f64 / total,
        median_latency_ms: median,
        p95_latency_ms: p95,
        trials,
        warmup,
    })
}

/// Batch-1 forward-pass throughput of a detector.
pub fn measure_fps(
    model: &crate::model::Model,
    trials: usize,
    warmup: usize,
) -> Result<FpsReport> {
    let s = model.cfg.input_size;
    let image = ndarray::Array4::<f64>::zeros((1, 3, s, s));
    measure_fps_fn(
        || {
            model.forward(&image).expect("benchmark forward failed");
        },
        trials,
        warmup,
    )
}
