//! SGD training loop with momentum and weight decay, linear learning-rate
//! decay, periodic evaluation, checkpointing, and the four-row module
//! ablation runner.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{hflip, load_split, LoadedSample, Split};
use crate::error::{Error, Result};
use crate::loss::{detection_loss, LossWeights, TargetBox};
use crate::metrics::{
    evaluate_detections, measure_fps, ApInterpolation, EvalImage, GroundTruth, MetricsReport,
};
use crate::model::{decode, nms, Model};
use crate::nn::NamedParamsMut;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluation period in steps.
    pub eval_every: usize,
    pub schedule: LrSchedule,
    pub hflip: bool,
    /// Hard cap on optimizer steps (None = epochs decide).
    pub max_steps: Option<usize>,
    /// Stop once the evaluation split reaches this mAP@0.5.
    pub stop_map: Option<f64>,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_start: 0.01,
            lr_end: 0.002,
            weight_decay: 0.0005,
            momentum: 0.8,
            epochs: 300,
            batch_size: 32,
            seed: 0,
            eval_every: 500,
            schedule: LrSchedule::Linear,
            hflip: true,
            max_steps: None,
            stop_map: None,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.lr_end > self.lr_start {
            return Err(Error::Config(format!(
                "lr_end ({}) must not exceed lr_start ({})",
                self.lr_end, self.lr_start
            )));
        }
        if self.lr_start <= 0.0 || self.lr_end <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// The full-scale recipe: 300 epochs, batch 32, 512x512 inputs.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Desk-scale preset: 30 epochs, batch 8.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            eval_every: 100,
            ..Self::default()
        }
    }

    /// Memorization preset: 8 images, up to 2000 steps, stop at mAP@0.5 0.9.
    pub fn overfit8(seed: u64) -> Self {
        Self {
            epochs: 2000,
            batch_size: 8,
            seed,
            eval_every: 50,
            hflip: false,
            max_steps: Some(2000),
            stop_map: Some(0.9),
            ..Self::default()
        }
    }
}

/// `lr_start` at step 0 down to `lr_end` at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let t = if total_steps == 0 {
        1.0
    } else {
        (step as f64 / total_steps as f64).clamp(0.0, 1.0)
    };
    match cfg.schedule {
        LrSchedule::Linear => cfg.lr_start + (cfg.lr_end - cfg.lr_start) * t,
        LrSchedule::Cosine => {
            cfg.lr_end
                + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Momentum buffers, aligned with the deterministic parameter order.
pub struct SgdState {
    velocities: Vec<ArrayD<f64>>,
}

impl SgdState {
    pub fn new(params: &NamedParamsMut<'_>) -> Self {
        Self {
            velocities: params.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }
}

/// One SGD step: `v <- momentum*v - lr*(g + weight_decay*w); w <- w + v`.
/// A non-finite gradient aborts the step naming the offending parameter.
pub fn sgd_step(
    params: &mut NamedParamsMut<'_>,
    state: &mut SgdState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        if !p.grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGrad(name.clone()));
        }
    }
    for ((_, p), v) in params.iter_mut().zip(state.velocities.iter_mut()) {
        ndarray::Zip::from(v)
            .and(&mut p.value)
            .and(&p.grad)
            .for_each(|vi, wi, &gi| {
                *vi = cfg.momentum * *vi - lr * (gi + cfg.weight_decay * *wi);
                *wi += *vi;
            });
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum HistoryRecord {
    Step { step: usize, lr: f64, total: f64, box_term: f64, cls_term: f64 },
    Eval { step: usize, map_50: f64, map_50_95: f64, precision_at_05: f64 },
    Epoch { epoch: usize, seconds: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub steps_run: usize,
    pub best_map_50: f64,
    pub final_report: MetricsReport,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub dataset_hash: String,
}

fn to_eval_images(model: &Model, samples: &[LoadedSample]) -> Result<Vec<EvalImage>> {
    let size = model.cfg.input_size as f64;
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let raw = model.forward(&s.image)?;
        let dets = decode(&raw, &model.cfg)
            .into_iter()
            .map(|d| nms(&d, model.cfg.nms_iou))
            .next()
            .unwrap_or_default();
        let gts: Vec<GroundTruth> = s
            .labels
            .iter()
            .map(|l| {
                let t = l.to_target(size);
                GroundTruth { bbox: t.bbox, class_id: t.class_id }
            })
            .collect();
        out.push(EvalImage { detections: dets, ground_truths: gts });
    }
    Ok(out)
}

/// Evaluates a model over loaded samples (accuracy fields only).
pub fn evaluate_model(model: &Model, samples: &[LoadedSample]) -> Result<crate::metrics::AccuracySummary> {
    let images = to_eval_images(model, samples)?;
    Ok(evaluate_detections(&images, model.cfg.num_classes, ApInterpolation::Points101))
}

/// Trains a model on the dataset under `dataset_dir`, writing the run
/// artifacts (resolved config, JSON-lines history, best/last checkpoints and
/// the final metrics report) into `run_dir`.
pub fn train(run_cfg: &RunConfig, dataset_dir: &Path, run_dir: &Path) -> Result<TrainOutcome> {
    let model_cfg = &run_cfg.model;
    let tcfg = &run_cfg.train;
    model_cfg.validate()?;
    tcfg.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let config_path = run_dir.join("config.txt");
    std::fs::write(&config_path, run_cfg.to_flat_text()).map_err(|e| Error::io(&config_path, e))?;

    let manifest = crate::data::DatasetManifest::load(dataset_dir)?;
    let dataset_hash = manifest.content_hash();
    let train_samples = load_split(dataset_dir, Split::Train, model_cfg.input_size as u32)?;
    if train_samples.is_empty() {
        return Err(Error::Validation(format!(
            "no training images under {} (expected images/train + labels/train + manifest.json)",
            dataset_dir.display()
        )));
    }
    let val_samples = load_split(dataset_dir, Split::Val, model_cfg.input_size as u32)?;
    let eval_on_train = val_samples.is_empty();

    let mut model = Model::build(model_cfg, tcfg.seed)?;
    let mut state = SgdState::new(&model.named_params_mut());
    let mut rng = ChaCha12Rng::seed_from_u64(tcfg.seed);

    let steps_per_epoch = train_samples.len().div_ceil(tcfg.batch_size);
    let planned = tcfg.epochs * steps_per_epoch;
    let total_steps = tcfg.max_steps.map_or(planned, |m| planned.min(m));

    let history_path = run_dir.join("history.jsonl");
    let mut history = std::fs::File::create(&history_path).map_err(|e| Error::io(&history_path, e))?;
    let write_record = |rec: &HistoryRecord, file: &mut std::fs::File| -> Result<()> {
        let line = serde_json::to_string(rec).expect("history encodes");
        writeln!(file, "{line}").map_err(|e| Error::io(&history_path, e))
    };

    let best_path = run_dir.join("ckpt_best.rdck");
    let last_path = run_dir.join("ckpt_last.rdck");
    let size = model_cfg.input_size as f64;
    let mut best_map = f64::NEG_INFINITY;
    let mut step = 0usize;
    let mut stop = false;
    let mut last_eval: Option<crate::metrics::AccuracySummary> = None;

    'epochs: for epoch in 0..tcfg.epochs {
        let epoch_start = std::time::Instant::now();
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut rng);
        for batch_idx in order.chunks(tcfg.batch_size) {
            if step >= total_steps {
                stop = true;
            }
            if stop {
                break 'epochs;
            }
            let lr = lr_schedule(step, total_steps, tcfg);
            // assemble the batch, with optional horizontal flips
            let b = batch_idx.len();
            let mut images = Array4::<f64>::zeros((b, 3, model_cfg.input_size, model_cfg.input_size));
            let mut targets: Vec<Vec<TargetBox>> = Vec::with_capacity(b);
            for (slot, &si) in batch_idx.iter().enumerate() {
                let sample = &train_samples[si];
                let (img, labels) = if tcfg.hflip && rng.random::<f64>() < 0.5 {
                    hflip(&sample.image, &sample.labels)
                } else {
                    (sample.image.clone(), sample.labels.clone())
                };
                images
                    .slice_mut(ndarray::s![slot..slot + 1, .., .., ..])
                    .assign(&img);
                targets.push(labels.iter().map(|l| l.to_target(size)).collect());
            }
            model.zero_grads();
            let (raw, cache) = model.forward_train(&images)?;
            let loss_result = detection_loss(&raw, &targets, model_cfg, &tcfg.loss);
            let (value, grad) = match loss_result {
                Ok(v) => v,
                Err(e) => {
                    save_checkpoint(&model, &last_path)?;
                    return Err(Error::Divergence { step, msg: e.to_string() });
                }
            };
            model.backward(&cache, &grad);
            let mut params = model.named_params_mut();
            if let Err(e) = sgd_step(&mut params, &mut state, tcfg, lr) {
                drop(params);
                save_checkpoint(&model, &last_path)?;
                return Err(Error::Divergence { step, msg: e.to_string() });
            }
            drop(params);
            write_record(
                &HistoryRecord::Step {
                    step,
                    lr,
                    total: value.total,
                    box_term: value.box_term,
                    cls_term: value.cls_term,
                },
                &mut history,
            )?;
            step += 1;

            if step % tcfg.eval_every == 0 || step == total_steps {
                let eval_samples = if eval_on_train { &train_samples } else { &val_samples };
                let summary = evaluate_model(&model, eval_samples)?;
                write_record(
                    &HistoryRecord::Eval {
                        step,
                        map_50: summary.map_50,
                        map_50_95: summary.map_50_95,
                        precision_at_05: summary.precision_at_05,
                    },
                    &mut history,
                )?;
                if summary.map_50 > best_map {
                    best_map = summary.map_50;
                    save_checkpoint(&model, &best_path)?;
                }
                if let Some(target) = tcfg.stop_map {
                    if summary.map_50 >= target {
                        stop = true;
                    }
                }
                last_eval = Some(summary);
            }
        }
        write_record(
            &HistoryRecord::Epoch { epoch, seconds: epoch_start.elapsed().as_secs_f64() },
            &mut history,
        )?;
    }

    save_checkpoint(&model, &last_path)?;
    if best_map == f64::NEG_INFINITY {
        // never evaluated during the loop; evaluate now so best exists
        let eval_samples = if eval_on_train { &train_samples } else { &val_samples };
        let summary = evaluate_model(&model, eval_samples)?;
        best_map = summary.map_50;
        save_checkpoint(&model, &best_path)?;
        last_eval = Some(summary);
    }
    let summary = last_eval.expect("at least one evaluation ran");
    let fps = measure_fps(&model, 5, 1)?;
    let report = MetricsReport {
        map_50_95: summary.map_50_95,
        map_50: summary.map_50,
        precision_at_05: summary.precision_at_05,
        gflops: model.gflops(model_cfg.input_size)?,
        fps: fps.fps,
        per_class_ap: summary.per_class_ap.clone(),
    };
    report.validate()?;
    let metrics_path = run_dir.join("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&report).unwrap())
        .map_err(|e| Error::io(&metrics_path, e))?;
    let csv_path = run_dir.join("metrics.csv");
    std::fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        steps_run: step,
        best_map_50: best_map,
        final_report: report,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        dataset_hash,
    })
}

/// One row of the module-ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub use_dsc: bool,
    pub use_mapse: bool,
    pub use_vgau: bool,
    pub status: String,
    pub map_50_95: f64,
    pub precision_at_05: f64,
    pub gflops: f64,
    pub fps: f64,
    pub seed: u64,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "dsc,mapse,vgau,status,map_50_95,precision_at_05,gflops,fps,seed,dataset_hash\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.3},{},{}\n",
                r.use_dsc as u8,
                r.use_mapse as u8,
                r.use_vgau as u8,
                r.status,
                r.map_50_95,
                r.precision_at_05,
                r.gflops,
                r.fps,
                r.seed,
                r.dataset_hash
            ));
        }
        s
    }
}

/// The four module-setting rows, trained on identical data with an identical
/// seed: MAPSE; DSC+MAPSE; MAPSE+VGAU; DSC+MAPSE+VGAU.
pub const ABLATION_ROWS: [(bool, bool, bool); 4] = [
    (false, true, false),
    (true, true, false),
    (false, true, true),
    (true, true, true),
];

/// Runs the four-row ablation. A row that fails to train is marked `failed`
/// and the remaining rows still run.
pub fn ablate(base: &RunConfig, dataset_dir: &Path, out_dir: &Path) -> Result<AblationTable> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = crate::data::DatasetManifest::load(dataset_dir)?;
    let dataset_hash = manifest.content_hash();
    let mut rows = Vec::new();
    for (i, &(dsc, mapse, vgau)) in ABLATION_ROWS.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.model.use_dsc = dsc;
        cfg.model.use_mapse = mapse;
        cfg.model.use_vgau = vgau;
        let run_dir = out_dir.join(format!("row_{i}"));
        match train(&cfg, dataset_dir, &run_dir) {
            Ok(outcome) => rows.push(AblationRow {
                use_dsc: dsc,
                use_mapse: mapse,
                use_vgau: vgau,
                status: "ok".into(),
                map_50_95: outcome.final_report.map_50_95,
                precision_at_05: outcome.final_report.precision_at_05,
                gflops: outcome.final_report.gflops,
                fps: outcome.final_report.fps,
                seed: cfg.train.seed,
                dataset_hash: outcome.dataset_hash,
            }),
            Err(e) => {
                eprintln!("ablation row {i} failed: {e}");
                rows.push(AblationRow {
                    use_dsc: dsc,
                    use_mapse: mapse,
                    use_vgau: vgau,
                    status: "failed".into(),
                    map_50_95: 0.0,
                    precision_at_05: 0.0,
                    gflops: 0.0,
                    fps: 0.0,
                    seed: cfg.train.seed,
                    dataset_hash: dataset_hash.clone(),
                });
            }
        }
    }
    let table = AblationTable { rows };
    let csv_path = out_dir.join("ablation.csv");
    std::fs::write(&csv_path, table.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = out_dir.join("ablation.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&table).unwrap())
        .map_err(|e| Error::io(&json_path, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, 100, &cfg), 0.01);
        assert_eq!(lr_schedule(100, 100, &cfg), 0.002);
        assert!((lr_schedule(50, 100, &cfg) - 0.006).abs() < 1e-15);
    }

    #[test]
    fn sgd_hand_computed_steps() {
        let cfg = TrainConfig { momentum: 0.8, weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = Param::new(ndarray::arr1(&[1.0]).into_dyn());
        p.grad.fill(0.5);
        let mut params: NamedParamsMut = vec![("w".into(), &mut p)];
        let mut state = SgdState::new(&params);
        sgd_step(&mut params, &mut state, &cfg, 0.1).unwrap();
        assert!((p.value[[0]] - 0.95).abs() < 1e-15);

        // decay-only: wd = 0.1, g = 0, lr = 0.1, momentum 0 -> w = 0.99
        let cfg = TrainConfig { momentum: 0.0, weight_decay: 0.1, ..TrainConfig::default() };
        let mut p = Param::new(ndarray::arr1(&[1.0]).into_dyn());
        let mut params: NamedParamsMut = vec![("w".into(), &mut p)];
        let mut state = SgdState::new(&params);
        sgd_step(&mut params, &mut state, &cfg, 0.1).unwrap();
        assert!((p.value[[0]] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn sgd_fixed_point_and_zero_lr() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = Param::new(ndarray::arr1(&[2.5, -1.0]).into_dyn());
        let mut params: NamedParamsMut = vec![("w".into(), &mut p)];
        let mut state = SgdState::new(&params);
        // zero gradient, zero decay, zero velocity: parameters unchanged
        sgd_step(&mut params, &mut state, &cfg, 0.1).unwrap();
        assert_eq!(p.value[[0]], 2.5);
        // lr = 0 leaves parameters unchanged even with gradients
        let cfg = TrainConfig::default();
        p.grad.fill(3.0);
        let mut params: NamedParamsMut = vec![("w".into(), &mut p)];
        let mut state = SgdState::new(&params);
        sgd_step(&mut params, &mut state, &cfg, 0.0).unwrap();
        assert_eq!(p.value[[0]], 2.5);
    }

    #[test]
    fn weight_decay_shrinks_magnitudes_monotonically() {
        let cfg = TrainConfig { momentum: 0.0, weight_decay: 0.01, ..TrainConfig::default() };
        let mut p = Param::new(ndarray::arr1(&[1.0, -2.0]).into_dyn());
        let mut prev = [1.0f64, 2.0];
        for _ in 0..5 {
            let mut params: NamedParamsMut = vec![("w".into(), &mut p)];
            let mut state = SgdState::new(&params);
            sgd_step(&mut params, &mut state, &cfg, 0.1).unwrap();
            let now = [p.value[[0]].abs(), p.value[[1]].abs()];
            assert!(now[0] < prev[0] && now[1] < prev[1]);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let cfg = TrainConfig::default();
        let mut p = Param::new(ndarray::arr1(&[1.0]).into_dyn());
        p.grad.fill(f64::NAN);
        let mut params: NamedParamsMut = vec![("stage0.w".into(), &mut p)];
        let mut state = SgdState::new(&params);
        let err = sgd_step(&mut params, &mut state, &cfg, 0.1).unwrap_err();
        assert!(err.to_string().contains("stage0.w"));
    }

    #[test]
    fn eval_every_zero_rejected() {
        let cfg = TrainConfig { eval_every: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
