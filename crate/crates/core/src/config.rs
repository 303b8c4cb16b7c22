//! Flat key-value run configuration with dotted namespaces
//! (`model.use_mapse=true`). Unknown keys are rejected, and every run writes
//! the fully resolved configuration next to its outputs so it can be
//! reproduced from that file alone.

use crate::attention::PositionEncoding;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::UpsampleMode;
use crate::train::{LrSchedule, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SynthConfig,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for key `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|p| parse::<f64>(key, p.trim()))
        .collect()
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| parse::<usize>(key, p.trim()))
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.use_dsc" => self.model.use_dsc = parse(key, v)?,
            "model.use_mapse" => self.model.use_mapse = parse(key, v)?,
            "model.use_vgau" => self.model.use_vgau = parse(key, v)?,
            "model.stage_channels" => self.model.stage_channels = parse_usize_list(key, v)?,
            "model.num_classes" => self.model.num_classes = parse(key, v)?,
            "model.input_size" => self.model.input_size = parse(key, v)?,
            "model.strides" => self.model.strides = parse_usize_list(key, v)?,
            "model.nms_iou" => self.model.nms_iou = parse(key, v)?,
            "model.conf_floor" => self.model.conf_floor = parse(key, v)?,
            "model.upsample_mode" => {
                self.model.upsample_mode = match v {
                    "nearest" => UpsampleMode::Nearest,
                    "bilinear" => UpsampleMode::Bilinear,
                    _ => return Err(Error::Config(format!("bad upsample mode `{v}`"))),
                }
            }
            "model.mapse.window" => {
                self.model.mapse.attention.window = parse(key, v)?;
                self.model.mapse.attention.taps_k = self.model.mapse.attention.window;
            }
            "model.mapse.rates" => self.model.mapse.attention.rates = parse_usize_list(key, v)?,
            "model.mapse.heads" => self.model.mapse.attention.heads = parse(key, v)?,
            "model.mapse.position_encoding" => {
                self.model.mapse.position_encoding = match v {
                    "learned" => PositionEncoding::Learned,
                    "sinusoidal" => PositionEncoding::Sinusoidal,
                    _ => return Err(Error::Config(format!("bad position encoding `{v}`"))),
                }
            }
            "model.mapse.mlp_expansion" => self.model.mapse.mlp_expansion = parse(key, v)?,
            "model.mapse.reduction_rho" => self.model.mapse.reduction_rho = parse(key, v)?,
            "train.lr_start" => self.train.lr_start = parse(key, v)?,
            "train.lr_end" => self.train.lr_end = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.schedule" => {
                self.train.schedule = match v {
                    "linear" => LrSchedule::Linear,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(Error::Config(format!("bad schedule `{v}`"))),
                }
            }
            "train.hflip" => self.train.hflip = parse(key, v)?,
            "train.max_steps" => {
                let n: usize = parse(key, v)?;
                self.train.max_steps = if n == 0 { None } else { Some(n) };
            }
            "train.stop_map" => {
                let x: f64 = parse(key, v)?;
                self.train.stop_map = if x <= 0.0 { None } else { Some(x) };
            }
            "train.box_weight" => self.train.loss.box_weight = parse(key, v)?,
            "train.cls_weight" => self.train.loss.cls_weight = parse(key, v)?,
            "train.pos_weight" => self.train.loss.pos_weight = parse(key, v)?,
            "data.num_images" => self.data.num_images = parse(key, v)?,
            "data.image_size" => self.data.image_size = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.class_mix" => {
                let mix = parse_list(key, v)?;
                if mix.len() != 3 {
                    return Err(Error::Config("class_mix needs 3 entries".into()));
                }
                self.data.class_mix = [mix[0], mix[1], mix[2]];
            }
            "data.objects_per_image" => {
                let r = parse_usize_list(key, v)?;
                if r.len() != 2 {
                    return Err(Error::Config("objects_per_image needs `min,max`".into()));
                }
                self.data.objects_per_image = (r[0], r[1]);
            }
            "data.val_fraction" => self.data.val_fraction = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical flat text: every key, sorted, one `key=value` per line.
    pub fn to_flat_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut pairs: Vec<(String, String)> = vec![
            ("model.use_dsc".into(), m.use_dsc.to_string()),
            ("model.use_mapse".into(), m.use_mapse.to_string()),
            ("model.use_vgau".into(), m.use_vgau.to_string()),
            ("model.stage_channels".into(), join(&m.stage_channels)),
            ("model.num_classes".into(), m.num_classes.to_string()),
            ("model.input_size".into(), m.input_size.to_string()),
            ("model.strides".into(), join(&m.strides)),
            ("model.nms_iou".into(), m.nms_iou.to_string()),
            ("model.conf_floor".into(), m.conf_floor.to_string()),
            (
                "model.upsample_mode".into(),
                match m.upsample_mode {
                    UpsampleMode::Nearest => "nearest".into(),
                    UpsampleMode::Bilinear => "bilinear".into(),
                },
            ),
            ("model.mapse.window".into(), m.mapse.attention.window.to_string()),
            ("model.mapse.rates".into(), join(&m.mapse.attention.rates)),
            ("model.mapse.heads".into(), m.mapse.attention.heads.to_string()),
            (
                "model.mapse.position_encoding".into(),
                match m.mapse.position_encoding {
                    PositionEncoding::Learned => "learned".into(),
                    PositionEncoding::Sinusoidal => "sinusoidal".into(),
                },
            ),
            ("model.mapse.mlp_expansion".into(), m.mapse.mlp_expansion.to_string()),
            ("model.mapse.reduction_rho".into(), m.mapse.reduction_rho.to_string()),
            ("train.lr_start".into(), t.lr_start.to_string()),
            ("train.lr_end".into(), t.lr_end.to_string()),
            ("train.weight_decay".into(), t.weight_decay.to_string()),
            ("train.momentum".into(), t.momentum.to_string()),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.seed".into(), t.seed.to_string()),
            ("train.eval_every".into(), t.eval_every.to_string()),
            (
                "train.schedule".into(),
                match t.schedule {
                    LrSchedule::Linear => "linear".into(),
                    LrSchedule::Cosine => "cosine".into(),
                },
            ),
            ("train.hflip".into(), t.hflip.to_string()),
            ("train.max_steps".into(), t.max_steps.unwrap_or(0).to_string()),
            ("train.stop_map".into(), t.stop_map.unwrap_or(0.0).to_string()),
            ("train.box_weight".into(), t.loss.box_weight.to_string()),
            ("train.cls_weight".into(), t.loss.cls_weight.to_string()),
            ("train.pos_weight".into(), t.loss.pos_weight.to_string()),
            ("data.num_images".into(), d.num_images.to_string()),
            ("data.image_size".into(), d.image_size.to_string()),
            ("data.seed".into(), d.seed.to_string()),
            ("data.class_mix".into(), join(&d.class_mix)),
            (
                "data.objects_per_image".into(),
                format!("{},{}", d.objects_per_image.0, d.objects_per_image.1),
            ),
            ("data.val_fraction".into(), d.val_fraction.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// Parses flat text on top of the defaults. Blank lines and `#` comments
    /// are allowed; unknown keys fail.
    pub fn from_flat_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_flat_text(text)?;
        Ok(cfg)
    }

    pub fn apply_flat_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected key=value, got `{trimmed}`"),
                });
            };
            self.apply_kv(k.trim(), v)?;
        }
        Ok(())
    }

    /// Model-only flat text (keys under `model.`), used by checkpoints.
    pub fn model_flat_text(model: &ModelConfig) -> String {
        let cfg = RunConfig { model: model.clone(), ..Default::default() };
        cfg.to_flat_text()
            .lines()
            .filter(|l| l.starts_with("model."))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    pub fn model_from_flat_text(text: &str) -> Result<ModelConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_flat_text(text)?;
        Ok(cfg.model)
    }
}
