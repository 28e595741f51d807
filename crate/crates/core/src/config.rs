//! Flat `key=value` configuration files.
//!
//! One pair per line, `#` starts a comment, dotted prefixes select a section
//! (`distill.beta=0.9`). Unknown keys are rejected and missing keys keep
//! their defaults. [`ExperimentConfig::render`] writes every key back out in
//! a fixed order, which is what the config hash covers.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::checkpoint::sha256_hex;
use crate::data::SynthConfig;
use crate::error::{HlfdError, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub train_fraction: f64,
}

/// 500 of the default 600 synthetic samples train, 100 test.
pub const DEFAULT_TRAIN_FRACTION: f64 = 500.0 / 600.0;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            train_fraction: DEFAULT_TRAIN_FRACTION,
        }
    }
}

fn err(line: usize, msg: impl std::fmt::Display) -> HlfdError {
    HlfdError::Config(format!("line {line}: {msg}"))
}

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| err(line, format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(line, key, p.trim())).collect()
}

fn pair<T: FromStr + Copy>(line: usize, key: &str, v: &str, sep: char) -> Result<(T, T)> {
    let parts: Vec<&str> = v.split(sep).collect();
    if parts.len() != 2 {
        return Err(err(line, format!("{key}: expected two values separated by '{sep}', got {v:?}")));
    }
    Ok((num(line, key, parts[0].trim())?, num(line, key, parts[1].trim())?))
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected key=value, got {content:?}")))?;
            c.set(line, key.trim(), value.trim())?;
        }
        c.sync_sizes();
        c.validate()?;
        Ok(c)
    }

    /// Network input sizes always follow the dataset's image size.
    pub fn sync_sizes(&mut self) {
        self.train.teacher_net.input_size = self.synth.size;
        self.train.student_net.input_size = self.synth.size;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate().map_err(|e| HlfdError::Config(e.to_string()))?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(HlfdError::Config(format!("data.train_fraction {} not in (0,1)", self.train_fraction)));
        }
        Ok(())
    }

    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "epochs" => t.epochs = num(line, key, v)?,
            "teacher_epochs" => t.teacher_epochs = num(line, key, v)?,
            "batch_size" => t.batch_size = num(line, key, v)?,
            "lr_max" => t.lr_max = num(line, key, v)?,
            "lr_min" => t.lr_min = num(line, key, v)?,
            "seeds" => t.seeds = list(line, key, v)?,
            "deep_supervision" => t.deep_supervision = num(line, key, v)?,
            "augment" => t.augment = num(line, key, v)?,
            "adam.beta1" => t.adam.beta1 = num(line, key, v)?,
            "adam.beta2" => t.adam.beta2 = num(line, key, v)?,
            "adam.eps" => t.adam.eps = num(line, key, v)?,
            "distill.beta" => t.distill.beta = num(line, key, v)?,
            "distill.lambda" => t.distill.lambda = num(line, key, v)?,
            "distill.attention_power" => t.distill.attention_power = num(line, key, v)?,
            "distill.eps" => t.distill.eps = num(line, key, v)?,
            "distill.kl_floor" => t.distill.kl_floor = num(line, key, v)?,
            "distill.normalize_ifd" => t.distill.normalize_ifd = num(line, key, v)?,
            "loss.gamma" => t.loss.gamma = num(line, key, v)?,
            "loss.smooth" => t.loss.smooth = num(line, key, v)?,
            "net.num_mid" => {
                let n = num(line, key, v)?;
                t.teacher_net.num_mid = n;
                t.student_net.num_mid = n;
            }
            "net.num_classes" => {
                let k = num(line, key, v)?;
                t.teacher_net.num_classes = k;
                t.student_net.num_classes = k;
            }
            "teacher.encoder_channels" => t.teacher_net.encoder_channels = list(line, key, v)?,
            "student.encoder_channels" => t.student_net.encoder_channels = list(line, key, v)?,
            "synth.count" => s.count = num(line, key, v)?,
            "synth.size" => s.size = pair(line, key, v, 'x')?,
            "synth.blobs_per_image" => s.blobs_per_image = pair(line, key, v, ',')?,
            "synth.blob_radius" => s.blob_radius = pair(line, key, v, ',')?,
            "synth.intensity_contrast" => s.intensity_contrast = num(line, key, v)?,
            "synth.noise_sigma" => s.noise_sigma = num(line, key, v)?,
            "synth.background_texture_scale" => s.background_texture_scale = num(line, key, v)?,
            "synth.seed" => s.seed = num(line, key, v)?,
            "data.train_fraction" => self.train_fraction = num(line, key, v)?,
            _ => return Err(err(line, format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key in a fixed order; parsing the output gives back `self`.
    pub fn render(&self) -> String {
        let mut out = render_train(&self.train);
        let s = &self.synth;
        let _ = writeln!(out, "synth.count={}", s.count);
        let _ = writeln!(out, "synth.size={}x{}", s.size.0, s.size.1);
        let _ = writeln!(out, "synth.blobs_per_image={},{}", s.blobs_per_image.0, s.blobs_per_image.1);
        let _ = writeln!(out, "synth.blob_radius={:?},{:?}", s.blob_radius.0, s.blob_radius.1);
        let _ = writeln!(out, "synth.intensity_contrast={:?}", s.intensity_contrast);
        let _ = writeln!(out, "synth.noise_sigma={:?}", s.noise_sigma);
        let _ = writeln!(out, "synth.background_texture_scale={:?}", s.background_texture_scale);
        let _ = writeln!(out, "synth.seed={}", s.seed);
        let _ = writeln!(out, "data.train_fraction={:?}", self.train_fraction);
        out
    }
}

/// The training keys of [`ExperimentConfig::render`].
pub fn render_train(t: &TrainConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "epochs={}", t.epochs);
    let _ = writeln!(out, "teacher_epochs={}", t.teacher_epochs);
    let _ = writeln!(out, "batch_size={}", t.batch_size);
    let _ = writeln!(out, "lr_max={:?}", t.lr_max);
    let _ = writeln!(out, "lr_min={:?}", t.lr_min);
    let _ = writeln!(out, "seeds={}", join(&t.seeds));
    let _ = writeln!(out, "deep_supervision={:?}", t.deep_supervision);
    let _ = writeln!(out, "augment={}", t.augment);
    let _ = writeln!(out, "adam.beta1={:?}", t.adam.beta1);
    let _ = writeln!(out, "adam.beta2={:?}", t.adam.beta2);
    let _ = writeln!(out, "adam.eps={:?}", t.adam.eps);
    let d = &t.distill;
    let _ = writeln!(out, "distill.beta={:?}", d.beta);
    let _ = writeln!(out, "distill.lambda={:?}", d.lambda);
    let _ = writeln!(out, "distill.attention_power={:?}", d.attention_power);
    let _ = writeln!(out, "distill.eps={:?}", d.eps);
    let _ = writeln!(out, "distill.kl_floor={:?}", d.kl_floor);
    let _ = writeln!(out, "distill.normalize_ifd={}", d.normalize_ifd);
    let _ = writeln!(out, "loss.gamma={:?}", t.loss.gamma);
    let _ = writeln!(out, "loss.smooth={:?}", t.loss.smooth);
    let _ = writeln!(out, "net.num_mid={}", t.teacher_net.num_mid);
    let _ = writeln!(out, "net.num_classes={}", t.teacher_net.num_classes);
    let _ = writeln!(out, "teacher.encoder_channels={}", join(&t.teacher_net.encoder_channels));
    let _ = writeln!(out, "student.encoder_channels={}", join(&t.student_net.encoder_channels));
    out
}

/// SHA-256 of the rendered training configuration.
pub fn config_hash(t: &TrainConfig) -> String {
    sha256_hex(render_train(t).as_bytes())
}
