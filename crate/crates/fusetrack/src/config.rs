//! Plain-text `key=value` configuration (one pair per line, `#` comments)
//! and the typed training and tracking settings layered on top.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Parse `key=value` lines. `#` starts a comment, blank lines are skipped,
/// later duplicates win.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
        let k = k.trim().to_string();
        let v = v.trim().to_string();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        out.retain(|(prev, _)| *prev != k);
        out.push((k, v));
    }
    Ok(out)
}

pub fn load_kv(path: &Path) -> Result<Vec<(String, String)>> {
    parse_kv(&std::fs::read_to_string(path)?)
}

fn pv<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value}")))
}

fn pbool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad value for {key}: {value}"))),
    }
}

/// Two-stage training settings. Stage 1 trains backbone, fusion, and the
/// box heads; stage 2 freezes those and trains the quality and mask heads.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub profile: String,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: Real,
    pub backbone_lr: Real,
    /// Step at which the learning rate drops by 10x; 0 disables the drop.
    pub lr_decay_at: usize,
    pub weight_decay: Real,
    pub m: usize,
    pub n_distractors: usize,
    pub motion_sigma: Real,
    pub jitter: bool,
    pub stage2_steps: usize,
    pub iou_lr: Real,
    pub iou_weight_decay: Real,
    pub seg_lr: Real,
    pub seg: bool,
    pub corr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            profile: "toy".into(),
            seed: 1,
            steps: 2000,
            batch: 8,
            lr: 1e-4,
            backbone_lr: 1e-5,
            lr_decay_at: 0,
            weight_decay: 1e-4,
            m: 2,
            n_distractors: 2,
            motion_sigma: 3.0,
            jitter: true,
            stage2_steps: 400,
            iou_lr: 1e-3,
            iou_weight_decay: 1e-4,
            seg_lr: 1e-2,
            seg: false,
            corr: false,
        }
    }
}

impl TrainConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "profile" => self.profile = value.to_string(),
            "seed" => self.seed = pv(key, value)?,
            "steps" => self.steps = pv(key, value)?,
            "batch" => self.batch = pv(key, value)?,
            "lr" => self.lr = pv(key, value)?,
            "backbone_lr" => self.backbone_lr = pv(key, value)?,
            "lr_decay_at" => self.lr_decay_at = pv(key, value)?,
            "weight_decay" => self.weight_decay = pv(key, value)?,
            "m" => self.m = pv(key, value)?,
            "n_distractors" => self.n_distractors = pv(key, value)?,
            "motion_sigma" => self.motion_sigma = pv(key, value)?,
            "jitter" => self.jitter = pbool(key, value)?,
            "stage2_steps" => self.stage2_steps = pv(key, value)?,
            "iou_lr" => self.iou_lr = pv(key, value)?,
            "iou_weight_decay" => self.iou_weight_decay = pv(key, value)?,
            "seg_lr" => self.seg_lr = pv(key, value)?,
            "seg" => self.seg = pbool(key, value)?,
            "corr" => self.corr = pbool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn overlay_file(&mut self, path: &Path) -> Result<()> {
        for (k, v) in load_kv(path)? {
            self.apply(&k, &v)?;
        }
        Ok(())
    }
}

/// Online tracking settings.
#[derive(Clone, Debug)]
pub struct TrackConfig {
    pub w_penalty: Real,
    pub threshold: Real,
    pub m: usize,
    pub mode: String,
    pub long_term: bool,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            w_penalty: 0.49,
            threshold: 0.75,
            m: 2,
            mode: "concat".into(),
            long_term: false,
        }
    }
}

impl TrackConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "w_penalty" => self.w_penalty = pv(key, value)?,
            "threshold" => self.threshold = pv(key, value)?,
            "m" => self.m = pv(key, value)?,
            "mode" => {
                if value != "concat" && value != "avg" {
                    return Err(Error::Config(format!("bad value for mode: {value}")));
                }
                self.mode = value.to_string();
            }
            "long_term" => self.long_term = pbool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn overlay_file(&mut self, path: &Path) -> Result<()> {
        for (k, v) in load_kv(path)? {
            self.apply(&k, &v)?;
        }
        Ok(())
    }

    /// Re-check fields set directly rather than through [`apply`].
    pub fn validate(&self) -> Result<()> {
        if self.mode != "concat" && self.mode != "avg" {
            return Err(Error::Config(format!("bad value for mode: {}", self.mode)));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        Ok(())
    }
}
