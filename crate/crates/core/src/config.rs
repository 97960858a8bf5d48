//! Flat key=value run configuration: one file drives a whole training run.
//! Unknown keys are fatal and named, so a typo never silently trains with a
//! default in its place.

use crate::bundle::Variant;
use crate::error::{Error, Result};
use crate::measurement::{MaskMode, SamplingConfig};
use crate::reconstructor::ReconWidths;
use crate::training::{LossMode, TrainConfig};

/// Everything a training run needs: model structure, loop knobs, and paths.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub variant: Variant,
    pub block_h: usize,
    pub block_w: usize,
    pub channels: usize,
    pub mask: MaskMode,
    pub widths: ReconWidths,
    /// 0 means "one patch stride", set after parsing.
    pub patch_stride: usize,
    pub data_dir: Option<String>,
    pub model_out: Option<String>,
    pub history_out: Option<String>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::R2csNet,
            block_h: 8,
            block_w: 8,
            channels: 3,
            mask: MaskMode::Dct,
            widths: ReconWidths::default(),
            patch_stride: 0,
            data_dir: None,
            model_out: None,
            history_out: None,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Validated sampling geometry; rejects impossible rates and blocks.
    pub fn sampling(&self) -> Result<SamplingConfig> {
        SamplingConfig::new(self.block_h, self.block_w, self.channels, self.train.sampling_rate)
    }

    pub fn stride(&self) -> usize {
        if self.patch_stride == 0 {
            self.train.patch_size
        } else {
            self.patch_stride
        }
    }

    /// The manifest echo: every effective setting, one per line, sorted.
    pub fn echo(&self) -> String {
        let mut lines = vec![
            format!("batch_size={}", self.train.batch_size),
            format!("beta1={}", self.train.beta1),
            format!("beta2={}", self.train.beta2),
            format!("block_h={}", self.block_h),
            format!("block_w={}", self.block_w),
            format!("channels={}", self.channels),
            format!("data_dir={}", self.data_dir.as_deref().unwrap_or("")),
            format!("epochs={}", self.train.epochs),
            format!("epsilon={}", self.train.epsilon),
            format!("history_out={}", self.history_out.as_deref().unwrap_or("")),
            format!("l4={}", self.widths.l4),
            format!("l5={}", self.widths.l5),
            format!("loss_mode={}", self.train.loss_mode.as_str()),
            format!("lr={}", self.train.lr),
            format!("mask={}", self.mask.as_str()),
            format!("model_out={}", self.model_out.as_deref().unwrap_or("")),
            format!("patch_size={}", self.train.patch_size),
            format!("patch_stride={}", self.stride()),
            format!("rate={}", self.train.sampling_rate),
            format!("res={}", self.widths.res),
            format!("seed={}", self.train.seed),
            format!("sigma_train={}", self.train.sigma_train),
            format!("t={}", self.train.t_steps),
            format!("variant={}", self.variant.as_str()),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }
}

fn want<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("config key '{key}': cannot parse value '{value}'")))
}

/// Parses the flat text form. Lines are `key=value`; blank lines and lines
/// starting with '#' are ignored; every key may appear once.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut out = RunConfig::default();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("config line {}: expected key=value, got '{line}'", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::config(format!("config key '{key}' appears twice")));
        }
        match key {
            "variant" => out.variant = Variant::parse(value)?,
            "block_h" => out.block_h = want(key, value)?,
            "block_w" => out.block_w = want(key, value)?,
            "channels" => out.channels = want(key, value)?,
            "rate" => out.train.sampling_rate = want(key, value)?,
            "mask" => out.mask = MaskMode::parse(value)?,
            "l4" => out.widths.l4 = want(key, value)?,
            "l5" => out.widths.l5 = want(key, value)?,
            "res" => out.widths.res = want(key, value)?,
            "t" => out.train.t_steps = want(key, value)?,
            "sigma_train" => out.train.sigma_train = want(key, value)?,
            "lr" => out.train.lr = want(key, value)?,
            "beta1" => out.train.beta1 = want(key, value)?,
            "beta2" => out.train.beta2 = want(key, value)?,
            "epsilon" => out.train.epsilon = want(key, value)?,
            "batch_size" => out.train.batch_size = want(key, value)?,
            "epochs" => out.train.epochs = want(key, value)?,
            "patch_size" => out.train.patch_size = want(key, value)?,
            "patch_stride" => out.patch_stride = want(key, value)?,
            "seed" => out.train.seed = want(key, value)?,
            "loss_mode" => out.train.loss_mode = LossMode::parse(value)?,
            "data_dir" => out.data_dir = Some(value.to_string()),
            "model_out" => out.model_out = Some(value.to_string()),
            "history_out" => out.history_out = Some(value.to_string()),
            other => {
                return Err(Error::config(format!("unknown config key '{other}'")));
            }
        }
    }
    out.sampling()?;
    out.train.validate(&out.sampling()?)?;
    Ok(out)
}
