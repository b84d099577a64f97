//! `key=value` run configuration shared by every subcommand.
//!
//! Keys are dotted: `model.*`, `loss.*`, `synth.*`, `train.*`, `optim.*` and
//! `eval.*`. Blank lines and `#` comments are ignored. Command-line flags are
//! applied after the file, so they always win.

use std::fs;
use std::path::Path;

use epcnet::data::SyntheticConfig;
use epcnet::model::EpcNetConfig;
use epcnet::train::{NegStarPairing, PositiveMode, TrainConfig};
use epcnet::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: EpcNetConfig,
    pub synth: SyntheticConfig,
    pub train: TrainConfig,
    pub radius: f64,
}

impl RunConfig {
    pub fn new(model: EpcNetConfig) -> Self {
        RunConfig {
            model,
            synth: SyntheticConfig::default(),
            train: TrainConfig::default(),
            radius: epcnet::data::DEFAULT_SUCCESS_RADIUS,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key.starts_with("model.") {
            return self.model.set(key, value);
        }
        let synth = &mut self.synth;
        let train = &mut self.train;
        match key {
            "loss.alpha" => train.loss.alpha = parse(key, value)?,
            "loss.beta" => train.loss.beta = parse(key, value)?,
            "loss.lambda" => train.loss.lambda = parse(key, value)?,
            "loss.positive" => train.loss.positive = positive_mode(value)?,
            "loss.neg_star" => train.loss.neg_star = neg_star_pairing(value)?,
            "synth.places" => synth.place_count = parse(key, value)?,
            "synth.traversals" => synth.traversal_count = parse(key, value)?,
            "synth.spacing" => synth.grid_spacing = parse(key, value)?,
            "synth.noise" => synth.noise_sigma = parse(key, value)?,
            "synth.dropout" => synth.dropout_fraction = parse(key, value)?,
            "synth.points" => synth.points_per_submap = parse(key, value)?,
            "synth.rotation" => synth.rotation = value.parse()?,
            "synth.seed" => synth.seed = parse(key, value)?,
            "train.epochs" => train.epochs = parse(key, value)?,
            "train.batch_size" => train.batch_size = parse(key, value)?,
            "train.positives" => train.positives = parse(key, value)?,
            "train.negatives" => train.negatives = parse(key, value)?,
            "train.seed" => train.seed = parse(key, value)?,
            "optim.lr" => train.lr = parse(key, value)?,
            "eval.radius" => self.radius = parse(key, value)?,
            other => return Err(Error::invalid(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key=value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value, got `{line}`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::invalid(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        self.apply_text(&text)
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse `{value}`")))
}

pub fn positive_mode(s: &str) -> Result<PositiveMode> {
    match s {
        "best" => Ok(PositiveMode::Best),
        "mean" => Ok(PositiveMode::Mean),
        other => Err(Error::invalid(format!("unknown positive mode `{other}` (expected best or mean)"))),
    }
}

pub fn neg_star_pairing(s: &str) -> Result<NegStarPairing> {
    match s {
        "per_negative" => Ok(NegStarPairing::PerNegative),
        "anchor" => Ok(NegStarPairing::Anchor),
        other => Err(Error::invalid(format!("unknown neg_star pairing `{other}` (expected per_negative or anchor)"))),
    }
}

/// Named starting points for `--model`.
pub fn preset(name: &str) -> Result<EpcNetConfig> {
    use epcnet::model::HeadKind;
    match name {
        "epcnet" => Ok(EpcNetConfig::epcnet()),
        "epcnet-l" => Ok(EpcNetConfig::epcnet_l()),
        "desk" => Ok(EpcNetConfig::desk(HeadKind::GVlad)),
        "desk-l" => Ok(EpcNetConfig::desk(HeadKind::MaxPool)),
        other => Err(Error::invalid(format!(
            "unknown model `{other}` (expected epcnet, epcnet-l, desk or desk-l)"
        ))),
    }
}
