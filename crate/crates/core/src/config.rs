//! Run configuration: one flat `key = value` file shared by every command.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value
//! ```
//!
//! Blank lines and lines starting with `#` are ignored; keys are dotted
//! lowercase names from [`KEYS`]; values are bare (no quoting). Lists are
//! comma-separated. Unknown and repeated keys are errors. `model.preset` is
//! applied before any explicit `model.*` width, so a preset can be narrowed
//! or widened key by key.
//!
//! [`RunConfig::to_text`] writes every key in table order and parses back to
//! an identical value, which is what checkpoints and reports embed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, LatentConfig};
use crate::pack_data::PackSizeSampler;
use crate::silhouettes::{GenerateConfig, RenderConfig};
use crate::training::{PackSource, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Published,
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    NoDc,
    Vae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    Train,
    Withheld,
}

/// Where a default comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Published,
    Choice,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::Published => "published setting",
            Provenance::Choice => "implementation choice",
        }
    }
}

pub struct KeyDoc {
    pub key: &'static str,
    pub provenance: Provenance,
    pub help: &'static str,
}

const fn doc(key: &'static str, provenance: Provenance, help: &'static str) -> KeyDoc {
    KeyDoc { key, provenance, help }
}

use Provenance::{Choice, Published};

/// Every accepted key, in serialization order.
pub const KEYS: &[KeyDoc] = &[
    doc("seed", Choice, "master seed; every subsystem derives its stream from it"),
    doc("data.dir", Choice, "dataset root written by `gen` and read by `train`/`probe`"),
    doc("gen.packs", Published, "number of generated packs (one shape each)"),
    doc("gen.withheld", Published, "shapes held out of training; if unset while gen.packs is set, gen.packs / 16"),
    doc("gen.image_size", Choice, "rendered image side in pixels; must be divisible by 16"),
    doc("gen.channels", Published, "image channels, 1 or 3"),
    doc("gen.occupancy", Published, "probability that a voxel cell is filled"),
    doc("gen.projection_scale", Choice, "pixels per world unit as a fraction of the image side"),
    doc("gen.pack_size_base", Published, "pack size is base + Poisson(rate)"),
    doc("gen.pack_size_rate", Published, "Poisson rate of the pack size"),
    doc("model.preset", Choice, "layer widths: published or compact"),
    doc("model.domain_dim", Published, "domain code size"),
    doc("model.content_dim", Published, "content code size"),
    doc("model.kernel", Published, "convolution kernel side"),
    doc("model.encoder_channels", Published, "encoder conv widths"),
    doc("model.encoder_strides", Published, "encoder conv strides"),
    doc("model.encoder_hidden", Published, "encoder dense width"),
    doc("model.decoder_channels", Published, "decoder conv widths before the output layer"),
    doc("model.disc_element", Published, "discriminator per-code layer widths"),
    doc("model.disc_head", Published, "discriminator head widths before the logit"),
    doc("train.out", Choice, "run directory for checkpoints and metrics"),
    doc("train.lambda_dc", Published, "weight of the domain-confusion loss"),
    doc("train.learning_rate", Published, "Adam step size"),
    doc("train.adam_epsilon", Published, "Adam epsilon"),
    doc("train.adam_beta1", Choice, "Adam first-moment decay"),
    doc("train.adam_beta2", Choice, "Adam second-moment decay"),
    doc("train.epochs", Published, "training epochs"),
    doc("train.packs_per_epoch", Choice, "steps per epoch; 0 means half the training domains"),
    doc("train.closed_form_kl", Choice, "analytic KL instead of the single-sample estimate"),
    doc("train.pack_source", Choice, "auto, pool (whole stored pack) or resample (4 + Poisson(8) draws)"),
    doc("train.ablation", Choice, "none, no-dc (lambda forced to 0) or vae (plain VAE)"),
    doc("train.log_wall_clock", Choice, "record elapsed seconds in the metrics log"),
    doc("probe.epochs", Choice, "probe training epochs"),
    doc("probe.eval_split", Choice, "split the probes are scored on: withheld or train"),
    doc("probe.out", Choice, "probe report path"),
    doc("fuse.domain_columns", Published, "domain packs per fusion grid"),
];

/// `gen.packs / gen.withheld` of the default dataset.
pub const WITHHELD_FRACTION: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub gen_packs: usize,
    pub gen_withheld: usize,
    pub image_size: usize,
    pub channels: usize,
    pub occupancy: f64,
    pub projection_scale: f64,
    pub pack_size_base: usize,
    pub pack_size_rate: f64,
    pub preset: Preset,
    pub domain_dim: usize,
    pub content_dim: usize,
    pub kernel: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub encoder_hidden: usize,
    pub decoder_channels: Vec<usize>,
    pub disc_element: Vec<usize>,
    pub disc_head: Vec<usize>,
    pub train_out: PathBuf,
    pub lambda_dc: f64,
    pub learning_rate: f64,
    pub adam_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub packs_per_epoch: usize,
    pub closed_form_kl: bool,
    pub pack_source: PackSource,
    pub ablation: Ablation,
    pub log_wall_clock: bool,
    pub probe_epochs: usize,
    pub eval_split: EvalSplit,
    pub probe_out: PathBuf,
    pub domain_columns: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenerateConfig::default();
        let train = TrainConfig::default();
        let mut cfg = RunConfig {
            seed: 0,
            data_dir: "data".into(),
            gen_packs: gen.n_packs,
            gen_withheld: gen.n_withheld,
            image_size: gen.render.image_size,
            channels: gen.render.channels,
            occupancy: gen.occupancy_p,
            projection_scale: gen.render.projection_scale,
            pack_size_base: gen.sampler.base,
            pack_size_rate: gen.sampler.rate,
            preset: Preset::Published,
            domain_dim: 0,
            content_dim: 0,
            kernel: 0,
            encoder_channels: Vec::new(),
            encoder_strides: Vec::new(),
            encoder_hidden: 0,
            decoder_channels: Vec::new(),
            disc_element: Vec::new(),
            disc_head: Vec::new(),
            train_out: "run".into(),
            lambda_dc: train.lambda_dc,
            learning_rate: train.learning_rate,
            adam_epsilon: train.adam_epsilon,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            epochs: train.epochs,
            packs_per_epoch: train.packs_per_epoch,
            closed_form_kl: train.closed_form_kl,
            pack_source: train.pack_source,
            ablation: Ablation::None,
            log_wall_clock: train.log_wall_clock,
            probe_epochs: 10,
            eval_split: EvalSplit::Withheld,
            probe_out: "probe.tsv".into(),
            domain_columns: crate::evaluation::DEFAULT_DOMAIN_COLUMNS,
        };
        cfg.apply_preset(Preset::Published);
        cfg
    }
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse_scalar(key, v.trim()))
        .collect()
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.into()))
        .map_err(|_| Error::Config(format!("`{key}`: unknown value `{value}`")))
}

fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("unit enum"),
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    fn apply_preset(&mut self, preset: Preset) {
        let arch = match preset {
            Preset::Published => Architecture::published(self.image_size, self.image_size, self.channels),
            Preset::Compact => Architecture::compact(self.image_size, self.image_size, self.channels),
        };
        self.preset = preset;
        self.domain_dim = arch.latent.domain_dim;
        self.content_dim = arch.latent.content_dim;
        self.kernel = arch.kernel;
        self.encoder_channels = arch.encoder_channels;
        self.encoder_strides = arch.encoder_strides;
        self.encoder_hidden = arch.encoder_hidden;
        self.decoder_channels = arch.decoder_channels;
        self.disc_element = arch.disc_element;
        self.disc_head = arch.disc_head;
    }

    /// Current value of `key` in file syntax.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "data.dir" => self.data_dir.display().to_string(),
            "gen.packs" => self.gen_packs.to_string(),
            "gen.withheld" => self.gen_withheld.to_string(),
            "gen.image_size" => self.image_size.to_string(),
            "gen.channels" => self.channels.to_string(),
            "gen.occupancy" => self.occupancy.to_string(),
            "gen.projection_scale" => self.projection_scale.to_string(),
            "gen.pack_size_base" => self.pack_size_base.to_string(),
            "gen.pack_size_rate" => self.pack_size_rate.to_string(),
            "model.preset" => enum_name(&self.preset),
            "model.domain_dim" => self.domain_dim.to_string(),
            "model.content_dim" => self.content_dim.to_string(),
            "model.kernel" => self.kernel.to_string(),
            "model.encoder_channels" => list(&self.encoder_channels),
            "model.encoder_strides" => list(&self.encoder_strides),
            "model.encoder_hidden" => self.encoder_hidden.to_string(),
            "model.decoder_channels" => list(&self.decoder_channels),
            "model.disc_element" => list(&self.disc_element),
            "model.disc_head" => list(&self.disc_head),
            "train.out" => self.train_out.display().to_string(),
            "train.lambda_dc" => self.lambda_dc.to_string(),
            "train.learning_rate" => self.learning_rate.to_string(),
            "train.adam_epsilon" => self.adam_epsilon.to_string(),
            "train.adam_beta1" => self.adam_beta1.to_string(),
            "train.adam_beta2" => self.adam_beta2.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.packs_per_epoch" => self.packs_per_epoch.to_string(),
            "train.closed_form_kl" => self.closed_form_kl.to_string(),
            "train.pack_source" => enum_name(&self.pack_source),
            "train.ablation" => enum_name(&self.ablation),
            "train.log_wall_clock" => self.log_wall_clock.to_string(),
            "probe.epochs" => self.probe_epochs.to_string(),
            "probe.eval_split" => enum_name(&self.eval_split),
            "probe.out" => self.probe_out.display().to_string(),
            "fuse.domain_columns" => self.domain_columns.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        })
    }

    /// Sets one key from its file syntax. `model.preset` overwrites every width.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_scalar(key, v)?,
            "data.dir" => self.data_dir = v.into(),
            "gen.packs" => self.gen_packs = parse_scalar(key, v)?,
            "gen.withheld" => self.gen_withheld = parse_scalar(key, v)?,
            "gen.image_size" => self.image_size = parse_scalar(key, v)?,
            "gen.channels" => self.channels = parse_scalar(key, v)?,
            "gen.occupancy" => self.occupancy = parse_scalar(key, v)?,
            "gen.projection_scale" => self.projection_scale = parse_scalar(key, v)?,
            "gen.pack_size_base" => self.pack_size_base = parse_scalar(key, v)?,
            "gen.pack_size_rate" => self.pack_size_rate = parse_scalar(key, v)?,
            "model.preset" => self.apply_preset(parse_enum(key, v)?),
            "model.domain_dim" => self.domain_dim = parse_scalar(key, v)?,
            "model.content_dim" => self.content_dim = parse_scalar(key, v)?,
            "model.kernel" => self.kernel = parse_scalar(key, v)?,
            "model.encoder_channels" => self.encoder_channels = parse_list(key, v)?,
            "model.encoder_strides" => self.encoder_strides = parse_list(key, v)?,
            "model.encoder_hidden" => self.encoder_hidden = parse_scalar(key, v)?,
            "model.decoder_channels" => self.decoder_channels = parse_list(key, v)?,
            "model.disc_element" => self.disc_element = parse_list(key, v)?,
            "model.disc_head" => self.disc_head = parse_list(key, v)?,
            "train.out" => self.train_out = v.into(),
            "train.lambda_dc" => self.lambda_dc = parse_scalar(key, v)?,
            "train.learning_rate" => self.learning_rate = parse_scalar(key, v)?,
            "train.adam_epsilon" => self.adam_epsilon = parse_scalar(key, v)?,
            "train.adam_beta1" => self.adam_beta1 = parse_scalar(key, v)?,
            "train.adam_beta2" => self.adam_beta2 = parse_scalar(key, v)?,
            "train.epochs" => self.epochs = parse_scalar(key, v)?,
            "train.packs_per_epoch" => self.packs_per_epoch = parse_scalar(key, v)?,
            "train.closed_form_kl" => self.closed_form_kl = parse_scalar(key, v)?,
            "train.pack_source" => self.pack_source = parse_enum(key, v)?,
            "train.ablation" => self.ablation = parse_enum(key, v)?,
            "train.log_wall_clock" => self.log_wall_clock = parse_scalar(key, v)?,
            "probe.epochs" => self.probe_epochs = parse_scalar(key, v)?,
            "probe.eval_split" => self.eval_split = parse_enum(key, v)?,
            "probe.out" => self.probe_out = v.into(),
            "fuse.domain_columns" => self.domain_columns = parse_scalar(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Builds a config from defaults plus `pairs`; later pairs win, and a
    /// preset is applied before the keys it would otherwise clobber.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut merged: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in pairs {
            if !KEYS.iter().any(|d| d.key == k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            merged.insert(k, v);
        }
        let mut cfg = RunConfig::default();
        if let (Some(p), None) = (merged.get("gen.packs"), merged.get("gen.withheld")) {
            cfg.gen_withheld = parse_scalar::<usize>("gen.packs", p)? / WITHHELD_FRACTION;
        }
        // sizes feed the preset's architecture
        for k in ["gen.image_size", "gen.channels", "model.preset"] {
            if let Some(v) = merged.remove(k) {
                cfg.set(k, v)?;
            }
        }
        for d in KEYS {
            if let Some(v) = merged.get(d.key) {
                cfg.set(d.key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        RunConfig::from_pairs(parse_pairs(text)?)
    }

    /// Parses `text` and then applies `overrides` on top.
    pub fn parse_with<'a>(text: &'a str, overrides: &[(&'a str, &'a str)]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        pairs.extend_from_slice(overrides);
        RunConfig::from_pairs(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Every key in table order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for d in KEYS {
            let v = self.get(d.key).expect("table key");
            writeln!(out, "{} = {v}", d.key).expect("string write");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let reduction: usize = self.encoder_strides.iter().product();
        if self.image_size == 0 || reduction == 0 || self.image_size % reduction != 0 {
            return Err(Error::Config(format!(
                "gen.image_size = {} must be a positive multiple of {reduction} (the encoder's total stride)",
                self.image_size
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("gen.channels must be 1 or 3, got {}", self.channels)));
        }
        if self.gen_packs == 0 || self.gen_withheld >= self.gen_packs {
            return Err(Error::Config(format!(
                "gen.withheld = {} must be below gen.packs = {} (and gen.packs positive)",
                self.gen_withheld, self.gen_packs
            )));
        }
        if !(0.0..=1.0).contains(&self.occupancy) {
            return Err(Error::Config("gen.occupancy must lie in [0, 1]".into()));
        }
        if !(self.pack_size_rate > 0.0 && self.pack_size_rate.is_finite()) {
            return Err(Error::Config("gen.pack_size_rate must be positive".into()));
        }
        if self.domain_columns == 0 {
            return Err(Error::Config("fuse.domain_columns must be at least 1".into()));
        }
        self.architecture(self.image_size, self.image_size, self.channels)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train().validate()?;
        self.generate().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn render(&self) -> RenderConfig {
        RenderConfig {
            image_size: self.image_size,
            channels: self.channels,
            projection_scale: self.projection_scale,
            ..RenderConfig::default()
        }
    }

    pub fn generate(&self) -> GenerateConfig {
        GenerateConfig {
            n_packs: self.gen_packs,
            n_withheld: self.gen_withheld,
            occupancy_p: self.occupancy,
            render: self.render(),
            sampler: PackSizeSampler {
                base: self.pack_size_base,
                rate: self.pack_size_rate,
            },
            seed: self.seed,
        }
    }

    /// Network for images of the given size (taken from the dataset at train time).
    pub fn architecture(&self, height: usize, width: usize, channels: usize) -> Architecture {
        Architecture {
            height,
            width,
            channels,
            latent: LatentConfig {
                domain_dim: self.domain_dim,
                content_dim: self.content_dim,
            },
            kernel: self.kernel,
            encoder_channels: self.encoder_channels.clone(),
            encoder_strides: self.encoder_strides.clone(),
            encoder_hidden: self.encoder_hidden,
            decoder_channels: self.decoder_channels.clone(),
            disc_element: self.disc_element.clone(),
            disc_head: self.disc_head.clone(),
            vae_baseline: self.ablation == Ablation::Vae,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lambda_dc: if self.ablation == Ablation::None { self.lambda_dc } else { 0.0 },
            learning_rate: self.learning_rate,
            adam_epsilon: self.adam_epsilon,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            epochs: self.epochs,
            packs_per_epoch: self.packs_per_epoch,
            seed: self.seed,
            disable_dc_loss: self.ablation == Ablation::NoDc,
            vae_baseline: self.ablation == Ablation::Vae,
            closed_form_kl: self.closed_form_kl,
            pack_source: self.pack_source,
            log_wall_clock: self.log_wall_clock,
        }
    }
}

/// Splits config text into `(key, value)` pairs, rejecting malformed lines
/// and keys given twice.
pub fn parse_pairs(text: &str) -> Result<Vec<(&str, &str)>> {
    let mut pairs: Vec<(&str, &str)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if pairs.iter().any(|(p, _)| *p == k) {
            return Err(Error::Config(format!("line {}: key `{k}` given twice", n + 1)));
        }
        pairs.push((k, v));
    }
    Ok(pairs)
}

/// The key reference shown by `--help`.
pub fn key_reference() -> String {
    let defaults = RunConfig::default();
    let mut out = String::from("Config keys (file lines `key = value`, `#` comments):\n");
    for d in KEYS {
        let v = defaults.get(d.key).expect("table key");
        writeln!(out, "  {:<24} default {:<16} [{}] {}", d.key, v, d.provenance.label(), d.help)
            .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_generation_and_training() {
        let c = RunConfig::default();
        assert_eq!(c.generate(), GenerateConfig::default());
        assert_eq!(c.train(), TrainConfig::default());
        assert_eq!(c.architecture(32, 32, 3), Architecture::published(32, 32, 3));
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let c = RunConfig::parse("model.preset = compact\ntrain.learning_rate = 0.0003\nseed = 9\n").unwrap();
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse(&text).unwrap().to_text(), text);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn every_key_is_gettable_and_documented() {
        let c = RunConfig::default();
        for d in KEYS {
            let v = c.get(d.key).unwrap();
            let mut c2 = c.clone();
            c2.set(d.key, &v).unwrap();
            assert_eq!(c2, c, "{}", d.key);
        }
        let help = key_reference();
        for d in KEYS {
            assert!(help.contains(d.key));
        }
    }

    #[test]
    fn unknown_and_repeated_keys_rejected() {
        assert!(matches!(RunConfig::parse("train.lr = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed = x"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("train.ablation = maybe"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let c = RunConfig::parse("# hi\n\n   seed = 4   \n  # more\n").unwrap();
        assert_eq!(c.seed, 4);
    }

    #[test]
    fn size_must_divide_by_stride() {
        let err = RunConfig::parse("gen.image_size = 24").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("16"), "{err}");
        RunConfig::parse("gen.image_size = 16").unwrap();
    }

    #[test]
    fn preset_applies_before_explicit_widths() {
        let c = RunConfig::parse("model.decoder_channels = 8,8\nmodel.preset = compact").unwrap();
        assert_eq!(c.decoder_channels, vec![8, 8]);
        assert_eq!(c.encoder_channels, Architecture::compact(32, 32, 3).encoder_channels);
    }

    #[test]
    fn overrides_win() {
        let c = RunConfig::parse_with("seed = 1\ngen.packs = 10", &[("seed", "5")]).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.gen_packs, 10);
    }

    #[test]
    fn withheld_follows_pack_count_unless_set() {
        assert_eq!(RunConfig::parse("gen.packs = 8").unwrap().gen_withheld, 0);
        assert_eq!(RunConfig::parse("gen.packs = 320").unwrap().gen_withheld, 20);
        assert_eq!(RunConfig::parse("gen.packs = 320\ngen.withheld = 3").unwrap().gen_withheld, 3);
        assert_eq!(RunConfig::default().gen_withheld * WITHHELD_FRACTION, RunConfig::default().gen_packs);
    }

    #[test]
    fn ablations_map_to_training() {
        let c = RunConfig::parse("train.ablation = no-dc").unwrap();
        assert!(c.train().disable_dc_loss);
        assert_eq!(c.train().lambda_dc, 0.0);
        let c = RunConfig::parse("train.ablation = vae").unwrap();
        assert!(c.train().vae_baseline);
        assert!(c.architecture(32, 32, 1).vae_baseline);
    }
}
