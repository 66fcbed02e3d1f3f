//! Command implementations behind the `packvae` binary.
//!
//! Every command builds one [`RunConfig`]: defaults, then `--config FILE`,
//! then `--set KEY=VALUE` pairs, then the dedicated flags. The resolved config
//! text is embedded in every artifact (dataset manifest, checkpoints, grid
//! PNG text chunk, probe report header).

use std::ffi::OsString;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{self, EvalSplit, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{render_grid, run_probe_suite};
use crate::model::ModelParams;
use crate::nn::Parameterized;
use crate::pack_data::{load_dataset, load_image_dir, Image, PackDataset};
use crate::silhouettes::generate_to_disk;
use crate::training::{train, MetricsRecord, TrainState};

/// Metrics records averaged for the final training summary line.
pub const SUMMARY_WINDOW: usize = 100;

#[derive(Debug, Parser)]
#[command(
    name = "packvae",
    version,
    about = "Separate pack-level domain codes from image-level content codes",
    after_long_help = config::key_reference()
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Config file of `key = value` lines (see `--help` for every key).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output location: dataset dir for gen, run dir for train, grid PNG for
    /// fuse, report file for probe.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Any config key, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a silhouettes dataset to disk.
    Gen {
        /// Number of packs (`gen.packs`).
        #[arg(long)]
        packs: Option<usize>,
        /// Image side in pixels, divisible by 16 (`gen.image_size`).
        #[arg(long)]
        size: Option<usize>,
        /// Withheld shapes (`gen.withheld`).
        #[arg(long)]
        withheld: Option<usize>,
        /// 1 or 3 (`gen.channels`).
        #[arg(long)]
        channels: Option<usize>,
    },
    /// Train on the non-withheld domains of a dataset.
    Train {
        /// Dataset root (`data.dir`).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// `train.ablation`.
        #[arg(long, value_parser = ["none", "no-dc", "vae"])]
        ablation: Option<String>,
        /// `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint; its embedded config is the base and
        /// only flags and `--set` apply on top.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Fuse domain packs with a content pack into a grid image.
    Fuse {
        /// Trained model checkpoint.
        #[arg(long, value_name = "CHECKPOINT")]
        checkpoint: PathBuf,
        /// Image directory of one domain pack, repeatable. A directory with
        /// no images contributes each image subdirectory as a pack.
        #[arg(long = "domain", value_name = "DIR", required = true)]
        domain: Vec<PathBuf>,
        /// Image directory of the content pack.
        #[arg(long, value_name = "DIR")]
        content: PathBuf,
    },
    /// Fit linear probes on frozen codes and report them against guessing.
    Probe {
        /// Checkpoints as `NAME=PATH` or `PATH`.
        #[arg(required = true, value_name = "CHECKPOINT")]
        checkpoints: Vec<String>,
        /// Dataset root (`data.dir`).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// `probe.eval_split`.
        #[arg(long, value_parser = ["train", "withheld"])]
        eval_split: Option<String>,
        /// `probe.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print checkpoint metadata.
    Inspect {
        /// Checkpoint file.
        checkpoint: PathBuf,
    },
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

impl Cli {
    /// Flag overrides as config pairs, in application order.
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        for s in &self.global.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(seed) = self.global.seed {
            pairs.push(("seed".into(), seed.to_string()));
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        let out = self.global.out.as_deref().map(path_str);
        match &self.command {
            Command::Gen {
                packs,
                size,
                withheld,
                channels,
            } => {
                put("data.dir", out);
                put("gen.packs", packs.map(|v| v.to_string()));
                put("gen.image_size", size.map(|v| v.to_string()));
                put("gen.withheld", withheld.map(|v| v.to_string()));
                put("gen.channels", channels.map(|v| v.to_string()));
            }
            Command::Train {
                data, ablation, epochs, ..
            } => {
                put("train.out", out);
                put("data.dir", data.as_deref().map(path_str));
                put("train.ablation", ablation.clone());
                put("train.epochs", epochs.map(|v| v.to_string()));
            }
            Command::Probe {
                data,
                eval_split,
                epochs,
                ..
            } => {
                put("probe.out", out);
                put("data.dir", data.as_deref().map(path_str));
                put("probe.eval_split", eval_split.clone());
                put("probe.epochs", epochs.map(|v| v.to_string()));
            }
            Command::Fuse { .. } | Command::Inspect { .. } => {}
        }
        Ok(pairs)
    }

    /// Resolves the run config from `base` text (a file or a checkpoint's
    /// embedded config) plus the flag overrides.
    pub fn resolve(&self, base: &str) -> Result<RunConfig> {
        let overrides = self.overrides()?;
        let refs: Vec<(&str, &str)> = overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        RunConfig::parse_with(base, &refs)
    }

    fn config_file_text(&self) -> Result<String> {
        match &self.global.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e)),
            None => Ok(String::new()),
        }
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { .. } => cmd_gen(&cli.resolve(&cli.config_file_text()?)?),
        Command::Train { resume: Some(path), .. } => {
            let ckpt = checkpoint::load(path)?;
            let cfg = cli.resolve(&ckpt.header.config)?;
            cmd_train(&cfg, Some(ckpt))
        }
        Command::Train { resume: None, .. } => cmd_train(&cli.resolve(&cli.config_file_text()?)?, None),
        Command::Fuse {
            checkpoint,
            domain,
            content,
        } => {
            let cfg = cli.resolve(&cli.config_file_text()?)?;
            let out = cli.global.out.clone().unwrap_or_else(|| PathBuf::from("fusion.png"));
            cmd_fuse(&cfg, cli.global.config.is_some(), checkpoint, domain, content, &out)
        }
        Command::Probe { checkpoints, .. } => {
            let cfg = cli.resolve(&cli.config_file_text()?)?;
            let specs = checkpoints.iter().map(|s| parse_named(s)).collect::<Vec<_>>();
            cmd_probe(&cfg, &specs).map(|_| ())
        }
        Command::Inspect { checkpoint } => {
            println!("{}", cmd_inspect(checkpoint)?);
            Ok(())
        }
    }
}

fn parse_named(s: &str) -> (Option<String>, PathBuf) {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !name.contains(['/', '\\']) => (Some(name.to_string()), path.into()),
        _ => (None, s.into()),
    }
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let gen = cfg.generate();
    let summary = generate_to_disk(&gen, &cfg.data_dir, Some(cfg.to_text()))?;
    println!(
        "wrote {} packs ({} images, {} withheld domains) of {}x{}x{} to {}",
        summary.packs,
        summary.images,
        summary.withheld,
        gen.render.image_size,
        gen.render.image_size,
        gen.render.channels,
        cfg.data_dir.display()
    );
    Ok(())
}

fn training_split(cfg: &RunConfig) -> Result<PackDataset> {
    let dataset = load_dataset(&cfg.data_dir)?;
    let (train, _) = dataset.partition_withheld();
    if train.len() < 2 {
        return Err(Error::Argument(format!(
            "{} has {} non-withheld domains; training needs at least 2",
            cfg.data_dir.display(),
            train.len()
        )));
    }
    Ok(train)
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<Checkpoint>) -> Result<()> {
    let data = training_split(cfg)?;
    let meta = &data.meta;
    let arch = cfg.architecture(meta.height, meta.width, meta.channels);
    let tc = cfg.train();
    let mut state = match resume {
        Some(ckpt) => {
            if ckpt.state.model.arch != arch {
                return Err(Error::Format("checkpoint architecture differs from the configured one".into()));
            }
            ckpt.state
        }
        None => TrainState::init(&arch, &tc)?,
    };
    let text = cfg.to_text();
    std::fs::create_dir_all(&cfg.train_out).map_err(|e| Error::io(&cfg.train_out, e))?;
    let config_path = cfg.train_out.join("config.txt");
    std::fs::write(&config_path, &text).map_err(|e| Error::io(&config_path, e))?;
    log::info!(
        "training on {} domains, {} steps per epoch, epochs {}..{}",
        data.len(),
        tc.steps_per_epoch(data.len()),
        state.epoch,
        tc.epochs
    );
    let summary = train(&mut state, &data, &tc, &text, &cfg.train_out)?;
    let (n, mean) = last_window_mean(&summary.metrics, SUMMARY_WINDOW)?;
    println!(
        "trained to epoch {} ({} steps); mean total loss over the last {n} steps {mean:.3}; {} checkpoints in {}",
        state.epoch,
        summary.steps,
        summary.checkpoints.len(),
        cfg.train_out.display()
    );
    Ok(())
}

/// Mean `total` of the last `window` records of a metrics log.
pub fn last_window_mean(path: &Path, window: usize) -> Result<(usize, f64)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut totals = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: MetricsRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        totals.push(rec.total);
    }
    let tail = &totals[totals.len().saturating_sub(window)..];
    let mean = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    Ok((tail.len(), mean))
}

fn load_packs(dir: &Path) -> Result<Vec<Vec<Image>>> {
    let images = load_image_dir(dir)?;
    if !images.is_empty() {
        return Ok(vec![images]);
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut packs = Vec::new();
    for d in subdirs {
        let images = load_image_dir(&d)?;
        if !images.is_empty() {
            packs.push(images);
        }
    }
    if packs.is_empty() {
        return Err(Error::Argument(format!("no images under {}", dir.display())));
    }
    Ok(packs)
}

fn check_pack_dims(packs: &[Vec<Image>], model: &ModelParams<f32>) -> Result<()> {
    let a = &model.arch;
    for img in packs.iter().flatten() {
        if img.dims() != (a.height, a.width, a.channels) {
            let (h, w, c) = img.dims();
            return Err(Error::Format(format!(
                "image is {h}x{w}x{c} but the checkpoint expects {}x{}x{}",
                a.height, a.width, a.channels
            )));
        }
    }
    Ok(())
}

pub fn cmd_fuse(
    cfg: &RunConfig,
    check_config: bool,
    checkpoint_path: &Path,
    domain_dirs: &[PathBuf],
    content_dir: &Path,
    out: &Path,
) -> Result<()> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let model = ckpt.state.model;
    if check_config {
        let want = cfg.architecture(model.arch.height, model.arch.width, model.arch.channels);
        if want != model.arch {
            return Err(Error::Format(format!(
                "{} was trained with a different architecture than the given config",
                checkpoint_path.display()
            )));
        }
    }
    if model.domain.is_none() {
        return Err(Error::Format("a plain VAE checkpoint has no domain code to fuse".into()));
    }
    let mut domain_packs = Vec::new();
    for d in domain_dirs {
        domain_packs.extend(load_packs(d)?);
    }
    let content = load_image_dir(content_dir)?;
    if content.is_empty() {
        return Err(Error::Argument(format!("no images in {}", content_dir.display())));
    }
    check_pack_dims(&domain_packs, &model)?;
    check_pack_dims(std::slice::from_ref(&content), &model)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = format!("checkpoint = {}\n{}", checkpoint_path.display(), cfg.to_text());
    let (img, layout) = render_grid(&model, &domain_packs, &content, cfg.domain_columns, Some(&text), out)?;
    println!(
        "wrote {}x{} grid ({} domain rows, {} content columns) to {}",
        img.width,
        img.height,
        layout.domain_rows,
        layout.content_columns,
        out.display()
    );
    Ok(())
}

fn default_name(ckpt: &Checkpoint) -> &'static str {
    if ckpt.header.train.vae_baseline {
        "vae"
    } else if ckpt.header.train.disable_dc_loss {
        "no-dc"
    } else {
        "full"
    }
}

/// Runs the probe suite and writes the report; returns its text.
pub fn cmd_probe(cfg: &RunConfig, checkpoints: &[(Option<String>, PathBuf)]) -> Result<String> {
    let dataset = load_dataset(&cfg.data_dir)?;
    let (train_split, withheld) = dataset.partition_withheld();
    let eval = match cfg.eval_split {
        EvalSplit::Withheld => withheld,
        EvalSplit::Train => train_split.clone(),
    };
    if eval.is_empty() || train_split.is_empty() {
        return Err(Error::Schema(format!(
            "{}: probing needs nonempty training and evaluation splits",
            cfg.data_dir.display()
        )));
    }
    let mut models: Vec<(String, ModelParams<f32>)> = Vec::new();
    for (name, path) in checkpoints {
        let ckpt = checkpoint::load(path)?;
        let meta = &dataset.meta;
        let a = &ckpt.state.model.arch;
        if (a.height, a.width, a.channels) != (meta.height, meta.width, meta.channels) {
            return Err(Error::Schema(format!(
                "{} expects {}x{}x{} images, dataset has {}x{}x{}",
                path.display(),
                a.height,
                a.width,
                a.channels,
                meta.height,
                meta.width,
                meta.channels
            )));
        }
        let mut name = name.clone().unwrap_or_else(|| default_name(&ckpt).to_string());
        if models.iter().any(|(n, _)| *n == name) {
            name = format!("{name}-{}", models.len());
        }
        models.push((name, ckpt.state.model));
    }
    let table = run_probe_suite(&models, &train_split, &eval, cfg.probe_epochs, cfg.seed)?;
    let n_eval = table.rows.first().map_or(0, |r| r.n_eval);
    log::info!(
        "probes fitted on {} images, scored on {n_eval} images ({} split)",
        train_split.num_images(),
        match cfg.eval_split {
            EvalSplit::Withheld => "withheld",
            EvalSplit::Train => "train",
        }
    );
    let mut text = String::new();
    for ((_, path), (name, _)) in checkpoints.iter().zip(&models) {
        text.push_str(&format!("# checkpoint {name} = {}\n", path.display()));
    }
    for line in cfg.to_text().lines() {
        text.push_str("# config ");
        text.push_str(line);
        text.push('\n');
    }
    text.push_str(&table.to_tsv());
    if let Some(parent) = cfg.probe_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&cfg.probe_out, &text).map_err(|e| Error::io(&cfg.probe_out, e))?;
    print!("{}", table.to_tsv());
    Ok(text)
}

/// Human-readable checkpoint metadata.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let ckpt = checkpoint::load(path)?;
    let h = &ckpt.header;
    let model_params: usize = ckpt.state.model.params().iter().map(|p| p.data.len()).sum();
    let disc_params: usize = ckpt.state.disc.params().iter().map(|p| p.data.len()).sum();
    let mut out = String::new();
    out.push_str(&format!("checkpoint {}\n", path.display()));
    out.push_str(&format!("format version {}\n", checkpoint::VERSION));
    out.push_str(&format!("epoch {} step {}\n", h.epoch, h.step));
    out.push_str(&format!(
        "mode {}{}\n",
        default_name(&ckpt),
        if h.train.dc_enabled() {
            format!(" (lambda_dc {})", h.train.lambda_dc)
        } else {
            String::new()
        }
    ));
    out.push_str(&format!("threading {}\n", h.threading));
    out.push_str(&format!("model parameters {model_params}\ndiscriminator parameters {disc_params}\n"));
    out.push_str(&format!(
        "architecture {}\n",
        serde_json::to_string(&h.architecture).expect("architecture json")
    ));
    out.push_str("config:\n");
    for line in h.config.lines() {
        out.push_str("  ");
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("packvae").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_become_config_keys() {
        let cli = parse(&["gen", "--packs", "8", "--size", "16", "--out", "d", "--seed", "3"]);
        let cfg = cli.resolve("").unwrap();
        assert_eq!((cfg.gen_packs, cfg.image_size, cfg.seed), (8, 16, 3));
        assert_eq!(cfg.data_dir, PathBuf::from("d"));
        assert_eq!(cfg.gen_withheld, 0);
    }

    #[test]
    fn flags_override_file_and_set() {
        let cli = parse(&["train", "--set", "train.epochs=7", "--ablation", "vae", "--epochs", "2"]);
        let cfg = cli.resolve("train.epochs = 9\ntrain.ablation = no-dc\n").unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.ablation, Ablation::Vae);
    }

    #[test]
    fn bad_size_is_config_error() {
        let cli = parse(&["gen", "--size", "40"]);
        let err = cli.resolve("").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("multiple of 16"), "{err}");
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["packvae", "nonsense"]), 1);
        assert_eq!(run(["packvae", "train", "--ablation", "half"]), 1);
        assert_eq!(run(["packvae", "--help"]), 0);
    }

    #[test]
    fn help_lists_every_key() {
        let help = <Cli as clap::CommandFactory>::command().render_long_help().to_string();
        for d in config::KEYS {
            assert!(help.contains(d.key), "{}", d.key);
        }
        assert!(help.contains("published setting"));
        assert!(help.contains("implementation choice"));
    }

    #[test]
    fn named_checkpoints() {
        assert_eq!(parse_named("full=a/b.ckpt"), (Some("full".into()), PathBuf::from("a/b.ckpt")));
        assert_eq!(parse_named("a/x=y.ckpt"), (None, PathBuf::from("a/x=y.ckpt")));
    }

    #[test]
    fn missing_dataset_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse_with("", &[("data.dir", dir.path().join("none").to_str().unwrap())]).unwrap();
        let err = cmd_train(&cfg, None).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }
}
