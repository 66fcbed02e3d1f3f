//! Training objective and loop.
//!
//! Each step draws two packs from different training domains and minimises
//! `L = L_i + L_j + lambda * L^c`, where for one pack
//! `L_i = L^m + sum_k (L^r_k + L^o_k)` with single-sample KL estimates
//! `log q(z) - log p(z)` and unscaled squared reconstruction error. The
//! discriminator is then moved along `+grad L^c` from the same evaluation.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Array2, Array4, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::dc_loss::{dom_conf_backward, dom_conf_loss_with, draw_split, DiscriminatorParams, SplitAssignment, SplitPlan};
use crate::error::{Error, Result};
use crate::model::{
    append_coords, gaussian_log_prob_grad, images_to_tensor, join_latents, kl_to_standard, reparam_sample,
    standard_log_prob, Architecture, ContentCache, DecoderCache, DiagonalGaussian, DomainCache, GaussianBatch,
    ModelParams,
};
use crate::nn::{real, Real};
use crate::optim::{Adam, AdamConfig};
use crate::pack_data::{sample_pack, PackDataset, PackSizeSampler};
use crate::rng::{rng_for, Rng};

/// Where training packs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PackSource {
    /// Whole pool when the dataset stores one pack per domain (generated
    /// data), resampled otherwise.
    Auto,
    /// Every stored image of the domain, once.
    Pool,
    /// `4 + Poisson(8)` images drawn with replacement from the pool.
    Resample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_dc: f64,
    pub learning_rate: f64,
    pub adam_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    /// Steps (pack pairs) per epoch; 0 means half the number of training domains.
    pub packs_per_epoch: usize,
    pub seed: u64,
    pub disable_dc_loss: bool,
    pub vae_baseline: bool,
    /// Use the analytic KL instead of the single-sample estimate.
    pub closed_form_kl: bool,
    pub pack_source: PackSource,
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_dc: 100.0,
            learning_rate: 1e-4,
            adam_epsilon: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epochs: 50,
            packs_per_epoch: 0,
            seed: 0,
            disable_dc_loss: false,
            vae_baseline: false,
            closed_form_kl: false,
            pack_source: PackSource::Auto,
            log_wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dc >= 0.0 && self.lambda_dc.is_finite()) {
            return Err(Error::Config("lambda_dc must be a finite value >= 0".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be a finite value >= 0".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config("Adam decay rates must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    /// The domain-confusion term is off for the ablation and for the plain VAE.
    pub fn dc_enabled(&self) -> bool {
        !self.disable_dc_loss && !self.vae_baseline
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn steps_per_epoch(&self, n_train_domains: usize) -> usize {
        if self.packs_per_epoch > 0 {
            self.packs_per_epoch
        } else {
            n_train_domains.div_ceil(2).max(1)
        }
    }
}

/// Loss terms summed over both packs of a step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub domain_kl: f64,
    pub content_kl: f64,
    pub dc: f64,
    pub total: f64,
}

// ---------------------------------------------------------------------------
// One pack

/// Standard-normal noise for every reparametrised sample of one pack.
#[derive(Debug, Clone, PartialEq)]
pub struct PackNoise<T> {
    pub domain: Array1<T>,
    pub content: Array2<T>,
}

impl<T: Real> PackNoise<T> {
    /// Draws in double precision so every precision sees the same values.
    pub fn draw<R: rand::Rng + ?Sized>(domain_dim: usize, k: usize, content_dim: usize, rng: &mut R) -> Self {
        let mut normal = || -> T { real(StandardNormal.sample(rng)) };
        let domain = Array1::from_shape_fn(domain_dim, |_| normal());
        let content = Array2::from_shape_fn((k, content_dim), |_| normal());
        PackNoise { domain, content }
    }

    pub fn zeros(domain_dim: usize, k: usize, content_dim: usize) -> Self {
        PackNoise {
            domain: Array1::zeros(domain_dim),
            content: Array2::zeros((k, content_dim)),
        }
    }
}

/// Forward pass over one pack, holding what the backward pass needs.
pub struct PackPass<T> {
    pub recon: T,
    pub domain_kl: T,
    pub content_kl: T,
    /// Sampled domain code.
    pub m: Array1<T>,
    /// Sampled content codes, one row per image.
    pub o: Array2<T>,
    pub reconstruction: Array4<T>,
    domain: Option<(DiagonalGaussian<T>, DomainCache<T>)>,
    content: (GaussianBatch<T>, ContentCache<T>),
    decoder: DecoderCache<T>,
    residual: Array4<T>,
    noise: PackNoise<T>,
    closed_form: bool,
}

impl<T: Real> PackPass<T> {
    pub fn loss(&self) -> T {
        self.recon + self.domain_kl + self.content_kl
    }
}

/// KL term of one posterior sample and its direct gradients
/// `(value, d/d mean, d/d log_var, d/d sample)`.
fn kl_term<T: Real>(q: &DiagonalGaussian<T>, z: &Array1<T>, closed_form: bool) -> (T, Array1<T>, Array1<T>, Array1<T>) {
    if closed_form {
        let half: T = real(0.5);
        let value = kl_to_standard(q);
        let d_lv = q.log_variance.mapv(|lv| half * (lv.exp() - T::one()));
        (value, q.mean.clone(), d_lv, Array1::zeros(z.len()))
    } else {
        let lq = gaussian_log_prob_grad(q, z);
        let (lp, dlp) = standard_log_prob(z);
        (lq.value - lp, lq.d_mean, lq.d_log_variance, lq.d_x - dlp)
    }
}

/// Runs the encoders and decoder on a `[K, C, H, W]` pack with fixed noise.
pub fn pack_forward<T: Real>(
    model: &ModelParams<T>,
    x: &Array4<T>,
    noise: PackNoise<T>,
    closed_form: bool,
) -> Result<PackPass<T>> {
    let k = x.dim().0;
    if k == 0 {
        return Err(Error::Argument("empty pack".into()));
    }
    let (sd, sc) = (model.arch.domain_dim(), model.arch.content_dim());
    if noise.domain.len() != sd || noise.content.dim() != (k, sc) {
        return Err(Error::Shape("noise does not match latent sizes".into()));
    }
    let xc = append_coords(x);
    let (domain, m, domain_kl) = match &model.domain {
        Some(enc) => {
            let (q, cache) = enc.forward(&xc);
            let m = reparam_sample(&q, &noise.domain);
            let (kl, ..) = kl_term(&q, &m, closed_form);
            (Some((q, cache)), m, kl)
        }
        None => (None, Array1::zeros(0), T::zero()),
    };
    let (post, content_cache) = model.content.forward(&xc, &m);
    let mut o = Array2::zeros((k, sc));
    let mut content_kl = T::zero();
    for r in 0..k {
        let q = post.row(r);
        let sample = reparam_sample(&q, &noise.content.row(r).to_owned());
        content_kl += kl_term(&q, &sample, closed_form).0;
        o.row_mut(r).assign(&sample);
    }
    let (reconstruction, decoder) = model.decoder.forward(&join_latents(&m, &o));
    let residual = &reconstruction - x;
    let recon = residual.iter().map(|&r| r * r).sum();
    Ok(PackPass {
        recon,
        domain_kl,
        content_kl,
        m,
        o,
        reconstruction,
        domain,
        content: (post, content_cache),
        decoder,
        residual,
        noise,
        closed_form,
    })
}

/// Accumulates the gradient of `pass.loss() + <d_o_extra, o>` into `grad`.
pub fn pack_backward<T: Real>(
    model: &ModelParams<T>,
    pass: &PackPass<T>,
    d_o_extra: Option<&Array2<T>>,
    grad: &mut ModelParams<T>,
) {
    let two: T = real(2.0);
    let half: T = real(0.5);
    let sd = pass.m.len();
    let dy = pass.residual.mapv(|r| two * r);
    let dz = model.decoder.backward(&pass.decoder, dy, &mut grad.decoder);
    let mut d_m = dz.slice(s![.., ..sd]).sum_axis(Axis(0));
    let mut d_o = dz.slice(s![.., sd..]).to_owned();
    if let Some(extra) = d_o_extra {
        d_o += extra;
    }

    let (post, cache) = &pass.content;
    let k = d_o.nrows();
    let mut d_mean = Array2::zeros(post.mean.dim());
    let mut d_lv = Array2::zeros(post.mean.dim());
    for r in 0..k {
        let q = post.row(r);
        let sample = pass.o.row(r).to_owned();
        let (_, dm, dl, dx) = kl_term(&q, &sample, pass.closed_form);
        let g = &d_o.row(r) + &dx;
        let e = pass.noise.content.row(r);
        d_mean.row_mut(r).assign(&(&dm + &g));
        for c in 0..g.len() {
            d_lv[[r, c]] = dl[c] + g[c] * half * (q.log_variance[c] * half).exp() * e[c];
        }
    }
    d_m += &model.content.backward(cache, &d_mean, &d_lv, &mut grad.content);

    if let (Some(enc), Some((q, cache)), Some(genc)) = (&model.domain, &pass.domain, grad.domain.as_mut()) {
        let (_, dm, dl, dx) = kl_term(q, &pass.m, pass.closed_form);
        let g = d_m + dx;
        let d_mean = &dm + &g;
        let mut d_lv = dl;
        for c in 0..g.len() {
            d_lv[c] += g[c] * half * (q.log_variance[c] * half).exp() * pass.noise.domain[c];
        }
        enc.backward(cache, &d_mean, &d_lv, genc);
    }
}

// ---------------------------------------------------------------------------
// Two packs

/// Everything random in one step, fixed up front.
#[derive(Debug, Clone)]
pub struct StepInputs<T> {
    pub x_i: Array4<T>,
    pub x_j: Array4<T>,
    pub noise_i: PackNoise<T>,
    pub noise_j: PackNoise<T>,
    pub splits: Option<(SplitAssignment, SplitAssignment)>,
}

impl<T: Real> StepInputs<T> {
    /// Draws noise (and splits when the confusion term is on) for two packs.
    pub fn draw<R: rand::Rng + ?Sized>(
        arch: &Architecture,
        x_i: Array4<T>,
        x_j: Array4<T>,
        dc_enabled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (sd, sc) = (arch.domain_dim(), arch.content_dim());
        let noise_i = PackNoise::draw(sd, x_i.dim().0, sc, rng);
        let noise_j = PackNoise::draw(sd, x_j.dim().0, sc, rng);
        let splits = if dc_enabled {
            Some((draw_split(x_i.dim().0, rng)?, draw_split(x_j.dim().0, rng)?))
        } else {
            None
        };
        Ok(StepInputs {
            x_i,
            x_j,
            noise_i,
            noise_j,
            splits,
        })
    }
}

/// Loss and gradients of one step.
pub struct Objective<T> {
    pub loss: LossBreakdown,
    /// `dL / d(model parameters)`.
    pub model_grad: ModelParams<T>,
    /// `dL^c / d(discriminator parameters)`; absent when the term is off.
    pub disc_grad: Option<DiscriminatorParams<T>>,
    pub plan: Option<SplitPlan>,
    /// Sampled content codes of both packs.
    pub codes: (Array2<T>, Array2<T>),
}

pub fn objective<T: Real>(
    model: &ModelParams<T>,
    disc: &DiscriminatorParams<T>,
    inputs: &StepInputs<T>,
    lambda_dc: f64,
    closed_form_kl: bool,
) -> Result<Objective<T>> {
    let pass_i = pack_forward(model, &inputs.x_i, inputs.noise_i.clone(), closed_form_kl)?;
    let pass_j = pack_forward(model, &inputs.x_j, inputs.noise_j.clone(), closed_form_kl)?;
    let to64 = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let mut loss = LossBreakdown {
        recon: to64(pass_i.recon) + to64(pass_j.recon),
        domain_kl: to64(pass_i.domain_kl) + to64(pass_j.domain_kl),
        content_kl: to64(pass_i.content_kl) + to64(pass_j.content_kl),
        dc: 0.0,
        total: 0.0,
    };
    let mut model_grad = model.zeros_like();
    let mut disc_grad = None;
    let mut plan = None;
    let mut extra: (Option<Array2<T>>, Option<Array2<T>>) = (None, None);
    if let Some((si, sj)) = &inputs.splits {
        let fwd = dom_conf_loss_with(disc, &pass_i.o, &pass_j.o, si.clone(), sj.clone())?;
        let mut g = disc.zeros_like();
        let (d_i, d_j) = dom_conf_backward(disc, &fwd, &mut g);
        loss.dc = to64(fwd.value);
        plan = Some(fwd.plan);
        disc_grad = Some(g);
        if lambda_dc != 0.0 {
            let lambda: T = real(lambda_dc);
            extra = (Some(d_i * lambda), Some(d_j * lambda));
        }
    }
    loss.total = loss.recon + loss.domain_kl + loss.content_kl + lambda_dc * loss.dc;
    pack_backward(model, &pass_i, extra.0.as_ref(), &mut model_grad);
    pack_backward(model, &pass_j, extra.1.as_ref(), &mut model_grad);
    Ok(Objective {
        loss,
        model_grad,
        disc_grad,
        plan,
        codes: (pass_i.o, pass_j.o),
    })
}

// ---------------------------------------------------------------------------
// State and loop

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelParams<f32>,
    pub disc: DiscriminatorParams<f32>,
    pub opt_model: Adam<f32>,
    pub opt_disc: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
    pub rng: Rng,
}

impl TrainState {
    pub fn init(arch: &Architecture, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = Architecture {
            vae_baseline: cfg.vae_baseline,
            ..arch.clone()
        };
        let mut init = rng_for(cfg.seed, "init");
        let model = ModelParams::new(&arch, &mut init)?;
        let disc = DiscriminatorParams::new(&arch, &mut init);
        let opt_model = Adam::new(cfg.adam(), &model);
        let opt_disc = Adam::new(cfg.adam(), &disc);
        Ok(TrainState {
            model,
            disc,
            opt_model,
            opt_disc,
            epoch: 0,
            step: 0,
            rng: rng_for(cfg.seed, "train"),
        })
    }
}

/// One optimisation step on two packs; returns the loss before the update.
pub fn train_step(state: &mut TrainState, x_i: Array4<f32>, x_j: Array4<f32>, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let dc = cfg.dc_enabled();
    let min = if dc { 2 } else { 1 };
    if x_i.dim().0 < min || x_j.dim().0 < min {
        return Err(Error::Argument(format!("packs need at least {min} images")));
    }
    let inputs = StepInputs::draw(&state.model.arch, x_i, x_j, dc, &mut state.rng)?;
    let obj = objective(&state.model, &state.disc, &inputs, if dc { cfg.lambda_dc } else { 0.0 }, cfg.closed_form_kl)?;
    state.opt_model.update(&mut state.model, &obj.model_grad)?;
    if let Some(g) = obj.disc_grad {
        // ascend L^c
        let descent = g.map(|v| -v);
        state.opt_disc.update(&mut state.disc, &descent)?;
    }
    state.step += 1;
    Ok(obj.loss)
}

/// Chooses two distinct domains and builds their packs.
pub fn draw_pack_pair<R: rand::Rng + ?Sized>(
    dataset: &PackDataset,
    ids: &[&str],
    source: PackSource,
    rng: &mut R,
) -> Result<(Array4<f32>, Array4<f32>)> {
    if ids.len() < 2 {
        return Err(Error::Argument("training needs at least two domains".into()));
    }
    let i = rng.random_range(0..ids.len());
    let mut j = rng.random_range(0..ids.len() - 1);
    if j >= i {
        j += 1;
    }
    let source = resolve_source(dataset, source);
    let mut fetch = |id: &str| -> Result<Array4<f32>> {
        match source {
            PackSource::Resample => {
                let size = PackSizeSampler::default().sample(rng);
                images_to_tensor(&sample_pack(dataset, id, size, rng)?.images)
            }
            _ => images_to_tensor(&dataset.domains[id].images),
        }
    };
    let a = fetch(ids[i])?;
    let b = fetch(ids[j])?;
    Ok((a, b))
}

pub fn resolve_source(dataset: &PackDataset, source: PackSource) -> PackSource {
    match source {
        PackSource::Auto if dataset.meta.schema == crate::silhouettes::SCHEMA_NAME => PackSource::Pool,
        PackSource::Auto => PackSource::Resample,
        s => s,
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub recon: f64,
    pub domain_kl: f64,
    pub content_kl: f64,
    pub dc: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint-epoch-{epoch:04}.ckpt"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    pub steps: u64,
    pub last: Option<LossBreakdown>,
}

/// Trains from `state` up to `cfg.epochs`, writing a checkpoint after every
/// epoch (and one for the initial state when starting fresh) and appending a
/// record per step to the metrics log.
pub fn train(
    state: &mut TrainState,
    dataset: &PackDataset,
    cfg: &TrainConfig,
    config_text: &str,
    out_dir: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let fresh = state.epoch == 0 && state.step == 0;
    let file = if fresh {
        File::create(&metrics_path)
    } else {
        OpenOptions::new().append(true).create(true).open(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let mut checkpoints = Vec::new();
    let save = |state: &TrainState| -> Result<PathBuf> {
        let path = checkpoint_path(out_dir, state.epoch);
        checkpoint::save(&Checkpoint::from_state(state, cfg, config_text), &path).map_err(|e| Error::CheckpointWrite {
            epoch: state.epoch,
            step: state.step,
            path: path.clone(),
            source: Box::new(e),
        })?;
        Ok(path)
    };
    if fresh {
        checkpoints.push(save(state)?);
    }
    let ids = dataset.domain_ids();
    let steps = cfg.steps_per_epoch(ids.len());
    let started = Instant::now();
    let mut last = None;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        for _ in 0..steps {
            let (x_i, x_j) = draw_pack_pair(dataset, &ids, cfg.pack_source, &mut state.rng)?;
            let loss = train_step(state, x_i, x_j, cfg)?;
            if !loss.total.is_finite() {
                log::warn!("non-finite loss at step {}", state.step);
            }
            let record = MetricsRecord {
                step: state.step,
                epoch,
                recon: loss.recon,
                domain_kl: loss.domain_kl,
                content_kl: loss.content_kl,
                dc: loss.dc,
                total: loss.total,
                wall_clock_s: cfg.log_wall_clock.then(|| started.elapsed().as_secs_f64()),
            };
            let line = serde_json::to_string(&record).expect("metrics record");
            writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            if state.step % 100 == 0 {
                log::info!(
                    "step {} epoch {epoch}: total {:.2} recon {:.2} kl_m {:.3} kl_o {:.2} dc {:.4}",
                    state.step,
                    loss.total,
                    loss.recon,
                    loss.domain_kl,
                    loss.content_kl,
                    loss.dc
                );
            }
            last = Some(loss);
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        state.epoch = epoch;
        checkpoints.push(save(state)?);
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(TrainSummary {
        checkpoints,
        metrics: metrics_path,
        steps: state.step,
        last,
    })
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::model::LatentConfig;
    use rand::Rng;

    pub(crate) fn toy_arch() -> Architecture {
        Architecture {
            encoder_channels: vec![4, 4, 6, 6],
            encoder_hidden: 16,
            decoder_channels: vec![6, 6],
            disc_element: vec![8, 8],
            disc_head: vec![8, 4],
            latent: LatentConfig {
                domain_dim: 3,
                content_dim: 2,
            },
            ..Architecture::published(16, 16, 1)
        }
    }

    /// A toy state after two steps, so optimizer moments are populated.
    pub(crate) fn toy_state(seed: u64) -> (TrainState, TrainConfig) {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(&toy_arch(), &cfg).unwrap();
        let mut rng = rng_for(seed, "toy");
        for _ in 0..2 {
            let x = Array4::from_shape_fn((3, 1, 16, 16), |_| rng.random_range(0.0f32..1.0));
            train_step(&mut state, x.clone(), x, &cfg).unwrap();
        }
        (state, cfg)
    }
}
