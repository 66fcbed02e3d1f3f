//! The three learned densities: the pack-level domain posterior, the
//! per-image content posterior conditioned on a domain code, and the
//! spatial-broadcast generator whose output is the image mean.

use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    prefix_muts, prefix_refs, real, relu_backward, relu_inplace, ConvStack, ConvStackCache, Dense, Init, ParamMut,
    ParamRef, Parameterized, Real,
};
use crate::pack_data::Image;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub domain_dim: usize,
    pub content_dim: usize,
}

/// Network shapes. Defaults follow the published architecture; smaller
/// presets keep the same topology with narrower layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub latent: LatentConfig,
    pub kernel: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub encoder_hidden: usize,
    pub decoder_channels: Vec<usize>,
    pub disc_element: Vec<usize>,
    pub disc_head: Vec<usize>,
    /// Plain VAE comparator: no domain path, unconditioned content encoder.
    pub vae_baseline: bool,
}

impl Architecture {
    pub fn published(height: usize, width: usize, channels: usize) -> Self {
        Architecture {
            height,
            width,
            channels,
            latent: LatentConfig {
                domain_dim: 16,
                content_dim: 16,
            },
            kernel: 4,
            encoder_channels: vec![64, 64, 128, 128],
            encoder_strides: vec![1, 1, 4, 4],
            encoder_hidden: 512,
            decoder_channels: vec![128, 128, 128, 64, 64],
            disc_element: vec![64, 128],
            disc_head: vec![128, 64, 32],
            vae_baseline: false,
        }
    }

    /// Narrow preset for quick CPU runs.
    pub fn compact(height: usize, width: usize, channels: usize) -> Self {
        Architecture {
            encoder_channels: vec![16, 16, 32, 32],
            encoder_hidden: 128,
            decoder_channels: vec![16, 16, 16, 16, 16],
            ..Architecture::published(height, width, channels)
        }
    }

    pub fn domain_dim(&self) -> usize {
        if self.vae_baseline {
            0
        } else {
            self.latent.domain_dim
        }
    }

    pub fn content_dim(&self) -> usize {
        self.latent.content_dim
    }

    pub fn reduction(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    /// Flattened width of one image's conv features.
    pub fn encoder_features(&self) -> usize {
        let r = self.reduction();
        self.encoder_channels.last().copied().unwrap_or(self.channels + 2) * (self.height / r) * (self.width / r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Argument("image dimensions must be positive".into()));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.len() != self.encoder_strides.len() {
            return Err(Error::Argument("encoder channels and strides must have equal nonzero length".into()));
        }
        let r = self.reduction();
        if self.height % r != 0 || self.width % r != 0 {
            return Err(Error::Argument(format!(
                "image size {}x{} must be divisible by {r}",
                self.height, self.width
            )));
        }
        if self.latent.content_dim == 0 {
            return Err(Error::Argument("content code size must be at least 1".into()));
        }
        if self.latent.domain_dim == 0 && !self.vae_baseline {
            return Err(Error::Argument("domain code size must be at least 1".into()));
        }
        if self.kernel == 0 || self.decoder_channels.is_empty() || self.disc_element.is_empty() {
            return Err(Error::Argument("empty layer specification".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gaussians

/// Diagonal Gaussian parametrised by mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian<T> {
    pub mean: Array1<T>,
    pub log_variance: Array1<T>,
}

impl<T: Real> DiagonalGaussian<T> {
    pub fn new(mean: Array1<T>, log_variance: Array1<T>) -> Result<Self> {
        if mean.len() != log_variance.len() {
            return Err(Error::Shape("mean and log-variance lengths differ".into()));
        }
        Ok(DiagonalGaussian { mean, log_variance })
    }

    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian {
            mean: Array1::zeros(dim),
            log_variance: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// A batch of diagonal Gaussians, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBatch<T> {
    pub mean: Array2<T>,
    pub log_variance: Array2<T>,
}

impl<T: Real> GaussianBatch<T> {
    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    pub fn row(&self, k: usize) -> DiagonalGaussian<T> {
        DiagonalGaussian {
            mean: self.mean.row(k).to_owned(),
            log_variance: self.log_variance.row(k).to_owned(),
        }
    }
}

/// `mean + exp(log_variance / 2) * noise`
pub fn reparam_sample<T: Real>(g: &DiagonalGaussian<T>, noise: &Array1<T>) -> Array1<T> {
    assert_eq!(noise.len(), g.dim(), "noise length");
    let half: T = real(0.5);
    let mut out = g.mean.clone();
    ndarray::Zip::from(&mut out)
        .and(&g.log_variance)
        .and(noise)
        .for_each(|o, &lv, &e| *o += (lv * half).exp() * e);
    out
}

pub fn gaussian_log_prob<T: Real>(g: &DiagonalGaussian<T>, x: &Array1<T>) -> T {
    gaussian_log_prob_grad(g, x).value
}

/// Log-density and its partial derivatives.
#[derive(Debug, Clone)]
pub struct LogProbGrad<T> {
    pub value: T,
    pub d_mean: Array1<T>,
    pub d_log_variance: Array1<T>,
    pub d_x: Array1<T>,
}

pub fn gaussian_log_prob_grad<T: Real>(g: &DiagonalGaussian<T>, x: &Array1<T>) -> LogProbGrad<T> {
    assert_eq!(x.len(), g.dim(), "log_prob dimension");
    let half: T = real(0.5);
    let ln2pi: T = real(LN_2PI);
    let d = g.dim();
    let mut value = T::zero();
    let mut d_mean = Array1::zeros(d);
    let mut d_log_variance = Array1::zeros(d);
    let mut d_x = Array1::zeros(d);
    for i in 0..d {
        let lv = g.log_variance[i];
        let inv_var = (-lv).exp();
        let r = x[i] - g.mean[i];
        value += -half * ln2pi - half * lv - half * r * r * inv_var;
        d_mean[i] = r * inv_var;
        d_x[i] = -r * inv_var;
        d_log_variance[i] = -half + half * r * r * inv_var;
    }
    LogProbGrad {
        value,
        d_mean,
        d_log_variance,
        d_x,
    }
}

/// Log-density of the standard normal prior and its gradient (`-x`).
pub fn standard_log_prob<T: Real>(x: &Array1<T>) -> (T, Array1<T>) {
    let half: T = real(0.5);
    let ln2pi: T = real(LN_2PI);
    let value = x.iter().map(|&v| -half * ln2pi - half * v * v).sum();
    (value, x.mapv(|v| -v))
}

/// Closed-form `KL(g || N(0, I))`.
pub fn kl_to_standard<T: Real>(g: &DiagonalGaussian<T>) -> T {
    let half: T = real(0.5);
    g.mean
        .iter()
        .zip(&g.log_variance)
        .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
        .sum()
}

// ---------------------------------------------------------------------------
// Tensors

pub fn coordinate<T: Real>(i: usize, n: usize) -> T {
    if n <= 1 {
        T::zero()
    } else {
        real(-1.0 + 2.0 * i as f64 / (n - 1) as f64)
    }
}

/// Appends row and column coordinate channels (in `[-1, 1]`) to a
/// `[K, C, H, W]` block, giving `[K, C + 2, H, W]`.
pub fn append_coords<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (k, c, h, w) = x.dim();
    let mut out = Array4::zeros((k, c + 2, h, w));
    out.slice_mut(s![.., ..c, .., ..]).assign(x);
    for b in 0..k {
        for y in 0..h {
            let row: T = coordinate(y, h);
            for xx in 0..w {
                out[[b, c, y, xx]] = row;
                out[[b, c + 1, y, xx]] = coordinate(xx, w);
            }
        }
    }
    out
}

/// Stacks `H x W x C` images into a `[K, C, H, W]` block of `[0, 1]` values.
pub fn images_to_tensor<T: Real>(images: &[Image]) -> Result<Array4<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("empty image list".into()))?;
    let (h, w, c) = first.dims();
    let mut out = Array4::zeros((images.len(), c, h, w));
    let scale: T = real(1.0 / 255.0);
    for (k, img) in images.iter().enumerate() {
        if img.dims() != (h, w, c) {
            return Err(Error::Shape("images differ in dimensions".into()));
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[k, ch, y, x]] = T::from_u8(img.data[(y * w + x) * c + ch]).expect("u8") * scale;
                }
            }
        }
    }
    Ok(out)
}

/// Converts one `[C, H, W]` slice of a block back to an 8-bit image (clamped).
pub fn tensor_to_image<T: Real>(x: &Array4<T>, k: usize) -> Image {
    let (_, c, h, w) = x.dim();
    let mut values = vec![0f32; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                values[(y * w + xx) * c + ch] = x[[k, ch, y, xx]].to_f32().unwrap_or(0.0);
            }
        }
    }
    Image::from_unit(h, w, c, &values).expect("tensor image size")
}

fn flatten4<T: Real>(x: Array4<T>) -> Array2<T> {
    let (k, c, h, w) = x.dim();
    x.into_shape_with_order((k, c * h * w)).expect("contiguous features")
}

// ---------------------------------------------------------------------------
// Encoders

/// Mean-pooled set encoder: shared conv stack per image, average over the
/// pack, then a dense head producing one Gaussian for the whole pack.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainEncoder<T> {
    pub conv: ConvStack<T>,
    pub hidden: Dense<T>,
    pub mean: Dense<T>,
    pub log_var: Dense<T>,
}

pub struct DomainCache<T> {
    conv: ConvStackCache<T>,
    feature_dims: [usize; 4],
    pooled: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Real> DomainEncoder<T> {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let feats = arch.encoder_features();
        DomainEncoder {
            conv: ConvStack::new(
                arch.channels + 2,
                &arch.encoder_channels,
                &arch.encoder_strides,
                arch.kernel,
                true,
                rng,
            ),
            hidden: Dense::new(feats, arch.encoder_hidden, Init::Relu, rng),
            mean: Dense::new(arch.encoder_hidden, arch.latent.domain_dim, Init::Linear, rng),
            log_var: Dense::new(arch.encoder_hidden, arch.latent.domain_dim, Init::Linear, rng),
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> DomainEncoder<U> {
        DomainEncoder {
            conv: self.conv.map(&f),
            hidden: self.hidden.map(&f),
            mean: self.mean.map(&f),
            log_var: self.log_var.map(&f),
        }
    }

    /// `x`: pack with coordinate channels, `[K, C + 2, H, W]`.
    pub fn forward(&self, x: &Array4<T>) -> (DiagonalGaussian<T>, DomainCache<T>) {
        let (feats, conv) = self.conv.forward(x);
        let feature_dims = {
            let d = feats.dim();
            [d.0, d.1, d.2, d.3]
        };
        let flat = flatten4(feats);
        let pooled = flat.mean_axis(Axis(0)).expect("nonempty pack").insert_axis(Axis(0));
        let mut hidden = self.hidden.forward(&pooled);
        relu_inplace(&mut hidden);
        let mean = self.mean.forward(&hidden).row(0).to_owned();
        let log_variance = self.log_var.forward(&hidden).row(0).to_owned();
        (
            DiagonalGaussian { mean, log_variance },
            DomainCache {
                conv,
                feature_dims,
                pooled,
                hidden,
            },
        )
    }

    pub fn backward(&self, cache: &DomainCache<T>, d_mean: &Array1<T>, d_log_var: &Array1<T>, grad: &mut DomainEncoder<T>) {
        let dm = d_mean.view().insert_axis(Axis(0)).to_owned();
        let dl = d_log_var.view().insert_axis(Axis(0)).to_owned();
        let mut dh = self.mean.backward(&cache.hidden, &dm, &mut grad.mean);
        dh += &self.log_var.backward(&cache.hidden, &dl, &mut grad.log_var);
        relu_backward(&cache.hidden, &mut dh);
        let dpooled = self.hidden.backward(&cache.pooled, &dh, &mut grad.hidden);
        let [k, c, h, w] = cache.feature_dims;
        let scale: T = real(1.0 / k as f64);
        let row = dpooled.row(0).mapv(|v| v * scale);
        let dflat = row.broadcast((k, c * h * w)).expect("broadcast").to_owned();
        let dfeats = dflat.into_shape_with_order((k, c, h, w)).expect("feature shape");
        self.conv.backward(&cache.conv, dfeats, &mut grad.conv);
    }
}

impl<T: Real> Parameterized<T> for DomainEncoder<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = prefix_refs("conv", self.conv.params());
        v.extend(prefix_refs("hidden", self.hidden.params()));
        v.extend(prefix_refs("mean", self.mean.params()));
        v.extend(prefix_refs("log_var", self.log_var.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = prefix_muts("conv", self.conv.params_mut());
        v.extend(prefix_muts("hidden", self.hidden.params_mut()));
        v.extend(prefix_muts("mean", self.mean.params_mut()));
        v.extend(prefix_muts("log_var", self.log_var.params_mut()));
        v
    }
}

/// Per-image encoder whose dense head also sees the pack's domain code.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentEncoder<T> {
    pub conv: ConvStack<T>,
    pub hidden: Dense<T>,
    pub mean: Dense<T>,
    pub log_var: Dense<T>,
}

pub struct ContentCache<T> {
    conv: ConvStackCache<T>,
    feature_dims: [usize; 4],
    joined: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Real> ContentEncoder<T> {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let inputs = arch.encoder_features() + arch.domain_dim();
        ContentEncoder {
            conv: ConvStack::new(
                arch.channels + 2,
                &arch.encoder_channels,
                &arch.encoder_strides,
                arch.kernel,
                true,
                rng,
            ),
            hidden: Dense::new(inputs, arch.encoder_hidden, Init::Relu, rng),
            mean: Dense::new(arch.encoder_hidden, arch.latent.content_dim, Init::Linear, rng),
            log_var: Dense::new(arch.encoder_hidden, arch.latent.content_dim, Init::Linear, rng),
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> ContentEncoder<U> {
        ContentEncoder {
            conv: self.conv.map(&f),
            hidden: self.hidden.map(&f),
            mean: self.mean.map(&f),
            log_var: self.log_var.map(&f),
        }
    }

    /// `x`: `[K, C + 2, H, W]`; `m`: the domain code shared by all K images
    /// (empty for the plain VAE).
    pub fn forward(&self, x: &Array4<T>, m: &Array1<T>) -> (GaussianBatch<T>, ContentCache<T>) {
        let (feats, conv) = self.conv.forward(x);
        let feature_dims = {
            let d = feats.dim();
            [d.0, d.1, d.2, d.3]
        };
        let flat = flatten4(feats);
        let (k, f) = flat.dim();
        let mut joined = Array2::zeros((k, f + m.len()));
        joined.slice_mut(s![.., ..f]).assign(&flat);
        joined.slice_mut(s![.., f..]).assign(&m.broadcast((k, m.len())).expect("broadcast"));
        let mut hidden = self.hidden.forward(&joined);
        relu_inplace(&mut hidden);
        let mean = self.mean.forward(&hidden);
        let log_variance = self.log_var.forward(&hidden);
        (
            GaussianBatch { mean, log_variance },
            ContentCache {
                conv,
                feature_dims,
                joined,
                hidden,
            },
        )
    }

    /// Returns the gradient with respect to the shared domain code.
    pub fn backward(
        &self,
        cache: &ContentCache<T>,
        d_mean: &Array2<T>,
        d_log_var: &Array2<T>,
        grad: &mut ContentEncoder<T>,
    ) -> Array1<T> {
        let mut dh = self.mean.backward(&cache.hidden, d_mean, &mut grad.mean);
        dh += &self.log_var.backward(&cache.hidden, d_log_var, &mut grad.log_var);
        relu_backward(&cache.hidden, &mut dh);
        let djoined = self.hidden.backward(&cache.joined, &dh, &mut grad.hidden);
        let [k, c, h, w] = cache.feature_dims;
        let f = c * h * w;
        let d_m = djoined.slice(s![.., f..]).sum_axis(Axis(0));
        let dfeats = djoined
            .slice(s![.., ..f])
            .to_owned()
            .into_shape_with_order((k, c, h, w))
            .expect("feature shape");
        self.conv.backward(&cache.conv, dfeats, &mut grad.conv);
        d_m
    }
}

impl<T: Real> Parameterized<T> for ContentEncoder<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = prefix_refs("conv", self.conv.params());
        v.extend(prefix_refs("hidden", self.hidden.params()));
        v.extend(prefix_refs("mean", self.mean.params()));
        v.extend(prefix_refs("log_var", self.log_var.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = prefix_muts("conv", self.conv.params_mut());
        v.extend(prefix_muts("hidden", self.hidden.params_mut()));
        v.extend(prefix_muts("mean", self.mean.params_mut()));
        v.extend(prefix_muts("log_var", self.log_var.params_mut()));
        v
    }
}

// ---------------------------------------------------------------------------
// Decoder

/// Spatial-broadcast generator: the latent vector is tiled over the image
/// plane, coordinate channels are appended, and stride-1 convolutions
/// produce the image mean. The last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub conv: ConvStack<T>,
    pub height: usize,
    pub width: usize,
}

pub struct DecoderCache<T> {
    conv: ConvStackCache<T>,
    latent: usize,
}

impl<T: Real> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut channels = arch.decoder_channels.clone();
        channels.push(arch.channels);
        let strides = vec![1; channels.len()];
        Decoder {
            conv: ConvStack::new(
                arch.domain_dim() + arch.content_dim() + 2,
                &channels,
                &strides,
                arch.kernel,
                false,
                rng,
            ),
            height: arch.height,
            width: arch.width,
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Decoder<U> {
        Decoder {
            conv: self.conv.map(&f),
            height: self.height,
            width: self.width,
        }
    }

    /// Tiles `[K, S]` latents into `[K, S + 2, H, W]` with coordinates.
    pub fn broadcast_input(&self, z: &Array2<T>) -> Array4<T> {
        let (k, s) = z.dim();
        let (h, w) = (self.height, self.width);
        let mut input = Array4::zeros((k, s + 2, h, w));
        for b in 0..k {
            for ch in 0..s {
                input.slice_mut(s![b, ch, .., ..]).fill(z[[b, ch]]);
            }
            for y in 0..h {
                let row: T = coordinate(y, h);
                for x in 0..w {
                    input[[b, s, y, x]] = row;
                    input[[b, s + 1, y, x]] = coordinate(x, w);
                }
            }
        }
        input
    }

    /// `z`: `[K, S_D + S_C]` -> image means `[K, C, H, W]`.
    pub fn forward(&self, z: &Array2<T>) -> (Array4<T>, DecoderCache<T>) {
        let input = self.broadcast_input(z);
        let (out, conv) = self.conv.forward(&input);
        (out, DecoderCache { conv, latent: z.ncols() })
    }

    pub fn backward(&self, cache: &DecoderCache<T>, dy: Array4<T>, grad: &mut Decoder<T>) -> Array2<T> {
        let dinput = self.conv.backward(&cache.conv, dy, &mut grad.conv);
        let k = dinput.dim().0;
        let mut dz = Array2::zeros((k, cache.latent));
        for b in 0..k {
            for ch in 0..cache.latent {
                dz[[b, ch]] = dinput.slice(s![b, ch, .., ..]).sum();
            }
        }
        dz
    }
}

impl<T: Real> Parameterized<T> for Decoder<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        self.conv.params()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        self.conv.params_mut()
    }
}

// ---------------------------------------------------------------------------
// Full model

/// Generator, domain encoder and content encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    pub domain: Option<DomainEncoder<T>>,
    pub content: ContentEncoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let domain = (!arch.vae_baseline).then(|| DomainEncoder::new(arch, rng));
        let content = ContentEncoder::new(arch, rng);
        let decoder = Decoder::new(arch, rng);
        Ok(ModelParams {
            arch: arch.clone(),
            domain,
            content,
            decoder,
        })
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            domain: self.domain.as_ref().map(|d| d.map(&f)),
            content: self.content.map(&f),
            decoder: self.decoder.map(&f),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| T::zero())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        self.map(|v| U::from(v).expect("cast"))
    }

    fn check_block(&self, x: &Array4<T>) -> Result<()> {
        let (k, c, h, w) = x.dim();
        if k == 0 {
            return Err(Error::Argument("empty pack".into()));
        }
        if (c, h, w) != (self.arch.channels, self.arch.height, self.arch.width) {
            return Err(Error::Shape(format!(
                "images are {h}x{w}x{c}, model expects {}x{}x{}",
                self.arch.height, self.arch.width, self.arch.channels
            )));
        }
        Ok(())
    }

    /// Domain posterior of a pack given as a `[K, C, H, W]` block. The plain
    /// VAE has no domain path and returns a zero-dimensional Gaussian.
    pub fn encode_domain(&self, images: &Array4<T>) -> Result<DiagonalGaussian<T>> {
        self.check_block(images)?;
        Ok(match &self.domain {
            Some(enc) => enc.forward(&append_coords(images)).0,
            None => DiagonalGaussian::standard(0),
        })
    }

    pub fn encode_domain_pack(&self, images: &[Image]) -> Result<DiagonalGaussian<T>> {
        self.encode_domain(&images_to_tensor(images)?)
    }

    /// Content posteriors of every image, all conditioned on `m`.
    pub fn encode_content(&self, images: &Array4<T>, m: &Array1<T>) -> Result<GaussianBatch<T>> {
        self.check_block(images)?;
        if m.len() != self.arch.domain_dim() {
            return Err(Error::Shape(format!(
                "domain code has {} entries, expected {}",
                m.len(),
                self.arch.domain_dim()
            )));
        }
        Ok(self.content.forward(&append_coords(images), m).0)
    }

    /// Image means for domain code `m` paired with each row of `o`.
    pub fn decode(&self, m: &Array1<T>, o: &Array2<T>) -> Result<Array4<T>> {
        if m.len() != self.arch.domain_dim() || o.ncols() != self.arch.content_dim() {
            return Err(Error::Shape(format!(
                "latents of size ({}, {}), expected ({}, {})",
                m.len(),
                o.ncols(),
                self.arch.domain_dim(),
                self.arch.content_dim()
            )));
        }
        Ok(self.decoder.forward(&join_latents(m, o)).0)
    }
}

/// `[K, S_D + S_C]` rows of `(m, o_k)`.
pub fn join_latents<T: Real>(m: &Array1<T>, o: &Array2<T>) -> Array2<T> {
    let k = o.nrows();
    let sd = m.len();
    let mut z = Array2::zeros((k, sd + o.ncols()));
    z.slice_mut(s![.., ..sd]).assign(&m.broadcast((k, sd)).expect("broadcast"));
    z.slice_mut(s![.., sd..]).assign(o);
    z
}

impl<T: Real> Parameterized<T> for ModelParams<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = Vec::new();
        if let Some(d) = &self.domain {
            v.extend(prefix_refs("domain_encoder", d.params()));
        }
        v.extend(prefix_refs("content_encoder", self.content.params()));
        v.extend(prefix_refs("decoder", self.decoder.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = Vec::new();
        if let Some(d) = &mut self.domain {
            v.extend(prefix_muts("domain_encoder", d.params_mut()));
        }
        v.extend(prefix_muts("content_encoder", self.content.params_mut()));
        v.extend(prefix_muts("decoder", self.decoder.params_mut()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn tiny_arch() -> Architecture {
        Architecture {
            encoder_channels: vec![4, 4, 6, 6],
            encoder_hidden: 12,
            decoder_channels: vec![6, 5],
            disc_element: vec![8, 8],
            disc_head: vec![8, 4],
            latent: LatentConfig {
                domain_dim: 3,
                content_dim: 2,
            },
            ..Architecture::published(16, 16, 1)
        }
    }

    fn random_block(k: usize, arch: &Architecture, seed: u64) -> Array4<f64> {
        let mut rng = rng_for(seed, "block");
        let u = Uniform::new(0.0, 1.0).unwrap();
        Array4::from_shape_fn((k, arch.channels, arch.height, arch.width), |_| u.sample(&mut rng))
    }

    #[test]
    fn coords_two_by_two() {
        let x = Array4::<f64>::from_elem((1, 1, 2, 2), 0.25);
        let out = append_coords(&x);
        assert_eq!(out.dim(), (1, 3, 2, 2));
        assert_eq!(out.slice(s![0, 0, .., ..]), Array2::from_elem((2, 2), 0.25));
        assert_eq!(out.slice(s![0, 1, .., ..]), array![[-1.0, -1.0], [1.0, 1.0]]);
        assert_eq!(out.slice(s![0, 2, .., ..]), array![[-1.0, 1.0], [-1.0, 1.0]]);
    }

    #[test]
    fn coords_four_wide_spacing() {
        let out = append_coords(&Array4::<f64>::zeros((1, 1, 4, 4)));
        let expected = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
        for (i, e) in expected.iter().enumerate() {
            assert!((out[[0, 1, i, 0]] - e).abs() < 1e-15);
            assert!((out[[0, 2, 0, i]] - e).abs() < 1e-15);
        }
    }

    #[test]
    fn log_prob_closed_form() {
        let g = DiagonalGaussian::<f64>::standard(1);
        assert!((gaussian_log_prob(&g, &array![0.0]) + 0.918_938_533_204_672_8).abs() < 1e-12);
        assert!((gaussian_log_prob(&g, &array![1.0]) + 1.418_938_533_204_672_8).abs() < 1e-12);
        let g = DiagonalGaussian::new(array![0.3, -1.0], array![0.2, -0.5]).unwrap();
        let at_mean = gaussian_log_prob(&g, &g.mean);
        for dx in [-0.1, 0.05, 0.2] {
            assert!(gaussian_log_prob(&g, &(&g.mean + dx)) < at_mean);
        }
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_to_standard(&DiagonalGaussian::<f64>::standard(4)), 0.0);
        let g = DiagonalGaussian::new(array![1.0f64], array![0.0]).unwrap();
        assert!((kl_to_standard(&g) - 0.5).abs() < 1e-15);
        let mut rng = rng_for(1, "kl");
        let u = Uniform::new(-3.0, 3.0).unwrap();
        for _ in 0..1000 {
            let g = DiagonalGaussian::new(
                Array1::from_shape_fn(5, |_| u.sample(&mut rng)),
                Array1::from_shape_fn(5, |_| u.sample(&mut rng)),
            )
            .unwrap();
            assert!(kl_to_standard(&g) >= 0.0);
        }
    }

    #[test]
    fn reparam_basics() {
        let g = DiagonalGaussian::new(array![0.5, -2.0], array![0.0, 1.0]).unwrap();
        assert_eq!(reparam_sample(&g, &array![0.0, 0.0]), g.mean);
        let g = DiagonalGaussian::new(array![0.5, -2.0], array![0.0, 0.0]).unwrap();
        assert_eq!(reparam_sample(&g, &array![1.0, 0.0]), array![1.5, -2.0]);
    }

    #[test]
    fn reparam_moments() {
        let g = DiagonalGaussian::new(array![1.5, -0.5], array![0.8, -1.2]).unwrap();
        let mut rng = rng_for(2, "moments");
        let n = 100_000;
        let mut sum = Array1::<f64>::zeros(2);
        let mut sq = Array1::<f64>::zeros(2);
        for _ in 0..n {
            let e = Array1::from_shape_fn(2, |_| StandardNormal.sample(&mut rng));
            let x = reparam_sample(&g, &e);
            sum += &x;
            sq += &(&x * &x);
        }
        for d in 0..2 {
            let mean = sum[d] / n as f64;
            let var = sq[d] / n as f64 - mean * mean;
            assert!((mean - g.mean[d]).abs() <= 0.02 * g.mean[d].abs());
            let expected = g.log_variance[d].exp();
            assert!((var - expected).abs() <= 0.02 * expected, "{var} vs {expected}");
        }
    }

    #[test]
    fn domain_encoder_is_a_set_function() {
        let arch = tiny_arch();
        let model = ModelParams::<f64>::new(&arch, &mut rng_for(3, "init")).unwrap();
        let x = random_block(5, &arch, 4);
        let base = model.encode_domain(&x).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = Array4::from_shape_fn(x.dim(), |(k, c, h, w)| x[[perm[k], c, h, w]]);
        let doubled = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        for other in [model.encode_domain(&permuted).unwrap(), model.encode_domain(&doubled).unwrap()] {
            for (a, b) in base.mean.iter().zip(&other.mean).chain(base.log_variance.iter().zip(&other.log_variance)) {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            }
        }
        let single = model.encode_domain(&x.slice(s![0..1, .., .., ..]).to_owned()).unwrap();
        assert_eq!(single.dim(), 3);
        assert!(single.mean.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn content_encoder_uses_domain_code() {
        let arch = tiny_arch();
        let model = ModelParams::<f64>::new(&arch, &mut rng_for(5, "init")).unwrap();
        let x = random_block(3, &arch, 6);
        let a = model.encode_content(&x, &array![0.0, 0.0, 0.0]).unwrap();
        let b = model.encode_content(&x, &array![1.0, -1.0, 0.5]).unwrap();
        assert_ne!(a.mean, b.mean);
        // per-image map: reversing the batch reverses the posteriors
        let rev = Array4::from_shape_fn(x.dim(), |(k, c, h, w)| x[[2 - k, c, h, w]]);
        let r = model.encode_content(&rev, &array![1.0, -1.0, 0.5]).unwrap();
        for k in 0..3 {
            for (p, q) in r.mean.row(k).iter().zip(b.mean.row(2 - k)) {
                assert!((p - q).abs() < 1e-12);
            }
        }
        assert!(matches!(model.encode_content(&x, &array![1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_heads_give_zero_mean() {
        let arch = tiny_arch();
        let mut model = ModelParams::<f64>::new(&arch, &mut rng_for(7, "init")).unwrap();
        model.content.mean = model.content.mean.map(|_| 0.0);
        let x = Array4::zeros((2, 1, 16, 16));
        let post = model.encode_content(&x, &Array1::zeros(3)).unwrap();
        assert!(post.mean.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_shape_and_determinism() {
        for size in [16usize, 32] {
            let arch = Architecture {
                height: size,
                width: size,
                channels: 3,
                ..tiny_arch()
            };
            let model = ModelParams::<f32>::new(&arch, &mut rng_for(8, "init")).unwrap();
            let m = Array1::from_vec(vec![0.1f32, -0.2, 0.3]);
            let o = Array2::from_shape_fn((4, 2), |(i, j)| i as f32 * 0.1 - j as f32);
            let a = model.decode(&m, &o).unwrap();
            assert_eq!(a.dim(), (4, 3, size, size));
            assert_eq!(a, model.decode(&m, &o).unwrap());
        }
    }

    #[test]
    fn decoder_latent_gradient_matches_finite_differences() {
        let arch = tiny_arch();
        let model = ModelParams::<f64>::new(&arch, &mut rng_for(9, "init")).unwrap();
        let z = Array2::from_shape_fn((1, 5), |(_, j)| 0.3 * j as f64 - 0.6);
        // gradient of pixel (0, 7, 9) w.r.t. every latent coordinate
        let (out, cache) = model.decoder.forward(&z);
        let mut dy = Array4::zeros(out.dim());
        dy[[0, 0, 7, 9]] = 1.0;
        let mut grad = model.decoder.map(|_| 0.0);
        let dz = model.decoder.backward(&cache, dy, &mut grad);
        let h = 1e-6;
        for j in 0..5 {
            let mut zp = z.clone();
            zp[[0, j]] += h;
            let mut zm = z.clone();
            zm[[0, j]] -= h;
            let fd = (model.decoder.forward(&zp).0[[0, 0, 7, 9]] - model.decoder.forward(&zm).0[[0, 0, 7, 9]]) / (2.0 * h);
            assert!(fd.is_finite());
            let rel = (fd - dz[[0, j]]).abs() / fd.abs().max(dz[[0, j]].abs()).max(1e-8);
            assert!(rel <= 1e-4, "latent {j}: fd {fd} vs analytic {}", dz[[0, j]]);
        }
    }

    #[test]
    fn vae_baseline_has_no_domain_path() {
        let arch = Architecture {
            vae_baseline: true,
            ..tiny_arch()
        };
        let model = ModelParams::<f32>::new(&arch, &mut rng_for(10, "init")).unwrap();
        assert!(model.domain.is_none());
        assert!(model.params().iter().all(|p| !p.name.starts_with("domain_encoder")));
        let x = Array4::zeros((2, 1, 16, 16));
        assert_eq!(model.encode_domain(&x).unwrap().dim(), 0);
        let post = model.encode_content(&x, &Array1::zeros(0)).unwrap();
        assert_eq!(post.mean.dim(), (2, 2));
    }

    #[test]
    fn architecture_rejects_bad_sizes() {
        let arch = Architecture::published(20, 20, 3);
        assert!(arch.validate().is_err());
        assert!(Architecture::published(96, 96, 3).validate().is_ok());
        assert_eq!(Architecture::published(32, 32, 3).encoder_features(), 128 * 2 * 2);
        // the flattened width equals H * W / 2 for the published widths
        assert_eq!(Architecture::published(96, 96, 3).encoder_features(), 96 * 96 / 2);
    }
}
