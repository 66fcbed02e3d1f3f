//! Fusion, image grids, representation extraction and linear factor probes.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{images_to_tensor, tensor_to_image, ModelParams};
use crate::pack_data::{Image, PackDataset};
use crate::rng::rng_for_item;
use crate::silhouettes::{factor_targets, CELLS};

// ---------------------------------------------------------------------------
// Fusion

/// Domain of `domain_pack` combined with the contents of `content_pack`.
///
/// Uses posterior means throughout. Content codes are conditioned on the
/// content pack's own domain code, the only one available when they are
/// extracted.
pub fn fuse_tensor(model: &ModelParams<f32>, domain_pack: &Array4<f32>, content_pack: &Array4<f32>) -> Result<Array4<f32>> {
    let m_i = model.encode_domain(domain_pack)?.mean;
    let m_j = model.encode_domain(content_pack)?.mean;
    let o = model.encode_content(content_pack, &m_j)?.mean;
    model.decode(&m_i, &o)
}

/// One output image per content image.
pub fn fuse(model: &ModelParams<f32>, domain_pack: &[Image], content_pack: &[Image]) -> Result<Vec<Image>> {
    let out = fuse_tensor(model, &images_to_tensor(domain_pack)?, &images_to_tensor(content_pack)?)?;
    Ok((0..out.dim().0).map(|k| tensor_to_image(&out, k)).collect())
}

/// Mean-posterior reconstruction of a pack.
pub fn reconstruct(model: &ModelParams<f32>, pack: &Array4<f32>) -> Result<Array4<f32>> {
    let m = model.encode_domain(pack)?.mean;
    let o = model.encode_content(pack, &m)?.mean;
    model.decode(&m, &o)
}

// ---------------------------------------------------------------------------
// Grid

/// Geometry of a fusion grid.
///
/// With `D` domain columns, `Kc` content images, `n` domain rows, cells of
/// `H x W`, a gap of `g` pixels around every cell and a separator band of
/// `b` pixels between inputs and outputs:
///
/// ```text
/// width  = (D + Kc) * (W + g) + g + b
/// height = (1 + n)  * (H + g) + g + b
/// column c starts at x = g + c * (W + g) + (c >= D) * b
/// row r    starts at y = g + r * (H + g) + (r >= 1) * b
/// ```
///
/// Row 0 holds the content inputs (its first `D` cells stay empty), each
/// later row starts with up to `D` images of one domain pack followed by the
/// fused outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub cell_height: usize,
    pub cell_width: usize,
    pub domain_columns: usize,
    pub content_columns: usize,
    pub domain_rows: usize,
    pub gap: usize,
    pub border: usize,
}

pub const GRID_GAP: usize = 2;
pub const GRID_BORDER: usize = 2;
pub const GRID_GAP_VALUE: u8 = 64;
pub const GRID_BORDER_VALUE: u8 = 255;
pub const DEFAULT_DOMAIN_COLUMNS: usize = 5;

impl GridLayout {
    pub fn width(&self) -> usize {
        (self.domain_columns + self.content_columns) * (self.cell_width + self.gap) + self.gap + self.border
    }

    pub fn height(&self) -> usize {
        (1 + self.domain_rows) * (self.cell_height + self.gap) + self.gap + self.border
    }

    pub fn column_x(&self, c: usize) -> usize {
        self.gap + c * (self.cell_width + self.gap) + if c >= self.domain_columns { self.border } else { 0 }
    }

    pub fn row_y(&self, r: usize) -> usize {
        self.gap + r * (self.cell_height + self.gap) + if r >= 1 { self.border } else { 0 }
    }
}

fn blit(canvas: &mut Image, img: &Image, x0: usize, y0: usize) {
    let c = canvas.channels;
    for y in 0..img.height {
        for x in 0..img.width {
            for ch in 0..c {
                let v = img.data[(y * img.width + x) * img.channels + ch.min(img.channels - 1)];
                canvas.data[((y0 + y) * canvas.width + x0 + x) * c + ch] = v;
            }
        }
    }
}

fn fill_rect(canvas: &mut Image, x0: usize, y0: usize, w: usize, h: usize, v: u8) {
    let c = canvas.channels;
    for y in y0..y0 + h {
        let row = (y * canvas.width + x0) * c;
        canvas.data[row..row + w * c].fill(v);
    }
}

/// Composes the fusion grid in memory.
pub fn compose_grid(
    model: &ModelParams<f32>,
    domain_packs: &[Vec<Image>],
    content_pack: &[Image],
    domain_columns: usize,
) -> Result<(Image, GridLayout)> {
    if domain_packs.is_empty() || domain_packs.iter().any(Vec::is_empty) {
        return Err(Error::Argument("a grid needs at least one nonempty domain pack".into()));
    }
    if content_pack.is_empty() {
        return Err(Error::Argument("empty content pack".into()));
    }
    let (h, w, c) = content_pack[0].dims();
    let widest = domain_packs.iter().map(Vec::len).max().unwrap_or(1);
    let layout = GridLayout {
        cell_height: h,
        cell_width: w,
        domain_columns: domain_columns.clamp(1, widest),
        content_columns: content_pack.len(),
        domain_rows: domain_packs.len(),
        gap: GRID_GAP,
        border: GRID_BORDER,
    };
    let content = images_to_tensor(content_pack)?;
    let outputs = domain_packs
        .par_iter()
        .map(|p| fuse_tensor(model, &images_to_tensor(p)?, &content))
        .collect::<Result<Vec<_>>>()?;

    let mut canvas = Image::new(layout.height(), layout.width(), c, vec![GRID_GAP_VALUE; layout.height() * layout.width() * c])?;
    let sep_x = layout.column_x(layout.domain_columns) - layout.border;
    let sep_y = layout.row_y(1) - layout.border;
    fill_rect(&mut canvas, sep_x, 0, layout.border, layout.height(), GRID_BORDER_VALUE);
    fill_rect(&mut canvas, 0, sep_y, layout.width(), layout.border, GRID_BORDER_VALUE);
    for (k, img) in content_pack.iter().enumerate() {
        blit(&mut canvas, img, layout.column_x(layout.domain_columns + k), layout.row_y(0));
    }
    for (r, (pack, out)) in domain_packs.iter().zip(&outputs).enumerate() {
        let y = layout.row_y(r + 1);
        for (d, img) in pack.iter().take(layout.domain_columns).enumerate() {
            if img.dims() != (h, w, c) {
                return Err(Error::Shape("domain and content images differ in dimensions".into()));
            }
            blit(&mut canvas, img, layout.column_x(d), y);
        }
        for k in 0..out.dim().0 {
            blit(&mut canvas, &tensor_to_image(out, k), layout.column_x(layout.domain_columns + k), y);
        }
    }
    Ok((canvas, layout))
}

/// PNG text keyword under which [`render_grid`] stores the run config.
pub const PNG_CONFIG_KEY: &str = "packvae-config";

/// Composes the grid and writes it as PNG, with `config` (if any) in a
/// text chunk.
pub fn render_grid(
    model: &ModelParams<f32>,
    domain_packs: &[Vec<Image>],
    content_pack: &[Image],
    domain_columns: usize,
    config: Option<&str>,
    path: &Path,
) -> Result<(Image, GridLayout)> {
    let (img, layout) = compose_grid(model, domain_packs, content_pack, domain_columns)?;
    write_png(&img, config, path)?;
    Ok((img, layout))
}

fn write_png(img: &Image, config: Option<&str>, path: &Path) -> Result<()> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Format(format!("cannot write a {c}-channel png"))),
    };
    let encode_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(text) = config {
        enc.add_text_chunk(PNG_CONFIG_KEY.into(), text.into()).map_err(encode_err)?;
    }
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(&img.data).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Text stored under [`PNG_CONFIG_KEY`], if present.
pub fn read_png_config(path: &Path) -> Result<Option<String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == PNG_CONFIG_KEY)
        .map(|t| t.text.clone()))
}

// ---------------------------------------------------------------------------
// Representations

/// Posterior-mean codes of every image with aligned ground-truth factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Representations {
    /// One row per image; the pack's single domain code repeated.
    pub domain: Array2<f64>,
    pub content: Array2<f64>,
    /// 27 occupancy indicators per image.
    pub shape: Array2<f64>,
    /// Pitch and yaw in degrees.
    pub rotation: Array2<f64>,
    /// Domain id of each row.
    pub domain_ids: Vec<String>,
}

impl Representations {
    pub fn len(&self) -> usize {
        self.domain_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain_ids.is_empty()
    }
}

/// Encodes every domain of a silhouettes dataset (one pack per domain).
pub fn extract_representations(model: &ModelParams<f32>, dataset: &PackDataset) -> Result<Representations> {
    let schema = dataset
        .meta
        .factor_schema
        .as_ref()
        .ok_or_else(|| Error::Schema("dataset has no factor records".into()))?;
    let entries: Vec<(&String, _)> = dataset.domains.iter().collect();
    type Block = (Array2<f64>, Array2<f64>, Vec<[f64; CELLS]>, Vec<[f64; 2]>, usize);
    let blocks = entries
        .par_iter()
        .map(|(id, pool)| -> Result<Block> {
            let factors = pool
                .factors
                .as_ref()
                .ok_or_else(|| Error::Schema(format!("domain `{id}` lacks factor records")))?;
            let targets = factors.iter().map(|r| factor_targets(schema, r)).collect::<Result<Vec<_>>>()?;
            let x = images_to_tensor(&pool.images)?;
            let k = x.dim().0;
            let m = model.encode_domain(&x)?.mean;
            let o = model.encode_content(&x, &m)?.mean;
            let m64 = m.mapv(f64::from);
            let dom = m64.broadcast((k, m64.len())).expect("broadcast").to_owned();
            let (shape, rot): (Vec<_>, Vec<_>) = targets.into_iter().unzip();
            Ok((dom, o.mapv(f64::from), shape, rot, k))
        })
        .collect::<Result<Vec<_>>>()?;
    let n: usize = blocks.iter().map(|b| b.4).sum();
    let (sd, sc) = (model.arch.domain_dim(), model.arch.content_dim());
    let mut reps = Representations {
        domain: Array2::zeros((n, sd)),
        content: Array2::zeros((n, sc)),
        shape: Array2::zeros((n, CELLS)),
        rotation: Array2::zeros((n, 2)),
        domain_ids: Vec::with_capacity(n),
    };
    let mut row = 0;
    for ((id, _), (dom, con, shape, rot, k)) in entries.iter().zip(blocks) {
        reps.domain.slice_mut(s![row..row + k, ..]).assign(&dom);
        reps.content.slice_mut(s![row..row + k, ..]).assign(&con);
        for i in 0..k {
            reps.shape.row_mut(row + i).assign(&Array1::from(shape[i].to_vec()));
            reps.rotation.row_mut(row + i).assign(&Array1::from(rot[i].to_vec()));
            reps.domain_ids.push((*id).clone());
        }
        row += k;
    }
    Ok(reps)
}

// ---------------------------------------------------------------------------
// Probes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    /// Independent sigmoid per target unit, cross-entropy loss.
    BinaryMultiLabel,
    /// Squared error on raw target values.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub target_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl ProbeSpec {
    pub fn shape() -> Self {
        ProbeSpec {
            kind: ProbeKind::BinaryMultiLabel,
            target_dim: CELLS,
            epochs: 10,
            learning_rate: 1e-2,
            batch_size: 64,
        }
    }

    pub fn rotation() -> Self {
        ProbeSpec {
            kind: ProbeKind::Regression,
            target_dim: 2,
            ..ProbeSpec::shape()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    CE,
    MSE,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::CE => "CE",
            Metric::MSE => "MSE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub metric: Metric,
    pub value: f64,
    pub n_eval: usize,
}

/// Affine map on standardised codes. Regression targets are standardised
/// as well and mapped back when predicting.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineProbe {
    pub kind: ProbeKind,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub code_mean: Array1<f64>,
    pub code_scale: Array1<f64>,
    pub target_mean: Array1<f64>,
    pub target_scale: Array1<f64>,
}

const RATE_CLAMP: f64 = 1e-6;

fn column_stats(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
    let var = x.var_axis(Axis(0), 0.0);
    let scale = var.mapv(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
    (mean, scale)
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(RATE_CLAMP, 1.0 - RATE_CLAMP);
    (p / (1.0 - p)).ln()
}

fn check_aligned(codes: &Array2<f64>, targets: &Array2<f64>, spec: &ProbeSpec) -> Result<()> {
    if codes.nrows() != targets.nrows() {
        return Err(Error::Shape(format!(
            "{} codes for {} targets",
            codes.nrows(),
            targets.nrows()
        )));
    }
    if targets.ncols() != spec.target_dim || spec.target_dim == 0 {
        return Err(Error::Shape(format!(
            "targets have {} columns, probe expects {}",
            targets.ncols(),
            spec.target_dim
        )));
    }
    if codes.nrows() == 0 {
        return Err(Error::Argument("no probe samples".into()));
    }
    Ok(())
}

/// Minibatch Adam on the mean loss, starting from the best constant
/// predictor (zero weights).
pub fn train_probe<R: rand::Rng + ?Sized>(
    codes: &Array2<f64>,
    targets: &Array2<f64>,
    spec: &ProbeSpec,
    rng: &mut R,
) -> Result<AffineProbe> {
    check_aligned(codes, targets, spec)?;
    let (code_mean, code_scale) = column_stats(codes);
    let z = (codes - &code_mean) / &code_scale;
    let (t, target_mean, target_scale, bias) = match spec.kind {
        ProbeKind::BinaryMultiLabel => {
            let rate = targets.mean_axis(Axis(0)).expect("nonempty");
            let d = targets.ncols();
            (targets.clone(), Array1::zeros(d), Array1::ones(d), rate.mapv(logit))
        }
        ProbeKind::Regression => {
            let (mean, scale) = column_stats(targets);
            let t = (targets - &mean) / &scale;
            let d = targets.ncols();
            (t, mean, scale, Array1::zeros(d))
        }
    };
    let (n, dc) = z.dim();
    let dt = t.ncols();
    let mut weight = Array2::<f64>::zeros((dt, dc));
    let mut bias = bias;
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, spec.learning_rate);
    let mut mw = Array2::<f64>::zeros((dt, dc));
    let mut vw = Array2::<f64>::zeros((dt, dc));
    let mut mb = Array1::<f64>::zeros(dt);
    let mut vb = Array1::<f64>::zeros(dt);
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..spec.epochs {
        order.shuffle(rng);
        for batch in order.chunks(spec.batch_size.max(1)) {
            let zb = z.select(Axis(0), batch);
            let tb = t.select(Axis(0), batch);
            let out = zb.dot(&weight.t()) + &bias;
            // derivative of the per-sample loss w.r.t. the pre-activation,
            // averaged over samples and target units
            let mut d = match spec.kind {
                ProbeKind::BinaryMultiLabel => out.mapv(crate::dc_loss::sigmoid) - &tb,
                ProbeKind::Regression => (&out - &tb) * 2.0,
            };
            d /= (batch.len() * dt) as f64;
            let gw = d.t().dot(&zb);
            let gb = d.sum_axis(Axis(0));
            step += 1;
            let c1 = 1.0 - b1.powi(step);
            let c2 = 1.0 - b2.powi(step);
            ndarray::Zip::from(&mut weight).and(&mut mw).and(&mut vw).and(&gw).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
            ndarray::Zip::from(&mut bias).and(&mut mb).and(&mut vb).and(&gb).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
    Ok(AffineProbe {
        kind: spec.kind,
        weight,
        bias,
        code_mean,
        code_scale,
        target_mean,
        target_scale,
    })
}

impl AffineProbe {
    /// Logits (binary) or target-scale predictions (regression).
    pub fn predict(&self, codes: &Array2<f64>) -> Array2<f64> {
        let z = (codes - &self.code_mean) / &self.code_scale;
        let out = z.dot(&self.weight.t()) + &self.bias;
        match self.kind {
            ProbeKind::BinaryMultiLabel => out,
            ProbeKind::Regression => out * &self.target_scale + &self.target_mean,
        }
    }
}

/// Mean per-unit sigmoid cross-entropy of logits against binary targets.
pub fn cross_entropy_logits(logits: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&l, &y)| crate::dc_loss::softplus(l) - y * l)
        .sum();
    sum / logits.len() as f64
}

/// Mean over samples and dimensions.
pub fn mean_squared_error(pred: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let sum: f64 = pred.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    sum / pred.len() as f64
}

pub fn eval_probe(probe: &AffineProbe, codes: &Array2<f64>, targets: &Array2<f64>) -> Result<ProbeResult> {
    if codes.nrows() != targets.nrows() || targets.ncols() != probe.weight.nrows() || codes.ncols() != probe.weight.ncols()
    {
        return Err(Error::Shape("probe, codes and targets do not align".into()));
    }
    let pred = probe.predict(codes);
    let (metric, value) = match probe.kind {
        ProbeKind::BinaryMultiLabel => (Metric::CE, cross_entropy_logits(&pred, targets)),
        ProbeKind::Regression => (Metric::MSE, mean_squared_error(&pred, targets)),
    };
    Ok(ProbeResult {
        metric,
        value,
        n_eval: codes.nrows(),
    })
}

/// The best constant predictor (per-unit base rate, or per-dimension mean)
/// of `targets`, scored on the same targets.
pub fn guessing_baseline(kind: ProbeKind, targets: &Array2<f64>) -> Result<ProbeResult> {
    if targets.is_empty() {
        return Err(Error::Argument("no targets".into()));
    }
    let n = targets.nrows();
    let mean = targets.mean_axis(Axis(0)).expect("nonempty");
    let (metric, value) = match kind {
        ProbeKind::BinaryMultiLabel => {
            let xlogx = |p: f64| if p > 0.0 { p * p.ln() } else { 0.0 };
            let h: f64 = mean.iter().map(|&p| -xlogx(p) - xlogx(1.0 - p)).sum();
            (Metric::CE, h / mean.len() as f64)
        }
        ProbeKind::Regression => {
            let pred = mean.broadcast(targets.dim()).expect("broadcast").to_owned();
            (Metric::MSE, mean_squared_error(&pred, targets))
        }
    };
    Ok(ProbeResult { metric, value, n_eval: n })
}

// ---------------------------------------------------------------------------
// Suite

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub model: String,
    pub code: String,
    pub factor: String,
    pub metric: Metric,
    pub value: f64,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeTable {
    pub rows: Vec<ProbeRow>,
}

pub const GUESSING: &str = "guessing";

impl ProbeTable {
    pub fn get(&self, model: &str, code: &str, factor: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.code == code && r.factor == factor)
            .map(|r| r.value)
    }

    pub fn guessing(&self, factor: &str) -> Option<f64> {
        self.get(GUESSING, "-", factor)
    }

    /// Tab-separated, with a leading comment line on the CE sign.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "# CE: mean per-unit sigmoid cross-entropy, positive (log-likelihood tables list it negated). \
             MSE: mean over samples and angle dimensions, degrees^2. Codes are posterior means.\n",
        );
        out.push_str("model\tcode\tfactor\tmetric\tvalue\tn_eval\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}\t{}",
                r.model,
                r.code,
                r.factor,
                r.metric.name(),
                r.value,
                r.n_eval
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Code blocks exposed by a model: domain and content, or a single latent
/// for the plain VAE.
fn code_blocks(model: &ModelParams<f32>, reps: &Representations) -> Vec<(&'static str, Array2<f64>)> {
    if model.domain.is_none() {
        vec![("latent", reps.content.clone())]
    } else {
        vec![("domain", reps.domain.clone()), ("content", reps.content.clone())]
    }
}

/// Trains every (model, code, factor) probe on `train` and scores it on
/// `eval`, then appends the guessing rows for `eval`.
pub fn run_probe_suite(
    models: &[(String, ModelParams<f32>)],
    train: &PackDataset,
    eval: &PackDataset,
    epochs: usize,
    seed: u64,
) -> Result<ProbeTable> {
    for ds in [train, eval] {
        match &ds.meta.factor_schema {
            Some(s) if s.name == crate::silhouettes::SCHEMA_NAME => {}
            _ => return Err(Error::Schema("probing needs a silhouettes dataset with factor records".into())),
        }
    }
    let mut table = ProbeTable::default();
    let mut eval_targets = None;
    let mut index = 0u64;
    for (name, model) in models {
        let tr = extract_representations(model, train)?;
        let ev = extract_representations(model, eval)?;
        let train_codes = code_blocks(model, &tr);
        let eval_codes = code_blocks(model, &ev);
        for ((code, c_tr), (_, c_ev)) in train_codes.iter().zip(&eval_codes) {
            for (factor, spec, t_tr, t_ev) in [
                ("shape", ProbeSpec::shape(), &tr.shape, &ev.shape),
                ("rotation", ProbeSpec::rotation(), &tr.rotation, &ev.rotation),
            ] {
                let spec = ProbeSpec { epochs, ..spec };
                let mut rng = rng_for_item(seed, "probe", index);
                index += 1;
                let probe = train_probe(c_tr, t_tr, &spec, &mut rng)?;
                let res = eval_probe(&probe, c_ev, t_ev)?;
                table.rows.push(ProbeRow {
                    model: name.clone(),
                    code: (*code).to_string(),
                    factor: factor.into(),
                    metric: res.metric,
                    value: res.value,
                    n_eval: res.n_eval,
                });
            }
        }
        eval_targets.get_or_insert((ev.shape, ev.rotation));
    }
    let (shape, rotation) = match eval_targets {
        Some(t) => t,
        None => {
            // no models: targets straight from the records
            let schema = eval.meta.factor_schema.as_ref().expect("checked");
            let mut shape = Vec::new();
            let mut rotation = Vec::new();
            for pool in eval.domains.values() {
                for r in pool.factors.as_ref().ok_or_else(|| Error::Schema("missing factor records".into()))? {
                    let (s, a) = factor_targets(schema, r)?;
                    shape.extend_from_slice(&s);
                    rotation.extend_from_slice(&a);
                }
            }
            let n = rotation.len() / 2;
            (
                Array2::from_shape_vec((n, CELLS), shape).expect("shape rows"),
                Array2::from_shape_vec((n, 2), rotation).expect("rotation rows"),
            )
        }
    };
    for (factor, kind, t) in [
        ("shape", ProbeKind::BinaryMultiLabel, &shape),
        ("rotation", ProbeKind::Regression, &rotation),
    ] {
        let res = guessing_baseline(kind, t)?;
        table.rows.push(ProbeRow {
            model: GUESSING.into(),
            code: "-".into(),
            factor: factor.into(),
            metric: res.metric,
            value: res.value,
            n_eval: res.n_eval,
        });
    }
    Ok(table)
}
