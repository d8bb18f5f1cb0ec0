//! KID, FID and latent-space MMD over pluggable feature extractors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExtractorKind, KernelKind};
use crate::data::{derive_seed, prepare_eval, Dataset};
use crate::error::{Error, Result};
use crate::exec;
use crate::kernels::{conv2d_forward, ConvGeom};
use crate::params::Domain;
use crate::tensor::Tensor;
use crate::training::ModelState;

/// Samples per forward pass when running models over whole datasets.
const CHUNK: usize = 8;
const TAG_KID: u64 = 0x004b_4944;

/// Rows are samples, columns features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape(format!(
                "{rows}x{dim} feature matrix needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature matrix contains non-finite values".into()));
        }
        Ok(FeatureMatrix { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("feature rows have different lengths"));
        }
        FeatureMatrix::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn select(&self, idx: &[usize]) -> FeatureMatrix {
        let data = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        FeatureMatrix {
            rows: idx.len(),
            dim: self.dim,
            data,
        }
    }
}

fn kernel_value(kernel: KernelKind, a: &[f64], b: &[f64]) -> f64 {
    let d = a.len() as f64;
    match kernel {
        KernelKind::Poly => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (dot / d + 1.0).powi(3)
        }
        KernelKind::Gaussian => {
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            (-sq / (2.0 * d)).exp()
        }
    }
}

/// Σ_{i≠j} k(a_i, a_j) when `b` is `None`, otherwise Σ_{i,j} k(a_i, b_j).
fn kernel_sum(kernel: KernelKind, a: &FeatureMatrix, b: Option<&FeatureMatrix>) -> f64 {
    let per_row = exec::map_range(a.rows, |i| {
        let ai = a.row(i);
        match b {
            Some(b) => (0..b.rows).map(|j| kernel_value(kernel, ai, b.row(j))).sum::<f64>(),
            None => (0..a.rows)
                .filter(|&j| j != i)
                .map(|j| kernel_value(kernel, ai, a.row(j)))
                .sum::<f64>(),
        }
    });
    per_row.iter().sum()
}

fn check_pair(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<()> {
    if x.dim != y.dim {
        return Err(Error::shape(format!(
            "feature dimensions differ: {} vs {}",
            x.dim, y.dim
        )));
    }
    if x.rows < 2 || y.rows < 2 {
        return Err(Error::Parameter(format!(
            "unbiased estimators need at least 2 samples per set, got {} and {}",
            x.rows, y.rows
        )));
    }
    Ok(())
}

/// Unbiased squared MMD; may be negative.
pub fn mmd2_unbiased(x: &FeatureMatrix, y: &FeatureMatrix, kernel: KernelKind) -> Result<f64> {
    check_pair(x, y)?;
    let (m, n) = (x.rows as f64, y.rows as f64);
    let kxx = kernel_sum(kernel, x, None);
    let kyy = kernel_sum(kernel, y, None);
    let kxy = kernel_sum(kernel, x, Some(y));
    Ok(kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n))
}

/// Kernel inception distance: polynomial-kernel MMD² averaged over `n_subsets`
/// random subset pairs; returns `(mean, std)`. Each set is clamped to the subset
/// size separately, so a subset size covering a whole set uses that set as-is.
pub fn kid(
    real: &FeatureMatrix,
    gen: &FeatureMatrix,
    subset_size: usize,
    n_subsets: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    check_pair(real, gen)?;
    if n_subsets == 0 {
        return Err(Error::Parameter("kid needs at least one subset".into()));
    }
    if subset_size < 2 {
        return Err(Error::Parameter(format!("kid subset size must be >= 2, got {subset_size}")));
    }
    if subset_size > real.rows.min(gen.rows) {
        log::warn!(
            "kid subset size {subset_size} clamped to the set sizes {} and {}",
            real.rows,
            gen.rows
        );
    }
    let mut values = Vec::with_capacity(n_subsets);
    for _ in 0..n_subsets {
        let mut pick = |f: &FeatureMatrix| {
            if subset_size >= f.rows {
                f.clone()
            } else {
                f.select(&sample(rng, f.rows, subset_size).into_vec())
            }
        };
        let a = pick(real);
        let b = pick(gen);
        values.push(mmd2_unbiased(&a, &b, KernelKind::Poly)?);
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    Ok((mean, var.sqrt()))
}

fn moments(f: &FeatureMatrix) -> (DVector<f64>, DMatrix<f64>) {
    let x = DMatrix::from_row_slice(f.rows, f.dim, &f.data);
    let mu = DVector::from_iterator(f.dim, x.column_iter().map(|c| c.mean()));
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (f.rows as f64 - 1.0);
    (mu, cov)
}

fn sym_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

/// Tr((Σ₁Σ₂)^{1/2}) via the eigenvalues of Σ₁^{1/2} Σ₂ Σ₁^{1/2}, or `None` when
/// the spectrum has a negative part beyond rounding noise.
fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Option<f64> {
    let e1 = sym_eigen(s1.clone());
    let scale = e1.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if e1.eigenvalues.iter().any(|&l| l < -1e-6 * scale || !l.is_finite()) {
        return None;
    }
    let sqrt_vals = e1.eigenvalues.map(|l| l.max(0.0).sqrt());
    let root = &e1.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * e1.eigenvectors.transpose();
    let inner = sym_eigen(&root * s2 * &root);
    let scale = inner.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let mut tr = 0.0;
    for &l in inner.eigenvalues.iter() {
        if !l.is_finite() || l < -1e-6 * scale {
            return None;
        }
        tr += l.max(0.0).sqrt();
    }
    Some(tr)
}

/// Fréchet distance between Gaussians fitted to the two sets (unbiased covariance).
/// A numerically indefinite product is retried once with `jitter·I` added.
pub fn fid(real: &FeatureMatrix, gen: &FeatureMatrix, jitter: f64) -> Result<f64> {
    check_pair(real, gen)?;
    let (mu1, s1) = moments(real);
    let (mu2, s2) = moments(gen);
    let diff = (&mu1 - &mu2).norm_squared();
    let tr = match trace_sqrt_product(&s1, &s2) {
        Some(t) => t,
        None => {
            log::warn!("fid: covariance product not PSD, retrying with jitter {jitter}");
            let eye = DMatrix::<f64>::identity(real.dim, real.dim) * jitter;
            let (s1, s2) = (&s1 + &eye, &s2 + &eye);
            let t = trace_sqrt_product(&s1, &s2).ok_or_else(|| {
                Error::Numeric("covariance product is not positive semi-definite".into())
            })?;
            return Ok(diff + s1.trace() + s2.trace() - 2.0 * t);
        }
    };
    Ok(diff + s1.trace() + s2.trace() - 2.0 * tr)
}

pub const DEFAULT_FID_JITTER: f64 = 1e-6;

/// Fixed-seed strided conv stack used as a stand-in for an Inception network.
#[derive(Clone, Debug)]
pub struct RandomConvNet {
    layers: Vec<(Vec<f32>, usize, usize)>,
}

impl RandomConvNet {
    pub const SEED: u64 = 0x5EED_C0DE;
    pub const CHANNELS: [usize; 5] = [3, 32, 64, 128, 256];

    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(Self::SEED);
        let layers = Self::CHANNELS
            .windows(2)
            .map(|w| {
                let fan_in = w[0] * 16;
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                let weights = (0..w[1] * fan_in).map(|_| dist.sample(&mut rng) as f32).collect();
                (weights, w[0], w[1])
            })
            .collect();
        RandomConvNet { layers }
    }

    pub fn dim(&self) -> usize {
        Self::CHANNELS[4]
    }

    fn features(&self, images: &Tensor) -> Result<Vec<f64>> {
        let (n, c, mut h, mut w) = images.dims4()?;
        if c != 3 || h < 16 || w < 16 {
            return Err(Error::shape(format!(
                "random_conv needs (n, 3, h>=16, w>=16) images, got {:?}",
                images.shape()
            )));
        }
        let mut x = images.data().to_vec();
        for (weights, cin, cout) in &self.layers {
            let geom = ConvGeom {
                in_c: *cin,
                in_h: h,
                in_w: w,
                out_c: *cout,
                kernel: 4,
                stride: 2,
                pad: 1,
            };
            x = conv2d_forward(&x, n, weights, None, &geom);
            x.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= 0.2
                }
            });
            (h, w) = geom.out_hw().expect("checked input size");
        }
        let plane = h * w;
        Ok(x.chunks(plane).map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64).collect())
    }
}

impl Default for RandomConvNet {
    fn default() -> Self {
        Self::new()
    }
}

/// Maps images in `[-1, 1]` to feature vectors.
#[derive(Clone, Debug)]
pub enum Extractor {
    Identity,
    RandomConv(RandomConvNet),
    /// Runs `command <input.f32> <output.f32>`; each file has a JSON sidecar
    /// `<file>.json` holding `{rows, dim}`.
    External { command: Option<String> },
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    rows: usize,
    dim: usize,
}

static EXCHANGE_COUNTER: AtomicU64 = AtomicU64::new(0);

fn sidecar_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes a row-major f32 matrix and its sidecar.
pub fn write_f32_matrix(path: &Path, rows: usize, dim: usize, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string(&Sidecar { rows, dim }).expect("sidecar serializes");
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

/// Reads a matrix written by [`write_f32_matrix`] (or an external program).
pub fn read_f32_matrix(path: &Path) -> Result<FeatureMatrix> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Path {
        path: side.clone(),
        message: format!("bad sidecar: {e}"),
    })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != meta.rows * meta.dim * 4 {
        return Err(Error::Path {
            path: path.to_path_buf(),
            message: format!(
                "expected {} bytes for {}x{} floats, found {}",
                meta.rows * meta.dim * 4,
                meta.rows,
                meta.dim,
                bytes.len()
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    FeatureMatrix::new(meta.rows, meta.dim, data)
}

impl Extractor {
    pub fn from_kind(kind: ExtractorKind, command: Option<String>) -> Extractor {
        match kind {
            ExtractorKind::Identity => Extractor::Identity,
            ExtractorKind::RandomConv => Extractor::RandomConv(RandomConvNet::new()),
            ExtractorKind::ExternalAdapter => Extractor::External { command },
        }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Extractor {
        Self::from_kind(cfg.extractor, cfg.extractor_command.clone())
    }

    /// Name written into metric reports.
    pub fn id(&self) -> String {
        match self {
            Extractor::Identity => "identity".into(),
            Extractor::RandomConv(_) => format!("random_conv(seed={:#x})", RandomConvNet::SEED),
            Extractor::External { command } => {
                format!("external_adapter({})", command.as_deref().unwrap_or(""))
            }
        }
    }

    fn run_external(command: &Option<String>, images: &Tensor) -> Result<FeatureMatrix> {
        let cmd = command
            .as_deref()
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| {
                Error::Capability("external_adapter needs extractor_command to be set".into())
            })?;
        let mut parts = cmd.split_whitespace();
        let program = parts.next().expect("non-empty command");
        let dir = std::env::temp_dir().join(format!(
            "nicegan-features-{}-{}",
            std::process::id(),
            EXCHANGE_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let input = dir.join("images.f32");
        let output = dir.join("features.f32");
        let n = images.shape()[0];
        write_f32_matrix(&input, n, images.len() / n.max(1), images.data())?;
        let status = Command::new(program)
            .args(parts)
            .arg(&input)
            .arg(&output)
            .status()
            .map_err(|e| Error::Capability(format!("cannot run feature extractor `{program}`: {e}")));
        let result = status.and_then(|s| {
            if s.success() {
                read_f32_matrix(&output)
            } else {
                Err(Error::Capability(format!("feature extractor `{program}` exited with {s}")))
            }
        });
        let _ = fs::remove_dir_all(&dir);
        let m = result?;
        if m.rows != n {
            return Err(Error::Capability(format!(
                "feature extractor returned {} rows for {n} images",
                m.rows
            )));
        }
        Ok(m)
    }
}

/// Features of a `(n, c, h, w)` batch in `[-1, 1]`.
pub fn extract_features(extractor: &Extractor, images: &Tensor) -> Result<FeatureMatrix> {
    let (n, ..) = images.dims4()?;
    match extractor {
        Extractor::Identity => FeatureMatrix::new(
            n,
            images.len() / n.max(1),
            images.data().iter().map(|&v| v as f64).collect(),
        ),
        Extractor::RandomConv(net) => {
            let data = net.features(images)?;
            FeatureMatrix::new(n, net.dim(), data)
        }
        Extractor::External { command } => Extractor::run_external(command, images),
    }
}

/// Named scalar written to `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
    pub iter: u64,
    pub extractor_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Kid,
    Fid,
    LatentMmd,
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kid" => Ok(MetricKind::Kid),
            "fid" => Ok(MetricKind::Fid),
            "latent_mmd" | "mmd" => Ok(MetricKind::LatentMmd),
            other => Err(Error::Parameter(format!(
                "unknown metric `{other}` (expected kid, fid or latent_mmd)"
            ))),
        }
    }
}

/// Every image of `ds` resized to the model resolution, in chunks.
fn dataset_chunks(ds: &Dataset, size: usize) -> Result<Vec<Tensor>> {
    (0..ds.len())
        .collect::<Vec<_>>()
        .chunks(CHUNK)
        .map(|idx| {
            let parts = idx
                .iter()
                .map(|&i| Ok(prepare_eval(&ds.get(i)?, size).as_batch()))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&parts)
        })
        .collect()
}

/// Translations of every image of `ds` into the other domain.
pub fn translate_dataset(state: &ModelState, ds: &Dataset) -> Result<Vec<Tensor>> {
    dataset_chunks(ds, state.cfg.image_size)?
        .iter()
        .map(|b| {
            let z = state.encode(ds.domain, b)?;
            state.generate(ds.domain, &z.features)
        })
        .collect()
}

fn features_of(extractor: &Extractor, chunks: &[Tensor]) -> Result<FeatureMatrix> {
    let mats = chunks
        .iter()
        .map(|c| extract_features(extractor, c))
        .collect::<Result<Vec<_>>>()?;
    let dim = mats.first().map_or(0, |m| m.dim);
    let rows = mats.iter().map(|m| m.rows).sum();
    FeatureMatrix::new(rows, dim, mats.into_iter().flat_map(|m| m.data).collect())
}

/// Features of the real images of `ds`.
pub fn dataset_features(extractor: &Extractor, ds: &Dataset, size: usize) -> Result<FeatureMatrix> {
    features_of(extractor, &dataset_chunks(ds, size)?)
}

/// Features of `ds` translated into the other domain.
pub fn translated_features(
    state: &ModelState,
    extractor: &Extractor,
    ds: &Dataset,
) -> Result<FeatureMatrix> {
    features_of(extractor, &translate_dataset(state, ds)?)
}

/// Global-average-pooled encoder outputs, one row per image.
pub fn latent_vectors(state: &ModelState, ds: &Dataset) -> Result<FeatureMatrix> {
    if ds.is_empty() {
        return Err(Error::Parameter(format!("{} dataset is empty", ds.domain.label())));
    }
    let mut data = Vec::new();
    let mut dim = 0;
    for chunk in dataset_chunks(ds, state.cfg.image_size)? {
        let z = state.encode(ds.domain, &chunk)?.features;
        let (n, c, h, w) = z.dims4()?;
        dim = c;
        let plane = h * w;
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                let m: f64 = z.data()[off..off + plane].iter().map(|&v| v as f64).sum();
                data.push(m / plane as f64);
            }
        }
    }
    FeatureMatrix::new(ds.len(), dim, data)
}

/// MMD² between the pooled latents of the two domains.
pub fn latent_domain_mmd(
    state: &ModelState,
    dx: &Dataset,
    dy: &Dataset,
    kernel: KernelKind,
) -> Result<f64> {
    mmd2_unbiased(&latent_vectors(state, dx)?, &latent_vectors(state, dy)?, kernel)
}

/// KID and/or FID per translation direction plus the latent MMD, on the given
/// (evaluation) datasets.
pub fn evaluate(
    state: &ModelState,
    dx: &Dataset,
    dy: &Dataset,
    which: &[MetricKind],
    extractor: &Extractor,
) -> Result<Vec<MetricReport>> {
    let cfg = &state.cfg;
    let id = extractor.id();
    let mut out = Vec::new();
    let wants = |k| which.contains(&k);
    if wants(MetricKind::Kid) || wants(MetricKind::Fid) {
        for (src, dst, tag) in [(dx, dy, "x2y"), (dy, dx, "y2x")] {
            let real = dataset_features(extractor, dst, cfg.image_size)?;
            let fake = translated_features(state, extractor, src)?;
            if wants(MetricKind::Kid) {
                let dom = match src.domain {
                    Domain::X => 0,
                    Domain::Y => 1,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[TAG_KID, cfg.seed, dom]));
                let (mean, std) = kid(&real, &fake, cfg.kid_subset_size, cfg.kid_n_subsets, &mut rng)?;
                out.push(MetricReport {
                    name: format!("kid_{tag}"),
                    value: mean,
                    std: Some(std),
                    iter: state.iteration,
                    extractor_id: id.clone(),
                });
            }
            if wants(MetricKind::Fid) {
                out.push(MetricReport {
                    name: format!("fid_{tag}"),
                    value: fid(&real, &fake, DEFAULT_FID_JITTER)?,
                    std: None,
                    iter: state.iteration,
                    extractor_id: id.clone(),
                });
            }
        }
    }
    if wants(MetricKind::LatentMmd) {
        out.push(MetricReport {
            name: "latent_mmd".into(),
            value: latent_domain_mmd(state, dx, dy, cfg.latent_kernel)?,
            std: None,
            iter: state.iteration,
            extractor_id: "encoder_gap".into(),
        });
    }
    Ok(out)
}
