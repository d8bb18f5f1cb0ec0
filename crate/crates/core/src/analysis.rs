//! Inference utilities: translation, cycle reconstruction, latent interpolation,
//! heat-maps, latent export and loss-curve plots.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plotters::prelude::*;
use serde_json::{Map, Value};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::l1_loss;
use crate::metrics::{latent_vectors, FeatureMatrix};
use crate::networks::LatentCode;
use crate::params::Domain;
use crate::tensor::Tensor;
use crate::training::ModelState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    X2Y,
    Y2X,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::X2Y => Domain::X,
            Direction::Y2X => Domain::Y,
        }
    }

    pub fn target(self) -> Domain {
        self.source().other()
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x2y" => Ok(Direction::X2Y),
            "y2x" => Ok(Direction::Y2X),
            other => Err(Error::Parameter(format!("direction must be x2y or y2x, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TranslationResult {
    pub translated: Tensor,
    pub reconstructed: Option<Tensor>,
    pub latent: LatentCode,
    /// `l1_loss(image, reconstructed)` when a cycle was run.
    pub cycle_l1: Option<f64>,
}

fn check_image(state: &ModelState, image: &Tensor) -> Result<()> {
    let (_, c, h, w) = image.dims4()?;
    let s = state.cfg.image_size;
    if c != state.cfg.channels || h != s || w != s {
        return Err(Error::shape(format!(
            "expected ({}, {s}, {s}) images, got {:?}",
            state.cfg.channels,
            image.shape()
        )));
    }
    Ok(())
}

/// `G_{src→dst}(E_src(image))` on a `(n, 3, s, s)` batch.
pub fn translate(state: &ModelState, image: &Tensor, dir: Direction) -> Result<TranslationResult> {
    check_image(state, image)?;
    let latent = state.encode(dir.source(), image)?;
    let translated = state.generate(dir.source(), &latent.features)?;
    Ok(TranslationResult {
        translated,
        reconstructed: None,
        latent,
        cycle_l1: None,
    })
}

/// Translation followed by the reverse translation.
pub fn cycle(state: &ModelState, image: &Tensor, dir: Direction) -> Result<TranslationResult> {
    let mut r = translate(state, image, dir)?;
    let back = state.encode(dir.target(), &r.translated)?;
    let rec = state.generate(dir.target(), &back.features)?;
    r.cycle_l1 = Some(l1_loss(image, &rec)?);
    r.reconstructed = Some(rec);
    Ok(r)
}

/// Mean cycle L1 over every image of `ds` (resized to the model resolution).
pub fn mean_cycle_l1(state: &ModelState, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Parameter(format!("{} dataset is empty", ds.domain.label())));
    }
    let dir = match ds.domain {
        Domain::X => Direction::X2Y,
        Domain::Y => Direction::Y2X,
    };
    let batch = ds.to_batch(state.cfg.image_size)?;
    let mut total = 0.0;
    for i in 0..ds.len() {
        total += cycle(state, &batch.sample(i)?, dir)?.cycle_l1.expect("cycle ran");
    }
    Ok(total / ds.len() as f64)
}

/// One row of an interpolation grid.
#[derive(Clone, Debug)]
pub struct InterpolationStep {
    pub t: f32,
    /// `G_yx(z(t))`.
    pub generated_x: Tensor,
    /// `G_xy(z(t))`.
    pub generated_y: Tensor,
}

/// Decodes `z(t) = (1−t)·E_x(x) + t·E_y(y)` with both generators.
pub fn interpolate(
    state: &ModelState,
    image_x: &Tensor,
    image_y: &Tensor,
    ts: &[f32],
) -> Result<Vec<InterpolationStep>> {
    if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Parameter(format!("interpolation t must be in [0, 1], got {t}")));
    }
    check_image(state, image_x)?;
    check_image(state, image_y)?;
    let zx = state.encode(Domain::X, image_x)?.features;
    let zy = state.encode(Domain::Y, image_y)?.features;
    if zx.shape() != zy.shape() {
        return Err(Error::shape("interpolation endpoints need equal batch sizes"));
    }
    ts.iter()
        .map(|&t| {
            let data = zx.data().iter().zip(zy.data()).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let z = Tensor::new(zx.shape().to_vec(), data)?;
            Ok(InterpolationStep {
                t,
                generated_x: state.generate(Domain::Y, &z)?,
                generated_y: state.generate(Domain::X, &z)?,
            })
        })
        .collect()
}

/// Channel-mean of |activation| per sample, min-max normalized to `[0, 1]`;
/// returns `(n, 1, h, w)`. A constant map becomes all zeros.
pub fn latent_heatmap(latent: &LatentCode) -> Result<Tensor> {
    let (n, c, h, w) = latent.features.dims4()?;
    let plane = h * w;
    let src = latent.features.data();
    let mut out = vec![0.0f32; n * plane];
    for s in 0..n {
        let map = &mut out[s * plane..(s + 1) * plane];
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            for (m, v) in map.iter_mut().zip(&src[off..off + plane]) {
                *m += v.abs();
            }
        }
        map.iter_mut().for_each(|m| *m /= c as f32);
        let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        map.iter_mut().for_each(|m| *m = if span > 0.0 { (*m - lo) / span } else { 0.0 });
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// Writes the first map of a heat-map tensor as a greyscale PNG, upscaled by `zoom`.
pub fn save_heatmap_png(map: &Tensor, zoom: u32, path: &Path) -> Result<()> {
    let (_, _, h, w) = map.dims4()?;
    let z = zoom.max(1);
    let img = image::GrayImage::from_fn(w as u32 * z, h as u32 * z, |x, y| {
        let v = map.data()[(y / z) as usize * w + (x / z) as usize];
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Path {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// CSV with header `z0,…,z{d−1},label`, one row of pooled latents per image.
/// Returns the number of data rows.
pub fn export_latents(state: &ModelState, datasets: &[&Dataset], out_path: &Path) -> Result<usize> {
    let mut text = String::new();
    let mut rows = 0;
    for (k, ds) in datasets.iter().enumerate() {
        let f = latent_vectors(state, ds)?;
        if k == 0 {
            let header: Vec<String> = (0..f.dim()).map(|i| format!("z{i}")).collect();
            let _ = writeln!(text, "{},label", header.join(","));
        }
        for r in 0..f.rows() {
            for v in f.row(r) {
                let _ = write!(text, "{v},");
            }
            let _ = writeln!(text, "{}", ds.domain.label());
        }
        rows += f.rows();
    }
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out_path, text).map_err(|e| Error::io(out_path, e))?;
    Ok(rows)
}

/// Reads a latent CSV back into one matrix per label, in first-seen order.
pub fn read_latents_csv(path: &Path) -> Result<Vec<(String, FeatureMatrix)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: String| Error::Path {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut groups: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut fields: Vec<&str> = line.split(',').collect();
        let label = fields.pop().ok_or_else(|| bad(i + 1, "empty line".into()))?.to_string();
        let row = fields
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| bad(i + 1, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, rows)) => rows.push(row),
            None => groups.push((label, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|(l, rows)| Ok((l, FeatureMatrix::from_rows(&rows)?)))
        .collect()
}

/// Numeric series of one JSONL log, keyed by field name.
#[derive(Clone, Debug, Default)]
pub struct LogSeries {
    pub iters: Vec<f64>,
    pub values: std::collections::BTreeMap<String, Vec<(f64, f64)>>,
}

const NON_LOSS_KEYS: [&str; 2] = ["iter", "wall_time_s"];

/// Parses a JSONL log into per-key `(iter, value)` series.
pub fn read_log_series(path: &Path) -> Result<LogSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = LogSeries::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedLog {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let obj: Map<String, Value> = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let iter = obj
            .get("iter")
            .and_then(Value::as_f64)
            .ok_or_else(|| malformed("record has no numeric `iter`".into()))?;
        out.iters.push(iter);
        for (k, v) in &obj {
            if NON_LOSS_KEYS.contains(&k.as_str()) {
                continue;
            }
            if let Some(x) = v.as_f64() {
                out.values.entry(k.clone()).or_default().push((iter, x));
            }
        }
    }
    Ok(out)
}

/// Files written by [`plot_curves`]; `notice` explains an empty result.
#[derive(Clone, Debug, Default)]
pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    pub notice: Option<String>,
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 400;

fn draw_series(path: &Path, series: &[&[(f64, f64)]]) -> Result<()> {
    let plot_err = |e: String| Error::Plot(format!("{}: {e}", path.display()));
    let pts = series.iter().flat_map(|s| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(_, y)| y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0).abs() * 0.05).max(1e-6);
    let root = BitMapBackend::new(path, (PLOT_W, PLOT_H)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| plot_err(e.to_string()))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.iter().copied().filter(|(_, y)| y.is_finite()), color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?;
    }
    root.present().map_err(|e| plot_err(e.to_string()))
}

/// One curve image per loss key of a single log, or one overlay per key shared
/// by all logs when several are given (series colored by log order).
pub fn plot_curves(logs: &[PathBuf], out_dir: &Path) -> Result<PlotOutput> {
    let series = logs.iter().map(|p| read_log_series(p)).collect::<Result<Vec<_>>>()?;
    if series.iter().all(|s| s.iters.is_empty()) {
        return Ok(PlotOutput {
            files: vec![],
            notice: Some("no log records to plot".into()),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    if series.len() == 1 {
        for (k, pts) in &series[0].values {
            let p = out_dir.join(format!("{k}.png"));
            draw_series(&p, &[pts])?;
            files.push(p);
        }
    } else {
        let mut shared: BTreeSet<&String> = series[0].values.keys().collect();
        for s in &series[1..] {
            shared.retain(|k| s.values.contains_key(*k));
        }
        for k in shared {
            let p = out_dir.join(format!("overlay_{k}.png"));
            let all: Vec<&[(f64, f64)]> = series.iter().map(|s| s.values[k].as_slice()).collect();
            draw_series(&p, &all)?;
            files.push(p);
        }
    }
    let notice = files.is_empty().then(|| "logs share no loss keys".to_string());
    Ok(PlotOutput { files, notice })
}

/// Tiles `rows × cols` equally sized `(1, 3, h, w)` images into one image.
pub fn image_grid(tiles: &[Tensor], cols: usize) -> Result<Tensor> {
    let first = tiles.first().ok_or_else(|| Error::Parameter("empty image grid".into()))?;
    let (_, c, h, w) = first.dims4()?;
    let cols = cols.max(1);
    let rows = tiles.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![-1.0f32; c * gh * gw];
    for (i, t) in tiles.iter().enumerate() {
        if t.shape() != first.shape() {
            return Err(Error::shape("grid tiles differ in shape"));
        }
        let (r0, c0) = ((i / cols) * h, (i % cols) * w);
        for ch in 0..c {
            for y in 0..h {
                let src = &t.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                let dst = (ch * gh + r0 + y) * gw + c0;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Tensor::new(vec![1, c, gh, gw], out)
}
