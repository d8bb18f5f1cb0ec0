//! Unpaired two-domain datasets, augmentation, and synthetic verification domains.
//!
//! Images are held as `(3, h, w)` tensors with values in `[-1, 1]`. The batch
//! stream is a pure function of `(seed, iteration)`, so a resumed run only needs
//! the iteration counter to continue the exact same sequence.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::params::Domain;
use crate::tensor::Tensor;

const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_AUGMENT: u64 = 0x4155_474d;
const TAG_SYNTH: u64 = 0x5359_4e54;

/// Mixes integers into one well-spread seed (splitmix64 over the parts).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn domain_tag(d: Domain) -> u64 {
    match d {
        Domain::X => 0,
        Domain::Y => 1,
    }
}

/// One image, `(3, h, w)`, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor,
    pub source_path: Option<PathBuf>,
}

impl ImageSample {
    pub fn from_rgb8(img: &RgbImage, source_path: Option<PathBuf>) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        ImageSample {
            pixels: Tensor::new(vec![3, h, w], data).expect("rgb shape"),
            source_path,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::io::Reader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        Ok(Self::from_rgb8(&img.to_rgb8(), Some(path.to_path_buf())))
    }

    /// Wraps a `(3, h, w)` or `(1, 3, h, w)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        let (h, w) = match shape {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => return Err(Error::shape(format!("expected one RGB image, got {shape:?}"))),
        };
        Ok(ImageSample {
            pixels: t.clone().reshape(&[3, h, w])?,
            source_path: None,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        let d = self.pixels.data();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| {
                let v = d[(c * h + y as usize) * w + x as usize];
                ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
            };
            Rgb([at(0), at(1), at(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Path {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    /// The image as a `(1, 3, h, w)` batch.
    pub fn as_batch(&self) -> Tensor {
        self.pixels
            .clone()
            .reshape(&[1, 3, self.height(), self.width()])
            .expect("sample shape")
    }
}

#[derive(Clone, Debug)]
enum Item {
    File(PathBuf),
    Memory(ImageSample),
}

/// The images of one domain, in a fixed order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub domain: Domain,
    items: Vec<Item>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir_name(self, d: Domain) -> &'static str {
        match (self, d) {
            (Split::Train, Domain::X) => "trainA",
            (Split::Train, Domain::Y) => "trainB",
            (Split::Test, Domain::X) => "testA",
            (Split::Test, Domain::Y) => "testB",
        }
    }
}

impl Dataset {
    pub fn from_samples(domain: Domain, samples: Vec<ImageSample>) -> Self {
        Dataset {
            domain,
            items: samples.into_iter().map(Item::Memory).collect(),
        }
    }

    /// Every PNG/JPEG file directly inside `dir`, in lexicographic order.
    pub fn open_dir(domain: Domain, dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for e in entries {
            let path = e.map_err(|e| Error::io(dir, e))?.path();
            let ext = path
                .extension()
                .and_then(|s| s.to_str())
                .map(str::to_ascii_lowercase);
            if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                files.push(path);
            }
        }
        if files.is_empty() {
            return Err(Error::EmptyDataset(dir.to_path_buf()));
        }
        files.sort();
        Ok(Dataset {
            domain,
            items: files.into_iter().map(Item::File).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<ImageSample> {
        match self.items.get(i) {
            Some(Item::File(p)) => ImageSample::load(p),
            Some(Item::Memory(s)) => Ok(s.clone()),
            None => Err(Error::Parameter(format!(
                "index {i} out of a dataset of {}",
                self.items.len()
            ))),
        }
    }

    pub fn paths(&self) -> Vec<Option<&Path>> {
        self.items
            .iter()
            .map(|it| match it {
                Item::File(p) => Some(p.as_path()),
                Item::Memory(s) => s.source_path.as_deref(),
            })
            .collect()
    }

    /// Writes every image as `{index:05}.png` into `dir`.
    pub fn write_pngs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for i in 0..self.len() {
            self.get(i)?.save_png(&dir.join(format!("{i:05}.png")))?;
        }
        Ok(())
    }

    /// Every image resized to `size`, stacked into `(n, 3, size, size)`.
    pub fn to_batch(&self, size: usize) -> Result<Tensor> {
        let parts = (0..self.len())
            .map(|i| Ok(resize_to(&self.get(i)?, size).as_batch()))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&parts)
    }
}

/// Opens `root/{trainA,trainB}` or `root/{testA,testB}`.
pub fn open_unpaired_dataset(root: &Path, split: Split) -> Result<(Dataset, Dataset)> {
    let open = |d: Domain| {
        let dir = root.join(split.dir_name(d));
        if !dir.is_dir() {
            return Err(Error::Path {
                path: dir,
                message: "directory does not exist".into(),
            });
        }
        Dataset::open_dir(d, &dir)
    };
    Ok((open(Domain::X)?, open(Domain::Y)?))
}

/// Writes both splits in the `trainA/trainB/testA/testB` layout.
pub fn write_unpaired_dataset(
    root: &Path,
    train: (&Dataset, &Dataset),
    test: (&Dataset, &Dataset),
) -> Result<()> {
    for (split, (x, y)) in [(Split::Train, train), (Split::Test, test)] {
        x.write_pngs(&root.join(split.dir_name(Domain::X)))?;
        y.write_pngs(&root.join(split.dir_name(Domain::Y)))?;
    }
    Ok(())
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(pixels: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match pixels.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("expected (c, h, w), got {s:?}"))),
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape("cannot resize to or from an empty image"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(pixels.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let d = pixels.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn hflip(pixels: &Tensor) -> Tensor {
    let w = *pixels.shape().last().unwrap_or(&1);
    let mut out = pixels.clone();
    for row in out.data_mut().chunks_mut(w.max(1)) {
        row.reverse();
    }
    out
}

/// Crops `size × size` starting at `(top, left)`.
pub fn crop(pixels: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let (c, h, w) = match pixels.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("expected (c, h, w), got {s:?}"))),
    };
    if top + size > h || left + size > w {
        return Err(Error::shape(format!(
            "{size}px crop at ({top}, {left}) exceeds a {h}x{w} image"
        )));
    }
    let d = pixels.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let start = (ch * h + y) * w + left;
            out.extend_from_slice(&d[start..start + size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

fn resize_to(s: &ImageSample, size: usize) -> ImageSample {
    ImageSample {
        pixels: resize_bilinear(&s.pixels, size, size).expect("valid image"),
        source_path: s.source_path.clone(),
    }
}

/// Resizes an evaluation image straight to the model resolution.
pub fn prepare_eval(s: &ImageSample, size: usize) -> ImageSample {
    resize_to(s, size)
}

/// The random choices of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub flip: bool,
    pub top: usize,
    pub left: usize,
}

impl AugmentParams {
    /// Draws flip, then crop row, then crop column.
    pub fn draw(cfg: &ExperimentConfig, rng: &mut impl Rng) -> Self {
        let margin = cfg.resize_edge().saturating_sub(cfg.image_size);
        let flip = rng.gen::<f64>() < cfg.hflip_prob;
        let top = rng.gen_range(0..=margin);
        let left = rng.gen_range(0..=margin);
        AugmentParams { flip, top, left }
    }
}

/// Flip, bilinear resize to the resize edge, then crop to the model resolution.
pub fn augment_with(s: &ImageSample, cfg: &ExperimentConfig, p: AugmentParams) -> Result<ImageSample> {
    let edge = cfg.resize_edge();
    if edge < cfg.image_size {
        return Err(Error::shape(format!(
            "resize edge {edge} is smaller than the {}px crop",
            cfg.image_size
        )));
    }
    let flipped = if p.flip { hflip(&s.pixels) } else { s.pixels.clone() };
    let resized = resize_bilinear(&flipped, edge, edge)?;
    Ok(ImageSample {
        pixels: crop(&resized, p.top, p.left, cfg.image_size)?,
        source_path: s.source_path.clone(),
    })
}

pub fn augment(s: &ImageSample, cfg: &ExperimentConfig, rng: &mut impl Rng) -> Result<ImageSample> {
    augment_with(s, cfg, AugmentParams::draw(cfg, rng))
}

/// Parameters of the synthetic hue-swap domains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub size: usize,
    /// Shape hue of domain X, in turns (`0..1`).
    pub hue_x: f32,
    pub hue_y: f32,
}

/// Two domains of tinted circles/rectangles on grey textured backgrounds.
/// Images differ only in the hue of the shapes.
pub fn make_synthetic_domains(spec: SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.n == 0 {
        return Err(Error::Parameter("synthetic domains need n >= 1".into()));
    }
    if spec.size < 16 {
        return Err(Error::Parameter(format!(
            "synthetic images need size >= 16, got {}",
            spec.size
        )));
    }
    let make = |d: Domain, hue: f32| {
        let samples = (0..spec.n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    TAG_SYNTH,
                    seed,
                    domain_tag(d),
                    i as u64,
                ]));
                ImageSample::from_rgb8(&synthetic_image(spec.size, hue, &mut rng), None)
            })
            .collect();
        Dataset::from_samples(d, samples)
    };
    Ok((make(Domain::X, spec.hue_x), make(Domain::Y, spec.hue_y)))
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn synthetic_image(size: usize, hue: f32, rng: &mut ChaCha8Rng) -> RgbImage {
    let base: f32 = rng.gen_range(0.3..0.6);
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let freq: f32 = rng.gen_range(0.15..0.6);
    let amp: f32 = rng.gen_range(0.03..0.1);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut buf = vec![[0.0f32; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let stripe = amp * ((x as f32 * ca + y as f32 * sa) * freq).sin();
            let noise: f32 = rng.gen_range(-0.03..0.03);
            let g = base + stripe + noise;
            buf[y * size + x] = [g, g, g];
        }
    }
    let n_shapes = rng.gen_range(1..=3);
    let s = size as f32;
    for _ in 0..n_shapes {
        let color = hsv_to_rgb(
            hue + rng.gen_range(-0.02..0.02),
            rng.gen_range(0.7..0.95),
            rng.gen_range(0.6..0.95),
        );
        let cx = rng.gen_range(0.15 * s..0.85 * s);
        let cy = rng.gen_range(0.15 * s..0.85 * s);
        let r = rng.gen_range(s / 10.0..s / 4.0);
        let circle = rng.gen_bool(0.5);
        let aspect = rng.gen_range(0.6..1.6f32);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = if circle {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r * aspect && dy.abs() <= r / aspect
                };
                if inside {
                    buf[y * size + x] = color;
                }
            }
        }
    }
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let p = buf[y as usize * size + x as usize];
        Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// One draw from each domain, `(n, 3, size, size)` each, with no pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedBatch {
    pub x: Tensor,
    pub y: Tensor,
}

/// Deterministic unpaired batch stream. Draw `k` of a domain uses position
/// `k mod len` of that domain's shuffle for epoch `k / len`; augmentation
/// randomness is seeded per draw.
pub struct BatchIterator<'a> {
    dx: &'a Dataset,
    dy: &'a Dataset,
    cfg: ExperimentConfig,
    seed: u64,
    iteration: u64,
    perms: [Option<(u64, Vec<usize>)>; 2],
}

pub fn batch_iterator<'a>(
    dx: &'a Dataset,
    dy: &'a Dataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<BatchIterator<'a>> {
    for d in [dx, dy] {
        if d.is_empty() {
            return Err(Error::EmptyDataset(PathBuf::from(d.domain.label())));
        }
    }
    Ok(BatchIterator {
        dx,
        dy,
        cfg: cfg.clone(),
        seed,
        iteration: 0,
        perms: [None, None],
    })
}

impl BatchIterator<'_> {
    /// Positions the stream so the next batch is the one for `iteration`.
    pub fn seek(&mut self, iteration: u64) {
        self.iteration = iteration;
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Dataset index of draw `k` of a domain.
    pub fn index_of_draw(&mut self, domain: Domain, k: u64) -> usize {
        let slot = domain_tag(domain) as usize;
        let len = match domain {
            Domain::X => self.dx.len(),
            Domain::Y => self.dy.len(),
        } as u64;
        let epoch = k / len;
        let fresh = !matches!(&self.perms[slot], Some((e, _)) if *e == epoch);
        if fresh {
            let mut perm: Vec<usize> = (0..len as usize).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(&[TAG_SHUFFLE, self.seed, slot as u64, epoch]));
            perm.shuffle(&mut rng);
            self.perms[slot] = Some((epoch, perm));
        }
        self.perms[slot].as_ref().expect("permutation").1[(k % len) as usize]
    }

    pub fn batch_at(&mut self, iteration: u64) -> Result<UnpairedBatch> {
        let bs = self.cfg.batch_size as u64;
        let mut sides = Vec::with_capacity(2);
        for domain in [Domain::X, Domain::Y] {
            let ds = match domain {
                Domain::X => self.dx,
                Domain::Y => self.dy,
            };
            let mut parts = Vec::with_capacity(bs as usize);
            for b in 0..bs {
                let k = iteration * bs + b;
                let idx = self.index_of_draw(domain, k);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    TAG_AUGMENT,
                    self.seed,
                    domain_tag(domain),
                    k,
                ]));
                parts.push(augment(&ds.get(idx)?, &self.cfg, &mut rng)?.as_batch());
            }
            sides.push(Tensor::stack(&parts)?);
        }
        let y = sides.pop().expect("y side");
        let x = sides.pop().expect("x side");
        Ok(UnpairedBatch { x, y })
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<UnpairedBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batch_at(self.iteration);
        self.iteration += 1;
        Some(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_paper_config;

    fn desk_cfg() -> ExperimentConfig {
        let mut cfg = default_paper_config();
        cfg.image_size = 32;
        cfg
    }

    fn spec(n: usize) -> SyntheticSpec {
        SyntheticSpec {
            n,
            size: 32,
            hue_x: 0.0,
            hue_y: 0.6,
        }
    }

    #[test]
    fn derive_seed_is_order_sensitive() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[1, 2]), derive_seed(&[1, 2]));
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(resize_bilinear(&t, 2, 2).unwrap(), t);
        let c = Tensor::full(&[3, 5, 7], 0.25);
        let r = resize_bilinear(&c, 9, 4).unwrap();
        assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn resize_upsample_known_values() {
        // Two pixels 0 and 1 upsampled to four: centers at -0.25, 0.25, 0.75, 1.25.
        let t = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&t, 1, 4).unwrap();
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in r.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let (x, _) = make_synthetic_domains(spec(1), 3).unwrap();
        let s = x.get(0).unwrap();
        assert_eq!(hflip(&hflip(&s.pixels)), s.pixels);
        let cfg = desk_cfg();
        let flip = AugmentParams {
            flip: true,
            top: 2,
            left: 1,
        };
        let plain = AugmentParams { flip: false, ..flip };
        let mirrored = ImageSample {
            pixels: hflip(&s.pixels),
            source_path: None,
        };
        assert_eq!(
            augment_with(&mirrored, &cfg, flip).unwrap().pixels,
            augment_with(&s, &cfg, plain).unwrap().pixels
        );
    }

    #[test]
    fn resize_edge_matches_ratio() {
        let cfg = default_paper_config();
        assert_eq!(cfg.resize_edge(), 286);
        let cfg = desk_cfg();
        let (x, _) = make_synthetic_domains(spec(1), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&x.get(0).unwrap(), &cfg, &mut rng).unwrap();
        assert_eq!(out.pixels.shape(), &[3, 32, 32]);
        assert!(out.pixels.min() >= -1.0 && out.pixels.max() <= 1.0);
    }

    #[test]
    fn synthetic_is_deterministic_and_counted() {
        let (a, b) = make_synthetic_domains(spec(5), 7).unwrap();
        let (a2, _) = make_synthetic_domains(spec(5), 7).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(b.len(), 5);
        for i in 0..5 {
            assert_eq!(a.get(i).unwrap(), a2.get(i).unwrap());
        }
        assert!(make_synthetic_domains(spec(0), 7).is_err());
    }

    #[test]
    fn png_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (x, y) = make_synthetic_domains(spec(3), 1).unwrap();
        write_unpaired_dataset(dir.path(), (&x, &y), (&x, &y)).unwrap();
        let (ox, oy) = open_unpaired_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!((ox.len(), oy.len()), (3, 3));
        for i in 0..3 {
            assert_eq!(ox.get(i).unwrap().pixels, x.get(i).unwrap().pixels);
        }
        let names: Vec<_> = ox
            .paths()
            .iter()
            .map(|p| p.unwrap().file_name().unwrap().to_owned())
            .collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn missing_and_empty_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            open_unpaired_dataset(dir.path(), Split::Train),
            Err(Error::Path { .. })
        ));
        fs::create_dir_all(dir.path().join("trainA")).unwrap();
        fs::create_dir_all(dir.path().join("trainB")).unwrap();
        assert!(matches!(
            open_unpaired_dataset(dir.path(), Split::Train),
            Err(Error::EmptyDataset(_))
        ));
        fs::write(dir.path().join("trainA/bad.png"), b"not a png").unwrap();
        let x = Dataset::open_dir(Domain::X, &dir.path().join("trainA")).unwrap();
        match x.get(0) {
            Err(Error::Decode { path, .. }) => assert!(path.ends_with("bad.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn epochs_visit_every_image_once() {
        let mut cfg = desk_cfg();
        cfg.batch_size = 1;
        let (x, _) = make_synthetic_domains(spec(3), 1).unwrap();
        let (y, _) = make_synthetic_domains(SyntheticSpec { n: 5, ..spec(5) }, 2).unwrap();
        let y = Dataset { domain: Domain::Y, ..y };
        let mut it = batch_iterator(&x, &y, &cfg, 11).unwrap();
        let mut counts = [0usize; 3];
        for k in 0..45 {
            counts[it.index_of_draw(Domain::X, k)] += 1;
        }
        assert_eq!(counts, [15, 15, 15]);
    }

    #[test]
    fn batches_are_a_function_of_seed_and_iteration() {
        let cfg = desk_cfg();
        let (x, y) = make_synthetic_domains(spec(4), 1).unwrap();
        let first: Vec<_> = batch_iterator(&x, &y, &cfg, 5)
            .unwrap()
            .take(6)
            .map(|b| b.unwrap())
            .collect();
        let again: Vec<_> = batch_iterator(&x, &y, &cfg, 5)
            .unwrap()
            .take(6)
            .map(|b| b.unwrap())
            .collect();
        assert_eq!(first, again);
        let mut it = batch_iterator(&x, &y, &cfg, 5).unwrap();
        it.seek(4);
        assert_eq!(it.next().unwrap().unwrap(), first[4]);
        assert_eq!(first[0].x.shape(), &[1, 3, 32, 32]);
        let other: Vec<_> = batch_iterator(&x, &y, &cfg, 6)
            .unwrap()
            .take(6)
            .map(|b| b.unwrap())
            .collect();
        assert_ne!(first, other);
    }
}
