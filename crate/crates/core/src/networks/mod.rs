//! Discriminators with a reusable encoder trunk, and AdaLIN generators.

mod discriminator;
mod generator;
mod receptive;

use serde::{Deserialize, Serialize};

pub use discriminator::{residual_attention, DiscOutput, Discriminator, RaOutput, RaWeights};
pub use generator::{Generator, LayerTrace};
pub use receptive::{probe_receptive_field, ProbeScale};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::SpectralState;
use crate::tensor::Tensor;

/// Leaky slope used throughout the discriminator.
pub const LEAKY_SLOPE: f32 = 0.2;
/// Normalization epsilon.
pub const NORM_EPS: f32 = 1e-5;
/// Standard deviation of the truncated-Gaussian weight initialization.
pub const INIT_STD: f32 = 0.02;

/// Classifier scale of the multi-scale discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Pooled attention logit over the trunk features.
    C0,
    /// Patch classifier after one further down-sampling.
    C1,
    /// Patch classifier after three further down-samplings.
    C2,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::C0, Scale::C1, Scale::C2];

    pub fn name(self) -> &'static str {
        match self {
            Scale::C0 => "c0",
            Scale::C1 => "c1",
            Scale::C2 => "c2",
        }
    }
}

/// Per-scale discriminator outputs, ordered c0, c1, c2; disabled scales are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleLogits {
    parts: Vec<(Scale, Tensor)>,
}

impl MultiScaleLogits {
    pub fn from_parts(mut parts: Vec<(Scale, Tensor)>) -> Self {
        parts.sort_by_key(|(s, _)| *s);
        MultiScaleLogits { parts }
    }

    pub fn get(&self, s: Scale) -> Option<&Tensor> {
        self.parts.iter().find(|(k, _)| *k == s).map(|(_, t)| t)
    }

    pub fn enabled(&self) -> Vec<Scale> {
        self.parts.iter().map(|(s, _)| *s).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Scale, &Tensor)> {
        self.parts.iter().map(|(s, t)| (*s, t))
    }
}

/// Tape handles of the per-scale logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleVars {
    parts: Vec<(Scale, Var)>,
}

impl ScaleVars {
    pub fn from_parts(mut parts: Vec<(Scale, Var)>) -> Self {
        parts.sort_by_key(|(s, _)| *s);
        ScaleVars { parts }
    }

    pub fn enabled(&self) -> Vec<Scale> {
        self.parts.iter().map(|(s, _)| *s).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Scale, Var)> + '_ {
        self.parts.iter().copied()
    }

    pub fn get(&self, s: Scale) -> Option<Var> {
        self.parts.iter().find(|(k, _)| *k == s).map(|(_, v)| *v)
    }

    pub fn to_tensors(&self, g: &Graph) -> MultiScaleLogits {
        MultiScaleLogits::from_parts(
            self.parts
                .iter()
                .map(|(s, v)| (*s, g.value(*v).clone()))
                .collect(),
        )
    }
}

/// Encoder output: the shared hidden representation of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    /// `(n, c, h, w)` feature block.
    pub features: Tensor,
    /// `(n, 1)` attention logit, present when the attention block is part of the encoder.
    pub cam_logit: Option<Tensor>,
}

/// Channel count of the latent for a trunk depth, given the base width.
pub fn latent_channels(shared_depth: usize, base_filters: usize) -> usize {
    match shared_depth {
        1 => base_filters,
        2 | 3 => 2 * base_filters,
        _ => 4 * base_filters,
    }
}

/// Downsampling factor of the latent relative to the image for a trunk depth.
pub fn latent_stride(shared_depth: usize) -> usize {
    match shared_depth {
        1 => 2,
        2 | 3 => 4,
        _ => 8,
    }
}

/// Adaptive layer-instance normalization on plain tensors:
/// `γ·(ρ·IN(x) + (1−ρ)·LN(x)) + β`, with `ρ = softmax(rho_logits)[0]`.
/// `gamma`/`beta` hold either one value per channel or one per (sample, channel).
pub fn adalin(
    features: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    rho_logits: [f32; 2],
    eps: f32,
) -> Result<Tensor> {
    let store = crate::params::ParamStore::new();
    let mut g = Graph::frozen(&store);
    let x = g.constant(features.clone());
    let gm = g.constant(gamma.clone());
    let bt = g.constant(beta.clone());
    let rho = g.constant(Tensor::new(vec![2], rho_logits.to_vec())?);
    let y = g.layer_instance_norm(x, gm, bt, rho, eps)?;
    Ok(g.value(y).clone())
}

/// Runs `n_iter` power iterations on `weight` (viewed as out-channels × rest)
/// and returns `weight / σ̂` together with the updated state.
pub fn apply_spectral_norm(
    weight: &Tensor,
    state: &SpectralState,
    n_iter: usize,
) -> Result<(Tensor, SpectralState)> {
    if n_iter == 0 {
        return Err(Error::Parameter("n_iter must be >= 1".into()));
    }
    let rows = weight.shape()[0];
    let cols = weight.len() / rows.max(1);
    if state.u.len() != rows || state.v.len() != cols {
        return Err(Error::shape(format!(
            "spectral state ({}, {}) does not match a {rows}x{cols} weight",
            state.u.len(),
            state.v.len()
        )));
    }
    let mut next = state.clone();
    next.power_iterate(weight.data(), n_iter);
    let sigma = next.sigma(weight.data());
    Ok((weight.map(|w| w / sigma), next))
}

/// A sub-pixel stage on plain tensors: conv (to 4× the target channels),
/// 2× pixel shuffle, layer-instance norm, ReLU.
#[allow(clippy::too_many_arguments)]
pub fn sub_pixel_upsample(
    features: &Tensor,
    conv_weight: &Tensor,
    conv_bias: &Tensor,
    norm_gamma: &Tensor,
    norm_beta: &Tensor,
    rho_logits: [f32; 2],
) -> Result<Tensor> {
    let store = crate::params::ParamStore::new();
    let mut g = Graph::frozen(&store);
    let x = g.constant(features.clone());
    let w = g.constant(conv_weight.clone());
    let b = g.constant(conv_bias.clone());
    let y = g.conv2d(x, w, Some(b), 1, conv_weight.shape()[2] / 2)?;
    let y = g.pixel_shuffle(y, 2)?;
    let gm = g.constant(norm_gamma.clone());
    let bt = g.constant(norm_beta.clone());
    let rho = g.constant(Tensor::new(vec![2], rho_logits.to_vec())?);
    let y = g.layer_instance_norm(y, gm, bt, rho, NORM_EPS)?;
    let y = g.relu(y);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), crate::params::truncated_normal(len, 1.0, &mut rng)).unwrap()
    }

    fn group_stats(v: &[f32]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().map(|x| *x as f64).sum::<f64>() / n;
        let var = v.iter().map(|x| (*x as f64 - m).powi(2)).sum::<f64>() / n;
        (m, var)
    }

    #[test]
    fn adalin_instance_endpoint() {
        let x = rand_tensor(&[2, 3, 4, 4], 1).map(|v| 3.0 * v + 1.5);
        let y = adalin(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), [60.0, -60.0], 1e-5).unwrap();
        for plane in y.data().chunks(16) {
            let (m, v) = group_stats(plane);
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-3, "{m} {v}");
        }
    }

    #[test]
    fn adalin_layer_endpoint() {
        let x = rand_tensor(&[2, 3, 4, 4], 2).map(|v| 2.0 * v - 0.7);
        let y = adalin(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), [-60.0, 60.0], 1e-5).unwrap();
        for sample in y.data().chunks(48) {
            let (m, v) = group_stats(sample);
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-3, "{m} {v}");
        }
    }

    #[test]
    fn adalin_constant_input_gives_beta() {
        let x = Tensor::full(&[1, 2, 3, 3], 4.2);
        let beta = Tensor::new(vec![2], vec![0.25, -1.0]).unwrap();
        let y = adalin(&x, &Tensor::full(&[2], 3.0), &beta, [0.3, 0.1], 1e-5).unwrap();
        for (c, plane) in y.data().chunks(9).enumerate() {
            assert!(plane.iter().all(|v| (v - beta.data()[c]).abs() < 1e-6));
        }
    }

    #[test]
    fn adalin_rejects_bad_eps() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let one = Tensor::full(&[1], 1.0);
        assert!(matches!(
            adalin(&x, &one, &one, [0.0, 0.0], 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn spectral_norm_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = SpectralState::random(2, 2, &mut rng);
        let (out, _) = apply_spectral_norm(&eye, &s, 5).unwrap();
        for (a, b) in out.data().iter().zip(eye.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let diag = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let (out, next) = apply_spectral_norm(&diag, &s, 50).unwrap();
        let expect = [1.0, 0.0, 0.0, 0.5];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-5, "{:?}", out.data());
        }
        assert_eq!(next.iterations, 50);
        let zero = Tensor::zeros(&[2, 2]);
        let (out, _) = apply_spectral_norm(&zero, &s, 3).unwrap();
        assert_eq!(out, zero);
        assert!(apply_spectral_norm(&eye, &s, 0).is_err());
    }

    #[test]
    fn sub_pixel_shapes() {
        let x = rand_tensor(&[1, 8, 4, 4], 5);
        let w = rand_tensor(&[16, 8, 3, 3], 6).map(|v| v * 0.1);
        let y = sub_pixel_upsample(
            &x,
            &w,
            &Tensor::zeros(&[16]),
            &Tensor::full(&[4], 1.0),
            &Tensor::zeros(&[4]),
            [0.0, 16.0],
        )
        .unwrap();
        assert_eq!(y.hwc().unwrap(), (8, 8, 4));
        let bad = rand_tensor(&[6, 8, 3, 3], 7);
        assert!(sub_pixel_upsample(
            &x,
            &bad,
            &Tensor::zeros(&[6]),
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            [0.0, 0.0]
        )
        .is_err());
    }

    #[test]
    fn latent_geometry_table() {
        assert_eq!(
            (1..=4).map(|d| latent_channels(d, 64)).collect::<Vec<_>>(),
            vec![64, 128, 128, 256]
        );
        assert_eq!(
            (1..=4).map(latent_stride).collect::<Vec<_>>(),
            vec![2, 4, 4, 8]
        );
    }
}
