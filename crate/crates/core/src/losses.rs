//! Least-squares adversarial, cycle and reconstruction losses.
//!
//! The elementwise reductions are generic over the float type so the same
//! code serves the `f32` training tape and `f64` gradient checks.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::networks::{MultiScaleLogits, ScaleVars};
use crate::tensor::Tensor;

/// `mean((x − t)²)`.
pub fn mean_squared_to_target<T: Float>(x: &[T], t: T) -> T {
    let n = T::from(x.len()).unwrap();
    x.iter().fold(T::zero(), |acc, &v| acc + (v - t) * (v - t)) / n
}

pub fn mean_squared_to_target_grad<T: Float>(x: &[T], t: T, out: &mut [T]) {
    let k = T::from(2.0).unwrap() / T::from(x.len()).unwrap();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = k * (v - t);
    }
}

/// `mean(|a − b|)`.
pub fn mean_abs_diff<T: Float>(a: &[T], b: &[T]) -> T {
    let n = T::from(a.len()).unwrap();
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs())
        / n
}

/// Gradient of [`mean_abs_diff`] with respect to `a`; zero where `a == b`.
pub fn mean_abs_diff_grad<T: Float>(a: &[T], b: &[T], out: &mut [T]) {
    let k = T::one() / T::from(a.len()).unwrap();
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        let d = x - y;
        *o = if d > T::zero() {
            k
        } else if d < T::zero() {
            -k
        } else {
            T::zero()
        };
    }
}

fn check_same_scales(real: &MultiScaleLogits, fake: &MultiScaleLogits) -> Result<()> {
    if real.enabled() != fake.enabled() {
        return Err(Error::shape(format!(
            "real logits carry scales {:?} but fake logits carry {:?}",
            real.enabled(),
            fake.enabled()
        )));
    }
    Ok(())
}

/// Discriminator loss: Σ over scales of `mean((real − 1)²) + mean(fake²)`.
pub fn lsgan_d(real: &MultiScaleLogits, fake: &MultiScaleLogits) -> Result<f64> {
    check_same_scales(real, fake)?;
    Ok(real
        .iter()
        .zip(fake.iter())
        .map(|((_, r), (_, f))| {
            mean_squared_to_target(&widen(r), 1.0) + mean_squared_to_target(&widen(f), 0.0)
        })
        .sum())
}

/// Generator loss: Σ over scales of `mean((fake − 1)²)`.
pub fn lsgan_g(fake: &MultiScaleLogits) -> f64 {
    fake.iter()
        .map(|(_, f)| mean_squared_to_target(&widen(f), 1.0))
        .sum()
}

/// Mean absolute difference between two images of equal shape.
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "l1 between {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(mean_abs_diff(&widen(a), &widen(b)))
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|v| *v as f64).collect()
}

/// Tape version of [`lsgan_d`].
pub fn lsgan_d_graph(g: &mut Graph, real: &ScaleVars, fake: &ScaleVars) -> Result<Var> {
    if real.enabled() != fake.enabled() {
        return Err(Error::shape("real and fake logits carry different scales"));
    }
    let mut terms = Vec::new();
    for ((_, r), (_, f)) in real.iter().zip(fake.iter()) {
        terms.push(g.mse_target(r, 1.0));
        terms.push(g.mse_target(f, 0.0));
    }
    Ok(g.sum(&terms))
}

/// Tape version of [`lsgan_g`].
pub fn lsgan_g_graph(g: &mut Graph, fake: &ScaleVars) -> Var {
    let terms: Vec<Var> = fake.iter().map(|(_, f)| g.mse_target(f, 1.0)).collect();
    g.sum(&terms)
}

/// Every loss term of one training iteration, in both directions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    /// Discriminator loss of `D_x` (real X vs translated Y→X).
    pub d_adv_x: f64,
    pub d_adv_y: f64,
    /// Generator adversarial loss against `D_x` (for `G_yx`).
    pub g_adv_x: f64,
    pub g_adv_y: f64,
    /// `|x − G_yx(E_y(G_xy(E_x(x))))|₁`.
    pub cycle_x: f64,
    pub cycle_y: f64,
    /// `|x − G_yx(E_x(x))|₁`.
    pub recon_x: f64,
    pub recon_y: f64,
    pub total_d: f64,
    pub total_g: f64,
}

impl LossBundle {
    pub const PART_NAMES: [&'static str; 8] = [
        "d_adv_x", "d_adv_y", "g_adv_x", "g_adv_y", "cycle_x", "cycle_y", "recon_x", "recon_y",
    ];

    pub fn parts(&self) -> [(&'static str, f64); 8] {
        [
            ("d_adv_x", self.d_adv_x),
            ("d_adv_y", self.d_adv_y),
            ("g_adv_x", self.g_adv_x),
            ("g_adv_y", self.g_adv_y),
            ("cycle_x", self.cycle_x),
            ("cycle_y", self.cycle_y),
            ("recon_x", self.recon_x),
            ("recon_y", self.recon_y),
        ]
    }

    /// Every field including totals, in log order.
    pub fn fields(&self) -> [(&'static str, f64); 10] {
        let p = self.parts();
        [
            p[0],
            p[1],
            p[2],
            p[3],
            p[4],
            p[5],
            p[6],
            p[7],
            ("total_d", self.total_d),
            ("total_g", self.total_g),
        ]
    }

    /// The same losses with the domain labels exchanged.
    pub fn swapped(&self) -> LossBundle {
        LossBundle {
            d_adv_x: self.d_adv_y,
            d_adv_y: self.d_adv_x,
            g_adv_x: self.g_adv_y,
            g_adv_y: self.g_adv_x,
            cycle_x: self.cycle_y,
            cycle_y: self.cycle_x,
            recon_x: self.recon_y,
            recon_y: self.recon_x,
            total_d: self.total_d,
            total_g: self.total_g,
        }
    }
}

/// Trade-off weights of the full objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gan: f64,
    pub cycle: f64,
    pub recon: f64,
}

impl From<&ExperimentConfig> for LossWeights {
    fn from(cfg: &ExperimentConfig) -> Self {
        LossWeights {
            gan: cfg.lambda_gan,
            cycle: cfg.lambda_cycle,
            recon: cfg.lambda_recon,
        }
    }
}

/// `total_d = λ₁(d_x + d_y)`,
/// `total_g = λ₁(g_x + g_y) + λ₂(cycle_x + cycle_y) + λ₃(recon_x + recon_y)`.
pub fn compose_objectives(parts: &LossBundle, w: LossWeights) -> Result<(f64, f64)> {
    for (name, v) in parts.parts() {
        if v.is_nan() {
            return Err(Error::NonFinite {
                name: name.to_string(),
                iteration: 0,
            });
        }
    }
    let total_d = w.gan * (parts.d_adv_x + parts.d_adv_y);
    let total_g = w.gan * (parts.g_adv_x + parts.g_adv_y)
        + w.cycle * (parts.cycle_x + parts.cycle_y)
        + w.recon * (parts.recon_x + parts.recon_y);
    Ok((total_d, total_g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::Scale;

    fn one_scale(v: f32) -> MultiScaleLogits {
        MultiScaleLogits::from_parts(vec![(Scale::C0, Tensor::scalar(v))])
    }

    fn all_scales(v: f32) -> MultiScaleLogits {
        MultiScaleLogits::from_parts(vec![
            (Scale::C0, Tensor::full(&[1, 1], v)),
            (Scale::C1, Tensor::full(&[1, 1, 3, 3], v)),
            (Scale::C2, Tensor::full(&[1, 1, 2, 2], v)),
        ])
    }

    #[test]
    fn lsgan_d_fixtures() {
        assert_eq!(lsgan_d(&all_scales(1.0), &all_scales(0.0)).unwrap(), 0.0);
        assert_eq!(lsgan_d(&one_scale(0.0), &one_scale(1.0)).unwrap(), 2.0);
        assert_eq!(lsgan_d(&one_scale(0.5), &one_scale(0.5)).unwrap(), 0.5);
    }

    #[test]
    fn lsgan_d_rejects_scale_mismatch() {
        assert!(lsgan_d(&one_scale(1.0), &all_scales(0.0)).is_err());
    }

    #[test]
    fn lsgan_g_fixtures() {
        assert_eq!(lsgan_g(&all_scales(1.0)), 0.0);
        assert_eq!(lsgan_g(&one_scale(0.0)), 1.0);
        assert_eq!(lsgan_g(&all_scales(0.0)), 3.0);
    }

    #[test]
    fn l1_fixtures() {
        let a = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let z = Tensor::zeros(&[2]);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a, &z).unwrap(), 1.0);
        let a2 = a.map(|v| 2.0 * v);
        let z2 = z.map(|v| 2.0 * v);
        assert_eq!(l1_loss(&a2, &z2).unwrap(), 2.0 * l1_loss(&a, &z).unwrap());
        assert!(l1_loss(&a, &Tensor::zeros(&[3])).is_err());
    }

    fn unit_bundle() -> LossBundle {
        LossBundle {
            d_adv_x: 1.0,
            d_adv_y: 1.0,
            g_adv_x: 1.0,
            g_adv_y: 1.0,
            cycle_x: 1.0,
            cycle_y: 1.0,
            recon_x: 1.0,
            recon_y: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn compose_fixtures() {
        let w = LossWeights {
            gan: 1.0,
            cycle: 10.0,
            recon: 10.0,
        };
        assert_eq!(compose_objectives(&unit_bundle(), w).unwrap(), (2.0, 42.0));
        assert_eq!(
            compose_objectives(&LossBundle::default(), w).unwrap(),
            (0.0, 0.0)
        );
        let adv_only = LossWeights {
            gan: 1.0,
            cycle: 0.0,
            recon: 0.0,
        };
        assert_eq!(compose_objectives(&unit_bundle(), adv_only).unwrap().1, 2.0);
    }

    #[test]
    fn compose_names_the_nan_part() {
        let mut b = unit_bundle();
        b.cycle_y = f64::NAN;
        let w = LossWeights {
            gan: 1.0,
            cycle: 10.0,
            recon: 10.0,
        };
        match compose_objectives(&b, w) {
            Err(Error::NonFinite { name, .. }) => assert_eq!(name, "cycle_y"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn swapping_domains_keeps_totals() {
        let b = LossBundle {
            d_adv_x: 0.3,
            d_adv_y: 0.7,
            g_adv_x: 0.2,
            g_adv_y: 0.9,
            cycle_x: 0.1,
            cycle_y: 0.4,
            recon_x: 0.05,
            recon_y: 0.6,
            ..Default::default()
        };
        let w = LossWeights {
            gan: 1.0,
            cycle: 10.0,
            recon: 10.0,
        };
        let (d1, g1) = compose_objectives(&b, w).unwrap();
        let (d2, g2) = compose_objectives(&b.swapped(), w).unwrap();
        assert_eq!(d1, d2);
        assert!((g1 - g2).abs() < 1e-12);
    }
}
