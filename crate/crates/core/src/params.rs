//! Parameter storage, ownership groups and spectral-normalization state.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::kernels::{gemm, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Domain::X => "x",
            Domain::Y => "y",
        }
    }
}

/// Which network component a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    /// Encoder of the domain (the shared discriminator trunk under NICE).
    Encoder,
    /// Remaining discriminator layers and classifier heads.
    Classifier,
    /// Generator decoding *into the other* domain.
    Generator,
}

/// A parameter group such as `E_x` or `G_xy`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Group {
    pub role: Role,
    pub domain: Domain,
}

impl Group {
    pub const E_X: Group = Group::new(Role::Encoder, Domain::X);
    pub const E_Y: Group = Group::new(Role::Encoder, Domain::Y);
    pub const C_X: Group = Group::new(Role::Classifier, Domain::X);
    pub const C_Y: Group = Group::new(Role::Classifier, Domain::Y);
    /// Generator X→Y.
    pub const G_XY: Group = Group::new(Role::Generator, Domain::X);
    /// Generator Y→X.
    pub const G_YX: Group = Group::new(Role::Generator, Domain::Y);

    pub const fn new(role: Role, domain: Domain) -> Self {
        Group { role, domain }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            Role::Encoder => write!(f, "E_{}", self.domain.label()),
            Role::Classifier => write!(f, "C_{}", self.domain.label()),
            Role::Generator => write!(
                f,
                "G_{}{}",
                self.domain.label(),
                self.domain.other().label()
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Normalization parameters (ρ logits, affine γ/β); exempt from weight decay.
    Norm,
    /// Residual-attention mixing scalar.
    Scalar,
}

/// Power-iteration vectors for one spectrally normalized weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    /// Left singular vector estimate, length = output channels.
    pub u: Vec<f32>,
    /// Right singular vector estimate, length = fan-in.
    pub v: Vec<f32>,
    pub iterations: u64,
}

/// Lower bound applied to σ̂ and to vector norms during power iteration.
pub const SPECTRAL_EPS: f32 = 1e-12;

impl SpectralState {
    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let mut u: Vec<f32> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        let mut v: Vec<f32> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        normalize(&mut u);
        normalize(&mut v);
        SpectralState {
            u,
            v,
            iterations: 0,
        }
    }

    /// Runs `n_iter` power iterations on the `rows × cols` matrix `w`.
    /// A zero matrix leaves the vectors unchanged.
    pub fn power_iterate(&mut self, w: &[f32], n_iter: usize) {
        let rows = self.u.len();
        let cols = self.v.len();
        let m = MatRef::new(w, rows, cols);
        let mut v_new = vec![0.0f32; cols];
        let mut u_new = vec![0.0f32; rows];
        for _ in 0..n_iter {
            gemm(m.t(), MatRef::new(&self.u, rows, 1), &mut v_new, false);
            if norm(&v_new) <= SPECTRAL_EPS {
                return;
            }
            normalize(&mut v_new);
            gemm(m, MatRef::new(&v_new, cols, 1), &mut u_new, false);
            if norm(&u_new) <= SPECTRAL_EPS {
                return;
            }
            normalize(&mut u_new);
            self.v.copy_from_slice(&v_new);
            self.u.copy_from_slice(&u_new);
            self.iterations += 1;
        }
    }

    /// σ̂ = uᵀ W v, floored at [`SPECTRAL_EPS`].
    pub fn sigma(&self, w: &[f32]) -> f32 {
        let rows = self.u.len();
        let cols = self.v.len();
        let mut wv = vec![0.0f32; rows];
        gemm(
            MatRef::new(w, rows, cols),
            MatRef::new(&self.v, cols, 1),
            &mut wv,
            false,
        );
        let s: f64 = wv
            .iter()
            .zip(&self.u)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        (s as f32).max(SPECTRAL_EPS)
    }
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32
}

fn normalize(v: &mut [f32]) {
    let n = norm(v).max(SPECTRAL_EPS);
    v.iter_mut().for_each(|x| *x /= n);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub group: Group,
    pub spectral: Option<SpectralState>,
}

impl Param {
    /// Weight viewed as a matrix: (first dimension, product of the rest).
    pub fn matrix_dims(&self) -> (usize, usize) {
        let shape = self.value.shape();
        let rows = shape[0];
        (rows, self.value.len() / rows.max(1))
    }
}

/// Owner of every trainable tensor of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind, group: Group) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            kind,
            group,
            spectral: None,
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a weight carrying spectral-normalization state.
    pub fn add_spectral(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        group: Group,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let id = self.add(name, value, ParamKind::Weight, group);
        let (rows, cols) = self.params[id.0].matrix_dims();
        // One warm-up iteration so that σ̂ = |Wv| > 0 before the first update.
        let mut st = SpectralState::random(rows, cols, rng);
        st.power_iterate(self.params[id.0].value.data(), 1);
        self.params[id.0].spectral = Some(st);
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, groups: &[Group]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(id, _)| id)
            .collect()
    }

    /// Total scalar count of the parameters in `groups`.
    pub fn count_in(&self, groups: &[Group]) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.value.len())
            .sum()
    }

    /// Advances the power iteration of every spectrally normalized weight in `groups`.
    pub fn power_iterate(&mut self, groups: &[Group], n_iter: usize) {
        for p in self.params.iter_mut().filter(|p| groups.contains(&p.group)) {
            if let Some(state) = p.spectral.as_mut() {
                state.power_iterate(p.value.data(), n_iter);
            }
        }
    }
}

/// Samples from N(0, std²) truncated to ±2·std by rejection.
pub fn truncated_normal(len: usize, std: f32, rng: &mut impl Rng) -> Vec<f32> {
    (0..len)
        .map(|_| loop {
            let z: f32 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn group_names() {
        assert_eq!(Group::G_XY.to_string(), "G_xy");
        assert_eq!(Group::G_YX.to_string(), "G_yx");
        assert_eq!(Group::E_X.to_string(), "E_x");
        assert_eq!(Group::C_Y.to_string(), "C_y");
    }

    #[test]
    fn power_iteration_keeps_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = truncated_normal(6 * 10, 1.0, &mut rng);
        let mut s = SpectralState::random(6, 10, &mut rng);
        s.power_iterate(&w, 3);
        assert!((norm(&s.u) - 1.0).abs() < 1e-5);
        assert!((norm(&s.v) - 1.0).abs() < 1e-5);
        assert_eq!(s.iterations, 3);
    }

    #[test]
    fn zero_matrix_is_left_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = SpectralState::random(3, 4, &mut rng);
        let before = s.clone();
        s.power_iterate(&[0.0; 12], 5);
        assert_eq!(s, before);
        assert_eq!(s.sigma(&[0.0; 12]), SPECTRAL_EPS);
    }

    #[test]
    fn truncation_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = truncated_normal(10_000, 0.02, &mut rng);
        assert!(v.iter().all(|x| x.abs() <= 0.04));
    }
}
