use rand_chacha::ChaCha8Rng;

use super::{latent_channels, INIT_STD, NORM_EPS};
use crate::autograd::{Graph, Var};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::params::{truncated_normal, Domain, Group, ParamId, ParamKind, ParamStore, Role};
use crate::tensor::Tensor;

/// ρ = softmax(logits)[0] = 0.9.
const RHO_ADARES: [f32; 2] = [2.197_224_6, 0.0];
/// ρ ≈ 1e-7: the plain norms start as layer norms.
const RHO_LIN: [f32; 2] = [-8.0, 8.0];

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Lin {
    gamma: ParamId,
    beta: ParamId,
    rho: ParamId,
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct AdaResBlock {
    conv1: Conv,
    rho1: ParamId,
    conv2: Conv,
    rho2: ParamId,
}

#[derive(Clone, Debug)]
struct UpStage {
    conv: Conv,
    norm: Lin,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    group: Group,
    prefix: String,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv {
        let w = Tensor::new(
            vec![cout, cin, k, k],
            truncated_normal(cout * cin * k * k, INIT_STD, self.rng),
        )
        .expect("conv weight shape");
        let w = self.store.add(format!("{}.{name}.weight", self.prefix), w, ParamKind::Weight, self.group);
        let b = self.store.add(
            format!("{}.{name}.bias", self.prefix),
            Tensor::zeros(&[cout]),
            ParamKind::Bias,
            self.group,
        );
        Conv { w, b, stride, pad }
    }

    fn dense(&mut self, name: &str, cin: usize, cout: usize) -> Dense {
        let w = Tensor::new(vec![cout, cin], truncated_normal(cout * cin, INIT_STD, self.rng))
            .expect("dense weight shape");
        let w = self.store.add(format!("{}.{name}.weight", self.prefix), w, ParamKind::Weight, self.group);
        let b = self.store.add(
            format!("{}.{name}.bias", self.prefix),
            Tensor::zeros(&[cout]),
            ParamKind::Bias,
            self.group,
        );
        Dense { w, b }
    }

    fn rho(&mut self, name: &str, init: [f32; 2]) -> ParamId {
        let t = Tensor::new(vec![2], init.to_vec()).expect("rho shape");
        self.store.add(format!("{}.{name}.rho", self.prefix), t, ParamKind::Norm, self.group)
    }

    fn lin(&mut self, name: &str, c: usize) -> Lin {
        let gamma = self.store.add(
            format!("{}.{name}.gamma", self.prefix),
            Tensor::full(&[c], 1.0),
            ParamKind::Norm,
            self.group,
        );
        let beta = self.store.add(
            format!("{}.{name}.beta", self.prefix),
            Tensor::zeros(&[c]),
            ParamKind::Norm,
            self.group,
        );
        let rho = self.rho(name, RHO_LIN);
        Lin { gamma, beta, rho }
    }
}

/// `(layer name, output shape)` per stage, in execution order.
pub type LayerTrace = Vec<(String, Vec<usize>)>;

/// Translator decoding a latent code of the source domain into the other domain:
/// sampling conv, AdaLIN residual bottleneck, sub-pixel up-sampling, `tanh` output.
#[derive(Clone, Debug)]
pub struct Generator {
    /// Source domain; the generator outputs images of `source.other()`.
    pub source: Domain,
    latent_channels: usize,
    sampling: Conv,
    sampling_norm: Lin,
    fc1: Dense,
    fc2: Dense,
    gamma_head: Dense,
    beta_head: Dense,
    blocks: Vec<AdaResBlock>,
    ups: Vec<UpStage>,
    out: Conv,
}

impl Generator {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &ExperimentConfig,
        source: Domain,
    ) -> Result<Generator> {
        let depth = cfg.shared_depth;
        if !(1..=4).contains(&depth) {
            return Err(Error::Configuration(format!("shared_depth must be in 1..=4, got {depth}")));
        }
        let f = cfg.base_filters;
        let width = 4 * f;
        let zc = latent_channels(depth, f);
        let group = Group::new(Role::Generator, source);
        let mut b = Builder {
            store,
            rng,
            group,
            prefix: group.to_string(),
        };
        let sampling = if depth == 1 {
            b.conv("sampling", zc, width, 4, 2, 1)
        } else {
            b.conv("sampling", zc, width, 3, 1, 1)
        };
        let sampling_norm = b.lin("sampling_norm", width);
        let fc1 = b.dense("mlp.fc1", width, width);
        let fc2 = b.dense("mlp.fc2", width, width);
        let gamma_head = b.dense("mlp.gamma", width, width);
        let beta_head = b.dense("mlp.beta", width, width);
        let blocks = (0..cfg.n_res_blocks)
            .map(|i| AdaResBlock {
                conv1: b.conv(&format!("res{i}.conv1"), width, width, 3, 1, 1),
                rho1: b.rho(&format!("res{i}.norm1"), RHO_ADARES),
                conv2: b.conv(&format!("res{i}.conv2"), width, width, 3, 1, 1),
                rho2: b.rho(&format!("res{i}.norm2"), RHO_ADARES),
            })
            .collect();
        let mut chans = vec![width];
        if depth == 4 {
            chans.push(width);
        }
        chans.extend([2 * f, f]);
        let ups = chans
            .windows(2)
            .enumerate()
            .map(|(i, w)| UpStage {
                conv: b.conv(&format!("up{i}.conv"), w[0], 4 * w[1], 3, 1, 1),
                norm: b.lin(&format!("up{i}.norm"), w[1]),
            })
            .collect();
        let out = b.conv("out", f, cfg.channels, 7, 1, 3);
        Ok(Generator {
            source,
            latent_channels: zc,
            sampling,
            sampling_norm,
            fc1,
            fc2,
            gamma_head,
            beta_head,
            blocks,
            ups,
            out,
        })
    }

    pub fn group(&self) -> Group {
        Group::new(Role::Generator, self.source)
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn conv(g: &mut Graph, c: &Conv, x: Var) -> Result<Var> {
        let w = g.param(c.w);
        let b = g.param(c.b);
        g.conv2d(x, w, Some(b), c.stride, c.pad)
    }

    fn dense(g: &mut Graph, d: &Dense, x: Var) -> Result<Var> {
        let w = g.param(d.w);
        let b = g.param(d.b);
        g.linear(x, w, Some(b))
    }

    fn lin(g: &mut Graph, n: &Lin, x: Var) -> Result<Var> {
        let gm = g.param(n.gamma);
        let bt = g.param(n.beta);
        let rho = g.param(n.rho);
        g.layer_instance_norm(x, gm, bt, rho, NORM_EPS)
    }

    /// Decodes `latent` into an image; also returns `(layer name, shape)` per stage.
    pub fn forward(&self, g: &mut Graph, latent: Var) -> Result<(Var, LayerTrace)> {
        let (_, c, _, _) = g.value(latent).dims4()?;
        if c != self.latent_channels {
            return Err(Error::shape(format!(
                "generator expects {} latent channels, got {c}",
                self.latent_channels
            )));
        }
        let mut trace = Vec::new();
        let x = Self::conv(g, &self.sampling, latent)?;
        let x = Self::lin(g, &self.sampling_norm, x)?;
        let mut x = g.relu(x);
        trace.push(("sampling".to_string(), g.shape(x).to_vec()));

        let pooled = g.global_avg_pool(x)?;
        let h = Self::dense(g, &self.fc1, pooled)?;
        let h = g.relu(h);
        let h = Self::dense(g, &self.fc2, h)?;
        let h = g.relu(h);
        let gamma = Self::dense(g, &self.gamma_head, h)?;
        let beta = Self::dense(g, &self.beta_head, h)?;
        trace.push(("mlp.gamma".to_string(), g.shape(gamma).to_vec()));

        for (i, blk) in self.blocks.iter().enumerate() {
            let rho1 = g.param(blk.rho1);
            let rho2 = g.param(blk.rho2);
            let y = Self::conv(g, &blk.conv1, x)?;
            let y = g.layer_instance_norm(y, gamma, beta, rho1, NORM_EPS)?;
            let y = g.relu(y);
            let y = Self::conv(g, &blk.conv2, y)?;
            let y = g.layer_instance_norm(y, gamma, beta, rho2, NORM_EPS)?;
            x = g.add(y, x)?;
            trace.push((format!("res{i}"), g.shape(x).to_vec()));
        }
        for (i, up) in self.ups.iter().enumerate() {
            let y = Self::conv(g, &up.conv, x)?;
            let y = g.pixel_shuffle(y, 2)?;
            let y = Self::lin(g, &up.norm, y)?;
            x = g.relu(y);
            trace.push((format!("up{i}"), g.shape(x).to_vec()));
        }
        let y = Self::conv(g, &self.out, x)?;
        let y = g.tanh(y);
        trace.push(("out".to_string(), g.shape(y).to_vec()));
        Ok((y, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_paper_config;
    use rand::SeedableRng;

    #[test]
    fn desk_generator_shapes_and_range() {
        let mut cfg = default_paper_config();
        cfg.base_filters = 4;
        cfg.n_res_blocks = 2;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen = Generator::build(&mut store, &mut rng, &cfg, Domain::X).unwrap();
        let mut g = Graph::frozen(&store);
        let z = g.constant(Tensor::new(vec![1, 8, 16, 16], truncated_normal(8 * 256, 3.0, &mut rng)).unwrap());
        let (img, trace) = gen.forward(&mut g, z).unwrap();
        assert_eq!(g.shape(img), &[1, 3, 64, 64]);
        assert!(g.value(img).min() >= -1.0 && g.value(img).max() <= 1.0);
        assert_eq!(trace.iter().filter(|(n, _)| n.starts_with("res")).count(), 2);
        let bad = g.constant(Tensor::zeros(&[1, 7, 16, 16]));
        assert!(matches!(gen.forward(&mut g, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn every_depth_restores_resolution() {
        for depth in 1..=4 {
            let mut cfg = default_paper_config();
            cfg.base_filters = 2;
            cfg.n_res_blocks = 1;
            cfg.shared_depth = depth;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let gen = Generator::build(&mut store, &mut rng, &cfg, Domain::Y).unwrap();
            let s = 32 / super::super::latent_stride(depth);
            let c = latent_channels(depth, 2);
            let mut g = Graph::frozen(&store);
            let z = g.constant(Tensor::zeros(&[1, c, s, s]));
            let (img, _) = gen.forward(&mut g, z).unwrap();
            assert_eq!(g.shape(img), &[1, 3, 32, 32], "depth {depth}");
        }
    }
}
