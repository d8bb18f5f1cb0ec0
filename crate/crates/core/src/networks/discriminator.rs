use rand_chacha::ChaCha8Rng;

use super::{ScaleVars, Scale, INIT_STD, LEAKY_SLOPE};
use crate::autograd::{Graph, Var};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::params::{truncated_normal, Domain, Group, ParamId, ParamKind, ParamStore, Role};
use crate::tensor::Tensor;

/// Trunk layers in order: conv0, down0, residual attention, down1.
pub const TRUNK_LEN: usize = 4;
const RA_INDEX: usize = 2;

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        group: Group,
    ) -> Conv {
        let w = Tensor::new(vec![cout, cin, k, k], truncated_normal(cout * cin * k * k, INIT_STD, rng))
            .expect("conv weight shape");
        let w = store.add_spectral(format!("{name}.weight"), w, group, rng);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Bias, group);
        Conv { w, b, stride, pad }
    }

    fn forward(&self, g: &mut Graph, x: Var, sn: bool) -> Result<Var> {
        let w = weight(g, self.w, sn)?;
        let b = g.param(self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

fn weight(g: &mut Graph, id: ParamId, sn: bool) -> Result<Var> {
    if sn {
        g.spectral_param(id)
    } else {
        Ok(g.param(id))
    }
}

/// Parameter handles of the residual-attention block.
#[derive(Clone, Debug)]
pub struct RaParams {
    /// `(1, 2c)` attention MLP weight over `[gap ∥ gmp]`.
    fc_w: ParamId,
    fc_b: ParamId,
    gamma: ParamId,
    conv: Conv,
}

/// Plain-tensor weights of a residual-attention block, for standalone evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RaWeights {
    /// `(1, 2c)`; also used directly as the per-channel weights `w`.
    pub fc_w: Tensor,
    /// `(1)`.
    pub fc_b: Tensor,
    /// `(c, 2c, 1, 1)`.
    pub conv_w: Tensor,
    /// `(c)`.
    pub conv_b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaOutput {
    /// The `2c`-channel tensor entering the 1×1 conv.
    pub pre_conv: Tensor,
    /// Block output after the 1×1 conv and leaky activation.
    pub features: Tensor,
    /// `(n, 1)`.
    pub cam_logit: Tensor,
}

struct RaVars {
    pre_conv: Var,
    out: Var,
    cam: Var,
}

/// `cam = fc([gap(x) ∥ gmp(x)])`; `a = γ·(w ⊙ [x ∥ x]) + [x ∥ x]` (or `w ⊙ [x ∥ x]`
/// without the residual path); output `leaky(conv1x1(a))`.
#[allow(clippy::too_many_arguments)]
fn ra_forward(
    g: &mut Graph,
    x: Var,
    fc_w: Var,
    fc_b: Var,
    gamma: Var,
    conv_w: Var,
    conv_b: Var,
    residual: bool,
) -> Result<RaVars> {
    let (n, c, _, _) = g.value(x).dims4()?;
    if g.shape(fc_w) != [1, 2 * c] {
        return Err(Error::shape(format!(
            "attention weight {:?} does not fit {c} feature channels",
            g.shape(fc_w)
        )));
    }
    let gap = g.global_avg_pool(x)?;
    let gmp = g.global_max_pool(x)?;
    let gap = g.reshape(gap, &[n, c, 1, 1])?;
    let gmp = g.reshape(gmp, &[n, c, 1, 1])?;
    let pooled = g.concat_channels(gap, gmp)?;
    let pooled = g.reshape(pooled, &[n, 2 * c])?;
    let cam = g.linear(pooled, fc_w, Some(fc_b))?;

    let doubled = g.concat_channels(x, x)?;
    let wvec = g.reshape(fc_w, &[2 * c])?;
    let weighted = g.mul_channel(doubled, wvec)?;
    let pre_conv = if residual {
        let scaled = g.mul_scalar(weighted, gamma)?;
        g.add(scaled, doubled)?
    } else {
        weighted
    };
    let y = g.conv2d(pre_conv, conv_w, Some(conv_b), 1, 0)?;
    let out = g.leaky_relu(y, LEAKY_SLOPE);
    Ok(RaVars { pre_conv, out, cam })
}

/// Residual attention on plain tensors.
pub fn residual_attention(
    features: &Tensor,
    weights: &RaWeights,
    gamma: f32,
    residual: bool,
) -> Result<RaOutput> {
    let store = ParamStore::new();
    let mut g = Graph::frozen(&store);
    let x = g.constant(features.clone());
    let fc_w = g.constant(weights.fc_w.clone());
    let fc_b = g.constant(weights.fc_b.clone());
    let gm = g.constant(Tensor::scalar(gamma));
    let cw = g.constant(weights.conv_w.clone());
    let cb = g.constant(weights.conv_b.clone());
    let v = ra_forward(&mut g, x, fc_w, fc_b, gm, cw, cb, residual)?;
    Ok(RaOutput {
        pre_conv: g.value(v.pre_conv).clone(),
        features: g.value(v.out).clone(),
        cam_logit: g.value(v.cam).clone(),
    })
}

#[derive(Clone, Debug)]
pub enum TrunkLayer {
    Conv(ConvLayer),
    Attention(RaParams),
}

/// A strided trunk convolution.
#[derive(Clone, Debug)]
pub struct ConvLayer(Conv);

/// The shared feature extractor: `[conv0, down0, RA, down1]`.
#[derive(Clone, Debug)]
pub struct Trunk {
    layers: Vec<TrunkLayer>,
}

impl Trunk {
    /// Builds the first `len` trunk layers; layer `i` is assigned `group_of(i)`.
    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &ExperimentConfig,
        len: usize,
        group_of: impl Fn(usize) -> Group,
    ) -> Trunk {
        let f = cfg.base_filters;
        let mut layers = Vec::with_capacity(len);
        for i in 0..len {
            let group = group_of(i);
            let layer = match i {
                0 => TrunkLayer::Conv(ConvLayer(Conv::build(
                    store,
                    rng,
                    &format!("{prefix}.conv0"),
                    cfg.channels,
                    f,
                    4,
                    2,
                    1,
                    group,
                ))),
                1 => TrunkLayer::Conv(ConvLayer(Conv::build(
                    store,
                    rng,
                    &format!("{prefix}.down0"),
                    f,
                    2 * f,
                    4,
                    2,
                    1,
                    group,
                ))),
                RA_INDEX => {
                    let c = 2 * f;
                    let name = format!("{prefix}.ra");
                    let fc = Tensor::new(vec![1, 2 * c], truncated_normal(2 * c, INIT_STD, rng))
                        .expect("fc shape");
                    let fc_w = store.add_spectral(format!("{name}.fc.weight"), fc, group, rng);
                    let fc_b =
                        store.add(format!("{name}.fc.bias"), Tensor::zeros(&[1]), ParamKind::Bias, group);
                    let gamma =
                        store.add(format!("{name}.gamma"), Tensor::zeros(&[1]), ParamKind::Scalar, group);
                    let conv = Conv::build(store, rng, &format!("{name}.conv1x1"), 2 * c, c, 1, 1, 0, group);
                    TrunkLayer::Attention(RaParams {
                        fc_w,
                        fc_b,
                        gamma,
                        conv,
                    })
                }
                _ => TrunkLayer::Conv(ConvLayer(Conv::build(
                    store,
                    rng,
                    &format!("{prefix}.down1"),
                    2 * f,
                    4 * f,
                    4,
                    2,
                    1,
                    group,
                ))),
            };
            layers.push(layer);
        }
        Trunk { layers }
    }

    /// Runs layers `from..to`, appending the attention logit when the RA block runs.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        mut x: Var,
        from: usize,
        to: usize,
        opts: ForwardOpts,
        trace: &mut Vec<(&'static str, Vec<usize>)>,
        cam: &mut Option<Var>,
    ) -> Result<Var> {
        const NAMES: [&str; TRUNK_LEN] = ["conv0", "down0", "ra", "down1"];
        for (i, layer) in self.layers.iter().enumerate().take(to).skip(from) {
            x = match layer {
                TrunkLayer::Conv(ConvLayer(c)) => {
                    let y = c.forward(g, x, opts.sn)?;
                    g.leaky_relu(y, LEAKY_SLOPE)
                }
                TrunkLayer::Attention(ra) => {
                    let fc_w = weight(g, ra.fc_w, opts.sn)?;
                    let fc_b = g.param(ra.fc_b);
                    let gamma = g.param(ra.gamma);
                    let cw = weight(g, ra.conv.w, opts.sn)?;
                    let cb = g.param(ra.conv.b);
                    let v = ra_forward(g, x, fc_w, fc_b, gamma, cw, cb, opts.ra_residual)?;
                    *cam = Some(v.cam);
                    v.out
                }
            };
            trace.push((NAMES[i], g.shape(x).to_vec()));
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug)]
struct ForwardOpts {
    sn: bool,
    ra_residual: bool,
}

/// A patch classifier: optional extra down-sampling convs, then `K4-S1-P1`
/// to `hidden` channels with leaky activation and `K4-S1-P1` to one logit.
#[derive(Clone, Debug)]
struct Head {
    down: Vec<Conv>,
    hidden: Conv,
    out: Conv,
}

impl Head {
    fn forward(
        &self,
        g: &mut Graph,
        mut x: Var,
        opts: ForwardOpts,
        names: &[&'static str],
        trace: &mut Vec<(&'static str, Vec<usize>)>,
    ) -> Result<Var> {
        let mut names = names.iter();
        for c in &self.down {
            let y = c.forward(g, x, opts.sn)?;
            x = g.leaky_relu(y, LEAKY_SLOPE);
            trace.push((names.next().copied().unwrap_or("down"), g.shape(x).to_vec()));
        }
        let y = self.hidden.forward(g, x, opts.sn)?;
        x = g.leaky_relu(y, LEAKY_SLOPE);
        trace.push((names.next().copied().unwrap_or("hidden"), g.shape(x).to_vec()));
        let y = self.out.forward(g, x, opts.sn)?;
        trace.push((names.next().copied().unwrap_or("out"), g.shape(y).to_vec()));
        Ok(y)
    }
}

/// Graph handles produced by a discriminator pass.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// Trunk output at the encoder depth (the shared latent under NICE).
    pub latent: Var,
    /// Attention logit if the RA block ran before the latent was taken.
    pub latent_cam: Option<Var>,
    pub logits: ScaleVars,
    /// `(layer name, output shape)` in execution order.
    pub trace: Vec<(&'static str, Vec<usize>)>,
}

/// Multi-scale discriminator of one domain. Its first `shared_depth` trunk
/// layers double as the domain's encoder unless an independent encoder is built.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub domain: Domain,
    trunk: Trunk,
    /// Separate encoder trunk, present when encoder sharing is disabled.
    encoder: Option<Trunk>,
    shared_depth: usize,
    scales: Vec<Scale>,
    c1: Option<Head>,
    c2: Option<Head>,
    ra_residual: bool,
    in_channels: usize,
    pub(crate) spectral: bool,
}

impl Discriminator {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &ExperimentConfig,
        domain: Domain,
    ) -> Result<Discriminator> {
        if cfg.scales_enabled.is_empty() {
            return Err(Error::Configuration("at least one classifier scale must be enabled".into()));
        }
        if !(1..=TRUNK_LEN).contains(&cfg.shared_depth) {
            return Err(Error::Configuration(format!(
                "shared_depth must be in 1..={TRUNK_LEN}, got {}",
                cfg.shared_depth
            )));
        }
        let enc = Group::new(Role::Encoder, domain);
        let cls = Group::new(Role::Classifier, domain);
        let depth = cfg.shared_depth;
        let prefix = format!("D_{}", domain.label());
        let trunk = Trunk::build(store, rng, &prefix, cfg, TRUNK_LEN, |i| {
            if cfg.nice && i < depth {
                enc
            } else {
                cls
            }
        });
        let encoder = (!cfg.nice)
            .then(|| Trunk::build(store, rng, &format!("E_{}", domain.label()), cfg, depth, |_| enc));
        let f = cfg.base_filters;
        let mut scales = cfg.scales_enabled.clone();
        scales.sort();
        scales.dedup();
        let c1 = scales.contains(&Scale::C1).then(|| Head {
            down: vec![],
            hidden: Conv::build(store, rng, &format!("{prefix}.c1.conv"), 4 * f, 8 * f, 4, 1, 1, cls),
            out: Conv::build(store, rng, &format!("{prefix}.c1.out"), 8 * f, 1, 4, 1, 1, cls),
        });
        let c2 = scales.contains(&Scale::C2).then(|| Head {
            down: vec![
                Conv::build(store, rng, &format!("{prefix}.down2"), 4 * f, 8 * f, 4, 2, 1, cls),
                Conv::build(store, rng, &format!("{prefix}.down3"), 8 * f, 16 * f, 4, 2, 1, cls),
            ],
            hidden: Conv::build(store, rng, &format!("{prefix}.c2.conv"), 16 * f, 32 * f, 4, 1, 1, cls),
            out: Conv::build(store, rng, &format!("{prefix}.c2.out"), 32 * f, 1, 4, 1, 1, cls),
        });
        Ok(Discriminator {
            domain,
            trunk,
            encoder,
            shared_depth: depth,
            scales,
            c1,
            c2,
            ra_residual: cfg.ra_enabled,
            in_channels: cfg.channels,
            spectral: true,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn scales(&self) -> &[Scale] {
        &self.scales
    }

    pub fn shared_depth(&self) -> usize {
        self.shared_depth
    }

    /// Whether the encoder is the discriminator's own trunk prefix.
    pub fn shares_encoder(&self) -> bool {
        self.encoder.is_none()
    }

    fn opts(&self) -> ForwardOpts {
        ForwardOpts {
            sn: self.spectral,
            ra_residual: self.ra_residual,
        }
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let (_, c, h, w) = g.value(x).dims4()?;
        let expect_c = self.in_channels;
        if c != expect_c {
            return Err(Error::shape(format!("expected {expect_c} image channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "image size {h}x{w} must be a positive multiple of 32"
            )));
        }
        Ok(())
    }

    /// Encoder pass: the latent code and, when the RA block is within depth, the attention logit.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<(Var, Option<Var>)> {
        self.check_input(g, x)?;
        let mut trace = Vec::new();
        let mut cam = None;
        let trunk = self.encoder.as_ref().unwrap_or(&self.trunk);
        let z = trunk.forward(g, x, 0, self.shared_depth, self.opts(), &mut trace, &mut cam)?;
        Ok((z, cam))
    }

    /// Output of the discriminator's own trunk after its first `len` layers.
    pub fn trunk_features(&self, g: &mut Graph, x: Var, len: usize) -> Result<Var> {
        self.check_input(g, x)?;
        let mut trace = Vec::new();
        let mut cam = None;
        self.trunk
            .forward(g, x, 0, len.min(TRUNK_LEN), self.opts(), &mut trace, &mut cam)
    }

    /// Full pass: trunk, then the enabled classifier heads.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<DiscOutput> {
        self.check_input(g, x)?;
        let (_, _, h, w) = g.value(x).dims4()?;
        if self.c2.is_some() && (h / 32 < 3 || w / 32 < 3) {
            return Err(Error::Configuration(format!(
                "the c2 classifier has no output at {h}x{w}; use image_size >= 96 or disable c2"
            )));
        }

        let opts = self.opts();
        let mut trace = Vec::new();
        let mut cam = None;
        let latent = self
            .trunk
            .forward(g, x, 0, self.shared_depth, opts, &mut trace, &mut cam)?;
        let latent_cam = cam;
        let feat = self
            .trunk
            .forward(g, latent, self.shared_depth, TRUNK_LEN, opts, &mut trace, &mut cam)?;
        let mut parts = Vec::new();
        if self.scales.contains(&Scale::C0) {
            let c = cam.ok_or_else(|| Error::shape("attention block did not run"))?;
            trace.push(("c0", g.shape(c).to_vec()));
            parts.push((Scale::C0, c));
        }
        if let Some(h) = &self.c1 {
            parts.push((Scale::C1, h.forward(g, feat, opts, &["c1.conv", "c1.out"], &mut trace)?));
        }
        if let Some(h) = &self.c2 {
            let names = ["down2", "down3", "c2.conv", "c2.out"];
            parts.push((Scale::C2, h.forward(g, feat, opts, &names, &mut trace)?));
        }
        Ok(DiscOutput {
            latent,
            latent_cam,
            logits: ScaleVars::from_parts(parts),
            trace,
        })
    }

    /// Every parameter handle, for probes that rewrite weights.
    pub(crate) fn conv_params(&self) -> Vec<(ParamId, ParamId)> {
        let mut out = Vec::new();
        let trunks = std::iter::once(&self.trunk).chain(self.encoder.as_ref());
        for t in trunks {
            for l in &t.layers {
                match l {
                    TrunkLayer::Conv(ConvLayer(c)) => out.push((c.w, c.b)),
                    TrunkLayer::Attention(ra) => {
                        out.push((ra.fc_w, ra.fc_b));
                        out.push((ra.conv.w, ra.conv.b));
                    }
                }
            }
        }
        for h in self.c1.iter().chain(self.c2.iter()) {
            for c in h.down.iter().chain([&h.hidden, &h.out]) {
                out.push((c.w, c.b));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_paper_config;
    use crate::networks::{probe_receptive_field, ProbeScale};
    use rand::SeedableRng;

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = default_paper_config();
        cfg.image_size = 64;
        cfg.base_filters = 4;
        cfg.scales_enabled = vec![Scale::C0, Scale::C1];
        cfg
    }

    fn ra_weights(c: usize, w: f32) -> RaWeights {
        RaWeights {
            fc_w: Tensor::full(&[1, 2 * c], w),
            fc_b: Tensor::full(&[1], 0.75),
            conv_w: Tensor::full(&[c, 2 * c, 1, 1], 0.1),
            conv_b: Tensor::zeros(&[c]),
        }
    }

    fn features(c: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Tensor::new(vec![2, c, 3, 3], truncated_normal(18 * c, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn ra_gamma_zero_is_identity_per_half() {
        let x = features(4);
        let out = residual_attention(&x, &ra_weights(4, 0.3), 0.0, true).unwrap();
        for s in 0..2 {
            let block = &out.pre_conv.data()[s * 72..(s + 1) * 72];
            let input = &x.data()[s * 36..(s + 1) * 36];
            assert_eq!(&block[..36], input);
            assert_eq!(&block[36..], input);
        }
    }

    #[test]
    fn ra_gamma_one_unit_weights_doubles() {
        let x = features(4);
        let out = residual_attention(&x, &ra_weights(4, 1.0), 1.0, true).unwrap();
        for s in 0..2 {
            let block = &out.pre_conv.data()[s * 72..(s + 1) * 72];
            for (i, v) in x.data()[s * 36..(s + 1) * 36].iter().enumerate() {
                assert_eq!(block[i], 2.0 * v);
                assert_eq!(block[36 + i], 2.0 * v);
            }
        }
    }

    #[test]
    fn ra_zero_features_give_bias_logit() {
        let out = residual_attention(&Tensor::zeros(&[1, 4, 3, 3]), &ra_weights(4, 0.5), 0.3, true).unwrap();
        assert_eq!(out.cam_logit.data(), &[0.75]);
        assert_eq!(out.features.shape(), &[1, 4, 3, 3]);
    }

    #[test]
    fn ra_rejects_channel_mismatch() {
        assert!(residual_attention(&features(3), &ra_weights(4, 0.5), 0.0, true).is_err());
    }

    #[test]
    fn desk_shapes() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::build(&mut store, &mut rng, &cfg, Domain::X).unwrap();
        let mut g = Graph::frozen(&store);
        let x = g.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let out = d.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(out.latent), &[1, 8, 16, 16]);
        assert_eq!(g.shape(out.logits.get(Scale::C1).unwrap()), &[1, 1, 6, 6]);
        assert_eq!(g.shape(out.logits.get(Scale::C0).unwrap()), &[1, 1]);
        assert!(out.logits.get(Scale::C2).is_none());
        assert!(g.value(out.latent).all_finite());
    }

    #[test]
    fn c2_at_64_is_a_configuration_error() {
        let mut cfg = small_cfg();
        cfg.scales_enabled = vec![Scale::C2];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::build(&mut store, &mut rng, &cfg, Domain::X).unwrap();
        let mut g = Graph::frozen(&store);
        let x = g.constant(Tensor::zeros(&[1, 3, 64, 64]));
        assert!(matches!(d.forward(&mut g, x), Err(Error::Configuration(_))));
    }

    #[test]
    fn odd_sizes_are_shape_errors() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::build(&mut store, &mut rng, &cfg, Domain::X).unwrap();
        let mut g = Graph::frozen(&store);
        let x = g.constant(Tensor::zeros(&[1, 3, 48, 48]));
        assert!(matches!(d.encode(&mut g, x), Err(Error::Shape(_))));
        let mut cfg = small_cfg();
        cfg.scales_enabled.clear();
        assert!(Discriminator::build(&mut store, &mut rng, &cfg, Domain::X).is_err());
    }

    #[test]
    fn encoder_groups_follow_sharing() {
        let mut cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Discriminator::build(&mut store, &mut rng, &cfg, Domain::Y).unwrap();
        let f = cfg.base_filters;
        let expect = (3 * f * 16 + f) + (f * 2 * f * 16 + 2 * f) + (4 * f + 1 + 1 + 4 * f * 2 * f + 2 * f);
        assert_eq!(store.count_in(&[Group::E_Y]), expect);
        cfg.nice = false;
        let mut store2 = ParamStore::new();
        Discriminator::build(&mut store2, &mut rng, &cfg, Domain::Y).unwrap();
        assert_eq!(store2.count_in(&[Group::E_Y]), expect);
        assert_eq!(
            store2.count_in(&[Group::C_Y]),
            store.count_in(&[Group::C_Y, Group::E_Y])
        );
    }

    #[test]
    fn receptive_fields_small_width() {
        let mut cfg = small_cfg();
        cfg.base_filters = 1;
        cfg.image_size = 320;
        cfg.scales_enabled = Scale::ALL.to_vec();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::build(&mut store, &mut rng, &cfg, Domain::X).unwrap();
        assert_eq!(probe_receptive_field(&d, &store, ProbeScale::TrunkFeature, 64).unwrap(), 10);
        assert_eq!(probe_receptive_field(&d, &store, ProbeScale::C1, 128).unwrap(), 70);
        assert_eq!(probe_receptive_field(&d, &store, ProbeScale::C2, 320).unwrap(), 286);
        assert!(matches!(
            probe_receptive_field(&d, &store, ProbeScale::C2, 256),
            Err(Error::Configuration(_))
        ));
    }
}
