//! Model state, per-variant parameter routing and the decoupled training loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::save_checkpoint;
use crate::config::{ExperimentConfig, Variant};
use crate::data::{batch_iterator, derive_seed, open_unpaired_dataset, Dataset, Split, UnpairedBatch};
use crate::error::{Error, Result};
use crate::losses::{compose_objectives, lsgan_d_graph, lsgan_g_graph, LossBundle, LossWeights};
use crate::networks::{Discriminator, Generator, LatentCode, MultiScaleLogits};
use crate::optim::Adam;
use crate::params::{Domain, Group, ParamId, ParamStore};
use crate::tensor::Tensor;

const TAG_INIT: u64 = 0x494e_4954;

/// Half of one training iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Step {
    D,
    G,
}

/// The parameter groups updated by `step` under `variant`. Every other group is
/// treated as constant in that step, so it receives neither update nor gradient.
pub fn parameter_routing(variant: Variant, step: Step) -> Vec<Group> {
    use Group as G;
    match (variant, step) {
        (Variant::Nice | Variant::Joint, Step::D) => vec![G::E_X, G::C_X, G::E_Y, G::C_Y],
        (Variant::Nice, Step::G) => vec![G::G_XY, G::G_YX],
        (Variant::Joint | Variant::GenCoupled, Step::G) => vec![G::E_X, G::E_Y, G::G_XY, G::G_YX],
        (Variant::GenCoupled, Step::D) => vec![G::C_X, G::C_Y],
    }
}

/// Routing for a config. Without a shared encoder the standalone encoders sit in
/// front of the generators and only ever see detached outputs in the D-step, so
/// they train with the generators whatever the variant.
pub fn routing_for(cfg: &ExperimentConfig, step: Step) -> Vec<Group> {
    if cfg.nice {
        return parameter_routing(cfg.variant, step);
    }
    match step {
        Step::D => vec![Group::C_X, Group::C_Y],
        Step::G => vec![Group::E_X, Group::E_Y, Group::G_XY, Group::G_YX],
    }
}

/// Every learnable quantity of a run plus the iteration counter.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub cfg: ExperimentConfig,
    pub store: ParamStore,
    pub disc_x: Discriminator,
    pub disc_y: Discriminator,
    /// X → Y.
    pub gen_xy: Generator,
    /// Y → X.
    pub gen_yx: Generator,
    pub optim: Adam,
    /// Completed training iterations.
    pub iteration: u64,
}

impl ModelState {
    /// Freshly initialized networks for a validated config.
    pub fn init(cfg: &ExperimentConfig) -> Result<ModelState> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[TAG_INIT, cfg.seed]));
        let disc_x = Discriminator::build(&mut store, &mut rng, cfg, Domain::X)?;
        let disc_y = Discriminator::build(&mut store, &mut rng, cfg, Domain::Y)?;
        let gen_xy = Generator::build(&mut store, &mut rng, cfg, Domain::X)?;
        let gen_yx = Generator::build(&mut store, &mut rng, cfg, Domain::Y)?;
        let optim = Adam::new(
            cfg.lr as f32,
            cfg.adam_beta1 as f32,
            cfg.adam_beta2 as f32,
            cfg.weight_decay as f32,
            store.len(),
        );
        Ok(ModelState {
            cfg: cfg.clone(),
            store,
            disc_x,
            disc_y,
            gen_xy,
            gen_yx,
            optim,
            iteration: 0,
        })
    }

    pub fn disc(&self, d: Domain) -> &Discriminator {
        match d {
            Domain::X => &self.disc_x,
            Domain::Y => &self.disc_y,
        }
    }

    /// Generator decoding latents of `source` into the other domain.
    pub fn gen(&self, source: Domain) -> &Generator {
        match source {
            Domain::X => &self.gen_xy,
            Domain::Y => &self.gen_yx,
        }
    }

    /// Parameter count of the given groups.
    pub fn param_count(&self, groups: &[Group]) -> usize {
        self.store.count_in(groups)
    }

    fn trainable(&self, groups: &[Group]) -> Vec<bool> {
        self.store.iter().map(|(_, p)| groups.contains(&p.group)).collect()
    }

    /// Encoder pass of `domain` on a `(n, 3, h, w)` batch, without gradients.
    pub fn encode(&self, domain: Domain, images: &Tensor) -> Result<LatentCode> {
        let mut g = Graph::frozen(&self.store);
        let x = g.constant(images.clone());
        let (z, cam) = self.disc(domain).encode(&mut g, x)?;
        Ok(LatentCode {
            features: g.value(z).clone(),
            cam_logit: cam.map(|c| g.value(c).clone()),
        })
    }

    pub fn discriminate(&self, domain: Domain, images: &Tensor) -> Result<MultiScaleLogits> {
        let mut g = Graph::frozen(&self.store);
        let x = g.constant(images.clone());
        let out = self.disc(domain).forward(&mut g, x)?;
        Ok(out.logits.to_tensors(&g))
    }

    /// Decodes latents of `source` into the other domain.
    pub fn generate(&self, source: Domain, latent: &Tensor) -> Result<Tensor> {
        let mut g = Graph::frozen(&self.store);
        let z = g.constant(latent.clone());
        let (img, _) = self.gen(source).forward(&mut g, z)?;
        Ok(g.value(img).clone())
    }

    /// Encoder output of `domain`: reuses the trunk prefix already computed by a
    /// discriminator pass when the encoder is shared.
    fn latent_of(&self, g: &mut Graph, domain: Domain, x: Var, shared: Option<Var>) -> Result<Var> {
        match shared {
            Some(z) if self.disc(domain).shares_encoder() => Ok(z),
            _ => Ok(self.disc(domain).encode(g, x)?.0),
        }
    }

    /// Loss terms and parameter gradients of one half-step, without applying them.
    /// Parameters outside the routed groups are constants and get no gradient.
    pub fn phase_gradients(
        &self,
        batch: &UnpairedBatch,
        step: Step,
    ) -> Result<(LossBundle, Vec<(ParamId, Tensor)>)> {
        let groups = routing_for(&self.cfg, step);
        let mut g = Graph::new(&self.store, self.trainable(&groups));
        let x = g.constant(batch.x.clone());
        let y = g.constant(batch.y.clone());
        let w = LossWeights::from(&self.cfg);
        let mut b = LossBundle::default();
        let loss = match step {
            Step::D => {
                let real_x = self.disc_x.forward(&mut g, x)?;
                let real_y = self.disc_y.forward(&mut g, y)?;
                let zx = self.latent_of(&mut g, Domain::X, x, Some(real_x.latent))?;
                let zy = self.latent_of(&mut g, Domain::Y, y, Some(real_y.latent))?;
                let zx = g.detach(zx);
                let zy = g.detach(zy);
                let (fake_y, _) = self.gen_xy.forward(&mut g, zx)?;
                let (fake_x, _) = self.gen_yx.forward(&mut g, zy)?;
                let fake_y = g.detach(fake_y);
                let fake_x = g.detach(fake_x);
                let fx = self.disc_x.forward(&mut g, fake_x)?;
                let fy = self.disc_y.forward(&mut g, fake_y)?;
                let dx = lsgan_d_graph(&mut g, &real_x.logits, &fx.logits)?;
                let dy = lsgan_d_graph(&mut g, &real_y.logits, &fy.logits)?;
                b.d_adv_x = g.value(dx).item() as f64;
                b.d_adv_y = g.value(dy).item() as f64;
                let s = g.sum(&[dx, dy]);
                g.scale(s, w.gan as f32)
            }
            Step::G => {
                let zx = self.disc_x.encode(&mut g, x)?.0;
                let zy = self.disc_y.encode(&mut g, y)?.0;
                let (fake_y, _) = self.gen_xy.forward(&mut g, zx)?;
                let (fake_x, _) = self.gen_yx.forward(&mut g, zy)?;
                let (recon_x, _) = self.gen_yx.forward(&mut g, zx)?;
                let (recon_y, _) = self.gen_xy.forward(&mut g, zy)?;
                let fy = self.disc_y.forward(&mut g, fake_y)?;
                let fx = self.disc_x.forward(&mut g, fake_x)?;
                let zfy = self.latent_of(&mut g, Domain::Y, fake_y, Some(fy.latent))?;
                let zfx = self.latent_of(&mut g, Domain::X, fake_x, Some(fx.latent))?;
                let (cyc_x, _) = self.gen_yx.forward(&mut g, zfy)?;
                let (cyc_y, _) = self.gen_xy.forward(&mut g, zfx)?;
                let gx = lsgan_g_graph(&mut g, &fx.logits);
                let gy = lsgan_g_graph(&mut g, &fy.logits);
                let cx = g.l1(cyc_x, x)?;
                let cy = g.l1(cyc_y, y)?;
                let rx = g.l1(recon_x, x)?;
                let ry = g.l1(recon_y, y)?;
                for (slot, v) in [
                    (&mut b.g_adv_x, gx),
                    (&mut b.g_adv_y, gy),
                    (&mut b.cycle_x, cx),
                    (&mut b.cycle_y, cy),
                    (&mut b.recon_x, rx),
                    (&mut b.recon_y, ry),
                ] {
                    *slot = g.value(v).item() as f64;
                }
                let adv = g.sum(&[gx, gy]);
                let adv = g.scale(adv, w.gan as f32);
                let cyc = g.sum(&[cx, cy]);
                let cyc = g.scale(cyc, w.cycle as f32);
                let rec = g.sum(&[rx, ry]);
                let rec = g.scale(rec, w.recon as f32);
                g.sum(&[adv, cyc, rec])
            }
        };
        check_finite(&b, self.iteration)?;
        let grads = g.backward(loss).into_param_grads();
        Ok((b, grads))
    }

    /// One D-step followed by one G-step.
    pub fn train_step(&mut self, batch: &UnpairedBatch) -> Result<LossBundle> {
        let all = [Group::E_X, Group::E_Y, Group::C_X, Group::C_Y];
        self.store.power_iterate(&all, 1);
        let (d_parts, grads) = self.phase_gradients(batch, Step::D)?;
        self.optim.step(&mut self.store, &grads);

        self.store.power_iterate(&all, 1);
        let (g_parts, grads) = self.phase_gradients(batch, Step::G)?;
        self.optim.step(&mut self.store, &grads);

        let mut b = LossBundle {
            d_adv_x: d_parts.d_adv_x,
            d_adv_y: d_parts.d_adv_y,
            ..g_parts
        };
        let (td, tg) = compose_objectives(&b, LossWeights::from(&self.cfg)).map_err(|e| match e {
            Error::NonFinite { name, .. } => Error::NonFinite {
                name,
                iteration: self.iteration,
            },
            other => other,
        })?;
        b.total_d = td;
        b.total_g = tg;
        check_finite(&b, self.iteration)?;
        self.iteration += 1;
        Ok(b)
    }
}

fn check_finite(b: &LossBundle, iteration: u64) -> Result<()> {
    for (name, v) in b.fields() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                name: name.to_string(),
                iteration,
            });
        }
    }
    Ok(())
}

/// One line of the JSONL loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub wall_time_s: f64,
}

/// Callbacks invoked by the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _iteration: u64, _losses: &LossBundle) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _iteration: u64, _path: &Path) {}
}

impl TrainObserver for () {}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, iteration: u64) -> PathBuf {
        self.checkpoints().join(format!("iter_{iteration:08}"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final")
    }
}

/// Trains `state` until it has completed `until` iterations, drawing batches
/// from the deterministic stream of `(cfg.seed, iteration)`.
pub fn run_training(
    state: &mut ModelState,
    dx: &Dataset,
    dy: &Dataset,
    until: u64,
    layout: Option<&RunLayout>,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<LogRecord>> {
    let mut log_file = match layout {
        Some(l) => {
            fs::create_dir_all(&l.root).map_err(|e| Error::io(&l.root, e))?;
            let p = l.config_path();
            fs::write(&p, state.cfg.to_json()).map_err(|e| Error::io(&p, e))?;
            let p = l.log_path();
            Some((
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?,
                p,
            ))
        }
        None => None,
    };
    let cfg = state.cfg.clone();
    let mut batches = batch_iterator(dx, dy, &cfg, cfg.seed)?;
    let start = Instant::now();
    let mut records = Vec::new();
    while state.iteration < until {
        let batch = batches.batch_at(state.iteration)?;
        let losses = state.train_step(&batch)?;
        let it = state.iteration;
        observer.on_step(it, &losses)?;
        if cfg.log_every > 0 && it.is_multiple_of(cfg.log_every) {
            let rec = LogRecord {
                iter: it,
                losses,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            if let Some((f, p)) = log_file.as_mut() {
                let line = serde_json::to_string(&rec).expect("log record serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
            }
            log::info!(
                "iter {it}: total_d {:.4} total_g {:.4}",
                rec.losses.total_d,
                rec.losses.total_g
            );
            records.push(rec);
        }
        if let Some(l) = layout {
            if cfg.checkpoint_every > 0 && it.is_multiple_of(cfg.checkpoint_every) {
                let p = l.checkpoint(it);
                save_checkpoint(state, &p)?;
                observer.on_checkpoint(it, &p);
            }
        }
    }
    if let Some(l) = layout {
        let p = l.final_checkpoint();
        save_checkpoint(state, &p)?;
        observer.on_checkpoint(state.iteration, &p);
    }
    Ok(records)
}

/// Final state and in-memory loss log of a run.
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<LogRecord>,
}

/// Opens the training split under `cfg.dataset_root`, initializes a model and
/// trains for `cfg.iterations`, writing artifacts under `cfg.out_dir`.
pub fn train(cfg: &ExperimentConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    let mut state = ModelState::init(cfg)?;
    if cfg.iterations == 0 {
        return Ok(TrainOutcome { state, log: vec![] });
    }
    let (dx, dy) = open_unpaired_dataset(&cfg.dataset_root, Split::Train)?;
    let layout = RunLayout::new(&cfg.out_dir);
    let log = run_training(&mut state, &dx, &dy, cfg.iterations, Some(&layout), observer)?;
    Ok(TrainOutcome { state, log })
}

/// Reads a JSONL loss log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLog {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::default_paper_config;
    use crate::data::{make_synthetic_domains, SyntheticSpec};
    use crate::networks::Scale;
    use crate::params::Role;

    pub(crate) fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = default_paper_config();
        cfg.image_size = 32;
        cfg.base_filters = 2;
        cfg.n_res_blocks = 1;
        cfg.scales_enabled = vec![Scale::C0, Scale::C1];
        cfg.iterations = 4;
        cfg.log_every = 1;
        cfg
    }

    fn batch(cfg: &ExperimentConfig) -> UnpairedBatch {
        let (x, y) = make_synthetic_domains(
            SyntheticSpec {
                n: 2,
                size: cfg.image_size,
                hue_x: 0.0,
                hue_y: 0.5,
            },
            1,
        )
        .unwrap();
        batch_iterator(&x, &y, cfg, 0).unwrap().batch_at(0).unwrap()
    }

    #[test]
    fn routing_table() {
        assert_eq!(parameter_routing(Variant::Nice, Step::G), vec![Group::G_XY, Group::G_YX]);
        assert_eq!(parameter_routing(Variant::GenCoupled, Step::D), vec![Group::C_X, Group::C_Y]);
        assert!(parameter_routing(Variant::Joint, Step::G).contains(&Group::E_X));
    }

    #[test]
    fn groups_are_disjoint_and_cover_the_store() {
        let s = ModelState::init(&tiny_cfg()).unwrap();
        let all = [Group::E_X, Group::E_Y, Group::C_X, Group::C_Y, Group::G_XY, Group::G_YX];
        let total: usize = all.iter().map(|g| s.param_count(&[*g])).sum();
        assert_eq!(total, s.store.iter().map(|(_, p)| p.value.len()).sum::<usize>());
    }

    #[test]
    fn nice_g_step_has_no_encoder_gradient() {
        let cfg = tiny_cfg();
        let s = ModelState::init(&cfg).unwrap();
        let (_, grads) = s.phase_gradients(&batch(&cfg), Step::G).unwrap();
        for (id, _) in &grads {
            assert_eq!(s.store.get(*id).group.role, Role::Generator);
        }
        assert!(!grads.is_empty());
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut cfg = tiny_cfg();
        cfg.lr = 0.0;
        let mut s = ModelState::init(&cfg).unwrap();
        let before: Vec<Tensor> = s.store.iter().map(|(_, p)| p.value.clone()).collect();
        s.train_step(&batch(&cfg)).unwrap();
        let after: Vec<Tensor> = s.store.iter().map(|(_, p)| p.value.clone()).collect();
        assert_eq!(before, after);
        assert_eq!(s.iteration, 1);
    }

    #[test]
    fn steps_are_deterministic() {
        let cfg = tiny_cfg();
        let b = batch(&cfg);
        let mut a = ModelState::init(&cfg).unwrap();
        let mut c = ModelState::init(&cfg).unwrap();
        for _ in 0..2 {
            assert_eq!(a.train_step(&b).unwrap(), c.train_step(&b).unwrap());
        }
    }

    #[test]
    fn standalone_encoders_train_with_generators() {
        let mut cfg = tiny_cfg();
        cfg.nice = false;
        let s = ModelState::init(&cfg).unwrap();
        let (_, grads) = s.phase_gradients(&batch(&cfg), Step::G).unwrap();
        let roles: std::collections::HashSet<_> =
            grads.iter().map(|(id, _)| s.store.get(*id).group.role).collect();
        assert!(roles.contains(&Role::Encoder));
        assert!(!roles.contains(&Role::Classifier));
    }
}
