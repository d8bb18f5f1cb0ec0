//! Experiment configuration: defaults, JSON parsing, overrides and validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::Scale;

/// Which parameter groups each half-step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Decoupled: encoders train only with the discriminator objective.
    #[serde(rename = "NICE")]
    Nice,
    /// Encoders train with both the discriminator and the generator objective.
    #[serde(rename = "JOINT")]
    Joint,
    /// Encoders train only with the generator objective.
    #[serde(rename = "GEN_COUPLED")]
    GenCoupled,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Nice, Variant::Joint, Variant::GenCoupled];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nice => "NICE",
            Variant::Joint => "JOINT",
            Variant::GenCoupled => "GEN_COUPLED",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Identity,
    RandomConv,
    ExternalAdapter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `((xᵀy)/d + 1)³`.
    Poly,
    /// `exp(−‖x − y‖² / (2·d))`.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub image_size: usize,
    pub channels: usize,
    pub base_filters: usize,
    pub n_res_blocks: usize,
    /// Number of discriminator trunk layers (`[conv0, down0, ra, down1]`) used as encoder.
    pub shared_depth: usize,
    pub scales_enabled: Vec<Scale>,
    pub ra_enabled: bool,
    /// Reuse discriminator layers as encoders; `false` gives each domain an
    /// independent encoder trained with the generators.
    pub nice: bool,
    pub variant: Variant,
    pub lambda_gan: f64,
    pub lambda_cycle: f64,
    pub lambda_recon: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub dataset_root: PathBuf,
    pub out_dir: PathBuf,
    pub resize_ratio: f64,
    pub hflip_prob: f64,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub kid_subset_size: usize,
    pub kid_n_subsets: usize,
    pub extractor: ExtractorKind,
    /// Program run by the `external_adapter` extractor.
    pub extractor_command: Option<String>,
    pub latent_kernel: KernelKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        default_paper_config()
    }
}

/// Full-scale protocol: 256² images, λ = (1, 10, 10), Adam(1e-4, 0.5, 0.999),
/// weight decay 1e-4, batch 1, 100K iterations.
pub fn default_paper_config() -> ExperimentConfig {
    ExperimentConfig {
        image_size: 256,
        channels: 3,
        base_filters: 64,
        n_res_blocks: 6,
        shared_depth: 3,
        scales_enabled: vec![Scale::C0, Scale::C1, Scale::C2],
        ra_enabled: true,
        nice: true,
        variant: Variant::Nice,
        lambda_gan: 1.0,
        lambda_cycle: 10.0,
        lambda_recon: 10.0,
        lr: 1e-4,
        adam_beta1: 0.5,
        adam_beta2: 0.999,
        weight_decay: 1e-4,
        batch_size: 1,
        iterations: 100_000,
        seed: 0,
        dataset_root: PathBuf::from("dataset"),
        out_dir: PathBuf::from("runs/default"),
        resize_ratio: 286.0 / 256.0,
        hflip_prob: 0.5,
        log_every: 100,
        checkpoint_every: 10_000,
        kid_subset_size: 1000,
        kid_n_subsets: 1,
        extractor: ExtractorKind::RandomConv,
        extractor_command: None,
        latent_kernel: KernelKind::Poly,
    }
}

/// Parses a flat JSON document; missing keys take [`default_paper_config`] values.
pub fn parse_and_validate(text: &str) -> Result<ExperimentConfig> {
    let map = parse_map(text)?;
    from_map(map)
}

/// Parses a JSON object into a key map; an empty document is an empty map.
pub fn parse_map(text: &str) -> Result<Map<String, Value>> {
    if text.trim().is_empty() {
        return Ok(Map::new());
    }
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(other) => Err(Error::ConfigKey {
            key: "<root>".into(),
            message: format!("expected a JSON object, found {other}"),
        }),
        Err(e) => Err(Error::ConfigKey {
            key: "<root>".into(),
            message: e.to_string(),
        }),
    }
}

/// Applies `KEY=VALUE` overrides. Values parse as JSON when possible and
/// fall back to plain strings.
pub fn apply_overrides(map: &mut Map<String, Value>, overrides: &[String]) -> Result<()> {
    let known = serde_json::to_value(default_paper_config()).expect("config serializes");
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| Error::ConfigKey {
            key: item.clone(),
            message: "override must look like KEY=VALUE".into(),
        })?;
        let key = key.trim();
        if known.get(key).is_none() {
            return Err(Error::ConfigKey {
                key: key.into(),
                message: "unknown config key".into(),
            });
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.to_string(), value);
    }
    Ok(())
}

pub fn from_map(map: Map<String, Value>) -> Result<ExperimentConfig> {
    let value = Value::Object(map);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(&value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        let key = if path == "." {
            inner
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or(path)
        } else {
            path
        };
        Error::ConfigKey { key, message: inner }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Every invariant violation, or `Ok` when there are none.
    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(v))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                v.push(msg);
            }
        };
        for (name, val) in [
            ("lambda_gan", self.lambda_gan),
            ("lambda_cycle", self.lambda_cycle),
            ("lambda_recon", self.lambda_recon),
        ] {
            need(val.is_finite() && val >= 0.0, format!("{name} must be >= 0, got {val}"));
        }
        need(
            self.image_size > 0 && self.image_size.is_multiple_of(32),
            format!("image_size must be a positive multiple of 32, got {}", self.image_size),
        );
        need(self.channels == 3, format!("channels must be 3, got {}", self.channels));
        need(self.base_filters >= 1, "base_filters must be >= 1".into());
        need(
            (1..=4).contains(&self.shared_depth),
            format!("shared_depth must be in 1..=4, got {}", self.shared_depth),
        );
        need(
            !self.scales_enabled.is_empty(),
            "scales_enabled must contain at least one scale".into(),
        );
        let mut sorted = self.scales_enabled.clone();
        sorted.sort();
        sorted.dedup();
        need(
            sorted.len() == self.scales_enabled.len(),
            "scales_enabled contains duplicates".into(),
        );
        need(
            (0.0..=1.0).contains(&self.hflip_prob),
            format!("hflip_prob must be in [0, 1], got {}", self.hflip_prob),
        );
        need(
            self.lr.is_finite() && self.lr >= 0.0,
            format!("lr must be >= 0, got {}", self.lr),
        );
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            need((0.0..1.0).contains(&b), format!("{name} must be in [0, 1), got {b}"));
        }
        need(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            format!("weight_decay must be >= 0, got {}", self.weight_decay),
        );
        need(self.batch_size >= 1, "batch_size must be >= 1".into());
        need(
            self.resize_ratio.is_finite() && self.resize_ratio >= 1.0,
            format!("resize_ratio must be >= 1, got {}", self.resize_ratio),
        );
        need(self.log_every >= 1, "log_every must be >= 1".into());
        need(self.kid_subset_size >= 2, "kid_subset_size must be >= 2".into());
        need(self.kid_n_subsets >= 1, "kid_n_subsets must be >= 1".into());
        v
    }

    /// Edge length images are resized to before cropping.
    pub fn resize_edge(&self) -> usize {
        (self.image_size as f64 * self.resize_ratio).round() as usize
    }

    pub fn scale_enabled(&self, s: Scale) -> bool {
        self.scales_enabled.contains(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of every field that affects model structure or optimization.
    /// Run length, logging cadence and paths are excluded so that resumed
    /// runs with a longer schedule still match.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for k in [
            "iterations",
            "dataset_root",
            "out_dir",
            "log_every",
            "checkpoint_every",
            "kid_subset_size",
            "kid_n_subsets",
            "extractor",
            "extractor_command",
            "latent_kernel",
        ] {
            obj.remove(k);
        }
        // serde_json maps are ordered by key, so this serialization is canonical.
        let canonical = serde_json::to_string(&v).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(parse_and_validate("").unwrap(), default_paper_config());
        assert_eq!(parse_and_validate("{}").unwrap(), default_paper_config());
    }

    #[test]
    fn full_scale_defaults() {
        let c = default_paper_config();
        assert_eq!((c.lambda_gan, c.lambda_cycle, c.lambda_recon), (1.0, 10.0, 10.0));
        assert_eq!(c.lr, 0.0001);
        assert_eq!((c.adam_beta1, c.adam_beta2), (0.5, 0.999));
        assert_eq!(c.weight_decay, 0.0001);
        assert_eq!(c.batch_size, 1);
        assert_eq!(c.image_size, 256);
        assert_eq!(c.n_res_blocks, 6);
        assert_eq!(c.scales_enabled, vec![Scale::C0, Scale::C1, Scale::C2]);
        assert_eq!(c.variant, Variant::Nice);
        assert_eq!(c.resize_edge(), 286);
        assert!(c.violations().is_empty());
    }

    #[test]
    fn negative_lambda_is_named() {
        let err = parse_and_validate(r#"{"lambda_cycle": -1}"#).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::ConfigInvalid(_)));
        assert!(msg.contains("lambda_cycle"), "{msg}");
    }

    #[test]
    fn all_violations_are_listed() {
        let err = parse_and_validate(r#"{"lambda_gan": -1, "hflip_prob": 2, "scales_enabled": []}"#)
            .unwrap_err();
        match err {
            Error::ConfigInvalid(v) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn desk_document_fills_the_rest() {
        let c = parse_and_validate(r#"{"image_size": 64, "iterations": 2000}"#).unwrap();
        let d = default_paper_config();
        assert_eq!(c.image_size, 64);
        assert_eq!(c.iterations, 2000);
        let expected = ExperimentConfig {
            image_size: 64,
            iterations: 2000,
            ..d
        };
        assert_eq!(c, expected);
    }

    #[test]
    fn schema_errors_name_the_key() {
        match parse_and_validate(r#"{"bogus_key": 1}"#).unwrap_err() {
            Error::ConfigKey { key, .. } => assert_eq!(key, "bogus_key"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_and_validate(r#"{"image_size": "big"}"#).unwrap_err() {
            Error::ConfigKey { key, .. } => assert_eq!(key, "image_size"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_and_validate(r#"{"variant": "SOMETHING"}"#).unwrap_err() {
            Error::ConfigKey { key, .. } => assert_eq!(key, "variant"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shared_depth_and_size_rules() {
        assert!(parse_and_validate(r#"{"shared_depth": 5}"#).is_err());
        assert!(parse_and_validate(r#"{"image_size": 100}"#).is_err());
        assert!(parse_and_validate(r#"{"shared_depth": 1, "image_size": 96}"#).is_ok());
    }

    #[test]
    fn overrides() {
        let mut m = parse_map(r#"{"image_size": 128}"#).unwrap();
        apply_overrides(
            &mut m,
            &[
                "image_size=64".into(),
                "variant=JOINT".into(),
                r#"scales_enabled=["c1"]"#.into(),
            ],
        )
        .unwrap();
        let c = from_map(m).unwrap();
        assert_eq!(c.image_size, 64);
        assert_eq!(c.variant, Variant::Joint);
        assert_eq!(c.scales_enabled, vec![Scale::C1]);
        let mut m = Map::new();
        assert!(apply_overrides(&mut m, &["nope=1".into()]).is_err());
    }

    #[test]
    fn hash_ignores_schedule_only_fields() {
        let a = default_paper_config();
        let b = ExperimentConfig {
            iterations: 5,
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = ExperimentConfig {
            lr: 0.5,
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        (
            1usize..8,
            1usize..5,
            0.0f64..20.0,
            0.0f64..1.0,
            prop::sample::subsequence(vec![Scale::C0, Scale::C1, Scale::C2], 1..=3),
            prop::sample::select(Variant::ALL.to_vec()),
            any::<u64>(),
            any::<bool>(),
        )
            .prop_map(|(k, depth, lam, flip, scales, variant, seed, ra)| ExperimentConfig {
                image_size: 32 * k,
                shared_depth: depth,
                lambda_cycle: lam,
                hflip_prob: flip,
                scales_enabled: scales,
                variant,
                seed,
                ra_enabled: ra,
                ..default_paper_config()
            })
    }

    proptest! {
        #[test]
        fn json_round_trip(cfg in arb_config()) {
            let back = parse_and_validate(&cfg.to_json()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
