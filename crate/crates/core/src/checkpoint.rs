//! Checkpoint directories: `params.bin` (little-endian f32/u64 payload) plus a
//! `manifest.json` carrying the config, its hash, the data-stream position and a
//! SHA-256 of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::optim::Moments;
use crate::params::ParamKind;
use crate::training::ModelState;

pub const FORMAT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Position of the deterministic batch stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub iteration: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub group: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub iteration: u64,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub rng: RngState,
    pub entries: Vec<ManifestEntry>,
    /// Hex SHA-256 of `params.bin`.
    pub sha256: String,
}

/// How strictly [`load_checkpoint`] matches the stored config.
#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions<'a> {
    /// Config the caller intends to continue with.
    pub expected: Option<&'a ExperimentConfig>,
    /// Load even when the config hashes differ (the stored architecture wins).
    pub allow_config_mismatch: bool,
}

fn put_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity("payload is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn encode_payload(state: &ModelState) -> Vec<u8> {
    let mut buf = Vec::new();
    for (_, p) in state.store.iter() {
        put_f32s(&mut buf, p.value.data());
    }
    for (id, _) in state.store.iter() {
        match state.optim.moments(id) {
            Some(m) => {
                buf.push(1);
                buf.extend_from_slice(&m.step.to_le_bytes());
                put_f32s(&mut buf, &m.m);
                put_f32s(&mut buf, &m.v);
            }
            None => buf.push(0),
        }
    }
    for (_, p) in state.store.iter() {
        if let Some(s) = &p.spectral {
            buf.extend_from_slice(&s.iterations.to_le_bytes());
            put_f32s(&mut buf, &s.u);
            put_f32s(&mut buf, &s.v);
        }
    }
    buf
}

fn decode_payload(state: &mut ModelState, buf: &[u8]) -> Result<()> {
    let mut r = Reader { buf, pos: 0 };
    let ids: Vec<_> = state.store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        let p = state.store.get_mut(id);
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&r.f32s(n)?);
    }
    for &id in &ids {
        let n = state.store.get(id).value.len();
        let m = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                Some(Moments {
                    step,
                    m: r.f32s(n)?,
                    v: r.f32s(n)?,
                })
            }
            t => return Err(Error::Integrity(format!("bad moment tag {t}"))),
        };
        state.optim.set_moments(id, m);
    }
    for &id in &ids {
        if let Some(s) = state.store.get_mut(id).spectral.as_mut() {
            s.iterations = r.u64()?;
            let (nu, nv) = (s.u.len(), s.v.len());
            s.u = r.f32s(nu)?;
            s.v = r.f32s(nv)?;
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes in payload",
            buf.len() - r.pos
        )));
    }
    Ok(())
}

fn entries(state: &ModelState) -> Vec<ManifestEntry> {
    state
        .store
        .iter()
        .map(|(_, p)| ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            kind: p.kind,
            group: p.group.to_string(),
        })
        .collect()
}

/// Writes `state` into the directory `dir`, creating it if needed.
pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let payload = encode_payload(state);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        iteration: state.iteration,
        config: state.cfg.clone(),
        config_hash: state.cfg.config_hash(),
        rng: RngState {
            seed: state.cfg.seed,
            iteration: state.iteration,
        },
        entries: entries(state),
        sha256: hex::encode(Sha256::digest(&payload)),
    };
    let p = dir.join(PARAMS_FILE);
    fs::write(&p, &payload).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

/// Reads only the manifest of a checkpoint.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("manifest: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Integrity("manifest has no format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::Migration {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::Integrity(format!("manifest: {e}")))
}

/// Restores a full training state from `dir`.
pub fn load_checkpoint(dir: &Path, opts: LoadOptions<'_>) -> Result<ModelState> {
    let manifest = read_manifest(dir)?;
    let p = dir.join(PARAMS_FILE);
    let payload = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let digest = hex::encode(Sha256::digest(&payload));
    if digest != manifest.sha256 {
        return Err(Error::Integrity(format!(
            "params.bin sha256 {digest} does not match manifest {}",
            manifest.sha256
        )));
    }
    if manifest.config.config_hash() != manifest.config_hash {
        return Err(Error::Integrity("stored config does not match its hash".into()));
    }
    let cfg = match opts.expected {
        Some(exp) if exp.config_hash() == manifest.config_hash => exp.clone(),
        Some(exp) if !opts.allow_config_mismatch => {
            return Err(Error::ConfigHashMismatch {
                found: manifest.config_hash,
                expected: exp.config_hash(),
            })
        }
        Some(_) => {
            log::warn!("loading checkpoint with a different config; using the stored one");
            manifest.config.clone()
        }
        None => manifest.config.clone(),
    };
    let mut state = ModelState::init(&cfg)?;
    if entries(&state) != manifest.entries {
        return Err(Error::Integrity(
            "parameter layout differs from the manifest".into(),
        ));
    }
    decode_payload(&mut state, &payload)?;
    state.iteration = manifest.iteration;
    Ok(state)
}
