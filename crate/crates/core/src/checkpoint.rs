//! Binary checkpoints of a training session.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PCSP" | u32 version | u32 header length | header (UTF-8 key=value lines)
//! u32 array count | per array: u32 name length, name, u32 rank,
//!                              rank × u32 extents, f32 values
//! ```
//!
//! The header carries the full run configuration (network included), the
//! stage, the step counters, the freeze flags, the per-parameter Adam step
//! counters and the RNG position. Arrays hold parameter values, Adam moments
//! (`adam.m/<name>`, `adam.v/<name>`) and the frozen target encoder
//! (`target/<name>`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{ModelParams, Section};
use crate::tensor::{ParamEntry, ParamStore, Tensor};
use crate::training::{Session, Stage, TrainConfig};

pub const MAGIC: &[u8; 4] = b"PCSP";
pub const VERSION: u32 = 1;

const SECTIONS: [Section; 3] = [Section::Encoder, Section::Decoder, Section::Critic];

pub fn to_bytes(session: &Session<f32>) -> Vec<u8> {
    let p = &session.params;
    let mut header = vec![
        ("stage".to_string(), session.stage.name().to_string()),
        ("iteration".to_string(), session.iteration.to_string()),
        ("epoch".to_string(), session.epoch.to_string()),
        ("cursor".to_string(), session.cursor.to_string()),
        // per-step generators are keyed by (seed, iteration)
        ("rng.seed".to_string(), session.cfg.seed.to_string()),
        ("rng.stream".to_string(), session.iteration.to_string()),
        ("frozen.encoder".to_string(), p.frozen_encoder.to_string()),
        ("frozen.decoder".to_string(), p.frozen_decoder.to_string()),
        ("frozen.critic".to_string(), p.frozen_critic.to_string()),
        ("has_target".to_string(), p.target_encoder.is_some().to_string()),
    ];
    for (k, v) in session.cfg.to_pairs() {
        header.push((format!("config.{k}"), v));
    }
    let mut arrays: Vec<(String, &Tensor<f32>)> = Vec::new();
    for s in SECTIONS {
        for (name, e) in p.section(s).iter() {
            header.push((format!("step.{name}"), e.step.to_string()));
            arrays.push((name.to_string(), &e.value));
            arrays.push((format!("adam.m/{name}"), &e.first_moment));
            arrays.push((format!("adam.v/{name}"), &e.second_moment));
        }
    }
    if let Some(t) = &p.target_encoder {
        for (name, e) in t.iter() {
            arrays.push((format!("target/{name}"), &e.value));
        }
    }

    let text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, session: &Session<f32>) -> Result<()> {
    fs::write(path, to_bytes(session)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Session<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            location: format!("byte {}", self.at),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.fail(format!("file ends {n} bytes too early")));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| self.fail("invalid UTF-8"))
    }
}

/// Decodes a checkpoint; `path` only labels errors.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Session<f32>> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(4)? != MAGIC {
        r.at = 0;
        return Err(r.fail("not a checkpoint (missing PCSP magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u32()? as usize;
    let text = r.string(header_len)?;
    let mut header = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| r.fail(format!("header line without '=': {line:?}")))?;
        header.insert(k.to_string(), v.to_string());
    }

    let count = r.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.insert(name, Tensor::new(&shape, data)?);
    }
    if r.at != bytes.len() {
        return Err(r.fail("trailing bytes after the last array"));
    }

    let field = |key: &str| -> Result<&String> {
        header
            .get(key)
            .ok_or_else(|| Error::config(format!("checkpoint {} lacks {key}", path.display())))
    };
    fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
        v.parse()
            .map_err(|_| Error::config(format!("checkpoint field {key} = {v:?} is malformed")))
    }

    let mut cfg = TrainConfig::paper();
    for (k, v) in &header {
        if let Some(key) = k.strip_prefix("config.") {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;

    let mut params = ModelParams {
        encoder: ParamStore::new(),
        decoder: ParamStore::new(),
        critic: ParamStore::new(),
        target_encoder: None,
        frozen_encoder: parse("frozen.encoder", field("frozen.encoder")?)?,
        frozen_decoder: parse("frozen.decoder", field("frozen.decoder")?)?,
        frozen_critic: parse("frozen.critic", field("frozen.critic")?)?,
    };
    let mut target = ParamStore::new();
    for (name, value) in &arrays {
        if let Some(inner) = name.strip_prefix("target/") {
            target.insert(inner, value.clone());
            continue;
        }
        if name.starts_with("adam.") {
            continue;
        }
        let section = Section::of(name)
            .ok_or_else(|| Error::config(format!("checkpoint array {name} belongs to no section")))?;
        let moment = |kind: &str| -> Result<Tensor<f32>> {
            let key = format!("adam.{kind}/{name}");
            let t = arrays
                .get(&key)
                .ok_or_else(|| Error::config(format!("checkpoint lacks {key}")))?;
            if t.shape() != value.shape() {
                return Err(Error::config(format!("{key} does not match its parameter's shape")));
            }
            Ok(t.clone())
        };
        let step_key = format!("step.{name}");
        let entry = ParamEntry {
            value: value.clone(),
            first_moment: moment("m")?,
            second_moment: moment("v")?,
            step: parse(&step_key, field(&step_key)?)?,
        };
        params.section_mut(section).insert_entry(name.clone(), entry);
    }
    if parse::<bool>("has_target", field("has_target")?)? {
        params.target_encoder = Some(target);
    }
    params.check_shapes(&cfg.net, cfg.ablation.critic_head())?;

    Ok(Session {
        stage: field("stage")?.parse::<Stage>()?,
        iteration: parse("iteration", field("iteration")?)?,
        epoch: parse("epoch", field("epoch")?)?,
        cursor: parse("cursor", field("cursor")?)?,
        cfg,
        params,
    })
}
