//! Binary training checkpoints.
//!
//! Layout (little-endian): the magic `DGDACKPT`, a `u32` format version, a
//! `u64` payload length, the payload, then the SHA-256 of everything before
//! it. The payload is a blob table: a `u32` count, then per blob a `u16` name
//! length, the UTF-8 name, a `u8` kind (0 = `f64` array, 1 = JSON) and a `u64`
//! byte length followed by the bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use dgdata_nn::{Adam, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::components::{Component, ComponentKind};
use crate::states::PseudoLabels;
use crate::train::{Optimizers, TrainConfig, TrainHistory, TrainState, TrainedModel};
use crate::{CoreError, Result};

pub const MAGIC: &[u8; 8] = b"DGDACKPT";
pub const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

const KIND_F64: u8 = 0;
const KIND_JSON: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    class_names: Vec<String>,
    channels: usize,
    width: usize,
    epoch: usize,
    range_frozen: bool,
    adam_steps: Vec<u64>,
    rng_seed: String,
    rng_stream: u64,
    /// `u128` word position as a decimal string.
    rng_word_pos: String,
}

enum Blob {
    Floats(Vec<f64>),
    Json(Vec<u8>),
}

fn stores(model: &TrainedModel) -> [&ParamStore; 4] {
    [
        &model.features.store,
        model.fine_grained.store(),
        model.temporal.store(),
        model.classifier.store(),
    ]
}

fn adams(opt: &Optimizers) -> [&Adam; 4] {
    [
        &opt.features,
        opt.component(ComponentKind::FineGrained),
        opt.component(ComponentKind::Temporal),
        opt.component(ComponentKind::Classifier),
    ]
}

fn collect_blobs(state: &TrainState) -> Result<BTreeMap<String, Blob>> {
    let model = &state.model;
    let mut blobs = BTreeMap::new();
    let meta = Meta {
        config: state.config.clone(),
        class_names: model.class_names.clone(),
        channels: model.features.channels,
        width: model.features.width,
        epoch: state.epoch,
        range_frozen: model.range.frozen,
        adam_steps: adams(&state.optimizers).iter().map(|a| a.state.step).collect(),
        rng_seed: hex::encode(state.rng.get_seed()),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
    };
    blobs.insert("meta".to_string(), Blob::Json(serde_json::to_vec(&meta)?));
    blobs.insert("history".to_string(), Blob::Json(serde_json::to_vec(&state.history)?));
    blobs.insert("pseudo".to_string(), Blob::Json(serde_json::to_vec(&state.pseudo)?));
    blobs.insert("range/min".to_string(), Blob::Floats(model.range.min.clone()));
    blobs.insert("range/max".to_string(), Blob::Floats(model.range.max.clone()));
    for (store, adam) in stores(model).into_iter().zip(adams(&state.optimizers)) {
        for (i, e) in store.entries().iter().enumerate() {
            let base = format!("{}/{}", store.key(), e.name);
            blobs.insert(format!("param/{base}"), Blob::Floats(e.value.data().to_vec()));
            blobs.insert(format!("adam_m/{base}"), Blob::Floats(adam.state.first[i].clone()));
            blobs.insert(format!("adam_v/{base}"), Blob::Floats(adam.state.second[i].clone()));
        }
    }
    Ok(blobs)
}

/// Serializes `state` to checkpoint bytes.
pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let blobs = collect_blobs(state)?;
    let mut payload = Vec::new();
    payload.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, blob) in &blobs {
        payload.extend_from_slice(&(name.len() as u16).to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        let (kind, bytes) = match blob {
            Blob::Floats(v) => (KIND_F64, v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>()),
            Blob::Json(b) => (KIND_JSON, b.clone()),
        };
        payload.push(kind);
        payload.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        payload.extend_from_slice(&bytes);
    }
    let mut out = Vec::with_capacity(HEADER + payload.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CoreError::Integrity("blob table runs past the payload".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn parse_blobs(bytes: &[u8]) -> Result<BTreeMap<String, Blob>> {
    if bytes.len() < HEADER + DIGEST {
        return Err(CoreError::Integrity(format!("file of {} bytes is too short", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(CoreError::Integrity("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CoreError::Integrity("checksum mismatch".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CoreError::Incompatible {
            found: version,
            supported: VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    if len != (body.len() - HEADER) as u64 {
        return Err(CoreError::Integrity("payload length mismatch".into()));
    }
    let mut r = Reader {
        bytes: &body[HEADER..],
        pos: 0,
    };
    let count = r.u32()?;
    let mut blobs = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CoreError::Integrity("blob name is not UTF-8".into()))?
            .to_string();
        let kind = r.u8()?;
        let n = usize::try_from(r.u64()?).map_err(|_| CoreError::Integrity("blob too large".into()))?;
        let data = r.take(n)?;
        let blob = match kind {
            KIND_F64 if n % 8 == 0 => Blob::Floats(
                data.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            KIND_JSON => Blob::Json(data.to_vec()),
            _ => return Err(CoreError::Integrity(format!("blob {name} has a bad kind or length"))),
        };
        blobs.insert(name, blob);
    }
    if r.pos != r.bytes.len() {
        return Err(CoreError::Integrity("trailing bytes after the blob table".into()));
    }
    Ok(blobs)
}

fn floats(blobs: &mut BTreeMap<String, Blob>, name: &str, len: usize) -> Result<Vec<f64>> {
    match blobs.remove(name) {
        Some(Blob::Floats(v)) if v.len() == len => Ok(v),
        Some(_) => Err(CoreError::Integrity(format!("blob {name} has the wrong type or length"))),
        None => Err(CoreError::Integrity(format!("missing blob {name}"))),
    }
}

fn json<T: for<'de> Deserialize<'de>>(blobs: &mut BTreeMap<String, Blob>, name: &str) -> Result<T> {
    match blobs.remove(name) {
        Some(Blob::Json(b)) => {
            serde_json::from_slice(&b).map_err(|e| CoreError::Integrity(format!("blob {name}: {e}")))
        }
        _ => Err(CoreError::Integrity(format!("missing JSON blob {name}"))),
    }
}

fn restore_store(blobs: &mut BTreeMap<String, Blob>, store: &mut ParamStore, adam: &mut Adam, step: u64) -> Result<()> {
    let key = store.key().to_string();
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let name = store.entry(id).name.clone();
        let n = store.get(id).numel();
        let base = format!("{key}/{name}");
        let value = floats(blobs, &format!("param/{base}"), n)?;
        store.get_mut(id).data_mut().copy_from_slice(&value);
        adam.state.first[i] = floats(blobs, &format!("adam_m/{base}"), n)?;
        adam.state.second[i] = floats(blobs, &format!("adam_v/{base}"), n)?;
    }
    adam.state.step = step;
    Ok(())
}

/// Rebuilds a training state from checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut blobs = parse_blobs(bytes)?;
    let meta: Meta = json(&mut blobs, "meta")?;
    let history: TrainHistory = json(&mut blobs, "history")?;
    let pseudo: PseudoLabels = json(&mut blobs, "pseudo")?;
    meta.config.validate()?;
    let mut model = TrainedModel::build(&meta.config, meta.class_names, meta.channels, meta.width)?;
    let mut optimizers = Optimizers::new(&meta.config.optimizer.adam(), &model)?;
    if meta.adam_steps.len() != 4 {
        return Err(CoreError::Integrity("expected four optimizer states".into()));
    }
    let d = model.features.output_dim;
    model.range.min = floats(&mut blobs, "range/min", d)?;
    model.range.max = floats(&mut blobs, "range/max", d)?;
    model.range.frozen = meta.range_frozen;
    restore_store(&mut blobs, &mut model.features.store, &mut optimizers.features, meta.adam_steps[0])?;
    for (j, kind) in ComponentKind::ALL.into_iter().enumerate() {
        restore_store(
            &mut blobs,
            model.component_mut(kind).store_mut(),
            optimizers.component_mut(kind),
            meta.adam_steps[j + 1],
        )?;
    }
    if let Some(name) = blobs.keys().next() {
        return Err(CoreError::Integrity(format!("unexpected blob {name}")));
    }

    let seed: [u8; 32] = hex::decode(&meta.rng_seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| CoreError::Integrity("bad generator seed".into()))?;
    let word_pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| CoreError::Integrity("bad generator position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng_stream);
    rng.set_word_pos(word_pos);

    if history.epochs.len() != meta.epoch {
        return Err(CoreError::Integrity("history length does not match the epoch count".into()));
    }
    Ok(TrainState {
        config: meta.config,
        model,
        optimizers,
        pseudo,
        history,
        epoch: meta.epoch,
        rng,
    })
}

/// Writes the checkpoint to a temporary sibling file, then renames it over `path`.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode(state)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CoreError::io(path, e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode(&bytes)
}
