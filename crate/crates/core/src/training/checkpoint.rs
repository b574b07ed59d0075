//! Checkpoint archives.
//!
//! Layout: magic `MIFA`, a little-endian `u32` metadata length, the JSON
//! metadata, then one record per entry: `u32` name length, UTF-8 name and a
//! complete `MIFT` tensor. Parameters are stored under their own names and the
//! optimiser moments under `adam.m.<name>` / `adam.v.<name>`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autodiff::{Mat, ParamStore};
use crate::error::{Error, Result};
use crate::features::{read_tensor_from, write_tensor_to, Tensor};
use crate::model::MifNet;

const MAGIC: &[u8; 4] = b"MIFA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: u32,
    #[serde(rename = "C")]
    pub feature_dim: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "K")]
    pub gmm_k: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub adam_step: u64,
}

impl CheckpointMeta {
    pub fn new(cfg: &TrainConfig, epoch: usize, step: u64, adam_step: u64) -> Self {
        Self {
            format: FORMAT_VERSION,
            feature_dim: cfg.feature_dim,
            layers: cfg.layers,
            gmm_k: cfg.gmm_k,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            epoch,
            step,
            adam_step,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Mat)>,
    /// First and second Adam moments, in parameter order.
    pub adam: Option<(Vec<Mat>, Vec<Mat>)>,
}

impl Checkpoint {
    pub fn from_store(meta: CheckpointMeta, store: &ParamStore, adam: Option<(&[Mat], &[Mat])>) -> Self {
        Self {
            meta,
            params: store.iter().map(|(n, m)| (n.to_string(), m.clone())).collect(),
            adam: adam.map(|(m, v)| (m.to_vec(), v.to_vec())),
        }
    }

    /// Rebuilds the network described by the metadata and loads every
    /// parameter by name.
    pub fn build_model(&self) -> Result<(MifNet, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.meta.seed);
        let model = MifNet::new(&mut store, self.meta.config.model_config(), &mut rng)?;
        let by_name: HashMap<&str, &Mat> = self.params.iter().map(|(n, m)| (n.as_str(), m)).collect();
        if by_name.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model has {}",
                by_name.len(),
                store.len()
            )));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let value = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if value.dim() != store.get(id).dim() {
                return Err(Error::Format(format!("parameter {name} has the wrong shape")));
            }
            *store.get_mut(id) = (*value).clone();
        }
        Ok((model, store))
    }
}

fn write_entry<W: Write>(w: &mut W, name: &str, m: &Mat) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(name.as_bytes()).map_err(io)?;
    write_tensor_to(w, &Tensor::from_matrix(m))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let meta = serde_json::to_vec(&ck.meta)?;
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(meta.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&meta).map_err(io)?;
    for (name, m) in &ck.params {
        write_entry(&mut w, name, m)?;
    }
    if let Some((ms, vs)) = &ck.adam {
        for ((name, _), (m, v)) in ck.params.iter().zip(ms.iter().zip(vs)) {
            write_entry(&mut w, &format!("adam.m.{name}"), m)?;
            write_entry(&mut w, &format!("adam.v.{name}"), v)?;
        }
    }
    w.flush().map_err(io)
}

fn read_u32<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut b[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::Format("truncated checkpoint".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("<checkpoint>", e)),
        }
    }
    Ok(Some(u32::from_le_bytes(b)))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::CheckpointNotFound(path.to_path_buf()));
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint archive", path.display())));
    }
    let len = read_u32(&mut r)?.ok_or_else(|| Error::Format("truncated checkpoint".into()))? as usize;
    let mut meta = vec![0u8; len];
    r.read_exact(&mut meta)
        .map_err(|_| Error::Format("truncated checkpoint metadata".into()))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if meta.format != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint format {}", meta.format)));
    }
    let mut params = Vec::new();
    let mut moments: HashMap<String, Mat> = HashMap::new();
    while let Some(n) = read_u32(&mut r)? {
        let mut name = vec![0u8; n as usize];
        r.read_exact(&mut name)
            .map_err(|_| Error::Format("truncated entry name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let m = read_tensor_from(&mut r, false)?.to_matrix()?;
        if name.starts_with("adam.") {
            moments.insert(name, m);
        } else {
            params.push((name, m));
        }
    }
    let adam = if moments.is_empty() {
        None
    } else {
        let pick = |prefix: &str| -> Result<Vec<Mat>> {
            params
                .iter()
                .map(|(n, _)| {
                    moments
                        .get(&format!("{prefix}{n}"))
                        .cloned()
                        .ok_or_else(|| Error::Format(format!("missing {prefix}{n}")))
                })
                .collect()
        };
        Some((pick("adam.m.")?, pick("adam.v.")?))
    };
    Ok(Checkpoint { meta, params, adam })
}

/// Loads a checkpoint and rebuilds its network.
pub fn load_model(path: &Path) -> Result<(MifNet, ParamStore, CheckpointMeta)> {
    let ck = load_checkpoint(path)?;
    let (model, store) = ck.build_model()?;
    Ok((model, store, ck.meta))
}
