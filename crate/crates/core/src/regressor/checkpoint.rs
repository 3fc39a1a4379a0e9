use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KeypointRegressor, KeypointSet, Network, NetworkConfig};
use crate::patchify::Patch;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DRRPCKPT";

/// Trained parameters plus the configuration and selection metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: NetworkConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub val_error: f64,
    pub network: Network,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    config_hash: String,
    epoch: usize,
    val_error: f64,
    layer_shapes: Vec<[usize; 2]>,
    dtype: String,
}

pub fn config_hash(cfg: &NetworkConfig) -> String {
    crate::renderer::short_hash(&serde_json::to_vec(cfg).expect("config serializes"))
}

impl ModelCheckpoint {
    pub fn new(config: NetworkConfig, epoch: usize, val_error: f64, network: Network) -> Self {
        ModelCheckpoint {
            config_hash: config_hash(&config),
            config,
            epoch,
            val_error,
            network,
        }
    }

    /// Layout: 8-byte magic, u64 LE header length, JSON header, then all
    /// parameters as little-endian f64 in layer order (weights row-major,
    /// then bias).
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            val_error: self.val_error,
            layer_shapes: self
                .network
                .layers
                .iter()
                .map(|l| [l.weights.nrows(), l.weights.ncols()])
                .collect(),
            dtype: "f64le".into(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.network.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.network.flat_params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        if header.dtype != "f64le" {
            return Err(bad("unsupported dtype"));
        }
        let mut widths: Vec<usize> = header.layer_shapes.iter().map(|s| s[1]).collect();
        widths.push(header.layer_shapes.last().ok_or_else(|| bad("no layers"))?[0]);
        let mut network = Network::zeros(&widths, header.config.leaky_slope);
        let blob = &bytes[16 + hlen..];
        if blob.len() != 8 * network.param_count() {
            return Err(bad("parameter blob size mismatch"));
        }
        let flat: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        network.set_flat_params(&flat)?;
        Ok(ModelCheckpoint {
            config: header.config,
            config_hash: header.config_hash,
            epoch: header.epoch,
            val_error: header.val_error,
            network,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

impl KeypointRegressor for ModelCheckpoint {
    fn predict(&self, patch: &Patch) -> Result<KeypointSet> {
        self.network.predict(patch)
    }
}
