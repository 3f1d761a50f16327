//! Weight checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SPKRCKPT"
//! version  u32      1
//! hlen     u64      length of the JSON header
//! header   hlen     UTF-8 JSON: layers, k, tau_us, progress, run config,
//!                   and one descriptor per tensor in storage order
//! weights  f64 *    each tensor in turn, index order (post, pre, k)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Architecture, DelayedWeightTensor, LayerSpec, Network};

pub const MAGIC: &[u8; 8] = b"SPKRCKPT";
pub const VERSION: u32 = 1;

/// Where a run stands: the next (pass, layer) to train and the rates in use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub pass: usize,
    /// Index of the next hidden layer to train, 0-based.
    pub layer: usize,
    pub timestep: u64,
    pub eps_layers: f64,
    pub eps_heads: f64,
    pub rng: RngState,
}

/// Every random stream is derived from the seed and the stream purpose, so the
/// seed is the complete generator state at a layer-pass boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorDescriptor {
    name: String,
    pre_layer: String,
    post_layer: String,
    pre: usize,
    post: usize,
    k: usize,
    index_order: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    layers: Vec<LayerSpec>,
    arch: Architecture,
    progress: Progress,
    /// Resolved run configuration, kept so a checkpoint is self-describing.
    config: Option<serde_json::Value>,
    tensors: Vec<TensorDescriptor>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub progress: Progress,
    pub config: Option<serde_json::Value>,
}

fn descriptor(name: &str, t: &DelayedWeightTensor) -> TensorDescriptor {
    TensorDescriptor {
        name: name.to_string(),
        pre_layer: t.pre_layer.clone(),
        post_layer: t.post_layer.clone(),
        pre: t.pre(),
        post: t.post(),
        k: t.k(),
        index_order: "post,pre,k".into(),
    }
}

fn tensors(net: &Network) -> Vec<(String, &DelayedWeightTensor)> {
    let mut out: Vec<(String, &DelayedWeightTensor)> = net
        .layers
        .iter()
        .enumerate()
        .map(|(l, t)| (format!("layer{}", l + 1), t))
        .collect();
    out.push(("prediction_head".into(), &net.prediction_head));
    out.push(("classification_head".into(), &net.classification_head));
    out
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let ts = tensors(&self.network);
        let header = Header {
            layers: self.network.arch.layer_specs(),
            arch: self.network.arch.clone(),
            progress: self.progress.clone(),
            config: self.config.clone(),
            tensors: ts.iter().map(|(n, t)| descriptor(n, t)).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::config(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        for (_, t) in ts {
            for v in t.to_values() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::parse("offset 0", "truncated checkpoint"))?;
        if &magic != MAGIC {
            return Err(Error::parse("offset 0", "not a checkpoint file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::parse("offset 8", format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.read_u64::<LittleEndian>()? as usize;
        let mut json = vec![0u8; hlen];
        r.read_exact(&mut json)
            .map_err(|_| Error::parse("offset 20", "truncated header"))?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::parse("header", e.to_string()))?;

        let mut loaded = Vec::with_capacity(header.tensors.len());
        for d in &header.tensors {
            if d.index_order != "post,pre,k" {
                return Err(Error::parse(&d.name, format!("unknown index order `{}`", d.index_order)));
            }
            let n = d.pre * d.post * d.k;
            let mut vals = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut vals)
                .map_err(|_| Error::parse(&d.name, "truncated weights"))?;
            loaded.push(DelayedWeightTensor::from_values(&d.pre_layer, &d.post_layer, d.pre, d.post, d.k, &vals)?);
        }
        if loaded.len() < 2 {
            return Err(Error::parse("header", "checkpoint lacks head tensors"));
        }
        let classification = loaded.pop().unwrap();
        let prediction = loaded.pop().unwrap();
        let network = Network::from_parts(header.arch, loaded, prediction, classification)?;
        Ok(Checkpoint {
            network,
            progress: header.progress,
            config: header.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let arch = Architecture {
            input: 4,
            hidden: vec![3, 2],
            classes: 2,
            k: 2,
            tau_us: 1000,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut network = Network::new(arch, 0.3, &mut rng).unwrap();
        network.prediction_head.set(1, 2, 1, -0.125);
        Checkpoint {
            network,
            progress: Progress {
                pass: 1,
                layer: 1,
                timestep: 77,
                eps_layers: 5e-6,
                eps_heads: 1.25e-6,
                rng: RngState {
                    algorithm: "chacha8".into(),
                    seed: 9,
                },
            },
            config: Some(serde_json::json!({"seed": 9})),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let mut a = Vec::new();
        ck.write_to(&mut a).unwrap();
        let back = Checkpoint::read_from(a.as_slice()).unwrap();
        assert_eq!(back.progress, ck.progress);
        assert_eq!(back.network.layers, ck.network.layers);
        assert_eq!(back.network.prediction_head, ck.network.prediction_head);
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Checkpoint::read_from(&b"NOTACKPT...."[..]), Err(Error::Parse { .. })));
        let mut a = Vec::new();
        sample().write_to(&mut a).unwrap();
        a.truncate(a.len() - 3);
        assert!(matches!(Checkpoint::read_from(a.as_slice()), Err(Error::Parse { .. })));
    }
}
