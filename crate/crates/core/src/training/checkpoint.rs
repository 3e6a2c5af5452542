use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demos::NormStats;
use crate::error::{Error, Result};
use crate::nn::{Architecture, Network, NetworkSpec, Parameters};
use crate::sim::TaskKind;
use crate::wire::to_line;

const MAGIC: &[u8; 8] = b"LFDCKPT\0";
pub const CHECKPOINT_FORMAT: &str = "lfd-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1.0";

/// Trained network plus everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: Parameters,
    pub stats: NormStats,
    pub task: Option<TaskKind>,
    pub architecture: Option<Architecture>,
    pub seed: u64,
    pub config_digest: String,
    /// Validation loss of exactly these (single-precision) parameters.
    pub validation_loss: f64,
    pub epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: String,
    spec: NetworkSpec,
    stats: NormStats,
    task: Option<TaskKind>,
    architecture: Option<Architecture>,
    seed: u64,
    config_digest: String,
    validation_loss: f64,
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl Checkpoint {
    pub fn network(&self) -> Result<Network> {
        Network::from_parts(self.spec, self.params.clone())
    }

    /// Layout: magic, header length (u32 LE), JSON header, then every tensor
    /// as little-endian f32 in header order.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let named = self.params.named();
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION.into(),
            spec: self.spec,
            stats: self.stats.clone(),
            task: self.task,
            architecture: self.architecture,
            seed: self.seed,
            config_digest: self.config_digest.clone(),
            validation_loss: self.validation_loss,
            epoch: self.epoch,
            tensors: named
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = to_line(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Format("checkpoint header too large".into()))?;
        out.write_all(MAGIC)?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(json.as_bytes())?;
        for (_, t) in named {
            for v in t.data() {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let len = read_u32(&mut input)? as usize;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unexpected format `{}`", header.format)));
        }
        if header.version.split('.').next() != CHECKPOINT_VERSION.split('.').next() {
            return Err(Error::Format(format!("checkpoint version {} is not supported", header.version)));
        }
        header.spec.validate()?;

        // Shapes come from the spec; the header only has to agree with them.
        let mut net = Network::new(header.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected: Vec<(String, Vec<usize>)> = net
            .params()
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors, the network has {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
        }
        let mut buf = [0u8; 4];
        for t in net.params_mut().tensors_mut() {
            for v in t.data_mut() {
                input.read_exact(&mut buf)?;
                let x = f32::from_le_bytes(buf);
                if !x.is_finite() {
                    return Err(Error::Format("non-finite parameter in checkpoint".into()));
                }
                *v = x as f64;
            }
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after tensors", rest.len())));
        }
        Ok(Self {
            spec: header.spec,
            params: net.into_params(),
            stats: header.stats,
            task: header.task,
            architecture: header.architecture,
            seed: header.seed,
            config_digest: header.config_digest,
            validation_loss: header.validation_loss,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{GRIPPER_DIM, OBS_DIM};

    fn sample(arch: Architecture) -> Checkpoint {
        let spec = arch.spec(OBS_DIM, GRIPPER_DIM);
        let mut net = Network::new(spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        net.params_mut().round_to_f32();
        Checkpoint {
            spec,
            params: net.into_params(),
            stats: NormStats {
                mean: (0..OBS_DIM).map(|i| i as f64 * 0.1).collect(),
                std: vec![0.3; OBS_DIM],
            },
            task: Some(TaskKind::PushToPose),
            architecture: Some(arch),
            seed: 9,
            config_digest: "abc".into(),
            validation_loss: -1.0 / 3.0,
            epoch: 4,
        }
    }

    #[test]
    fn round_trips_every_architecture() {
        for arch in Architecture::ALL {
            let ck = sample(arch);
            let mut bytes = Vec::new();
            ck.write_to(&mut bytes).unwrap();
            let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
            assert_eq!(back, ck);
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            assert_eq!(bytes, again);
        }
    }

    #[test]
    fn rejects_corruption() {
        let ck = sample(Architecture::LstmMdn);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(extra.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(bad.as_slice()).is_err());
    }
}
