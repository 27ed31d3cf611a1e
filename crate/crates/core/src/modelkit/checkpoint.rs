//! Versioned binary weight files.
//!
//! Layout, little endian: magic `MAMOCKPT`, `u32` version, 32-byte SHA-256
//! of the spec JSON, `u64` JSON length, the JSON, `u32` tensor count, then
//! per tensor a `u64` length and that many `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::backbone::BackboneWeights;
use super::network::Model;
use super::spec::{param_lens, ModelSpec};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MAMOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Spec and raw tensors as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub tensors: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            spec: model.spec().clone(),
            tensors: model.weights(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::random(&self.spec, 0)?;
        model.set_weights(&self.tensors)?;
        Ok(model)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let json = serde_json::to_vec(&self.spec).expect("ModelSpec serializes");
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_all(&Sha256::digest(&json))?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for t in &self.tensors {
            w.write_u64::<LittleEndian>(t.len() as u64)?;
            for &v in t {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(bad)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash).map_err(bad)?;
        let len = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(bad)?;
        if Sha256::digest(&json).as_slice() != hash {
            return Err(Error::Checkpoint("spec hash mismatch".into()));
        }
        let spec: ModelSpec =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("embedded spec: {e}")))?;
        let count = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
            let mut t = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut t).map_err(bad)?;
            tensors.push(t);
        }
        Ok(Checkpoint { spec, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_to(&mut BufWriter::new(file))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

impl BackboneWeights {
    /// The feature-layer tensors of a saved transfer model, ready to be
    /// attached to its provider as pretrained weights.
    pub fn from_checkpoint(checkpoint: Checkpoint, source: impl Into<String>) -> Result<Self> {
        let source = source.into();
        let Some(backbone) = &checkpoint.spec.backbone else {
            return Err(Error::Config(format!("{source}: `{}` has no backbone", checkpoint.spec.name)));
        };
        let n = param_lens(&checkpoint.spec.layers[..backbone.feature_layers], checkpoint.spec.input())?.len();
        if checkpoint.tensors.len() < n {
            return Err(Error::Checkpoint(format!("{source}: fewer tensors than the backbone needs")));
        }
        let mut tensors = checkpoint.tensors;
        tensors.truncate(n);
        Ok(BackboneWeights {
            provider: backbone.provider.clone(),
            source,
            tensors,
        })
    }

    /// Loads [`BackboneWeights::from_checkpoint`] from a file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, path.display().to_string())
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::{BackboneKind, BackboneRegistry};

    #[test]
    fn round_trip_preserves_weights_and_scores() {
        let registry = BackboneRegistry::desk();
        let spec = registry.build_transfer(BackboneKind::Mobilenet, false).unwrap();
        let model = Model::new(&spec, 4, &registry).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_model(&model).write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap().into_model().unwrap();
        assert_eq!(back.spec(), model.spec());
        assert_eq!(back.weights(), model.weights());
    }

    #[test]
    fn backbone_weights_lift_from_a_transfer_checkpoint() {
        let mut registry = BackboneRegistry::desk();
        let spec = registry.build_transfer(BackboneKind::Vgg16, false).unwrap();
        let model = Model::new(&spec, 4, &registry).unwrap();
        let n = model.backbone_tensors();
        let w = BackboneWeights::from_checkpoint(Checkpoint::from_model(&model), "mem").unwrap();
        assert_eq!(w.provider, "vgg16-desk");
        assert_eq!(w.tensors, model.weights()[..n].to_vec());

        registry.attach_weights(w).unwrap();
        let pretrained = registry.build_transfer(BackboneKind::Vgg16, true).unwrap();
        let warm = Model::new(&pretrained, 99, &registry).unwrap();
        assert_eq!(warm.weights()[..n], model.weights()[..n]);

        let mut plain = Checkpoint::from_model(&model);
        plain.spec.backbone = None;
        assert!(BackboneWeights::from_checkpoint(plain, "b").unwrap_err().is_config());
    }

    #[test]
    fn corruption_detected() {
        let registry = BackboneRegistry::desk();
        let spec = registry.build_transfer(BackboneKind::Vgg16, false).unwrap();
        let model = Model::new(&spec, 4, &registry).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_model(&model).write_to(&mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Checkpoint(_))));

        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Checkpoint(_))));

        // Flip a byte inside the embedded JSON.
        let mut bad = buf.clone();
        bad[8 + 4 + 32 + 8 + 3] ^= 0x20;
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Checkpoint(_))));

        let truncated = &buf[..buf.len() - 5];
        assert!(Checkpoint::read_from(&mut &truncated[..]).is_err());
    }

    #[test]
    fn tensor_mismatch_rejected() {
        let registry = BackboneRegistry::desk();
        let spec = registry.build_transfer(BackboneKind::Vgg16, false).unwrap();
        let model = Model::new(&spec, 4, &registry).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.tensors[0].pop();
        assert!(matches!(ck.into_model(), Err(Error::Checkpoint(_))));
    }
}
