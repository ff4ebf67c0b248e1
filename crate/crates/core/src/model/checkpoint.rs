use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{read_tensors, write_tensors};

const MAGIC: &[u8; 4] = b"DJPM";
const VERSION: u32 = 1;
const MAX_CONFIG_LEN: u32 = 1 << 16;

/// Layout: magic, version, length-prefixed JSON config, then every named
/// tensor (parameters and BN running statistics).
pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<()> {
    let config = serde_json::to_vec(&model.config)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    let entries = model.entries();
    write_tensors(&mut w, entries.iter().map(|e| (e.name.as_str(), e.tensor)))?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Model> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version} unsupported")));
    }
    let len = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if len > MAX_CONFIG_LEN {
        return Err(Error::Format("checkpoint config block too large".into()));
    }
    let mut config = vec![0u8; len as usize];
    r.read_exact(&mut config)?;
    let config: ModelConfig = serde_json::from_slice(&config)?;
    let mut model = Model::zeros(&config)?;
    let tensors = read_tensors(&mut r)?;
    let mut entries = model.entries_mut();
    if tensors.len() != entries.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            entries.len()
        )));
    }
    for (e, (name, t)) in entries.iter_mut().zip(tensors) {
        if e.name != name || e.tensor.shape != t.shape {
            return Err(Error::Format(format!(
                "checkpoint tensor {name} {:?} where {} {:?} expected",
                t.shape, e.name, e.tensor.shape
            )));
        }
        *e.tensor = t;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(Error::at_path(path))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let f = File::open(path).map_err(Error::at_path(path))?;
    read_checkpoint(BufReader::new(f))
}
