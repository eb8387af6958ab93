//! Binary checkpoints: magic, version, the configuration as `key=value`
//! pairs, then every parameter tensor in layout order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{MmvitModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::serialize::{read_exact, read_u32};
use crate::tensor::{read_tensor, write_tensor};

const MAGIC: &[u8; 4] = b"MMVT";
const VERSION: u32 = 1;

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R, offset: &mut u64) -> Result<String> {
    let at = *offset;
    let len = read_u32(r, offset)? as usize;
    if len > 1 << 16 {
        return Err(Error::format(at, format!("string length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, offset)?;
    String::from_utf8(buf).map_err(|_| Error::format(at, "string is not UTF-8"))
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &MmvitModel) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let pairs = model.config().to_pairs();
    w.write_all(&(pairs.len() as u32).to_le_bytes())?;
    for (k, v) in &pairs {
        write_str(w, k)?;
        write_str(w, v)?;
    }
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for p in model.params() {
        write_tensor(w, p)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<MmvitModel> {
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, &mut offset)?;
    if &magic != MAGIC {
        return Err(Error::format(0, "not a model checkpoint (bad magic)"));
    }
    let version = read_u32(r, &mut offset)?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let n = read_u32(r, &mut offset)?;
    let mut config = ModelConfig::default();
    for _ in 0..n {
        let at = offset;
        let k = read_str(r, &mut offset)?;
        let v = read_str(r, &mut offset)?;
        if !config
            .set(&k, &v)
            .map_err(|e| Error::format(at, e.to_string()))?
        {
            return Err(Error::format(at, format!("unknown config key \"{k}\"")));
        }
    }
    let at = offset;
    let count = read_u32(r, &mut offset)? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        params.push(read_tensor(r, &mut offset)?);
    }
    MmvitModel::from_params(config, params).map_err(|e| Error::format(at, e.to_string()))
}

pub fn save_checkpoint(path: &Path, model: &MmvitModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MmvitModel> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
