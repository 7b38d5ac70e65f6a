//! Immutable parameter snapshots and their on-disk format.
//!
//! Layout: magic "LSSD", format version (u32 LE), epoch (u32 LE),
//! dev_loss (f64 LE), parameter count (u32 LE), then per parameter:
//! name length (u16 LE) + UTF-8 name + rank (u8) + extents (u32 LE each)
//! + values (f32 LE, row-major).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LSSD";
const FORMAT_VERSION: u32 = 1;

/// Value-only copy of a model's parameters at a given epoch.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub params: BTreeMap<String, Tensor>,
    pub epoch: u32,
    pub dev_loss: f64,
}

impl Snapshot {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&self.dev_loss.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Malformed {
            path: path.to_string(),
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let epoch = read_u32(r)?;
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let dev_loss = f64::from_le_bytes(buf);
        let count = read_u32(r)?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let mut len_buf = [0u8; 2];
            r.read_exact(&mut len_buf)?;
            let name_len = u16::from_le_bytes(len_buf) as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf).map_err(|_| bad("non-UTF-8 name"))?;
            let mut rank_buf = [0u8; 1];
            r.read_exact(&mut rank_buf)?;
            let mut shape = Vec::with_capacity(rank_buf[0] as usize);
            for _ in 0..rank_buf[0] {
                shape.push(read_u32(r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            let mut vbuf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut vbuf)?;
                values.push(f32::from_le_bytes(vbuf));
            }
            params.insert(name, Tensor::new(shape, values)?);
        }
        Ok(Snapshot { params, epoch, dev_loss })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f, &path.display().to_string())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
