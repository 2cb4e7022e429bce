//! Raw tensor file format and 16-bit PGM image export.
//!
//! Layout: 8-byte magic `EPNPTNSR`, u8 version, u8 dtype code
//! (0 = f32, 1 = f64), u8 rank, little-endian u32 dims, then the
//! little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EPNPTNSR";
const VERSION: u8 = 1;

/// Storage precision for serialized tensors. Compute is always f64; f32
/// is a compact on-disk representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype.code(), t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidArgument("bad tensor magic".into()));
    }
    let mut head = [0u8; 3];
    r.read_exact(&mut head)?;
    let [version, dtype, rank] = head;
    if version != VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported tensor version {version}"
        )));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let mut dim = [0u8; 4];
        r.read_exact(&mut dim)?;
        shape.push(u32::from_le_bytes(dim) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        0 => {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        1 => {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown dtype code {other}"
            )))
        }
    }
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t, dtype)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

/// Scaling metadata written next to every exported PGM.
#[derive(Debug, Serialize, Deserialize)]
pub struct PgmSidecar {
    pub min: f64,
    pub max: f64,
}

/// Export an H×W (or 1×H×W) tensor as a 16-bit binary PGM, min-max
/// scaled; the scaling is recorded in a `.json` sidecar next to it.
pub fn save_pgm16(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = match t.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::InvalidArgument(format!(
                "pgm export needs an HxW image, got {other:?}"
            )))
        }
    };
    let min = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n65535\n")?;
    for &v in t.data() {
        let q = (((v - min) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16;
        // PGM 16-bit samples are big-endian
        f.write_all(&q.to_be_bytes())?;
    }
    let sidecar = PgmSidecar { min, max };
    let json_path = path.with_extension("json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}
