//! AFNT binary tensor files and the named-entry container used for
//! checkpoints and dataset caches.
//!
//! Tensor record layout: magic `AFNT`, u8 version (=1), u8 dtype
//! (0 = real64, 1 = complex128), u16 rank, rank x u64 dims, then the
//! row-major little-endian f64 payload (complex interleaved re, im).
//!
//! Container layout: magic `AFNC`, u8 version (=1), u32 entry count,
//! then per entry a u16 name length, the UTF-8 name, and a full AFNT
//! tensor record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Buffer, Complex64, Dtype, Tensor};
use crate::error::{Error, Result};

const TENSOR_MAGIC: &[u8; 4] = b"AFNT";
const CONTAINER_MAGIC: &[u8; 4] = b"AFNC";
const VERSION: u8 = 1;

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        message: message.into(),
    }
}

pub fn write_tensor_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[VERSION])?;
    let dtype_byte = match t.dtype() {
        Dtype::Real64 => 0u8,
        Dtype::Complex128 => 1u8,
    };
    w.write_all(&[dtype_byte])?;
    let rank = t.rank() as u16;
    w.write_all(&rank.to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match t.buffer() {
        Buffer::Real(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Buffer::Complex(v) => {
            for z in v {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor_from(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(format_err(format!("bad tensor magic {magic:?}")));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != VERSION {
        return Err(format_err(format!("unsupported version {}", head[0])));
    }
    let dtype = match head[1] {
        0 => Dtype::Real64,
        1 => Dtype::Complex128,
        other => return Err(format_err(format!("unknown dtype byte {other}"))),
    };
    let mut rank_bytes = [0u8; 2];
    r.read_exact(&mut rank_bytes)?;
    let rank = u16::from_le_bytes(rank_bytes) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 8];
        r.read_exact(&mut dim)?;
        shape.push(u64::from_le_bytes(dim) as usize);
    }
    let n: usize = shape.iter().product();
    let f64_at = |r: &mut dyn Read| -> Result<f64> {
        let mut raw = [0u8; 8];
        r.read_exact(&mut raw)?;
        Ok(f64::from_le_bytes(raw))
    };
    let data = match dtype {
        Dtype::Real64 => {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(f64_at(r)?);
            }
            Buffer::Real(v)
        }
        Dtype::Complex128 => {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let re = f64_at(r)?;
                let im = f64_at(r)?;
                v.push(Complex64::new(re, im));
            }
            Buffer::Complex(v)
        }
    };
    Tensor::from_buffer(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor_from(&mut r)
}

pub fn write_container(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(format_err(format!("entry name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor_to(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(format_err(format!("bad container magic {magic:?}")));
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver)?;
    if ver[0] != VERSION {
        return Err(format_err(format!("unsupported container version {}", ver[0])));
    }
    let mut count_bytes = [0u8; 4];
    r.read_exact(&mut count_bytes)?;
    let count = u32::from_le_bytes(count_bytes) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len_bytes = [0u8; 2];
        r.read_exact(&mut len_bytes)?;
        let len = u16::from_le_bytes(len_bytes) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| format_err("entry name is not valid UTF-8"))?;
        let t = read_tensor_from(&mut r)?;
        out.push((name, t));
    }
    Ok(out)
}
