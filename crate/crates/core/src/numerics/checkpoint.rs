//! Binary checkpoint: magic, version, manifest of named shapes, then the
//! little-endian float32 buffers in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use super::{NumericsError, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"HOMLABCK";
const VERSION: u32 = 1;

fn io(e: std::io::Error) -> NumericsError {
    NumericsError::Checkpoint(e.to_string())
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<(), NumericsError> {
    w.write_all(&v.to_le_bytes()).map_err(io)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint<W: Write>(params: &ParamStore, mut w: W) -> Result<(), NumericsError> {
    w.write_all(MAGIC).map_err(io)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, params.len() as u32)?;
    for (name, t) in params.iter() {
        put_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        put_u32(&mut w, t.shape().len() as u32)?;
        for &d in t.shape() {
            put_u32(&mut w, d as u32)?;
        }
    }
    for (_, t) in params.iter() {
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore, NumericsError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(NumericsError::Checkpoint("bad magic".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(NumericsError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = get_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
        let ndim = get_u32(&mut r)? as usize;
        let shape = (0..ndim).map(|_| get_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        manifest.push((name, shape));
    }
    let mut store = ParamStore::new();
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(io)?;
        let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store.push(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<(), NumericsError> {
    let f = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(params, &mut w)?;
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, NumericsError> {
    let f = std::fs::File::open(path).map_err(io)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = seeded_rng(9);
        let mut p = ParamStore::new();
        p.push("a", Tensor::randn(&[3, 4], 1.0, &mut rng));
        p.push("b.bias", Tensor::randn(&[7], 1.0, &mut rng));
        p.push("s", Tensor::scalar(-0.0));
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert!(read_checkpoint(buf.as_slice()).unwrap().bit_eq(&p));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOTACKPTxxxxxxxx"[..]).is_err());
        let mut p = ParamStore::new();
        p.push("a", Tensor::filled(&[8], 1.0));
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
