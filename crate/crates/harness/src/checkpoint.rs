//! Parameter checkpoints: `SMCK`, u32 segment count, then per segment a
//! u32 name length, the UTF-8 name, u32 rank and u32 dims; then every value
//! as a little-endian f64 in segment order.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

use signmaml::ParamVector;

const MAGIC: &[u8; 4] = b"SMCK";

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).context("value does not fit a u32 field")?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write(params: &ParamVector, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, params.segments().len())?;
    for seg in params.segments() {
        put_u32(w, seg.name.len())?;
        w.write_all(seg.name.as_bytes())?;
        put_u32(w, seg.shape.len())?;
        for &d in &seg.shape {
            put_u32(w, d)?;
        }
    }
    for v in params.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read(r: &mut impl Read) -> Result<ParamVector> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!("not a checkpoint (bad magic)");
    }
    let count = get_u32(r)?;
    let mut layout = Vec::with_capacity(count);
    for _ in 0..count {
        let len = get_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        layout.push((String::from_utf8(name).context("segment name")?, shape));
    }
    let mut params = ParamVector::zeros(&layout);
    let mut b = [0u8; 8];
    for v in params.values_mut() {
        r.read_exact(&mut b).context("truncated checkpoint")?;
        *v = f64::from_le_bytes(b);
    }
    if r.read(&mut b)? != 0 {
        bail!("trailing bytes after checkpoint values");
    }
    Ok(params)
}

pub fn save(params: &ParamVector, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write(params, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamVector> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    read(&mut f)
}
