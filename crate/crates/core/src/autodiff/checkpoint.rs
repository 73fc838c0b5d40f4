use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AutodiffError, DType, ParamStore, Scalar, Tensor};

const MAGIC: &[u8; 7] = b"GRCKPT1";
const CONFIG_KEY: &str = "meta/config";

fn bad(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

/// Serializes every parameter plus a UTF-8 config blob.
pub fn write_checkpoint<F: Scalar, W: Write>(
    mut w: W,
    store: &ParamStore<F>,
    config: &str,
) -> Result<(), AutodiffError> {
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32 + 1).to_le_bytes())?;
    write_entry(&mut w, CONFIG_KEY, DType::U8, &[config.len().max(1)], &{
        let mut b = config.as_bytes().to_vec();
        if b.is_empty() {
            b.push(b' ');
        }
        b
    })?;
    for (_, name, t) in store.iter() {
        let mut bytes = Vec::with_capacity(t.numel() * F::DTYPE.size());
        for &x in t.data() {
            x.put_le(&mut bytes);
        }
        write_entry(&mut w, name, F::DTYPE, t.shape(), &bytes)?;
    }
    w.flush()?;
    Ok(())
}

fn write_entry<W: Write>(
    w: &mut W,
    name: &str,
    dtype: DType,
    shape: &[usize],
    bytes: &[u8],
) -> Result<(), AutodiffError> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[dtype as u8, shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(bytes)?;
    Ok(())
}

fn take<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], AutodiffError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| bad(format!("truncated file: {e}")))?;
    Ok(b)
}

/// Reads a checkpoint written by [`write_checkpoint`]. Tensors stored in
/// another float width are converted.
pub fn read_checkpoint<F: Scalar, R: Read>(mut r: R) -> Result<(ParamStore<F>, String), AutodiffError> {
    let magic: [u8; 7] = take(&mut r)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let count = u32::from_le_bytes(take(&mut r)?);
    let mut store = ParamStore::new();
    let mut config = None;
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)
            .map_err(|e| bad(format!("truncated file: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("non-UTF-8 tensor name"))?;
        let [tag, rank] = take::<_, 2>(&mut r)?;
        let dtype = DType::from_tag(tag).ok_or_else(|| bad(format!("unknown dtype tag {tag}")))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * dtype.size()];
        r.read_exact(&mut bytes)
            .map_err(|e| bad(format!("truncated tensor {name}: {e}")))?;
        match dtype {
            DType::U8 => {
                if name == CONFIG_KEY {
                    let s = String::from_utf8(bytes).map_err(|_| bad("config is not UTF-8"))?;
                    config = Some(s.trim_end().to_string());
                }
            }
            DType::F32 | DType::F64 => {
                let data: Vec<F> = bytes
                    .chunks_exact(dtype.size())
                    .map(|c| {
                        if dtype == DType::F32 {
                            F::of(f32::take_le(c) as f64)
                        } else {
                            F::of(f64::take_le(c))
                        }
                    })
                    .collect();
                if store.id(&name).is_some() {
                    return Err(bad(format!("duplicate tensor {name}")));
                }
                store.add(name, Tensor::new(shape, data)?);
            }
        }
    }
    Ok((store, config.unwrap_or_default()))
}

pub fn save_checkpoint<F: Scalar>(path: &Path, store: &ParamStore<F>, config: &str) -> Result<(), AutodiffError> {
    write_checkpoint(BufWriter::new(File::create(path)?), store, config)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(ParamStore<F>, String), AutodiffError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
