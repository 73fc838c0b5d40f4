use std::io::{BufRead, Read, Write};

use super::{SidCodebooks, SidEntry, TokenizerError};
use crate::util::{read_jsonl, write_jsonl};

const MAGIC: &[u8; 6] = b"GRSID1";

pub fn write_codebooks<W: Write>(mut w: W, books: &SidCodebooks) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(books.num_levels() as u32).to_le_bytes())?;
    for l in 0..books.num_levels() {
        w.write_all(&(books.level_size(l) as u32).to_le_bytes())?;
        w.write_all(&(books.dim() as u32).to_le_bytes())?;
        for &x in books.level(l) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

fn u32_from<R: Read>(r: &mut R) -> Result<u32, TokenizerError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| TokenizerError::Format("truncated codebook file".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_codebooks<R: Read>(mut r: R) -> Result<SidCodebooks, TokenizerError> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| TokenizerError::Format("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(TokenizerError::Format("bad codebook magic".into()));
    }
    let levels = u32_from(&mut r)? as usize;
    let mut dim = None;
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        let w = u32_from(&mut r)? as usize;
        let d = u32_from(&mut r)? as usize;
        if *dim.get_or_insert(d) != d {
            return Err(TokenizerError::InvalidCodebook {
                level: l,
                reason: format!("dimension {d} differs from level 0"),
            });
        }
        let mut bytes = vec![0u8; w * d * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| TokenizerError::Format(format!("truncated level {l}")))?;
        out.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                .collect(),
        );
    }
    SidCodebooks::new(dim.unwrap_or(0), out)
}

pub fn write_assignments<W: Write>(w: W, entries: &[SidEntry]) -> std::io::Result<()> {
    write_jsonl(w, entries)
}

pub fn read_assignments<R: BufRead>(r: R) -> Result<Vec<SidEntry>, TokenizerError> {
    read_jsonl(r).map_err(|(line, reason)| TokenizerError::Format(format!("line {line}: {reason}")))
}
