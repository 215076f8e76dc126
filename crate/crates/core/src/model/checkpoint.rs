//! Checkpoint container.
//!
//! Little-endian, version 1: magic `"CFCK"`, version u16, seven u32 config
//! fields (embed_dim, num_layers, num_heads, num_patches, patch_len,
//! num_classes, mlp_dim), array count u32, then per array in sorted name
//! order: name length u16, utf-8 name, rank u8, rank x u32 dims, f32 values.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{ModelConfig, ModelParams};
use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFCK";
pub const VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(w: &mut W, params: &ModelParams) -> io::Result<()> {
    let c = &params.config;
    w.write_all(MAGIC)?;
    w.write_u16::<LE>(VERSION)?;
    for v in [
        c.embed_dim,
        c.num_layers,
        c.num_heads,
        c.num_patches,
        c.patch_len,
        c.num_classes,
        c.mlp_dim,
    ] {
        w.write_u32::<LE>(v as u32)?;
    }
    w.write_u32::<LE>(params.tensors.len() as u32)?;
    // BTreeMap iteration is already sorted by name
    for (name, t) in &params.tensors {
        w.write_u16::<LE>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(t.shape().len() as u8)?;
        for &d in t.shape() {
            w.write_u32::<LE>(d as u32)?;
        }
        for &v in t.data() {
            w.write_f32::<LE>(v)?;
        }
    }
    Ok(())
}

fn read_inner<R: Read>(r: &mut R, path: &Path) -> Result<ModelParams> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let io_err = |e: io::Error| bad(e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = r.read_u16::<LE>().map_err(io_err)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut fields = [0usize; 7];
    for f in &mut fields {
        *f = r.read_u32::<LE>().map_err(io_err)? as usize;
    }
    let config = ModelConfig {
        embed_dim: fields[0],
        num_layers: fields[1],
        num_heads: fields[2],
        num_patches: fields[3],
        patch_len: fields[4],
        num_classes: fields[5],
        mlp_dim: fields[6],
    };
    config.validate().map_err(|e| bad(e.to_string()))?;
    let count = r.read_u32::<LE>().map_err(io_err)? as usize;
    let mut tensors = ParamSet::new();
    for _ in 0..count {
        let len = r.read_u16::<LE>().map_err(io_err)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let rank = r.read_u8().map_err(io_err)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LE>().map_err(io_err)? as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(bad(format!("array `{name}` is implausibly large")));
        }
        let mut data = vec![0f32; n];
        r.read_f32_into::<LE>(&mut data).map_err(io_err)?;
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    ModelParams::from_tensors(&config, tensors)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ModelParams> {
    read_inner(r, Path::new("<stream>"))
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, params).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_inner(&mut BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig {
            embed_dim: 8,
            num_heads: 2,
            num_patches: 4,
            num_classes: 3,
            mlp_dim: 16,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params).unwrap();
        assert_eq!(&buf[..4], b"CFCK");
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, params);
        assert_eq!(back.checksum(), params.checksum());

        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn garbage_rejected() {
        assert!(matches!(
            read_checkpoint(&mut &b"CFCK\x02\x00"[..]),
            Err(Error::Format { .. })
        ));
    }
}
