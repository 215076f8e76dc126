//! Dataset container.
//!
//! Little-endian layout, version 1:
//!
//! ```text
//! magic "CFDS" | version u16
//! spec: classes u32, domains u32, correlation f64, image_side u32,
//!       patch_side u32, noise f32, stroke_dropout f64, hard_fraction f64,
//!       hard_ink f32, hard_dropout f64
//! split: len u8, utf-8 name | seed u64 | n u64
//! n records: semantics u32, domain u32, glyph_row u16, glyph_col u16,
//!            hard u8, stroke_seed u64, texture_phase u32, noise_seed u64,
//!            side*side f32 pixels (row-major), ceil(side*side/8) mask bytes
//!            (bit i of byte i/8 is pixel i, LSB first)
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::Serialize;

use super::{Dataset, Exogenous, PatchImage, PixelMask, SampleRecord, ScmSpec, Split};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CFDS";
pub const VERSION: u16 = 1;

fn write_spec<W: Write>(w: &mut W, s: &ScmSpec) -> io::Result<()> {
    w.write_u32::<LE>(s.num_classes as u32)?;
    w.write_u32::<LE>(s.num_domains as u32)?;
    w.write_f64::<LE>(s.correlation)?;
    w.write_u32::<LE>(s.image_side as u32)?;
    w.write_u32::<LE>(s.patch_side as u32)?;
    w.write_f32::<LE>(s.noise)?;
    w.write_f64::<LE>(s.stroke_dropout)?;
    w.write_f64::<LE>(s.hard_fraction)?;
    w.write_f32::<LE>(s.hard_ink)?;
    w.write_f64::<LE>(s.hard_dropout)
}

fn read_spec<R: Read>(r: &mut R) -> io::Result<ScmSpec> {
    Ok(ScmSpec {
        num_classes: r.read_u32::<LE>()? as usize,
        num_domains: r.read_u32::<LE>()? as usize,
        correlation: r.read_f64::<LE>()?,
        image_side: r.read_u32::<LE>()? as usize,
        patch_side: r.read_u32::<LE>()? as usize,
        noise: r.read_f32::<LE>()?,
        stroke_dropout: r.read_f64::<LE>()?,
        hard_fraction: r.read_f64::<LE>()?,
        hard_ink: r.read_f32::<LE>()?,
        hard_dropout: r.read_f64::<LE>()?,
    })
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

pub fn write_dataset<W: Write>(w: &mut W, ds: &Dataset) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u16::<LE>(VERSION)?;
    write_spec(w, &ds.spec)?;
    let name = ds.split.name().as_bytes();
    w.write_u8(name.len() as u8)?;
    w.write_all(name)?;
    w.write_u64::<LE>(ds.seed)?;
    w.write_u64::<LE>(ds.samples.len() as u64)?;
    for s in &ds.samples {
        w.write_u32::<LE>(s.semantics as u32)?;
        w.write_u32::<LE>(s.domain as u32)?;
        let u = &s.exogenous;
        w.write_u16::<LE>(u.glyph_row)?;
        w.write_u16::<LE>(u.glyph_col)?;
        w.write_u8(u.hard as u8)?;
        w.write_u64::<LE>(u.stroke_seed)?;
        w.write_u32::<LE>(u.texture_phase)?;
        w.write_u64::<LE>(u.noise_seed)?;
        for v in s.image.to_pixels() {
            w.write_f32::<LE>(v)?;
        }
        w.write_all(&pack_bits(s.object_mask.bits()))?;
    }
    Ok(())
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn read_inner<R: Read>(r: &mut R, path: &Path) -> Result<Dataset> {
    let io_err = |e: io::Error| format_err(path, e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(format_err(path, "not a dataset file (bad magic)"));
    }
    let version = r.read_u16::<LE>().map_err(io_err)?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let spec = read_spec(r).map_err(io_err)?;
    spec.validate()
        .map_err(|e| format_err(path, format!("invalid spec header: {e}")))?;
    let len = r.read_u8().map_err(io_err)? as usize;
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(io_err)?;
    let split: Split = String::from_utf8_lossy(&name)
        .parse()
        .map_err(|e: Error| format_err(path, e.to_string()))?;
    let seed = r.read_u64::<LE>().map_err(io_err)?;
    let n = r.read_u64::<LE>().map_err(io_err)? as usize;
    let side = spec.image_side;
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    let mut mask_bytes = vec![0u8; (side * side).div_ceil(8)];
    for _ in 0..n {
        let semantics = r.read_u32::<LE>().map_err(io_err)? as usize;
        let domain = r.read_u32::<LE>().map_err(io_err)? as usize;
        if semantics >= spec.num_classes || domain >= spec.num_domains {
            return Err(format_err(path, "sample label out of range"));
        }
        let exogenous = Exogenous {
            glyph_row: r.read_u16::<LE>().map_err(io_err)?,
            glyph_col: r.read_u16::<LE>().map_err(io_err)?,
            hard: r.read_u8().map_err(io_err)? != 0,
            stroke_seed: r.read_u64::<LE>().map_err(io_err)?,
            texture_phase: r.read_u32::<LE>().map_err(io_err)?,
            noise_seed: r.read_u64::<LE>().map_err(io_err)?,
        };
        let mut pixels = vec![0f32; side * side];
        r.read_f32_into::<LE>(&mut pixels).map_err(io_err)?;
        r.read_exact(&mut mask_bytes).map_err(io_err)?;
        samples.push(SampleRecord {
            semantics,
            domain,
            exogenous,
            image: PatchImage::from_pixels(side, spec.patch_side, &pixels)?,
            object_mask: PixelMask::from_bits(side, unpack_bits(&mask_bytes, side * side))?,
        });
    }
    Ok(Dataset {
        spec,
        split,
        seed,
        samples,
    })
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset> {
    read_inner(r, Path::new("<stream>"))
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(&mut w, ds).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_inner(&mut BufReader::new(file), path)
}

#[derive(Serialize)]
struct JsonSample<'a> {
    semantics: usize,
    domain: usize,
    exogenous: &'a Exogenous,
    pixels: Vec<f32>,
    object_mask: Vec<u8>,
}

#[derive(Serialize)]
struct JsonDataset<'a> {
    format: &'static str,
    version: u16,
    spec: &'a ScmSpec,
    split: Split,
    seed: u64,
    n: usize,
    samples: Vec<JsonSample<'a>>,
}

/// Debug export with the same content as the binary container.
pub fn to_json(ds: &Dataset) -> Result<String> {
    let view = JsonDataset {
        format: "cfds",
        version: VERSION,
        spec: &ds.spec,
        split: ds.split,
        seed: ds.seed,
        n: ds.samples.len(),
        samples: ds
            .samples
            .iter()
            .map(|s| JsonSample {
                semantics: s.semantics,
                domain: s.domain,
                exogenous: &s.exogenous,
                pixels: s.image.to_pixels(),
                object_mask: s.object_mask.bits().iter().map(|&b| b as u8).collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&view)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::Split;

    fn tiny() -> Dataset {
        let spec = ScmSpec {
            num_classes: 4,
            num_domains: 4,
            image_side: 16,
            ..ScmSpec::default()
        };
        Dataset::generate(&spec, Split::IdVal, 7, 11).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let ds = tiny();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn header_layout() {
        let ds = tiny();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        assert_eq!(&buf[..4], b"CFDS");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        // 6 + spec(56) + name(1 + 6) + seed + n + 7 * (33 + 1024 + 32)
        assert_eq!(buf.len(), 6 + 56 + 7 + 16 + 7 * (33 + 16 * 16 * 4 + 32));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let ds = tiny();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_dataset(&mut buf.as_slice()),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            read_dataset(&mut &b"NOPE"[..]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn bit_packing() {
        let bits = [true, false, false, true, false, false, false, false, true];
        let packed = pack_bits(&bits);
        assert_eq!(packed, vec![0b0000_1001, 0b0000_0001]);
        assert_eq!(unpack_bits(&packed, 9), bits);
    }

    #[test]
    fn json_export_carries_samples() {
        let ds = tiny();
        let v: serde_json::Value = serde_json::from_str(&to_json(&ds).unwrap()).unwrap();
        assert_eq!(v["n"], 7);
        assert_eq!(v["split"], "id-val");
        assert_eq!(v["samples"][0]["pixels"].as_array().unwrap().len(), 256);
    }
}
