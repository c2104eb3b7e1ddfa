//! Cached-prior file format: little-endian binary with a `FOMP` magic,
//! a u16 version and per-camera length-prefixed records. Depth and
//! confidence grids are stored as 32-bit floats row-major, matching the
//! in-memory representation, so a save/load round trip is bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::geometry::Box2D;
use crate::priors::{DepthMap, PriorDetection};

const MAGIC: &[u8; 4] = b"FOMP";
pub const PRIOR_CACHE_VERSION: u16 = 1;

fn write_priors(buf: &mut Vec<u8>, dets: &[PriorDetection]) -> Result<()> {
    buf.write_u32::<LittleEndian>(dets.len() as u32)?;
    for d in dets {
        buf.write_f64::<LittleEndian>(d.box2d.center.x)?;
        buf.write_f64::<LittleEndian>(d.box2d.center.y)?;
        buf.write_f64::<LittleEndian>(d.box2d.size.x)?;
        buf.write_f64::<LittleEndian>(d.box2d.size.y)?;
        buf.write_u32::<LittleEndian>(d.source_crop as u32)?;
        buf.write_u32::<LittleEndian>(d.token.len() as u32)?;
        for &t in d.token.iter() {
            buf.write_f64::<LittleEndian>(t)?;
        }
        buf.write_u32::<LittleEndian>(d.affinities.len() as u32)?;
        for &a in &d.affinities {
            buf.write_f64::<LittleEndian>(a)?;
        }
    }
    Ok(())
}

fn write_depth_map(buf: &mut Vec<u8>, dm: &DepthMap) -> Result<()> {
    let (h, w) = dm.dims();
    buf.write_u32::<LittleEndian>(h as u32)?;
    buf.write_u32::<LittleEndian>(w as u32)?;
    for &v in dm.depth.iter() {
        buf.write_f32::<LittleEndian>(v)?;
    }
    for &v in dm.confidence.iter() {
        buf.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Write per-camera priors and depth maps to `path`.
pub fn save_priors(path: &Path, cameras: &[(Vec<PriorDetection>, DepthMap)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_u16::<LittleEndian>(PRIOR_CACHE_VERSION)?;
    out.write_u32::<LittleEndian>(cameras.len() as u32)?;
    for (dets, dm) in cameras {
        let mut record = Vec::new();
        write_priors(&mut record, dets)?;
        write_depth_map(&mut record, dm)?;
        out.write_u64::<LittleEndian>(record.len() as u64)?;
        out.write_all(&record)?;
    }
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::CorruptPayload(format!(
                "record truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(self.take(4)?.read_u32::<LittleEndian>()?)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(self.take(8)?.read_f64::<LittleEndian>()?)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(self.take(4)?.read_f32::<LittleEndian>()?)
    }
}

fn read_record(data: &[u8]) -> Result<(Vec<PriorDetection>, DepthMap)> {
    let mut cur = Cursor { data, pos: 0 };
    let n_dets = cur.u32()? as usize;
    let mut dets = Vec::with_capacity(n_dets.min(1 << 20));
    for _ in 0..n_dets {
        let (u, v, w, h) = (cur.f64()?, cur.f64()?, cur.f64()?, cur.f64()?);
        let source_crop = cur.u32()? as usize;
        let token_len = cur.u32()? as usize;
        let mut token = Vec::with_capacity(token_len.min(1 << 20));
        for _ in 0..token_len {
            token.push(cur.f64()?);
        }
        let aff_len = cur.u32()? as usize;
        let mut affinities = Vec::with_capacity(aff_len.min(1 << 20));
        for _ in 0..aff_len {
            affinities.push(cur.f64()?);
        }
        dets.push(PriorDetection {
            box2d: Box2D::from_cxcywh(u, v, w, h)
                .map_err(|e| Error::CorruptPayload(format!("bad 2D box: {e}")))?,
            token: Array1::from_vec(token),
            affinities,
            source_crop,
        });
    }
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let mut depth = Array2::<f32>::zeros((h, w));
    for py in 0..h {
        for px in 0..w {
            depth[[py, px]] = cur.f32()?;
        }
    }
    let mut confidence = Array2::<f32>::zeros((h, w));
    for py in 0..h {
        for px in 0..w {
            confidence[[py, px]] = cur.f32()?;
        }
    }
    if cur.pos != data.len() {
        return Err(Error::CorruptPayload(format!(
            "{} trailing bytes in record",
            data.len() - cur.pos
        )));
    }
    Ok((dets, DepthMap { depth, confidence }))
}

/// Load per-camera priors and depth maps written by [`save_priors`].
pub fn load_priors(path: &Path) -> Result<Vec<(Vec<PriorDetection>, DepthMap)>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::FormatError("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::FormatError(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = input
        .read_u16::<LittleEndian>()
        .map_err(|_| Error::FormatError("missing version".into()))?;
    if version != PRIOR_CACHE_VERSION {
        return Err(Error::FormatError(format!(
            "unsupported version {version}, expected {PRIOR_CACHE_VERSION}"
        )));
    }
    let n_cameras = input
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::FormatError("missing camera count".into()))?;
    let mut out = Vec::with_capacity(n_cameras as usize);
    for _ in 0..n_cameras {
        let len = input
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::CorruptPayload("missing record length".into()))? as usize;
        let mut record = vec![0u8; len];
        input
            .read_exact(&mut record)
            .map_err(|_| Error::CorruptPayload("record shorter than its length prefix".into()))?;
        out.push(read_record(&record)?);
    }
    Ok(out)
}
