//! Single-file container of 8-bit grayscale images grouped by class.
//!
//! Layout (little-endian): magic, version u32, JSON metadata (u32 length +
//! text), class count u32, then per class the name (u32 length + UTF-8), the
//! image count u32 and per image width u32, height u32 and raw pixels.
//! A CRC-32 of all preceding bytes closes the file.

use std::fs;
use std::path::Path;

use image::GrayImage;

use super::{CharacterClass, CharacterDataset};
use crate::binio::{check_crc, put_len, put_u32, Reader};
use crate::error::{AppError, Result};

pub const PACK_MAGIC: &[u8; 8] = b"HFWPACK\0";
pub const PACK_VERSION: u32 = 1;

pub fn write_pack(ds: &CharacterDataset, meta: &serde_json::Value, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(ds.image_count() * 28 * 28 + 1024);
    out.extend_from_slice(PACK_MAGIC);
    put_u32(&mut out, PACK_VERSION);
    let meta = serde_json::to_vec(meta).map_err(|e| AppError::Format(e.to_string()))?;
    put_len(&mut out, meta.len())?;
    out.extend_from_slice(&meta);
    put_len(&mut out, ds.classes.len())?;
    for c in &ds.classes {
        put_len(&mut out, c.name.len())?;
        out.extend_from_slice(c.name.as_bytes());
        put_len(&mut out, c.images.len())?;
        for img in &c.images {
            put_u32(&mut out, img.width());
            put_u32(&mut out, img.height());
            out.extend_from_slice(img.as_raw());
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| AppError::io(path, e))
}

/// Reads a pack written by [`write_pack`], returning its metadata too.
pub fn read_pack(path: &Path) -> Result<(CharacterDataset, serde_json::Value)> {
    let buf = fs::read(path).map_err(|e| AppError::io(path, e))?;
    let body = check_crc(&buf, "image pack")?;
    let mut r = Reader::new(body, "image pack");
    if r.bytes(8)? != PACK_MAGIC {
        return r.fail("bad magic");
    }
    let version = r.u32()?;
    if version != PACK_VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let n = r.len_u32()?;
    let meta: serde_json::Value =
        serde_json::from_slice(r.bytes(n)?).map_err(|e| AppError::Format(format!("pack metadata: {e}")))?;
    let n_classes = r.len_u32()?;
    let mut ds = CharacterDataset::default();
    for _ in 0..n_classes {
        let n = r.len_u32()?;
        let name = match std::str::from_utf8(r.bytes(n)?) {
            Ok(s) => s.to_string(),
            Err(_) => return r.fail("class name is not UTF-8"),
        };
        let count = r.len_u32()?;
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            let (w, h) = (r.u32()?, r.u32()?);
            let px = r.bytes(w as usize * h as usize)?;
            images.push(GrayImage::from_raw(w, h, px.to_vec()).expect("buffer sized from extents"));
        }
        if images.is_empty() {
            return r.fail(format!("class {name} is empty"));
        }
        ds.classes.push(CharacterClass { name, images });
    }
    if r.remaining() != 0 {
        return r.fail("trailing bytes");
    }
    Ok((ds, meta))
}
