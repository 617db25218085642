//! Little-endian cursor shared by the pack and checkpoint readers.

use crate::error::{AppError, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(AppError::Format(format!(
                "{} truncated at offset {}: need {n} bytes, {} left",
                self.what,
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub fn len_u32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn fail<T>(&self, msg: impl std::fmt::Display) -> Result<T> {
        Err(AppError::Format(format!("{} invalid at offset {}: {msg}", self.what, self.pos)))
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| AppError::Format(format!("length {n} exceeds u32")))?;
    put_u32(out, v);
    Ok(())
}

/// Splits off and verifies the trailing CRC-32 over everything before it.
pub(crate) fn check_crc<'a>(buf: &'a [u8], what: &'static str) -> Result<&'a [u8]> {
    if buf.len() < 4 {
        return Err(AppError::Format(format!("{what} truncated: {} bytes", buf.len())));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(AppError::Format(format!(
            "{what} checksum mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }
    Ok(body)
}
