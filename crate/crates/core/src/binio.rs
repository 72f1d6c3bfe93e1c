//! Little-endian helpers shared by the binary file formats.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) struct Reader<R> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    pub(crate) fn new(inner: R, what: &'static str) -> Self {
        Self { inner, what }
    }

    fn map(&self, e: std::io::Error) -> Error {
        Error::from_read(self.what, e)
    }

    pub(crate) fn expect_header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let mut found = [0u8; 4];
        self.inner.read_exact(&mut found).map_err(|e| self.map(e))?;
        if &found != magic {
            return Err(Error::BadMagic { what: self.what, found });
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::BadVersion { what: self.what, found: v });
        }
        Ok(())
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        self.inner.read_u16::<LE>().map_err(|e| self.map(e))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        self.inner.read_u32::<LE>().map_err(|e| self.map(e))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        self.inner.read_u64::<LE>().map_err(|e| self.map(e))
    }

    /// Reads exactly `len` bytes without trusting `len` for preallocation.
    pub(crate) fn bytes(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner).take(len as u64).read_to_end(&mut buf)?;
        if buf.len() != len {
            return Err(Error::Truncated { what: self.what });
        }
        Ok(buf)
    }

    pub(crate) fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.bytes(len)?).map_err(|_| Error::Format(format!("{}: invalid UTF-8 string", self.what)))
    }

    pub(crate) fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.bytes(count.checked_mul(4).ok_or(Error::Truncated { what: self.what })?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub(crate) fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = self.bytes(count.checked_mul(8).ok_or(Error::Truncated { what: self.what })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    /// Fails unless the stream is exhausted.
    pub(crate) fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format(format!("{}: trailing bytes after last record", self.what))),
        }
    }
}

pub(crate) fn u32_of(what: &'static str, n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what}: {n} does not fit in u32")))
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    for &v in data {
        w.write_f32::<LE>(v)?;
    }
    Ok(())
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    for &v in data {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}
