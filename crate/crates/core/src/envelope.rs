//! Binary container shared by database, sample, index and grid files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "APDB"
//! version    u16
//! sections   u16      number of entries in the section table
//! table      sections x (tag: 4 bytes, offset: u64, length: u64)
//! payloads   concatenated section bodies, at the offsets in the table
//! checksum   u64      CRC-64/XZ of every preceding byte
//! ```

use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"APDB";
pub const ENVELOPE_VERSION: u16 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const HEADER_LEN: usize = 8;
const ENTRY_LEN: usize = 20;

pub type Tag = [u8; 4];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub version: u16,
    pub sections: Vec<(Tag, Vec<u8>)>,
}

pub fn checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

impl Envelope {
    pub fn new() -> Self {
        Envelope {
            version: ENVELOPE_VERSION,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, tag: &Tag, body: Vec<u8>) {
        self.sections.push((*tag, body));
    }

    pub fn section(&self, tag: &Tag) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, b)| b.as_slice())
    }

    pub fn require(&self, tag: &Tag) -> Result<&[u8]> {
        self.section(tag).ok_or_else(|| {
            Error::Format(format!("missing section `{}`", String::from_utf8_lossy(tag)))
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let table_len = self.sections.len() * ENTRY_LEN;
        let body_len: usize = self.sections.iter().map(|(_, b)| b.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + table_len + body_len + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u16).to_le_bytes());
        let mut offset = (HEADER_LEN + table_len) as u64;
        for (tag, body) in &self.sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            offset += body.len() as u64;
        }
        for (_, body) in &self.sections {
            out.extend_from_slice(body);
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + 8 {
            return Err(Error::Format("truncated file: shorter than header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version > ENVELOPE_VERSION || version == 0 {
            return Err(Error::Version {
                found: version,
                supported: ENVELOPE_VERSION,
            });
        }
        let count = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let payload_end = bytes.len() - 8;
        let table_end = HEADER_LEN + count * ENTRY_LEN;
        if table_end > payload_end {
            return Err(Error::Format("truncated file: section table incomplete".into()));
        }
        let mut spans = Vec::with_capacity(count);
        for i in 0..count {
            let e = &bytes[HEADER_LEN + i * ENTRY_LEN..HEADER_LEN + (i + 1) * ENTRY_LEN];
            let tag: Tag = e[..4].try_into().expect("4 bytes");
            let offset = u64::from_le_bytes(e[4..12].try_into().expect("8 bytes")) as usize;
            let len = u64::from_le_bytes(e[12..20].try_into().expect("8 bytes")) as usize;
            let end = offset.saturating_add(len);
            if offset < table_end || end > payload_end {
                return Err(Error::Format(format!(
                    "truncated file: section `{}` extends past end of data",
                    String::from_utf8_lossy(&tag)
                )));
            }
            spans.push((tag, offset, end));
        }
        let stored = u64::from_le_bytes(bytes[payload_end..].try_into().expect("8 bytes"));
        let computed = checksum(&bytes[..payload_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(Envelope {
            version,
            sections: spans
                .into_iter()
                .map(|(tag, start, end)| (tag, bytes[start..end].to_vec()))
                .collect(),
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<u64> {
        let bytes = self.encode();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(checksum(&bytes[..bytes.len() - 8]))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Envelope::decode(&bytes)
    }
}

impl Default for Envelope {
    fn default() -> Self {
        Envelope::new()
    }
}

/// Little-endian byte sink.
#[derive(Debug, Default)]
pub struct ByteWriter(pub Vec<u8>);

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter(Vec::new())
    }

    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.0
    }
}

/// Little-endian byte source with bounds-checked reads.
#[derive(Debug)]
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated section body".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes in section",
                self.remaining()
            )));
        }
        Ok(())
    }
}
