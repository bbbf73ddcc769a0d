//! Sealed binary container shared by checkpoints and feature stores.
//!
//! Prefix (16 bytes, little-endian):
//!
//! | bytes | field                                  |
//! |-------|----------------------------------------|
//! | 4     | magic                                  |
//! | 2     | format version                         |
//! | 1     | endianness tag (always 1 = little)     |
//! | 1     | flags                                  |
//! | 8     | total file length                      |
//!
//! The magic is written last, so a file whose writer died midway never
//! opens as valid.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const PREFIX_LEN: u64 = 16;
pub const LITTLE_ENDIAN_TAG: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prefix {
    pub magic: [u8; 4],
    pub version: u16,
    pub flags: u8,
    pub total_len: u64,
}

/// Writes `body` after a prefix, then seals the file. Returns the file length.
pub fn write_sealed(
    path: &Path,
    magic: [u8; 4],
    version: u16,
    flags: u8,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<u64> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&[0; 4])?;
    w.write_u16::<LittleEndian>(version)?;
    w.write_u8(LITTLE_ENDIAN_TAG)?;
    w.write_u8(flags)?;
    w.write_u64::<LittleEndian>(0)?;
    body(&mut w)?;
    let total = w.stream_position()?;
    w.seek(SeekFrom::Start(8))?;
    w.write_u64::<LittleEndian>(total)?;
    w.flush()?;
    w.seek(SeekFrom::Start(0))?;
    w.write_all(&magic)?;
    let file = w.into_inner().map_err(|e| e.into_error())?;
    file.sync_all()?;
    Ok(total)
}

/// Reads and validates the prefix against the expected magic and the real file length.
pub fn read_prefix(r: &mut (impl Read + Seek), magic: [u8; 4], max_version: u16) -> Result<Prefix> {
    let actual_len = r.seek(SeekFrom::End(0))?;
    r.seek(SeekFrom::Start(0))?;
    if actual_len < PREFIX_LEN {
        return Err(Error::format(format!("file of {actual_len} bytes is shorter than the prefix")));
    }
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if m != magic {
        return Err(Error::format(format!("bad magic {m:?}, expected {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version == 0 || version > max_version {
        return Err(Error::format(format!("unsupported format version {version}")));
    }
    let endian = r.read_u8()?;
    if endian != LITTLE_ENDIAN_TAG {
        return Err(Error::format(format!("unsupported endianness tag {endian}")));
    }
    let flags = r.read_u8()?;
    let total_len = r.read_u64::<LittleEndian>()?;
    if total_len != actual_len {
        return Err(Error::format(format!("file is {actual_len} bytes, header records {total_len}")));
    }
    Ok(Prefix { magic: m, version, flags, total_len })
}

/// Maps an unexpected end of input inside a validated file to a format error.
pub(crate) fn eof_as_format(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("unexpected end of data")
    } else {
        Error::Io(e)
    }
}
