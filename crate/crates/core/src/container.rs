//! Shared binary container framing.
//!
//! Both on-disk formats use the same frame:
//!
//! ```text
//! magic (4 bytes) | version u16 LE | meta_len u32 LE | meta (JSON, UTF-8)
//! | payload_len u64 LE (bytes) | payload | crc32 u32 LE (of payload)
//! ```
//!
//! The CRC is the IEEE 802.3 polynomial (reflected, init all-ones), computed
//! over the payload bytes only.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// IEEE CRC-32, bitwise reflected implementation.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xedb8_8320 & mask);
        }
    }
    !crc
}

#[derive(Debug)]
pub struct Frame {
    pub version: u16,
    pub meta: Vec<u8>,
    pub payload: Vec<u8>,
}

pub fn write_frame<W: Write>(w: &mut W, magic: &[u8; 4], frame: &Frame) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&frame.version.to_le_bytes())?;
    w.write_all(&(frame.meta.len() as u32).to_le_bytes())?;
    w.write_all(&frame.meta)?;
    w.write_all(&(frame.payload.len() as u64).to_le_bytes())?;
    w.write_all(&frame.payload)?;
    w.write_all(&crc32(&frame.payload).to_le_bytes())?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R, magic: &[u8; 4], max_version: u16) -> Result<Frame> {
    let mut m = [0u8; 4];
    read_exact(r, &mut m, "magic")?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut b2 = [0u8; 2];
    read_exact(r, &mut b2, "version")?;
    let version = u16::from_le_bytes(b2);
    if version > max_version {
        return Err(Error::Version {
            found: version,
            supported: max_version,
        });
    }
    let mut b4 = [0u8; 4];
    read_exact(r, &mut b4, "meta length")?;
    let meta_len = u32::from_le_bytes(b4) as usize;
    let mut meta = vec![0u8; meta_len];
    read_exact(r, &mut meta, "meta block")?;
    let mut b8 = [0u8; 8];
    read_exact(r, &mut b8, "payload length")?;
    let payload_len = u64::from_le_bytes(b8) as usize;
    let mut payload = vec![0u8; payload_len];
    read_exact(r, &mut payload, "payload")?;
    read_exact(r, &mut b4, "checksum")?;
    let stored = u32::from_le_bytes(b4);
    let computed = crc32(&payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(Frame {
        version,
        meta,
        payload,
    })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated while reading {what}: {e}")))
}

pub fn f64s_to_le_bytes(vals: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "f64 payload length {} not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn f32s_to_le_bytes(vals: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "f32 payload length {} not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
