//! `u32` big-endian length prefix followed by a UTF-8 JSON payload.

use std::io::{self, Read};

use thiserror::Error;

/// Largest accepted payload: 256 MiB.
pub const MAX_PAYLOAD: usize = 256 * 1024 * 1024;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("frame truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("payload of {0} bytes exceeds the 256 MiB cap")]
    Oversize(usize),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
}

pub fn encode_frame(payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(FrameError::Oversize(payload.len()));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits one frame off the front of `buf`, returning the payload and the
/// number of bytes consumed. Nothing is returned for a partial frame.
pub fn decode_frame(buf: &[u8]) -> Result<(&[u8], usize), FrameError> {
    if buf.len() < 4 {
        return Err(FrameError::Truncated {
            needed: 4,
            available: buf.len(),
        });
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::Oversize(len));
    }
    if buf.len() < 4 + len {
        return Err(FrameError::Truncated {
            needed: 4 + len,
            available: buf.len(),
        });
    }
    Ok((&buf[4..4 + len], 4 + len))
}

/// Reads one frame payload from a blocking reader. `Ok(None)` on a clean
/// end of stream before any header byte.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated frame header")),
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_PAYLOAD {
        return Err(io::Error::new(io::ErrorKind::InvalidData, FrameError::Oversize(len)));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}
