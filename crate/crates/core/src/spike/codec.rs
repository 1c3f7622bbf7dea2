//! The `.spk` stream container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SPKS"
//! 4       1     version (1)
//! 5       4     width      u32 LE
//! 9       4     height     u32 LE
//! 13      4     num_ticks  u32 LE
//! 17      ...   num_ticks frames of ceil(width*height / 8) bytes each
//! ```
//!
//! Each frame is row-major with pixel `i` stored in bit `i % 8` of byte
//! `i / 8` (LSB first); unused bits of the last byte are zero. Because every
//! frame has the same size, frame `t` starts at `17 + t * frame_bytes`.
//!
//! [`SpikeWriter`] and [`SpikeReader`] move one frame at a time, so streams
//! larger than memory can be converted or scanned.

use std::io::{self, Read, Seek, SeekFrom, Write};

use super::{frame_bytes, SpikeStream};
use crate::error::DecodeError;

pub const MAGIC: &[u8; 4] = b"SPKS";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub width: u32,
    pub height: u32,
    pub num_ticks: u32,
}

impl StreamHeader {
    pub fn frame_bytes(&self) -> usize {
        frame_bytes(self.width as usize, self.height as usize)
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(MAGIC);
        b[4] = VERSION;
        b[5..9].copy_from_slice(&self.width.to_le_bytes());
        b[9..13].copy_from_slice(&self.height.to_le_bytes());
        b[13..17].copy_from_slice(&self.num_ticks.to_le_bytes());
        b
    }

    /// Parse and validate a header.
    pub fn parse(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            let mut found = [0u8; 4];
            let n = bytes.len().min(4);
            found[..n].copy_from_slice(&bytes[..n]);
            if n == 4 || (n > 0 && bytes[..n] != MAGIC[..n]) {
                return Err(DecodeError::BadMagic(found));
            }
        }
        if bytes.len() < HEADER_LEN {
            return Err(DecodeError::Truncated {
                what: "header",
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if bytes[4] != VERSION {
            return Err(DecodeError::UnsupportedVersion(bytes[4]));
        }
        let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let h = StreamHeader {
            width: u(5),
            height: u(9),
            num_ticks: u(13),
        };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<(), DecodeError> {
        if self.num_ticks == 0 {
            return Err(DecodeError::ZeroTicks);
        }
        if self.width == 0 || self.height == 0 {
            return Err(DecodeError::ZeroFrame {
                width: self.width,
                height: self.height,
            });
        }
        self.payload_len()?;
        Ok(())
    }

    /// Total payload size, or an overflow error if it cannot be addressed.
    pub fn payload_len(&self) -> Result<usize, DecodeError> {
        let overflow = || DecodeError::DimensionOverflow {
            width: self.width,
            height: self.height,
            ticks: self.num_ticks,
        };
        let pixels = (self.width as usize)
            .checked_mul(self.height as usize)
            .ok_or_else(overflow)?;
        let bytes = pixels.div_ceil(8).checked_mul(self.num_ticks as usize).ok_or_else(overflow)?;
        if bytes > isize::MAX as usize - HEADER_LEN {
            return Err(overflow());
        }
        Ok(bytes)
    }
}

/// Serialise a whole stream.
pub fn encode_stream(stream: &SpikeStream) -> Vec<u8> {
    let header = StreamHeader {
        width: stream.width() as u32,
        height: stream.height() as u32,
        num_ticks: stream.num_ticks() as u32,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + stream.packed().len());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(stream.packed());
    out
}

/// Parse a whole stream from memory.
pub fn decode_stream(bytes: &[u8]) -> Result<SpikeStream, DecodeError> {
    let h = StreamHeader::parse(bytes)?;
    let len = h.payload_len()?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < len {
        return Err(DecodeError::Truncated {
            what: "payload",
            expected: len,
            found: payload.len(),
        });
    }
    let mut bits = payload[..len].to_vec();
    clear_padding(&mut bits, h.frame_bytes(), (h.width * h.height) as usize);
    Ok(SpikeStream::from_packed(
        h.width as usize,
        h.height as usize,
        h.num_ticks as usize,
        bits,
    ))
}

fn clear_padding(bits: &mut [u8], fb: usize, pixels: usize) {
    let used = pixels % 8;
    if used == 0 {
        return;
    }
    let mask = (1u8 << used) - 1;
    for frame in bits.chunks_mut(fb) {
        *frame.last_mut().unwrap() &= mask;
    }
}

/// Writes a `.spk` stream one frame at a time.
pub struct SpikeWriter<W: Write> {
    inner: W,
    header: StreamHeader,
    written: u32,
    buf: Vec<u8>,
}

impl<W: Write> SpikeWriter<W> {
    pub fn new(mut inner: W, width: u32, height: u32, num_ticks: u32) -> io::Result<Self> {
        let header = StreamHeader {
            width,
            height,
            num_ticks,
        };
        header
            .validate()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        inner.write_all(&header.to_bytes())?;
        Ok(Self {
            inner,
            header,
            written: 0,
            buf: vec![0; header.frame_bytes()],
        })
    }

    /// Append one frame of row-major spike flags.
    pub fn write_frame(&mut self, spikes: &[bool]) -> io::Result<()> {
        let pixels = (self.header.width * self.header.height) as usize;
        if spikes.len() != pixels {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("frame has {} pixels, expected {pixels}", spikes.len()),
            ));
        }
        self.buf.iter_mut().for_each(|b| *b = 0);
        for (i, &s) in spikes.iter().enumerate() {
            if s {
                self.buf[i / 8] |= 1 << (i % 8);
            }
        }
        let buf = std::mem::take(&mut self.buf);
        let r = self.write_packed(&buf);
        self.buf = buf;
        r
    }

    /// Append one frame that is already packed.
    pub fn write_packed(&mut self, packed: &[u8]) -> io::Result<()> {
        if self.written >= self.header.num_ticks {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "more frames than declared in the header",
            ));
        }
        if packed.len() != self.header.frame_bytes() {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "packed frame has wrong length"));
        }
        self.inner.write_all(packed)?;
        self.written += 1;
        Ok(())
    }

    /// Flush and return the sink; fails if fewer frames were written than declared.
    pub fn finish(mut self) -> io::Result<W> {
        if self.written != self.header.num_ticks {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("wrote {} of {} frames", self.written, self.header.num_ticks),
            ));
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Reads a `.spk` stream one frame at a time.
pub struct SpikeReader<R: Read> {
    inner: R,
    header: StreamHeader,
    next_tick: u32,
}

impl<R: Read> SpikeReader<R> {
    pub fn new(mut inner: R) -> Result<Self, DecodeError> {
        let mut buf = [0u8; HEADER_LEN];
        let n = read_full(&mut inner, &mut buf)?;
        let header = StreamHeader::parse(&buf[..n])?;
        Ok(Self {
            inner,
            header,
            next_tick: 0,
        })
    }

    pub fn header(&self) -> StreamHeader {
        self.header
    }

    /// Next packed frame, or `None` after the last tick.
    pub fn next_packed(&mut self) -> Option<Result<Vec<u8>, DecodeError>> {
        if self.next_tick >= self.header.num_ticks {
            return None;
        }
        let tick = self.next_tick;
        self.next_tick += 1;
        Some(self.read_current(tick))
    }

    /// Next frame as row-major spike flags.
    pub fn next_frame(&mut self) -> Option<Result<Vec<bool>, DecodeError>> {
        let pixels = (self.header.width * self.header.height) as usize;
        self.next_packed()
            .map(|r| r.map(|p| (0..pixels).map(|i| p[i / 8] >> (i % 8) & 1 == 1).collect()))
    }

    fn read_current(&mut self, tick: u32) -> Result<Vec<u8>, DecodeError> {
        let fb = self.header.frame_bytes();
        let mut buf = vec![0u8; fb];
        let n = read_full(&mut self.inner, &mut buf)?;
        if n < fb {
            let expected = self.header.payload_len()?;
            return Err(DecodeError::Truncated {
                what: "payload",
                expected,
                found: tick as usize * fb + n,
            });
        }
        clear_padding(&mut buf, fb, (self.header.width * self.header.height) as usize);
        Ok(buf)
    }

    /// Read the remaining frames into a stream.
    pub fn read_all(mut self) -> Result<SpikeStream, DecodeError> {
        let mut bits = Vec::with_capacity(self.header.payload_len()?);
        while let Some(f) = self.next_packed() {
            bits.extend(f?);
        }
        Ok(SpikeStream::from_packed(
            self.header.width as usize,
            self.header.height as usize,
            self.header.num_ticks as usize,
            bits,
        ))
    }
}

impl<R: Read + Seek> SpikeReader<R> {
    /// Read the single frame at `tick` without touching the others.
    pub fn seek_frame(&mut self, tick: usize) -> Result<Vec<u8>, DecodeError> {
        let ticks = self.header.num_ticks as usize;
        if tick >= ticks {
            return Err(DecodeError::TickOutOfRange { tick, ticks });
        }
        let offset = HEADER_LEN as u64 + (tick * self.header.frame_bytes()) as u64;
        self.inner
            .seek(SeekFrom::Start(offset))
            .map_err(|e| DecodeError::Io(e.to_string()))?;
        let frame = self.read_current(tick as u32)?;
        self.next_tick = tick as u32 + 1;
        Ok(frame)
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize, DecodeError> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(DecodeError::Io(e.to_string())),
        }
    }
    Ok(n)
}
