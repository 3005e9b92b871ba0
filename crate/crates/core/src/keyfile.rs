//! Binary key files.
//!
//! A 16-byte header, `b"FSK1"`, precision as u32 LE and key count as u64 LE,
//! followed by the keys, each `ceil(p / 8)` bytes little-endian with zeroed
//! high bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::KeyFileError;
use crate::metrics::key_bytes;

pub const MAGIC: [u8; 4] = *b"FSK1";
pub const HEADER_BYTES: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyFileHeader {
    pub precision_bits: u32,
    pub n: u64,
}

impl KeyFileHeader {
    pub fn key_width(&self) -> usize {
        key_bytes(self.precision_bits) as usize
    }

    pub fn to_bytes(&self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&self.precision_bits.to_le_bytes());
        out[8..].copy_from_slice(&self.n.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; 16]) -> Result<Self, KeyFileError> {
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(KeyFileError::BadMagic(magic));
        }
        let precision_bits = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if !(1..=64).contains(&precision_bits) {
            return Err(KeyFileError::UnsupportedPrecision(precision_bits));
        }
        Ok(KeyFileHeader {
            precision_bits,
            n: u64::from_le_bytes(bytes[8..].try_into().unwrap()),
        })
    }
}

fn check_key(index: u64, key: u64, precision_bits: u32) -> Result<(), KeyFileError> {
    if precision_bits < 64 && key >> precision_bits != 0 {
        return Err(KeyFileError::KeyOutOfRange {
            index,
            key,
            precision: precision_bits,
        });
    }
    Ok(())
}

fn decode(chunk: &[u8]) -> u64 {
    let mut word = [0u8; 8];
    word[..chunk.len()].copy_from_slice(chunk);
    u64::from_le_bytes(word)
}

pub fn write_keys<W: Write>(out: W, keys: &[u64], precision_bits: u32) -> Result<(), KeyFileError> {
    if !(1..=64).contains(&precision_bits) {
        return Err(KeyFileError::UnsupportedPrecision(precision_bits));
    }
    let header = KeyFileHeader {
        precision_bits,
        n: keys.len() as u64,
    };
    let width = header.key_width();
    let mut out = BufWriter::new(out);
    out.write_all(&header.to_bytes())?;
    for (i, &k) in keys.iter().enumerate() {
        check_key(i as u64, k, precision_bits)?;
        out.write_all(&k.to_le_bytes()[..width])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_header<R: Read>(input: &mut R) -> Result<KeyFileHeader, KeyFileError> {
    let mut bytes = [0u8; 16];
    input.read_exact(&mut bytes).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => KeyFileError::BadMagic([0; 4]),
        _ => KeyFileError::Io(e),
    })?;
    KeyFileHeader::from_bytes(&bytes)
}

pub fn read_keys<R: Read>(input: R) -> Result<(KeyFileHeader, Vec<u64>), KeyFileError> {
    let mut input = BufReader::new(input);
    let header = read_header(&mut input)?;
    let width = header.key_width();
    let mut keys = Vec::with_capacity(header.n.min(1 << 28) as usize);
    let mut buf = vec![0u8; width];
    for i in 0..header.n {
        if let Err(e) = input.read_exact(&mut buf) {
            return Err(match e.kind() {
                std::io::ErrorKind::UnexpectedEof => KeyFileError::Truncated {
                    expected: header.n,
                    found: i,
                },
                _ => KeyFileError::Io(e),
            });
        }
        let key = decode(&buf);
        check_key(i, key, header.precision_bits)?;
        keys.push(key);
    }
    Ok((header, keys))
}

pub fn write_key_file(path: impl AsRef<Path>, keys: &[u64], precision_bits: u32) -> Result<(), KeyFileError> {
    write_keys(File::create(path)?, keys, precision_bits)
}

pub fn read_key_file(path: impl AsRef<Path>) -> Result<(KeyFileHeader, Vec<u64>), KeyFileError> {
    read_keys(File::open(path)?)
}

/// Random-access reader over a key file; reads do not move a shared cursor,
/// so one file can serve several batch workers at once.
#[derive(Debug)]
pub struct KeyFileReader {
    file: File,
    header: KeyFileHeader,
}

impl KeyFileReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, KeyFileError> {
        let mut file = File::open(path)?;
        let header = read_header(&mut file)?;
        let expected = HEADER_BYTES + header.n * header.key_width() as u64;
        let actual = file.metadata()?.len();
        if actual < expected {
            let found = (actual.saturating_sub(HEADER_BYTES)) / header.key_width() as u64;
            return Err(KeyFileError::Truncated {
                expected: header.n,
                found,
            });
        }
        Ok(KeyFileReader { file, header })
    }

    pub fn header(&self) -> KeyFileHeader {
        self.header
    }

    pub fn len(&self) -> usize {
        self.header.n as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.n == 0
    }

    /// Fills `buf` with keys `start..start + buf.len()`.
    pub fn read_at(&self, start: usize, buf: &mut [u64]) -> Result<(), KeyFileError> {
        use std::os::unix::fs::FileExt;

        if start.checked_add(buf.len()).is_none_or(|end| end > self.len()) {
            return Err(KeyFileError::OutOfBounds {
                start,
                len: buf.len(),
                total: self.len(),
            });
        }
        let width = self.header.key_width();
        let mut raw = vec![0u8; buf.len() * width];
        self.file
            .read_exact_at(&mut raw, HEADER_BYTES + (start * width) as u64)?;
        for (i, (slot, chunk)) in buf.iter_mut().zip(raw.chunks_exact(width)).enumerate() {
            *slot = decode(chunk);
            check_key((start + i) as u64, *slot, self.header.precision_bits)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_in_memory() {
        for p in [1, 7, 8, 9, 16, 24, 32, 33, 63, 64] {
            let mask = if p == 64 { u64::MAX } else { (1 << p) - 1 };
            let keys: Vec<u64> = (0..100u64).map(|i| i.wrapping_mul(0x9e37_79b9_7f4a_7c15) & mask).collect();
            let mut bytes = Vec::new();
            write_keys(&mut bytes, &keys, p).unwrap();
            assert_eq!(bytes.len() as u64, HEADER_BYTES + 100 * key_bytes(p));
            let (header, back) = read_keys(bytes.as_slice()).unwrap();
            assert_eq!(header, KeyFileHeader { precision_bits: p, n: 100 });
            assert_eq!(back, keys);
        }
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let mut bytes = Vec::new();
        write_keys(&mut bytes, &[0x0102, 0xffff], 16).unwrap();
        assert_eq!(
            bytes,
            [b'F', b'S', b'K', b'1', 16, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0, 0x02, 0x01, 0xff, 0xff]
        );
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(read_keys(&b"XXXX"[..]), Err(KeyFileError::BadMagic(_))));
        let mut bytes = Vec::new();
        write_keys(&mut bytes, &[1, 2, 3], 16).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(
            read_keys(bytes.as_slice()),
            Err(KeyFileError::Truncated { expected: 3, found: 2 })
        ));
        let mut bad_p = KeyFileHeader { precision_bits: 8, n: 0 }.to_bytes();
        bad_p[4] = 65;
        assert!(matches!(read_keys(&bad_p[..]), Err(KeyFileError::UnsupportedPrecision(65))));
        let mut high_bits = KeyFileHeader { precision_bits: 4, n: 1 }.to_bytes().to_vec();
        high_bits.push(0x10);
        assert!(matches!(read_keys(high_bits.as_slice()), Err(KeyFileError::KeyOutOfRange { .. })));
        assert!(write_keys(Vec::new(), &[300], 8).is_err());
    }

    #[test]
    fn positional_reads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys.bin");
        let keys: Vec<u64> = (0..1000).map(|i| i * 3 % 4096).collect();
        write_key_file(&path, &keys, 12).unwrap();
        let reader = KeyFileReader::open(&path).unwrap();
        let mut buf = vec![0; 10];
        reader.read_at(500, &mut buf).unwrap();
        assert_eq!(buf, keys[500..510]);
        assert!(reader.read_at(995, &mut buf).is_err());
    }
}
