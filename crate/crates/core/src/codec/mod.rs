//! Systematic MDS coding of a file into strips, and strip batching into
//! chunks.
//!
//! A file is cut into `K` strips of `b` bytes (the last one zero padded) and
//! extended to `N` strips with a Cauchy parity block over GF(2^8): parity
//! strip `i` is `Σ_j s_j / (x_i + y_j)` with `y_j = j` and `x_i = K + i`.
//! Every `K × K` submatrix of `[I; C]` is invertible, so any `K` strips
//! recover the file. Field elements bound `N ≤ 256`.
//!
//! At level `k` (with `k | K`), `m = K/k` consecutive strips form one chunk,
//! and any `k` chunks carry `K` distinct strips.

pub mod gf256;

use std::ops::Range;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TFEC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;
pub const MAX_STRIPS: usize = 256;

fn codec_err(msg: impl Into<String>) -> Error {
    Error::Codec(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecHeader {
    /// Data strips `K`.
    pub data_strips: usize,
    /// Total strips `N`.
    pub total_strips: usize,
    pub strip_size: usize,
    /// Zero bytes appended to the file to fill the last strip.
    pub pad: usize,
}

impl CodecHeader {
    pub fn file_len(&self) -> usize {
        self.data_strips * self.strip_size - self.pad
    }

    /// Strips per chunk at level `k`.
    pub fn strips_per_chunk(&self, k: usize) -> Result<usize> {
        if k == 0 || !self.data_strips.is_multiple_of(k) {
            return Err(codec_err(format!(
                "level k={k} does not divide K={}",
                self.data_strips
            )));
        }
        let m = self.data_strips / k;
        if !self.total_strips.is_multiple_of(m) {
            return Err(codec_err(format!(
                "level k={k}: N={} is not a whole number of {m}-strip chunks",
                self.total_strips
            )));
        }
        Ok(m)
    }

    /// Chunks available at level `k`.
    pub fn chunk_count(&self, k: usize) -> Result<usize> {
        Ok(self.total_strips / self.strips_per_chunk(k)?)
    }

    fn validate(&self) -> Result<()> {
        if self.data_strips == 0 || self.strip_size == 0 {
            return Err(codec_err("K and strip size must be positive"));
        }
        if self.total_strips < self.data_strips || self.total_strips > MAX_STRIPS {
            return Err(codec_err(format!(
                "need K <= N <= {MAX_STRIPS}, got K={} N={}",
                self.data_strips, self.total_strips
            )));
        }
        if self.pad >= self.strip_size {
            return Err(codec_err("pad must be shorter than one strip"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedFile {
    pub header: CodecHeader,
    /// `N · b` bytes, strip after strip.
    pub payload: Vec<u8>,
}

/// Cauchy coefficient of data strip `j` in parity strip `i`.
fn parity_coef(data_strips: usize, i: usize, j: usize) -> u8 {
    gf256::inv(((data_strips + i) ^ j) as u8)
}

/// Generator row for strip `s` (0-based).
fn generator_row(data_strips: usize, s: usize) -> Vec<u8> {
    if s < data_strips {
        (0..data_strips).map(|j| u8::from(j == s)).collect()
    } else {
        (0..data_strips)
            .map(|j| parity_coef(data_strips, s - data_strips, j))
            .collect()
    }
}

/// Encodes with redundancy `r`; `r · K` must be a whole number.
pub fn encode(data: &[u8], strip_size: usize, redundancy: f64) -> Result<CodedFile> {
    if strip_size == 0 {
        return Err(codec_err("strip size must be positive"));
    }
    let k = data.len().div_ceil(strip_size).max(1);
    let n = redundancy * k as f64;
    if !(redundancy >= 1.0) || (n - n.round()).abs() > 1e-9 {
        return Err(codec_err(format!("r·K = {n} must be a whole number >= K")));
    }
    encode_strips(data, strip_size, n.round() as usize)
}

/// Encodes into exactly `total_strips` strips.
pub fn encode_strips(data: &[u8], strip_size: usize, total_strips: usize) -> Result<CodedFile> {
    if strip_size == 0 {
        return Err(codec_err("strip size must be positive"));
    }
    let k = data.len().div_ceil(strip_size).max(1);
    let header = CodecHeader {
        data_strips: k,
        total_strips,
        strip_size,
        pad: k * strip_size - data.len(),
    };
    header.validate()?;
    let mut payload = vec![0u8; total_strips * strip_size];
    payload[..data.len()].copy_from_slice(data);
    let (systematic, parity) = payload.split_at_mut(k * strip_size);
    for (i, out) in parity.chunks_mut(strip_size).enumerate() {
        for (j, src) in systematic.chunks(strip_size).enumerate() {
            gf256::mul_add_slice(out, src, parity_coef(k, i, j));
        }
    }
    Ok(CodedFile { header, payload })
}

impl CodedFile {
    /// Byte range of chunk `j` (1-based) at level `k`.
    pub fn chunk_range(&self, k: usize, j: usize) -> Result<Range<usize>> {
        let m = self.header.strips_per_chunk(k)?;
        let count = self.header.total_strips / m;
        if j == 0 || j > count {
            return Err(codec_err(format!("chunk index {j} outside 1..={count}")));
        }
        let len = m * self.header.strip_size;
        Ok((j - 1) * len..j * len)
    }

    pub fn chunk(&self, k: usize, j: usize) -> Result<&[u8]> {
        Ok(&self.payload[self.chunk_range(k, j)?])
    }

    /// Strip `s` (1-based).
    pub fn strip(&self, s: usize) -> Result<&[u8]> {
        if s == 0 || s > self.header.total_strips {
            return Err(codec_err(format!(
                "strip index {s} outside 1..={}",
                self.header.total_strips
            )));
        }
        let b = self.header.strip_size;
        Ok(&self.payload[(s - 1) * b..s * b])
    }

    /// Serialized container: 24-byte header, then the payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&[0; 3]);
        for v in [h.data_strips, h.total_strips, h.strip_size, h.pad] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
            return Err(codec_err("not a coded-file container"));
        }
        if bytes[4] != VERSION {
            return Err(codec_err(format!("unsupported container version {}", bytes[4])));
        }
        let word =
            |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
        let header = CodecHeader {
            data_strips: word(0),
            total_strips: word(1),
            strip_size: word(2),
            pad: word(3),
        };
        header.validate()?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != header.total_strips * header.strip_size {
            return Err(codec_err(format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                header.total_strips * header.strip_size
            )));
        }
        Ok(CodedFile {
            header,
            payload: payload.to_vec(),
        })
    }
}

/// Rebuilds the file from `K` distinct strips given as `(index, bytes)`,
/// indices 1-based.
pub fn decode_strips(header: &CodecHeader, strips: &[(usize, &[u8])]) -> Result<Vec<u8>> {
    header.validate()?;
    let k = header.data_strips;
    let b = header.strip_size;
    if strips.len() != k {
        return Err(codec_err(format!(
            "need exactly {k} strips, got {}",
            strips.len()
        )));
    }
    let mut seen = vec![false; header.total_strips];
    for &(s, bytes) in strips {
        if s == 0 || s > header.total_strips {
            return Err(codec_err(format!(
                "strip index {s} outside 1..={}",
                header.total_strips
            )));
        }
        if std::mem::replace(&mut seen[s - 1], true) {
            return Err(codec_err(format!("duplicate strip {s}")));
        }
        if bytes.len() != b {
            return Err(codec_err(format!(
                "strip {s} has {} bytes, expected {b}",
                bytes.len()
            )));
        }
    }
    let mut out = vec![0u8; k * b];
    if seen[..k].iter().all(|&x| x) {
        for &(s, bytes) in strips {
            out[(s - 1) * b..s * b].copy_from_slice(bytes);
        }
    } else {
        let rows: Vec<Vec<u8>> = strips.iter().map(|&(s, _)| generator_row(k, s - 1)).collect();
        let inv = gf256::invert(rows).ok_or_else(|| codec_err("strip set is not decodable"))?;
        for (j, dst) in out.chunks_mut(b).enumerate() {
            for (i, &(_, src)) in strips.iter().enumerate() {
                gf256::mul_add_slice(dst, src, inv[j][i]);
            }
        }
    }
    out.truncate(header.file_len());
    Ok(out)
}

/// Rebuilds the file from `k` distinct chunks at level `k`, indices 1-based.
pub fn decode(header: &CodecHeader, k: usize, chunks: &[(usize, &[u8])]) -> Result<Vec<u8>> {
    let m = header.strips_per_chunk(k)?;
    let count = header.total_strips / m;
    if chunks.len() != k {
        return Err(codec_err(format!(
            "need exactly {k} chunks, got {}",
            chunks.len()
        )));
    }
    let b = header.strip_size;
    let mut strips = Vec::with_capacity(header.data_strips);
    let mut seen = vec![false; count];
    for &(j, bytes) in chunks {
        if j == 0 || j > count {
            return Err(codec_err(format!("chunk index {j} outside 1..={count}")));
        }
        if std::mem::replace(&mut seen[j - 1], true) {
            return Err(codec_err(format!("duplicate chunk {j}")));
        }
        if bytes.len() != m * b {
            return Err(codec_err(format!(
                "chunk {j} has {} bytes, expected {}",
                bytes.len(),
                m * b
            )));
        }
        for (t, strip) in bytes.chunks(b).enumerate() {
            strips.push(((j - 1) * m + t + 1, strip));
        }
    }
    decode_strips(header, &strips)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Largest strip size that divides every chunk size `len / k` for the given
/// levels.
pub fn default_strip_size(file_len: usize, levels: &[usize]) -> Result<usize> {
    let mut g = 0;
    for &k in levels {
        if k == 0 || !file_len.is_multiple_of(k) {
            return Err(codec_err(format!(
                "file of {file_len} bytes does not split into {k} chunks"
            )));
        }
        g = gcd(g, file_len / k);
    }
    if g == 0 {
        return Err(codec_err("need at least one level and a non-empty file"));
    }
    Ok(g)
}
