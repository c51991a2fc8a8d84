//! Shared framing for dataset and checkpoint files: an 8-byte magic, a
//! `u32` little-endian header length, a `key=value` text header, then a
//! binary payload whose layout the caller defines.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC_LEN: usize = 8;
const MAX_HEADER_LEN: u32 = 1 << 20;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Header {
    entries: BTreeMap<String, String>,
}

impl Header {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        debug_assert!(!key.contains('=') && !key.contains('\n') && !value.contains('\n'));
        self.entries.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::MalformedHeader(format!("missing key '{key}'")))
    }

    pub fn get_opt(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::MalformedHeader(format!("key '{key}' has unparsable value '{raw}'")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    fn encode(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    fn decode(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::MalformedHeader(format!("header line without '=': '{line}'")))?;
            entries.insert(k.to_string(), v.to_string());
        }
        Ok(Self { entries })
    }
}

pub fn write_header(w: &mut impl Write, magic: &[u8; MAGIC_LEN], header: &Header) -> Result<()> {
    let text = header.encode();
    w.write_all(magic)?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

/// Reads the magic and header. Returns `Ok(None)` on a clean end of input
/// (no bytes at all), which lets callers read concatenated records.
pub fn read_header(r: &mut impl Read, magic: &[u8; MAGIC_LEN]) -> Result<Option<Header>> {
    let mut got = [0u8; MAGIC_LEN];
    let n = read_fully(r, &mut got)?;
    if n == 0 {
        return Ok(None);
    }
    if n < MAGIC_LEN || &got != magic {
        return Err(Error::MalformedHeader(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut len = [0u8; 4];
    if read_fully(r, &mut len)? < 4 {
        return Err(Error::MalformedHeader("missing header length".into()));
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_HEADER_LEN {
        return Err(Error::MalformedHeader(format!("header length {len} too large")));
    }
    let mut text = vec![0u8; len as usize];
    if read_fully(r, &mut text)? < text.len() {
        return Err(Error::MalformedHeader("header shorter than declared".into()));
    }
    let text = String::from_utf8(text).map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
    Header::decode(&text).map(Some)
}

/// Like `read_exact`, but reports how many bytes were available.
pub fn read_fully(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

pub fn write_f64s(w: &mut impl Write, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_f64s(r: &mut impl Read, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    let got = read_fully(r, &mut buf)?;
    if got < buf.len() {
        return Err(Error::TruncatedPayload(format!(
            "{what}: expected {} values, found {}",
            count,
            got / 8
        )));
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
