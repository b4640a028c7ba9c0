//! Checkpoint container: a text header followed by a raw `f64` payload.
//!
//! ```text
//! SSVD-CHECKPOINT
//! format-version: 1
//! method: ssvd-o
//! config: p=0.5 l=13 tau=0.01
//! seed: 0
//! created-by: ssvd 0.1.0
//! meta: transposed=false
//! array: u 64 32
//! array: sigma 32 1
//! payload-offset: 00000000000000000163
//! end-header
//! <little-endian f64 entries of every array, row-major, in declaration order>
//! ```
//!
//! The payload offset is the byte length of the header including the final
//! newline; it is zero-padded to a fixed width so it can be computed before
//! it is written.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::densela::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &str = "SSVD-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;
const OFFSET_WIDTH: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub method: String,
    /// Space-separated `key=value` pairs.
    pub config: String,
    pub seed: u64,
    /// Extra `key=value` metadata, one `meta:` line each.
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Matrix)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Parse(format!("checkpoint: {}", msg.into()))
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(Error::Contract(format!("checkpoint {kind} '{s}' must be non-empty without whitespace or '='")));
    }
    Ok(())
}

impl Container {
    pub fn new(method: impl Into<String>, config: impl Into<String>, seed: u64) -> Self {
        Self { method: method.into(), config: config.into(), seed, meta: Vec::new(), arrays: Vec::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.arrays.push((name.into(), m));
    }

    pub fn array(&self, name: &str) -> Option<&Matrix> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.array(name).ok_or_else(|| bad(format!("missing array '{name}'")))
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.split_whitespace().find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
    }

    fn header(&self, offset: usize) -> Result<String> {
        check_token("method", &self.method)?;
        if self.config.contains('\n') {
            return Err(Error::Contract("checkpoint config must be a single line".into()));
        }
        let mut h = format!(
            "{MAGIC}\nformat-version: {FORMAT_VERSION}\nmethod: {}\nconfig: {}\nseed: {}\ncreated-by: ssvd {}\n",
            self.method,
            self.config,
            self.seed,
            env!("CARGO_PKG_VERSION")
        );
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            check_token("meta value", v)?;
            h.push_str(&format!("meta: {k}={v}\n"));
        }
        for (name, m) in &self.arrays {
            check_token("array name", name)?;
            h.push_str(&format!("array: {name} {} {}\n", m.rows(), m.cols()));
        }
        h.push_str(&format!("payload-offset: {offset:0width$}\nend-header\n", width = OFFSET_WIDTH));
        Ok(h)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let offset = self.header(0)?.len();
        let header = self.header(offset)?;
        debug_assert_eq!(header.len(), offset);
        let mut out = header.into_bytes();
        for (_, m) in &self.arrays {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("header is not terminated by end-header"))?;
            let line = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not valid UTF-8"))?;
            pos += end + 1;
            if line == "end-header" {
                break;
            }
            lines.push(line.to_string());
        }
        let mut it = lines.iter();
        if it.next().map(String::as_str) != Some(MAGIC) {
            return Err(bad("missing magic line"));
        }
        let mut version = None;
        let mut method = None;
        let mut config = None;
        let mut seed = None;
        let mut offset = None;
        let mut meta = Vec::new();
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        for line in it {
            let (key, value) = line.split_once(": ").ok_or_else(|| bad(format!("malformed header line '{line}'")))?;
            match key {
                "format-version" => version = Some(value.parse::<u32>().map_err(|_| bad("bad format-version"))?),
                "method" => method = Some(value.to_string()),
                "config" => config = Some(value.to_string()),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad("bad seed"))?),
                "created-by" => {}
                "meta" => {
                    let (k, v) = value.split_once('=').ok_or_else(|| bad(format!("bad meta '{value}'")))?;
                    meta.push((k.to_string(), v.to_string()));
                }
                "array" => {
                    let f: Vec<&str> = value.split(' ').collect();
                    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad array line '{value}'")));
                    if f.len() != 3 {
                        return Err(bad(format!("bad array line '{value}'")));
                    }
                    shapes.push((f[0].to_string(), parse(f[1])?, parse(f[2])?));
                }
                "payload-offset" => offset = Some(value.parse::<usize>().map_err(|_| bad("bad payload-offset"))?),
                other => return Err(bad(format!("unknown header key '{other}'"))),
            }
        }
        match version {
            Some(FORMAT_VERSION) => {}
            Some(v) => return Err(bad(format!("unsupported format-version {v}"))),
            None => return Err(bad("format-version missing")),
        }
        let offset = offset.ok_or_else(|| bad("payload-offset missing"))?;
        if offset != pos {
            return Err(bad(format!("payload-offset {offset} does not match header length {pos}")));
        }
        let total: usize = shapes.iter().map(|(_, r, c)| r * c).sum();
        let payload = &bytes[pos..];
        if payload.len() != total * 8 {
            return Err(bad(format!("payload has {} bytes, header declares {}", payload.len(), total * 8)));
        }
        let mut arrays = Vec::with_capacity(shapes.len());
        let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for (name, r, c) in shapes {
            let data: Vec<f64> = chunks.by_ref().take(r * c).collect();
            arrays.push((name, Matrix::from_vec(r, c, data)));
        }
        Ok(Self {
            method: method.ok_or_else(|| bad("method missing"))?,
            config: config.ok_or_else(|| bad("config missing"))?,
            seed: seed.ok_or_else(|| bad("seed missing"))?,
            meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn is_container(bytes: &[u8]) -> bool {
        bytes.starts_with(MAGIC.as_bytes())
    }
}

/// Index file listing the members of a multi-file checkpoint, one
/// `name<TAB>file` pair per line.
pub fn write_index(dir: &Path, members: &[(String, String)]) -> Result<()> {
    let mut text = String::from("# ssvd checkpoint index\n");
    for (name, file) in members {
        text.push_str(&format!("{name}\t{file}\n"));
    }
    fs::write(dir.join("index.txt"), text)?;
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(dir.join("index.txt"))?;
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| bad(format!("bad index line '{l}'")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("ssvd-o", "p=0.5 l=2 tau=0.01", 7).with_meta("transposed", true);
        c.push("a", Matrix::from_rows(&[&[1.0, -0.0], &[f64::MIN_POSITIVE, 1e300]]));
        c.push("empty", Matrix::zeros(0, 1));
        c.push("b", Matrix::from_rows(&[&[0.1 + 0.2]]));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.method, "ssvd-o");
        assert_eq!(back.config_value("l"), Some("2"));
        assert_eq!(back.meta("transposed"), Some("true"));
        for ((n1, m1), (n2, m2)) in c.arrays.iter().zip(&back.arrays) {
            assert_eq!(n1, n2);
            assert_eq!(m1.shape(), m2.shape());
            let b1: Vec<u64> = m1.as_slice().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = m2.as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_declares_payload_offset() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        let line = text.lines().find(|l| l.starts_with("payload-offset: ")).unwrap();
        let offset: usize = line["payload-offset: ".len()..].parse().unwrap();
        // 2×2 + 0×1 + 1×1 entries.
        assert_eq!(bytes.len() - offset, 8 * 5);
        assert!(text.contains("format-version: 1\n"));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
        let text = String::from_utf8_lossy(&bytes).replace("format-version: 1", "format-version: 9");
        assert!(Container::from_bytes(text.as_bytes()).is_err());
        assert!(Container::from_bytes(b"not a checkpoint\nend-header\n").is_err());
    }

    #[test]
    fn names_with_whitespace_are_contract_errors() {
        let mut c = Container::new("x", "", 0);
        c.push("bad name", Matrix::zeros(1, 1));
        assert!(matches!(c.to_bytes(), Err(Error::Contract(_))));
    }
}
