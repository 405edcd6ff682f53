//! Binary container shared by model checkpoints and cached datasets.
//!
//! Layout:
//!
//! ```text
//! kdlab-container v1\n
//! key=value\n            (header, arbitrary count)
//! \n                     (blank line ends the header)
//! for each array, in header order:
//!   u32 LE   name length
//!   [u8]     name bytes (UTF-8)
//!   u64 LE   element count
//!   f64 LE   elements
//! ```
//!
//! The header always carries `arrays=<count>`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &str = "kdlab-container v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub header: Vec<(String, String)>,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Container {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC.as_bytes());
        out.push(b'\n');
        for (k, v) in &self.header {
            if k == "arrays" {
                continue;
            }
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out.extend_from_slice(format!("arrays={}\n\n", self.arrays.len()).as_bytes());
        for (name, values) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            path: origin.to_string(),
            detail: detail.to_string(),
        };
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String> {
            let end = bytes[*pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated header line"))?;
            let line = std::str::from_utf8(&bytes[*pos..*pos + end])
                .map_err(|_| bad("header is not UTF-8"))?
                .to_string();
            *pos += end + 1;
            Ok(line)
        };
        if next_line(&mut pos)? != CONTAINER_MAGIC {
            return Err(bad("missing container magic line"));
        }
        let mut header = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            if line.is_empty() {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad("header line without '='"))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count: usize = header
            .iter()
            .find(|(k, _)| k == "arrays")
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| bad("missing arrays count"))?;

        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(bad("truncated payload"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, len)?)
                .map_err(|_| bad("array name is not UTF-8"))?
                .to_string();
            let n = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let raw = take(&mut pos, n.checked_mul(8).ok_or_else(|| bad("element count overflow"))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, values));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after last array"));
        }
        header.retain(|(k, _)| k != "arrays");
        Ok(Container { header, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
