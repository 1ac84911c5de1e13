//! Named-tensor checkpoint files.
//!
//! Layout:
//!
//! ```text
//! VOLMOE-CHECKPOINT 1
//! meta <key> <value>
//! tensor <name> <d0>x<d1>x... f64 <byte_offset>
//! end
//! <payload: little-endian f64 values, tensors back to back>
//! <CRC-32 of the payload, little-endian u32>
//! ```
//!
//! Offsets are relative to the first payload byte. Meta values run to the end
//! of their line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "VOLMOE-CHECKPOINT 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Validation(format!("bad checkpoint meta entry `{k}`")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Validation(format!("bad tensor name `{name}`")));
            }
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {name} {} f64 {offset}\n", shape.join("x")));
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += 8 * t.len();
        }
        header.push_str("end\n");
        let crc = crc32fast::hash(&payload);
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let marker = b"\nend\n";
        let header_end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .map(|p| p + marker.len())
            .ok_or_else(|| Error::Load("checkpoint header is not terminated".into()))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::Load("checkpoint header is not UTF-8".into()))?;
        let rest = &bytes[header_end..];
        if rest.len() < 4 {
            return Err(Error::Load("checkpoint is truncated".into()));
        }
        let (payload, crc_bytes) = rest.split_at(rest.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(Error::Checksum(format!(
                "checkpoint payload CRC {actual:08x} != stored {stored:08x}"
            )));
        }

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Load("not a volmoe checkpoint".into()));
        }
        let mut ck = Checkpoint::new();
        for line in lines {
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, shape, dtype, offset] = parts[..] else {
                    return Err(Error::Load(format!("malformed tensor line `{line}`")));
                };
                if dtype != "f64" {
                    return Err(Error::Load(format!("unsupported dtype {dtype} for {name}")));
                }
                let shape: Vec<usize> = shape
                    .split('x')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Load(format!("bad shape for {name}")))?;
                let offset: usize = offset
                    .parse()
                    .map_err(|_| Error::Load(format!("bad offset for {name}")))?;
                let n: usize = shape.iter().product();
                let end = offset + 8 * n;
                if end > payload.len() {
                    return Err(Error::Load(format!("tensor {name} runs past the payload")));
                }
                let data = payload[offset..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                let t = Tensor::new(shape, data).map_err(|e| Error::Load(format!("{name}: {e}")))?;
                ck.tensors.push((name.to_string(), t));
            } else {
                return Err(Error::Load(format!("unexpected header line `{line}`")));
            }
        }
        Ok(ck)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
