//! Parameter checkpoint: a text manifest plus a little-endian f32 payload.
//!
//! ```text
//! CFVQA-CKPT-1
//! payload params.bin
//! meta fusion sum
//! tensor embed.weight 57,64 0
//! tensor q_enc.weight 64,128 14592
//! ```
//!
//! Offsets are in bytes into the payload; tensors are row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const CHECKPOINT_MAGIC: &str = "CFVQA-CKPT-1";
const MANIFEST: &str = "manifest.txt";
const PAYLOAD: &str = "params.bin";

/// Writes `params` and string metadata into `dir`. Metadata keys are single
/// tokens; values run to the end of their line.
pub fn write_params(
    dir: &Path,
    params: &ParamStore,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{CHECKPOINT_MAGIC}\npayload {PAYLOAD}\n");
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains(['\n', '\r']) || k.is_empty() {
            return Err(Error::Checkpoint(format!("unencodable metadata key `{k}`")));
        }
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    let mut payload = Vec::with_capacity(params.num_scalars() * 4);
    for (name, t) in params.iter() {
        if name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!(
                "tensor name `{name}` contains whitespace"
            )));
        }
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!(
            "tensor {name} {} {}\n",
            shape.join(","),
            payload.len()
        ));
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(&dir.join(PAYLOAD), &payload)?;
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

pub fn read_params(dir: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Checkpoint(format!(
            "{} lacks magic `{CHECKPOINT_MAGIC}`",
            mpath.display()
        )));
    }
    let mut payload_name = PAYLOAD.to_string();
    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
        match kind {
            "payload" => payload_name = rest.trim().to_string(),
            "meta" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            }
            "tensor" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [name, shape, offset] = parts[..] else {
                    return Err(Error::Checkpoint(format!("malformed tensor line `{line}`")));
                };
                let shape = shape
                    .split(',')
                    .map(str::parse::<usize>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Checkpoint(format!("bad shape in `{line}`: {e}")))?;
                let offset: usize = offset
                    .parse()
                    .map_err(|e| Error::Checkpoint(format!("bad offset in `{line}`: {e}")))?;
                entries.push((name.to_string(), shape, offset));
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown manifest entry `{other}`"
                )))
            }
        }
    }
    let ppath = dir.join(&payload_name);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let mut store = ParamStore::new();
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let end = offset + n * 4;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` overruns payload"
            )));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        store.add(name, t);
    }
    Ok((store, meta))
}
