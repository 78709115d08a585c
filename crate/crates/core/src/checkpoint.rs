//! Binary network checkpoints and Fisher-diagonal sidecar files.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "SPFT" | version u32 | C u32 | H u32 | W u32 | layer count u32
//! per layer: tag u8, five u32 fields (unused fields are 0)
//! parameter count u64 | parameters as f64, in layout order
//! ```
//!
//! Fisher sidecar (`<checkpoint>.fisher`): `"SPFI" | m u32 | |S| × f64`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::net::{LayerSpec, Network, Shape3};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPFT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FISHER_MAGIC: &[u8; 4] = b"SPFI";

fn layer_record(layer: &LayerSpec) -> (u8, [u32; 5]) {
    let u = |v: usize| v as u32;
    match *layer {
        LayerSpec::Conv2d { out_channels, kernel_h, kernel_w, stride, padding } => {
            (1, [u(out_channels), u(kernel_h), u(kernel_w), u(stride), u(padding)])
        }
        LayerSpec::FullyConnected { out_dim } => (2, [u(out_dim), 0, 0, 0, 0]),
        LayerSpec::Relu => (3, [0; 5]),
        LayerSpec::MaxPool { k, stride } => (4, [u(k), u(stride), 0, 0, 0]),
        LayerSpec::GlobalAvgPool => (5, [0; 5]),
        LayerSpec::SoftmaxHead { num_classes } => (6, [u(num_classes), 0, 0, 0, 0]),
    }
}

fn layer_from_record(tag: u8, f: [u32; 5]) -> Result<LayerSpec> {
    let u = |i: usize| f[i] as usize;
    Ok(match tag {
        1 => LayerSpec::Conv2d { out_channels: u(0), kernel_h: u(1), kernel_w: u(2), stride: u(3), padding: u(4) },
        2 => LayerSpec::FullyConnected { out_dim: u(0) },
        3 => LayerSpec::Relu,
        4 => LayerSpec::MaxPool { k: u(0), stride: u(1) },
        5 => LayerSpec::GlobalAvgPool,
        6 => LayerSpec::SoftmaxHead { num_classes: u(0) },
        other => return Err(Error::Format(format!("unknown layer tag {other}"))),
    })
}

pub fn encode_checkpoint(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + net.layers().len() * 21 + net.num_params() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let s = net.input_shape();
    for v in [CHECKPOINT_VERSION, s.c as u32, s.h as u32, s.w as u32, net.layers().len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for layer in net.layers() {
        let (tag, fields) = layer_record(layer);
        out.push(tag);
        for f in fields {
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    out.extend_from_slice(&(net.num_params() as u64).to_le_bytes());
    for v in &net.params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(self.what.to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0, what: "checkpoint" };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("not a checkpoint: magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let shape = Shape3::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let tag = r.take(1)?[0];
        let mut fields = [0u32; 5];
        for f in &mut fields {
            *f = r.u32()?;
        }
        layers.push(layer_from_record(tag, fields)?);
    }
    let mut net = Network::with_zero_params(shape, layers)?;
    let count = r.u64()? as usize;
    if count != net.num_params() {
        return Err(Error::Format(format!(
            "checkpoint stores {count} parameters, architecture needs {}",
            net.num_params()
        )));
    }
    for v in &mut net.params.values {
        *v = r.f64()?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint parameters".into()));
    }
    Ok(net)
}

/// Write `bytes` to a temporary sibling and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(net))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn fisher_sidecar_path(checkpoint: impl AsRef<Path>) -> PathBuf {
    let mut s = checkpoint.as_ref().as_os_str().to_owned();
    s.push(".fisher");
    PathBuf::from(s)
}

pub fn encode_fisher(values: &[f64], sample_count: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + values.len() * 8);
    out.extend_from_slice(FISHER_MAGIC);
    out.extend_from_slice(&sample_count.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode a sidecar into `(values, m)`.
pub fn decode_fisher(bytes: &[u8]) -> Result<(Vec<f64>, u32)> {
    let mut r = Reader { bytes, pos: 0, what: "fisher sidecar" };
    if r.take(4)? != FISHER_MAGIC {
        return Err(Error::Format("not a Fisher sidecar (magic mismatch)".into()));
    }
    let m = r.u32()?;
    let rest = bytes.len() - r.pos;
    if rest % 8 != 0 {
        return Err(Error::Truncated("fisher sidecar".into()));
    }
    let values = (0..rest / 8).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Ok((values, m))
}
