//! Checkpoint layout: the line `CPFC1`, the architecture line, then every
//! tensor each layer owns as little-endian `f32`, in declaration order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::layer::Layer;
use super::network::{Architecture, Network};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &str = "CPFC1";

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = format!("{MAGIC}\n{}\n", net.arch).into_bytes();
    for t in net.layers.iter().flat_map(|l| &l.params) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Network> {
    let bad = |d: &str| Error::format(origin, d);
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(MAGIC.as_bytes()) {
        return Err(bad("missing CPFC1 header"));
    }
    let arch_line = lines.next().ok_or_else(|| bad("missing architecture line"))?;
    let arch: Architecture = std::str::from_utf8(arch_line)
        .map_err(|_| bad("architecture line is not UTF-8"))?
        .parse()?;
    arch.validate()?;
    let body = lines.next().unwrap_or(&[]);
    let expected: usize = arch
        .layers
        .iter()
        .flat_map(|l| l.param_shapes())
        .map(|s| s.iter().product::<usize>())
        .sum();
    if body.len() != expected * 4 {
        return Err(bad(&format!(
            "expected {} parameter bytes, found {}",
            expected * 4,
            body.len()
        )));
    }
    let mut floats = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let layers = arch
        .layers
        .iter()
        .map(|&spec| {
            let params = spec
                .param_shapes()
                .into_iter()
                .map(|shape| {
                    let n = shape.iter().product();
                    Tensor::new(shape, floats.by_ref().take(n).collect())
                })
                .collect::<Result<_>>()?;
            Ok(Layer { spec, params })
        })
        .collect::<Result<_>>()?;
    Ok(Network { arch, layers })
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode(net)).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
