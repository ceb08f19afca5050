//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DWRP" | version: u32 | meta_len: u32 | meta: UTF-8 key=value lines
//! per layer, in declaration order:
//!   kind: u8 (1 conv, 2 batchnorm, 3 fully connected)
//!   per tensor (weights, bias, then running mean and variance for batchnorm):
//!     rank: u8 | extents: rank x u32 | values: f32 x numel
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{LayerKind, BN_EPSILON, BN_MOMENTUM};
use crate::tensor::Tensor;
use crate::warping_net::{ModelConfig, ModelWeights, Variant};

pub const MAGIC: &[u8; 4] = b"DWRP";
pub const VERSION: u32 = 1;

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Metadata text for a configuration.
pub fn config_to_meta(config: &ModelConfig, layers: usize, epsilon: f32, momentum: f32) -> String {
    let mut s = String::new();
    for (k, v) in [
        ("variant", config.variant.to_string()),
        ("tower_channels", join(&config.tower_channels)),
        ("first_kernel", config.first_kernel.to_string()),
        ("kernel_size", config.kernel_size.to_string()),
        ("lcm_channels", join(&config.lcm_channels)),
        ("lcm_kernel", config.lcm_kernel.to_string()),
        ("angle_dims", config.angle_dims.to_string()),
        ("height", config.height.to_string()),
        ("width", config.width.to_string()),
        ("layers", layers.to_string()),
        ("bn_epsilon", epsilon.to_string()),
        ("bn_momentum", momentum.to_string()),
    ] {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    }
    s
}

struct Meta {
    config: ModelConfig,
    layers: usize,
    epsilon: f32,
    momentum: f32,
}

fn parse_meta(text: &str) -> Result<Meta> {
    let bad = |m: String| Error::Format(m);
    let num = |k: &str, v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| bad(format!("bad integer for {k}: {v:?}")))
    };
    let list =
        |k: &str, v: &str| -> Result<Vec<usize>> { v.split(',').map(|x| num(k, x)).collect() };
    let mut config = ModelConfig::default();
    let mut layers = None;
    let (mut epsilon, mut momentum) = (BN_EPSILON as f32, BN_MOMENTUM as f32);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("metadata line without '=': {line:?}")))?;
        match k {
            "variant" => config.variant = v.parse::<Variant>().map_err(|e| bad(e.to_string()))?,
            "tower_channels" => config.tower_channels = list(k, v)?,
            "first_kernel" => config.first_kernel = num(k, v)?,
            "kernel_size" => config.kernel_size = num(k, v)?,
            "lcm_channels" => config.lcm_channels = list(k, v)?,
            "lcm_kernel" => config.lcm_kernel = num(k, v)?,
            "angle_dims" => config.angle_dims = num(k, v)?,
            "height" => config.height = num(k, v)?,
            "width" => config.width = num(k, v)?,
            "layers" => layers = Some(num(k, v)?),
            "bn_epsilon" => {
                epsilon = v
                    .parse()
                    .map_err(|_| bad(format!("bad bn_epsilon {v:?}")))?
            }
            "bn_momentum" => {
                momentum = v
                    .parse()
                    .map_err(|_| bad(format!("bad bn_momentum {v:?}")))?
            }
            other => return Err(bad(format!("unknown metadata key {other:?}"))),
        }
    }
    let layers = layers.ok_or_else(|| bad("metadata lacks a layer count".into()))?;
    config.validate()?;
    Ok(Meta {
        config,
        layers,
        epsilon,
        momentum,
    })
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) -> Result<()> {
    let rank =
        u8::try_from(t.rank()).map_err(|_| Error::Format("tensor rank exceeds 255".into()))?;
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format("extent exceeds u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serializes weights to bytes.
pub fn to_bytes(weights: &ModelWeights<f32>) -> Result<Vec<u8>> {
    let layers = weights.layers();
    let (eps, mom) = layers
        .iter()
        .find(|l| l.kind == LayerKind::BatchNorm)
        .map_or((BN_EPSILON as f32, BN_MOMENTUM as f32), |l| {
            (l.epsilon, l.momentum)
        });
    let meta = config_to_meta(&weights.config, layers.len(), eps, mom);
    let mut out = Vec::with_capacity(12 + meta.len() + weights.num_params() * 5);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for layer in layers {
        out.push(layer.kind.tag());
        for t in layer.tensors() {
            write_tensor(&mut out, t)?;
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end
            .ok_or_else(|| Error::Format(format!("truncated weight file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn tensor_into(&mut self, dst: &mut Tensor<f32>) -> Result<()> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        if shape != dst.shape() {
            return Err(Error::Format(format!(
                "tensor extents {shape:?}, configuration expects {:?}",
                dst.shape()
            )));
        }
        let bytes = self.take(dst.numel() * 4)?;
        for (v, b) in dst.values_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
        Ok(())
    }
}

/// Parses a weight file.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelWeights<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported weight file version {version}"
        )));
    }
    let meta_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let meta = parse_meta(text)?;
    let mut weights = ModelWeights::<f32>::init(&meta.config, 0)?;
    let mut layers = weights.layers_mut();
    if layers.len() != meta.layers {
        return Err(Error::Format(format!(
            "file declares {} layers, variant {} has {}",
            meta.layers,
            meta.config.variant,
            layers.len()
        )));
    }
    for (i, layer) in layers.iter_mut().enumerate() {
        let tag = r.u8()?;
        if LayerKind::from_tag(tag) != Some(layer.kind) {
            return Err(Error::Format(format!(
                "layer {i}: kind tag {tag}, expected {:?}",
                layer.kind
            )));
        }
        r.tensor_into(&mut layer.weights)?;
        r.tensor_into(&mut layer.bias)?;
        if let (Some(m), Some(v)) = (layer.running_mean.as_mut(), layer.running_var.as_mut()) {
            r.tensor_into(m)?;
            r.tensor_into(v)?;
            layer.epsilon = meta.epsilon;
            layer.momentum = meta.momentum;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - r.pos
        )));
    }
    Ok(weights)
}

pub fn save(weights: &ModelWeights<f32>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(weights)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelWeights<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            tower_channels: vec![3, 4, 3, 2, 2],
            lcm_channels: vec![2, 1],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for v in Variant::ALL {
            let mut w = ModelWeights::<f32>::init(&small(v), 9).unwrap();
            for l in w.layers_mut() {
                if let Some(m) = l.running_mean.as_mut() {
                    m.values_mut()
                        .iter_mut()
                        .enumerate()
                        .for_each(|(i, x)| *x = i as f32 * 0.1 - 0.05);
                }
            }
            let back = from_bytes(&to_bytes(&w).unwrap()).unwrap();
            assert_eq!(back, w, "{v}");
        }
    }

    #[test]
    fn header_layout() {
        let w = ModelWeights::<f32>::init(&small(Variant::SS), 0).unwrap();
        let b = to_bytes(&w).unwrap();
        assert_eq!(&b[..4], b"DWRP");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let n = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let meta = std::str::from_utf8(&b[12..12 + n]).unwrap();
        assert!(meta.contains("variant=SS\n"));
        assert!(meta.contains("layers=11\n"));
        // first layer: fully connected angle embedding (1 -> 16)
        assert_eq!(b[12 + n], 3);
        assert_eq!(b[12 + n + 1], 2);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let w = ModelWeights::<f32>::init(&small(Variant::CFW), 0).unwrap();
        let b = to_bytes(&w).unwrap();
        assert!(matches!(
            from_bytes(&b[..b.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut extra = b.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(from_bytes(&magic).is_err());
        let mut version = b;
        version[4] = 2;
        assert!(from_bytes(&version).is_err());
    }

    #[test]
    fn default_model_file_is_under_a_megabyte() {
        let w = ModelWeights::<f32>::init(&ModelConfig::default(), 0).unwrap();
        assert!(to_bytes(&w).unwrap().len() <= 1 << 20);
    }
}
