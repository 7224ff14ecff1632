//! Binary checkpoint container.
//!
//! ```text
//! magic        8 bytes  "ZSKDCKPT"
//! version      u32      1
//! name         u32 length + UTF-8 bytes
//! input shape  3 x u32  (H, W, C)
//! classes      u32
//! seed         u64
//! layers       u32 count, then per layer a u8 kind tag and its geometry
//! params       u32 count, then per tensor: name, u32 rank, rank x u32 dims,
//!              raw f64 values
//! crc32        u32 over every preceding byte
//! ```
//!
//! All integers and floats are little-endian. See `docs/FORMATS.md`.

use std::fs;
use std::path::Path;

use super::{Init, LayerSpec, Network, Param};
use crate::codec::{check_magic, Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::tensor::{Padding, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ZSKDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_POOL: u8 = 2;
const TAG_DENSE: u8 = 3;
const TAG_RELU: u8 = 4;
const TAG_FLATTEN: u8 = 5;

pub(crate) fn encode(net: &Network) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&net.name);
    for d in net.input_shape {
        w.usize(d);
    }
    w.usize(net.num_classes);
    w.u64(net.seed);
    w.usize(net.layers.len());
    for layer in &net.layers {
        match *layer {
            LayerSpec::Conv {
                kernel,
                in_channels,
                filters,
                stride,
                padding,
                init,
            } => {
                w.u8(TAG_CONV);
                w.usize(kernel);
                w.usize(in_channels);
                w.usize(filters);
                w.usize(stride);
                w.u8(match padding {
                    Padding::Valid => 0,
                    Padding::Same => 1,
                });
                write_init(&mut w, init);
            }
            LayerSpec::MaxPool { size, stride } => {
                w.u8(TAG_POOL);
                w.usize(size);
                w.usize(stride);
            }
            LayerSpec::Dense {
                inputs,
                units,
                init,
            } => {
                w.u8(TAG_DENSE);
                w.usize(inputs);
                w.usize(units);
                write_init(&mut w, init);
            }
            LayerSpec::Relu => w.u8(TAG_RELU),
            LayerSpec::Flatten => w.u8(TAG_FLATTEN),
        }
    }
    w.usize(net.params.len());
    for p in &net.params {
        w.str(&p.name);
        w.usize(p.tensor.rank());
        for &d in p.tensor.shape() {
            w.usize(d);
        }
        w.f64s(p.tensor.data());
    }
    w.crc_since(0);
    w.into_bytes()
}

fn write_init(w: &mut Writer, init: Init) {
    match init {
        Init::Zeros => {
            w.u8(0);
            w.f64(0.0);
        }
        Init::TruncatedNormal { std } => {
            w.u8(1);
            w.f64(std);
        }
    }
}

fn read_init(r: &mut Reader<'_>) -> Result<Init, FormatError> {
    let tag = r.u8("init tag")?;
    let std = r.f64("init std")?;
    match tag {
        0 => Ok(Init::Zeros),
        1 => Ok(Init::TruncatedNormal { std }),
        t => Err(FormatError::Malformed(format!("unknown initializer tag {t}"))),
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Network> {
    check_magic(bytes, CHECKPOINT_MAGIC)?;
    let mut r = Reader::new(bytes);
    r.take(CHECKPOINT_MAGIC.len(), "magic")?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    let name = r.str("network name")?;
    let input_shape = [r.usize("input H")?, r.usize("input W")?, r.usize("input C")?];
    let num_classes = r.usize("class count")?;
    let seed = r.u64("seed")?;
    let n_layers = r.usize("layer count")?;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let layer = match r.u8("layer tag")? {
            TAG_CONV => LayerSpec::Conv {
                kernel: r.usize("kernel")?,
                in_channels: r.usize("in channels")?,
                filters: r.usize("filters")?,
                stride: r.usize("stride")?,
                padding: match r.u8("padding")? {
                    0 => Padding::Valid,
                    1 => Padding::Same,
                    p => return Err(FormatError::Malformed(format!("unknown padding {p}")).into()),
                },
                init: read_init(&mut r)?,
            },
            TAG_POOL => LayerSpec::MaxPool {
                size: r.usize("pool size")?,
                stride: r.usize("pool stride")?,
            },
            TAG_DENSE => LayerSpec::Dense {
                inputs: r.usize("dense inputs")?,
                units: r.usize("dense units")?,
                init: read_init(&mut r)?,
            },
            TAG_RELU => LayerSpec::Relu,
            TAG_FLATTEN => LayerSpec::Flatten,
            t => return Err(FormatError::Malformed(format!("unknown layer tag {t}")).into()),
        };
        layers.push(layer);
    }
    let n_params = r.usize("parameter count")?;
    let mut params = Vec::with_capacity(n_params.min(1024));
    for _ in 0..n_params {
        let pname = r.str("parameter name")?;
        let rank = r.usize("parameter rank")?;
        let shape = (0..rank)
            .map(|_| r.usize("parameter dim"))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
            FormatError::Malformed(format!("parameter {pname} shape {shape:?} overflows"))
        })?;
        let data = r.f64s(n, "parameter data")?;
        let tensor = Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
        params.push(Param {
            name: pname,
            tensor,
        });
    }
    r.expect_crc_since(0)?;
    if r.remaining() != 0 {
        return Err(FormatError::Malformed(format!("{} trailing bytes", r.remaining())).into());
    }
    Network::from_parts(name, input_shape, num_classes, seed, layers, params)
        .map_err(|e| FormatError::Malformed(e.to_string()).into())
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::data::write_atomically(path, &encode(net))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
