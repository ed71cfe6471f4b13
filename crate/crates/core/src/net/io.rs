//! Binary weight file.
//!
//! Layout (little-endian): magic `NPSW`, version `u16`, endianness tag `u32`,
//! the spec block (input `c h w`, class count, layer count, then one tagged
//! descriptor per layer), followed by the raw `f64` weight and bias values of
//! every parametric layer in declaration order.

use std::fs;
use std::path::Path;

use super::spec::{Layer, NetworkSpec};
use super::weights::{param_shapes, LayerParams, NetworkWeights};
use super::Network;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NPSW";
pub const WEIGHTS_VERSION: u16 = 1;

const TAG_CONV: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_POOL: u8 = 3;
const TAG_FC: u8 = 4;
const TAG_DROPOUT: u8 = 5;

pub fn write_weights(net: &Network) -> Result<Vec<u8>> {
    let spec = net.spec();
    let mut w = Writer::header(WEIGHTS_MAGIC, WEIGHTS_VERSION);
    for &d in &spec.input {
        w.usize32(d)?;
    }
    w.usize32(spec.class_count)?;
    w.usize32(spec.layers.len())?;
    for layer in &spec.layers {
        match *layer {
            Layer::Conv { in_channels, out_channels, kernel, stride, pad } => {
                w.u8(TAG_CONV);
                for v in [in_channels, out_channels, kernel, stride, pad] {
                    w.usize32(v)?;
                }
            }
            Layer::Relu => w.u8(TAG_RELU),
            Layer::MaxPool { window, stride } => {
                w.u8(TAG_POOL);
                w.usize32(window)?;
                w.usize32(stride)?;
            }
            Layer::FullyConnected { in_dim, out_dim } => {
                w.u8(TAG_FC);
                w.usize32(in_dim)?;
                w.usize32(out_dim)?;
            }
            Layer::Dropout { rate } => {
                w.u8(TAG_DROPOUT);
                w.f64(rate);
            }
        }
    }
    for p in net.weights().layers.iter().flatten() {
        w.f64s(p.weight.data());
        w.f64s(p.bias.data());
    }
    Ok(w.finish())
}

pub fn read_weights(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader::open(bytes, WEIGHTS_MAGIC, WEIGHTS_VERSION, "weight file")?;
    let input = [r.usize32()?, r.usize32()?, r.usize32()?];
    let class_count = r.usize32()?;
    let n_layers = r.usize32()?;
    if n_layers > 10_000 {
        return Err(Error::Format(format!("weight file: implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let layer = match r.u8()? {
            TAG_CONV => Layer::Conv {
                in_channels: r.usize32()?,
                out_channels: r.usize32()?,
                kernel: r.usize32()?,
                stride: r.usize32()?,
                pad: r.usize32()?,
            },
            TAG_RELU => Layer::Relu,
            TAG_POOL => Layer::MaxPool { window: r.usize32()?, stride: r.usize32()? },
            TAG_FC => Layer::FullyConnected { in_dim: r.usize32()?, out_dim: r.usize32()? },
            TAG_DROPOUT => Layer::Dropout { rate: r.f64()? },
            t => return Err(Error::Format(format!("weight file: unknown layer tag {t} at layer {i}"))),
        };
        layers.push(layer);
    }
    let spec = NetworkSpec { input, layers, class_count };
    spec.layout()?;
    let mut params = Vec::with_capacity(n_layers);
    for layer in &spec.layers {
        params.push(match param_shapes(layer) {
            None => None,
            Some((ws, bs)) => {
                let wd = r.f64s(ws.iter().product())?;
                let bd = r.f64s(bs.iter().product())?;
                Some(LayerParams {
                    weight: Tensor::new(ws, wd)?,
                    bias: Tensor::new(bs, bd)?,
                })
            }
        });
    }
    r.finish()?;
    Network::new(spec, NetworkWeights { layers: params })
}

pub fn save_weights(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_weights(net)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Network> {
    read_weights(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = Network::init(NetworkSpec::toy(5), 42).unwrap();
        let bytes = write_weights(&net).unwrap();
        let back = read_weights(&bytes).unwrap();
        assert_eq!(back.spec(), net.spec());
        assert!(back.weights().bit_eq(net.weights()));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let net = Network::init(NetworkSpec::toy(2), 1).unwrap();
        let bytes = write_weights(&net).unwrap();
        let err = read_weights(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let net = Network::init(NetworkSpec::toy(2), 1).unwrap();
        let mut bytes = write_weights(&net).unwrap();
        bytes[0] = b'X';
        assert!(read_weights(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = write_weights(&net).unwrap();
        bytes[4] = 9;
        assert!(read_weights(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn spec_inconsistent_with_params_is_rejected() {
        let net = Network::init(NetworkSpec::toy(2), 1).unwrap();
        let mut bytes = write_weights(&net).unwrap();
        // class count field sits after magic(4) + version(2) + tag(4) + input(12)
        bytes[22] = 3;
        assert!(read_weights(&bytes).is_err());
    }
}
