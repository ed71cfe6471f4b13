use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{Layer, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight and bias of one parametric layer.
///
/// Conv weights are `[out, in, k, k]`; fully-connected weights are `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameters for every layer of a [`NetworkSpec`], `None` for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub layers: Vec<Option<LayerParams>>,
}

pub(crate) fn param_shapes(layer: &Layer) -> Option<(Vec<usize>, Vec<usize>)> {
    match *layer {
        Layer::Conv { in_channels, out_channels, kernel, .. } => Some((
            vec![out_channels, in_channels, kernel, kernel],
            vec![out_channels],
        )),
        Layer::FullyConnected { in_dim, out_dim } => Some((vec![out_dim, in_dim], vec![out_dim])),
        _ => None,
    }
}

impl NetworkWeights {
    /// Uniform in `±sqrt(6 / fan_in)`, zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|layer| {
                param_shapes(layer).map(|(ws, bs)| {
                    let fan_in: usize = ws[1..].iter().product();
                    let limit = (6.0 / fan_in as f64).sqrt();
                    let n: usize = ws.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
                    LayerParams {
                        weight: Tensor::new(ws, data).expect("shape from spec"),
                        bias: Tensor::zeros(&bs),
                    }
                })
            })
            .collect();
        NetworkWeights { layers }
    }

    /// Zero-valued parameters with the right shapes (gradient accumulators).
    pub fn zeros_like(spec: &NetworkSpec) -> Self {
        NetworkWeights {
            layers: spec
                .layers
                .iter()
                .map(|l| {
                    param_shapes(l).map(|(ws, bs)| LayerParams {
                        weight: Tensor::zeros(&ws),
                        bias: Tensor::zeros(&bs),
                    })
                })
                .collect(),
        }
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::shape(
                "weights",
                format!("{} parameter slots for {} layers", self.layers.len(), spec.layers.len()),
            ));
        }
        for (i, (layer, params)) in spec.layers.iter().zip(&self.layers).enumerate() {
            let ctx = format!("layer {i} ({})", layer.kind());
            match (param_shapes(layer), params) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) => {
                    p.weight.ensure_shape(&ws, &format!("{ctx} weight"))?;
                    p.bias.ensure_shape(&bs, &format!("{ctx} bias"))?;
                }
                (None, Some(_)) => return Err(Error::shape(ctx, "unexpected parameters")),
                (Some(_), None) => return Err(Error::shape(ctx, "missing parameters")),
            }
        }
        Ok(())
    }

    pub fn params(&self, layer: usize) -> &LayerParams {
        self.layers[layer].as_ref().expect("layer has parameters")
    }

    pub fn params_mut(&mut self, layer: usize) -> &mut LayerParams {
        self.layers[layer].as_mut().expect("layer has parameters")
    }

    pub fn bit_eq(&self, other: &NetworkWeights) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => a.weight.bit_eq(&b.weight) && a.bias.bit_eq(&b.bias),
                _ => false,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_matches_spec_and_is_seeded() {
        let spec = NetworkSpec::toy(3);
        let a = NetworkWeights::init(&spec, 7);
        a.validate(&spec).unwrap();
        assert!(a.bit_eq(&NetworkWeights::init(&spec, 7)));
        assert!(!a.bit_eq(&NetworkWeights::init(&spec, 8)));
    }

    #[test]
    fn validate_names_offending_layer() {
        let spec = NetworkSpec::toy(3);
        let mut w = NetworkWeights::init(&spec, 0);
        w.layers[12].as_mut().unwrap().bias = Tensor::zeros(&[5]);
        let msg = w.validate(&spec).unwrap_err().to_string();
        assert!(msg.contains("layer 12"), "{msg}");
    }
}
