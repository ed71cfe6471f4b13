//! From-scratch CNN engine.
//!
//! A [`Network`] couples a validated [`NetworkSpec`] with matching
//! [`NetworkWeights`]. [`Network::forward`] records every activation and the
//! ReLU masks m5 (last pool output), m6 (fc6) and m7 (fc7). An overridden
//! mask multiplies the linear pre-activation instead of ReLU thresholding, so
//! with m6 and m7 imposed the fc chain reduces to the masked matrix product
//! `W8 · m7 W7 · m6 W6 · m5 p5` (plus biases). Backward passes reuse the exact
//! gates of the forward pass.

mod io;
mod kernels;
mod mask;
mod receptive;
mod spec;
mod train;
mod weights;

use rand::Rng;

pub use io::{load_weights, read_weights, save_weights, write_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use mask::{Mask, MaskSet, MaskSlot, OverrideFlags};
pub use receptive::{receptive_field, Rect, RfGeometry};
pub use spec::{Layer, Layout, NetworkSpec};
pub use train::{accuracy, permute_colors, train_toy, TrainConfig, TrainReport};
pub use weights::{LayerParams, NetworkWeights};

use kernels::ConvGeom;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    weights: NetworkWeights,
    layout: Layout,
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Tensor,
    /// Output of each computed layer, in order.
    pub activations: Vec<Tensor>,
    /// Captured or imposed masks; a slot is `None` if the pass stopped before it.
    pub masks: MaskSet,
    pub overridden: OverrideFlags,
    gates: Vec<Option<Vec<bool>>>,
    pool_argmax: Vec<Option<Vec<usize>>>,
    m5_gate: Option<Vec<bool>>,
    dropout_scale: Vec<Option<Vec<f64>>>,
    layer_count: usize,
}

impl ForwardTrace {
    /// fc8 output, present when the pass ran to the end.
    pub fn logits(&self) -> Option<&Tensor> {
        if self.activations.len() == self.layer_count {
            self.activations.last()
        } else {
            None
        }
    }

    pub fn last_layer(&self) -> usize {
        self.activations.len() - 1
    }

    pub fn activation(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    /// True when both passes took the same ReLU gates and pooling winners,
    /// i.e. the network is the same linear map at both inputs.
    pub fn same_region(&self, other: &ForwardTrace) -> bool {
        self.gates == other.gates && self.pool_argmax == other.pool_argmax && self.m5_gate == other.m5_gate
    }
}

impl Network {
    pub fn new(spec: NetworkSpec, weights: NetworkWeights) -> Result<Self> {
        let layout = spec.layout()?;
        weights.validate(&spec)?;
        Ok(Network { spec, weights, layout })
    }

    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let weights = NetworkWeights::init(&spec, seed);
        Network::new(spec, weights)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &NetworkWeights {
        &self.weights
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn into_parts(self) -> (NetworkSpec, NetworkWeights) {
        (self.spec, self.weights)
    }

    pub fn with_weights(&self, weights: NetworkWeights) -> Result<Network> {
        Network::new(self.spec.clone(), weights)
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn last_pool(&self) -> usize {
        self.layout.last_pool
    }

    /// Full forward pass.
    pub fn forward(&self, image: &Tensor, overrides: Option<&MaskSet>) -> Result<ForwardTrace> {
        self.forward_to(image, self.spec.layers.len() - 1, overrides)
    }

    pub fn logits(&self, image: &Tensor, overrides: Option<&MaskSet>) -> Result<Tensor> {
        let mut trace = self.forward(image, overrides)?;
        Ok(trace.activations.pop().expect("non-empty network"))
    }

    /// Forward pass stopping after layer `upto` (inclusive).
    pub fn forward_to(&self, image: &Tensor, upto: usize, overrides: Option<&MaskSet>) -> Result<ForwardTrace> {
        self.forward_impl(image, upto, overrides, None::<&mut rand_chacha::ChaCha8Rng>)
    }

    pub(crate) fn forward_impl<R: Rng>(
        &self,
        image: &Tensor,
        upto: usize,
        overrides: Option<&MaskSet>,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<ForwardTrace> {
        let n_layers = self.spec.layers.len();
        if upto >= n_layers {
            return Err(Error::InvalidArgument(format!("layer {upto} out of range ({n_layers} layers)")));
        }
        image.ensure_shape(&self.spec.input, "network input")?;
        let empty = MaskSet::none();
        let overrides = overrides.unwrap_or(&empty);
        self.check_overrides(overrides)?;

        let lay = &self.layout;
        let mut trace = ForwardTrace {
            input: image.clone(),
            activations: Vec::with_capacity(upto + 1),
            masks: MaskSet::none(),
            overridden: OverrideFlags([
                overrides.m5.is_some(),
                overrides.m6.is_some(),
                overrides.m7.is_some(),
            ]),
            gates: vec![None; upto + 1],
            pool_argmax: vec![None; upto + 1],
            m5_gate: None,
            dropout_scale: vec![None; upto + 1],
            layer_count: n_layers,
        };

        for i in 0..=upto {
            let x = trace.activations.last().unwrap_or(&trace.input);
            let in_shape = x.shape().to_vec();
            let out_shape = lay.output_shapes[i].clone();
            let layer = self.spec.layers[i];
            let mut out = vec![0.0; out_shape.iter().product()];
            match layer {
                Layer::Conv { .. } => {
                    let p = self.weights.params(i);
                    kernels::conv_forward(&conv_geom(&layer, &in_shape, &out_shape), x.data(), p.weight.data(), p.bias.data(), &mut out);
                }
                Layer::MaxPool { window, stride } => {
                    let am = kernels::maxpool_forward(x.data(), (in_shape[0], in_shape[1], in_shape[2]), window, stride, &mut out);
                    trace.pool_argmax[i] = Some(am);
                    if i == lay.last_pool {
                        let captured = Mask::new(out_shape.clone(), out.iter().map(|&v| v > 0.0).collect())?;
                        match &overrides.m5 {
                            Some(m) => {
                                for (v, &b) in out.iter_mut().zip(m.bits()) {
                                    if !b {
                                        *v = 0.0;
                                    }
                                }
                                trace.m5_gate = Some(m.bits().to_vec());
                                trace.masks.m5 = Some(m.clone());
                            }
                            None => trace.masks.m5 = Some(captured),
                        }
                    }
                }
                Layer::FullyConnected { .. } => {
                    let p = self.weights.params(i);
                    kernels::fc_forward(p.weight.data(), p.bias.data(), x.data(), &mut out);
                }
                Layer::Relu => {
                    let imposed = if i == lay.relu6 {
                        overrides.m6.as_ref()
                    } else if i == lay.relu7 {
                        overrides.m7.as_ref()
                    } else {
                        None
                    };
                    let gate: Vec<bool> = match imposed {
                        Some(m) => m.bits().to_vec(),
                        None => x.data().iter().map(|&v| v > 0.0).collect(),
                    };
                    for ((o, &v), &g) in out.iter_mut().zip(x.data()).zip(&gate) {
                        *o = if g { v } else { 0.0 };
                    }
                    if i == lay.relu6 || i == lay.relu7 {
                        let mask = Mask::new(out_shape.clone(), gate.clone())?;
                        let slot = if i == lay.relu6 { MaskSlot::M6 } else { MaskSlot::M7 };
                        trace.masks.set(slot, Some(mask));
                    }
                    trace.gates[i] = Some(gate);
                }
                Layer::Dropout { rate } => {
                    out.copy_from_slice(x.data());
                    if let Some(rng) = dropout_rng.as_deref_mut() {
                        let keep = 1.0 - rate;
                        let scale: Vec<f64> = (0..out.len())
                            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        for (o, s) in out.iter_mut().zip(&scale) {
                            *o *= s;
                        }
                        trace.dropout_scale[i] = Some(scale);
                    }
                }
            }
            trace.activations.push(Tensor::new(out_shape, out)?);
        }
        Ok(trace)
    }

    fn check_overrides(&self, o: &MaskSet) -> Result<()> {
        let lay = &self.layout;
        let expected = [
            lay.pool5_shape().to_vec(),
            vec![lay.fc6_dim()],
            vec![lay.fc7_dim()],
        ];
        for slot in MaskSlot::ALL {
            if let Some(m) = o.get(slot) {
                let want = &expected[slot.index()];
                if m.shape() != want.as_slice() {
                    return Err(Error::shape(
                        format!("{} override", slot.name()),
                        format!("expected {want:?}, got {:?}", m.shape()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Gradient of a scalar objective w.r.t. the input image, given the
    /// gradient w.r.t. the last layer recorded in `trace`.
    pub fn backward_to_input(&self, trace: &ForwardTrace, output_gradient: &Tensor) -> Result<Tensor> {
        self.backward_from(trace, trace.last_layer(), output_gradient, None)
    }

    /// Backpropagates `grad` (w.r.t. the output of layer `from`) to the input,
    /// optionally accumulating parameter gradients.
    pub fn backward_from(
        &self,
        trace: &ForwardTrace,
        from: usize,
        grad: &Tensor,
        mut param_grads: Option<&mut NetworkWeights>,
    ) -> Result<Tensor> {
        if from >= trace.activations.len() {
            return Err(Error::InvalidArgument(format!(
                "trace stops at layer {}, gradient given for layer {from}",
                trace.last_layer()
            )));
        }
        if trace.layer_count != self.spec.layers.len() || !trace.input.same_shape(&Tensor::zeros(&self.spec.input)) {
            return Err(Error::shape("trace", "trace was produced by a different network"));
        }
        for (i, a) in trace.activations.iter().enumerate() {
            if a.shape() != self.layout.output_shapes[i].as_slice() {
                return Err(Error::shape(format!("trace layer {i}"), "activation shape does not match network"));
            }
        }
        grad.ensure_shape(trace.activations[from].shape(), &format!("gradient at layer {from}"))?;

        let mut g = grad.data().to_vec();
        for i in (0..=from).rev() {
            let layer = self.spec.layers[i];
            let x = if i == 0 { &trace.input } else { &trace.activations[i - 1] };
            let in_shape = x.shape();
            let out_shape = &self.layout.output_shapes[i];
            let mut gi = vec![0.0; x.len()];
            match layer {
                Layer::Conv { .. } => {
                    let geom = conv_geom(&layer, in_shape, out_shape);
                    let p = self.weights.params(i);
                    if let Some(pg) = param_grads.as_deref_mut() {
                        let pgi = pg.params_mut(i);
                        kernels::conv_backward_params(&geom, x.data(), &g, pgi.weight.data_mut(), pgi.bias.data_mut());
                    }
                    // training discards the image gradient
                    if i > 0 || param_grads.is_none() {
                        kernels::conv_backward_input(&geom, &g, p.weight.data(), &mut gi);
                    }
                }
                Layer::MaxPool { .. } => {
                    if i == self.layout.last_pool {
                        if let Some(gate) = &trace.m5_gate {
                            for (v, &b) in g.iter_mut().zip(gate) {
                                if !b {
                                    *v = 0.0;
                                }
                            }
                        }
                    }
                    let am = trace.pool_argmax[i].as_ref().expect("pool argmax recorded");
                    kernels::maxpool_backward(&g, am, &mut gi);
                }
                Layer::FullyConnected { .. } => {
                    let p = self.weights.params(i);
                    if let Some(pg) = param_grads.as_deref_mut() {
                        let pgi = pg.params_mut(i);
                        kernels::fc_backward_params(x.data(), &g, pgi.weight.data_mut(), pgi.bias.data_mut());
                    }
                    kernels::fc_backward_input(p.weight.data(), &g, &mut gi);
                }
                Layer::Relu => {
                    let gate = trace.gates[i].as_ref().expect("relu gate recorded");
                    for ((d, &v), &b) in gi.iter_mut().zip(&g).zip(gate) {
                        *d = if b { v } else { 0.0 };
                    }
                }
                Layer::Dropout { .. } => match &trace.dropout_scale[i] {
                    Some(scale) => {
                        for ((d, &v), s) in gi.iter_mut().zip(&g).zip(scale) {
                            *d = v * s;
                        }
                    }
                    None => gi.copy_from_slice(&g),
                },
            }
            g = gi;
        }
        Tensor::new(self.spec.input.to_vec(), g)
    }
}

fn conv_geom(layer: &Layer, in_shape: &[usize], out_shape: &[usize]) -> ConvGeom {
    match *layer {
        Layer::Conv { in_channels, out_channels, kernel, stride, pad } => ConvGeom {
            in_c: in_channels,
            in_h: in_shape[1],
            in_w: in_shape[2],
            out_c: out_channels,
            out_h: out_shape[1],
            out_w: out_shape[2],
            kernel,
            stride,
            pad,
        },
        _ => unreachable!("conv geometry requested for {}", layer.kind()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Single fc "network" wrapped so fc8 is an identity map: conv/pool are
    /// 1x1 identities and fc6 is the layer under test.
    fn identity_chain(dim: usize) -> Network {
        let spec = NetworkSpec {
            input: [dim, 1, 1],
            layers: vec![
                Layer::MaxPool { window: 1, stride: 1 },
                Layer::FullyConnected { in_dim: dim, out_dim: dim },
                Layer::Relu,
                Layer::FullyConnected { in_dim: dim, out_dim: dim },
                Layer::Relu,
                Layer::FullyConnected { in_dim: dim, out_dim: dim },
            ],
            class_count: dim,
        };
        let mut w = NetworkWeights::zeros_like(&spec);
        for l in [1, 3, 5] {
            let p = w.params_mut(l);
            for k in 0..dim {
                p.weight.data_mut()[k * dim + k] = 1.0;
            }
        }
        Network::new(spec, w).unwrap()
    }

    fn input(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_captures_mask() {
        let net = identity_chain(2);
        let t = net.forward(&input(&[-1.0, 2.0]), None).unwrap();
        assert_eq!(t.activation(2).data(), &[0.0, 2.0]);
        assert_eq!(t.masks.m6.as_ref().unwrap().bits(), &[false, true]);
        assert!(!t.overridden.get(MaskSlot::M6));
    }

    #[test]
    fn override_multiplies_linear_preactivation() {
        let net = identity_chain(2);
        let m6 = Mask::new(vec![2], vec![true, false]).unwrap();
        let ov = MaskSet::none().with(MaskSlot::M6, m6.clone());
        let t = net.forward(&input(&[-1.0, 2.0]), Some(&ov)).unwrap();
        assert_eq!(t.activation(2).data(), &[-1.0, 0.0]);
        assert_eq!(t.masks.m6.as_ref(), Some(&m6));
        assert!(t.overridden.get(MaskSlot::M6));
    }

    #[test]
    fn override_shape_mismatch_names_mask() {
        let net = identity_chain(2);
        let ov = MaskSet::none().with(MaskSlot::M7, Mask::ones(&[3]));
        let msg = net.forward(&input(&[1.0, 1.0]), Some(&ov)).unwrap_err().to_string();
        assert!(msg.contains("m7"), "{msg}");
    }

    #[test]
    fn zero_gradient_gives_zero_image_gradient() {
        let net = Network::init(NetworkSpec::small([2, 8, 8], 3, 3, 2, 6, 3).unwrap(), 1).unwrap();
        let img = Tensor::full(&[2, 8, 8], 0.3);
        let t = net.forward(&img, None).unwrap();
        let g = net.backward_to_input(&t, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn input_shape_is_checked() {
        let net = Network::init(NetworkSpec::toy(3), 0).unwrap();
        assert!(net.forward(&Tensor::zeros(&[3, 32, 32]), None).is_err());
    }

    #[test]
    fn region_changes_when_a_gate_flips() {
        let net = identity_chain(2);
        let a = net.forward(&input(&[1.0, 2.0]), None).unwrap();
        let b = net.forward(&input(&[1.5, 2.5]), None).unwrap();
        let c = net.forward(&input(&[-1.0, 2.0]), None).unwrap();
        assert!(a.same_region(&b));
        assert!(!a.same_region(&c));
    }
}
