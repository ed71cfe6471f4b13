//! Network topology and shape propagation.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    FullyConnected {
        in_dim: usize,
        out_dim: usize,
    },
    /// Active only during training.
    Dropout {
        rate: f64,
    },
}

impl Layer {
    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::FullyConnected { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::FullyConnected { .. } => "fc",
            Layer::Dropout { .. } => "dropout",
        }
    }
}

/// Feedforward conv/pool trunk followed by exactly three fully-connected
/// layers (fc6, fc7, fc8). `input` is `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    pub class_count: usize,
}

/// Indices of the structurally important layers plus every layer's output shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub output_shapes: Vec<Vec<usize>>,
    pub last_pool: usize,
    pub fc6: usize,
    pub relu6: usize,
    pub fc7: usize,
    pub relu7: usize,
    pub fc8: usize,
}

impl Layout {
    pub fn pool5_shape(&self) -> &[usize] {
        &self.output_shapes[self.last_pool]
    }

    pub fn fc6_dim(&self) -> usize {
        self.output_shapes[self.fc6][0]
    }

    pub fn fc7_dim(&self) -> usize {
        self.output_shapes[self.fc7][0]
    }
}

impl NetworkSpec {
    /// Default desk-scale network: 64x64x3 input, three conv+pool blocks
    /// down to a 6x6 grid, then fc6-fc8 with dropout on fc6/fc7.
    pub fn toy(class_count: usize) -> Self {
        NetworkSpec {
            input: [3, 64, 64],
            layers: vec![
                Layer::Conv { in_channels: 3, out_channels: 8, kernel: 5, stride: 1, pad: 0 },
                Layer::Relu,
                Layer::MaxPool { window: 3, stride: 2 },
                Layer::Conv { in_channels: 8, out_channels: 12, kernel: 5, stride: 1, pad: 2 },
                Layer::Relu,
                Layer::MaxPool { window: 3, stride: 2 },
                Layer::Conv { in_channels: 12, out_channels: 16, kernel: 3, stride: 1, pad: 1 },
                Layer::Relu,
                Layer::MaxPool { window: 3, stride: 2 },
                Layer::FullyConnected { in_dim: 16 * 6 * 6, out_dim: 64 },
                Layer::Relu,
                Layer::Dropout { rate: 0.5 },
                Layer::FullyConnected { in_dim: 64, out_dim: 64 },
                Layer::Relu,
                Layer::Dropout { rate: 0.5 },
                Layer::FullyConnected { in_dim: 64, out_dim: class_count },
            ],
            class_count,
        }
    }

    /// Builds a minimal conv+pool+fc6..fc8 network; handy for gradient checks.
    pub fn small(
        input: [usize; 3],
        conv_channels: usize,
        kernel: usize,
        pool: usize,
        hidden: usize,
        class_count: usize,
    ) -> Result<Self> {
        let [c, h, w] = input;
        let ch = h.saturating_sub(kernel - 1);
        let cw = w.saturating_sub(kernel - 1);
        if ch < pool || cw < pool {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} too small for kernel {kernel} and pool {pool}"
            )));
        }
        let ph = (ch - pool) / pool + 1;
        let pw = (cw - pool) / pool + 1;
        let spec = NetworkSpec {
            input,
            layers: vec![
                Layer::Conv { in_channels: c, out_channels: conv_channels, kernel, stride: 1, pad: 0 },
                Layer::Relu,
                Layer::MaxPool { window: pool, stride: pool },
                Layer::FullyConnected { in_dim: conv_channels * ph * pw, out_dim: hidden },
                Layer::Relu,
                Layer::Dropout { rate: 0.5 },
                Layer::FullyConnected { in_dim: hidden, out_dim: hidden },
                Layer::Relu,
                Layer::Dropout { rate: 0.5 },
                Layer::FullyConnected { in_dim: hidden, out_dim: class_count },
            ],
            class_count,
        };
        spec.layout()?;
        Ok(spec)
    }

    /// Propagates shapes and checks the fc6-fc8 structure.
    pub fn layout(&self) -> Result<Layout> {
        if self.class_count == 0 {
            return Err(Error::InvalidArgument("class_count must be positive".into()));
        }
        if self.input.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad input shape {:?}", self.input)));
        }
        let mut shape = self.input.to_vec();
        let mut output_shapes = Vec::with_capacity(self.layers.len());
        let mut last_pool = None;
        let mut fcs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let ctx = format!("layer {i} ({})", layer.kind());
            shape = match *layer {
                Layer::Conv { in_channels, out_channels, kernel, stride, pad } => {
                    if !fcs.is_empty() {
                        return Err(Error::shape(ctx, "conv after fully-connected layer"));
                    }
                    let (c, h, w) = three(&shape, &ctx)?;
                    if c != in_channels {
                        return Err(Error::shape(ctx, format!("expects {in_channels} channels, got {c}")));
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(Error::shape(ctx, "zero kernel, stride or channel count"));
                    }
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(Error::shape(ctx, format!("kernel {kernel} larger than padded {h}x{w}")));
                    }
                    vec![
                        out_channels,
                        (h + 2 * pad - kernel) / stride + 1,
                        (w + 2 * pad - kernel) / stride + 1,
                    ]
                }
                Layer::MaxPool { window, stride } => {
                    if !fcs.is_empty() {
                        return Err(Error::shape(ctx, "pool after fully-connected layer"));
                    }
                    let (c, h, w) = three(&shape, &ctx)?;
                    if window == 0 || stride == 0 || h < window || w < window {
                        return Err(Error::shape(ctx, format!("window {window} does not fit {h}x{w}")));
                    }
                    last_pool = Some(i);
                    vec![c, (h - window) / stride + 1, (w - window) / stride + 1]
                }
                Layer::FullyConnected { in_dim, out_dim } => {
                    let n: usize = shape.iter().product();
                    if n != in_dim {
                        return Err(Error::shape(ctx, format!("expects {in_dim} inputs, got {n}")));
                    }
                    if out_dim == 0 {
                        return Err(Error::shape(ctx, "zero output dimension"));
                    }
                    fcs.push(i);
                    vec![out_dim]
                }
                Layer::Relu => shape,
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::InvalidArgument(format!("{ctx}: dropout rate {rate} not in [0, 1)")));
                    }
                    shape
                }
            };
            output_shapes.push(shape.clone());
        }

        let last_pool = last_pool
            .ok_or_else(|| Error::shape("network", "no max-pool layer before the fc block"))?;
        if fcs.len() != 3 {
            return Err(Error::shape(
                "network",
                format!("expected exactly 3 fully-connected layers, found {}", fcs.len()),
            ));
        }
        if fcs[0] < last_pool {
            return Err(Error::shape("network", "fc layers must follow the last pool"));
        }
        for (i, layer) in self.layers.iter().enumerate().skip(last_pool + 1) {
            if !matches!(layer, Layer::FullyConnected { .. } | Layer::Relu | Layer::Dropout { .. }) {
                return Err(Error::shape(format!("layer {i}"), "only fc/relu/dropout allowed after the last pool"));
            }
        }
        let relu_after = |fc: usize, name: &str| -> Result<usize> {
            match self.layers.get(fc + 1) {
                Some(Layer::Relu) => Ok(fc + 1),
                _ => Err(Error::shape(format!("layer {fc}"), format!("{name} must be followed by relu"))),
            }
        };
        let relu6 = relu_after(fcs[0], "fc6")?;
        let relu7 = relu_after(fcs[1], "fc7")?;
        if fcs[2] != self.layers.len() - 1 {
            return Err(Error::shape("network", "fc8 must be the final layer"));
        }
        let classes = output_shapes[fcs[2]][0];
        if classes != self.class_count {
            return Err(Error::shape(
                "fc8",
                format!("outputs {classes} values but class_count is {}", self.class_count),
            ));
        }
        Ok(Layout {
            output_shapes,
            last_pool,
            fc6: fcs[0],
            relu6,
            fc7: fcs[1],
            relu7,
            fc8: fcs[2],
        })
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }
}

fn three(shape: &[usize], ctx: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(ctx, format!("expects a [c, h, w] input, got {shape:?}"))),
    }
}
