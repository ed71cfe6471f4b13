//! Receptive fields of conv/pool units.

use super::spec::{Layer, NetworkSpec};
use crate::error::{Error, Result};

/// Half-open pixel rectangle `[row0, row0 + rows) x [col0, col0 + cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Receptive-field size, jump (input stride between neighbouring units) and
/// the input coordinate of unit 0's field start (may be negative with padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfGeometry {
    pub size: usize,
    pub jump: usize,
    pub start: isize,
}

impl RfGeometry {
    /// Unclipped field of unit `(row, col)` as signed coordinates.
    pub fn field(&self, row: usize, col: usize) -> (isize, isize) {
        (
            self.start + (row * self.jump) as isize,
            self.start + (col * self.jump) as isize,
        )
    }

    /// Centered square crop of side `crop` inside the unit's field.
    pub fn center_crop(&self, row: usize, col: usize, crop: usize) -> (isize, isize) {
        let (r, c) = self.field(row, col);
        let off = (self.size as isize - crop as isize) / 2;
        (r + off, c + off)
    }
}

impl NetworkSpec {
    /// Receptive-field recurrence `r' = r + (k - 1) j`, `j' = j s` through
    /// layers `0..=layer`.
    pub fn rf_geometry(&self, layer: usize) -> Result<RfGeometry> {
        let layout = self.layout()?;
        if layer > layout.last_pool {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} is past the last pool layer {}",
                layout.last_pool
            )));
        }
        let mut g = RfGeometry { size: 1, jump: 1, start: 0 };
        for l in &self.layers[..=layer] {
            let (k, s, p) = match *l {
                Layer::Conv { kernel, stride, pad, .. } => (kernel, stride, pad),
                Layer::MaxPool { window, stride } => (window, stride, 0),
                _ => continue,
            };
            g.start -= (p * g.jump) as isize;
            g.size += (k - 1) * g.jump;
            g.jump *= s;
        }
        Ok(g)
    }
}

/// Input rectangle, clipped to the image, feeding unit `(row, col)` of `layer`.
pub fn receptive_field(spec: &NetworkSpec, layer: usize, position: (usize, usize)) -> Result<Rect> {
    let layout = spec.layout()?;
    let geom = spec.rf_geometry(layer)?;
    let shape = &layout.output_shapes[layer];
    let (row, col) = position;
    if row >= shape[1] || col >= shape[2] {
        return Err(Error::InvalidArgument(format!(
            "position ({row}, {col}) outside {}x{} grid of layer {layer}",
            shape[1], shape[2]
        )));
    }
    let (r0, c0) = geom.field(row, col);
    let clip = |start: isize, len: usize, limit: usize| -> (usize, usize) {
        let lo = start.max(0) as usize;
        let hi = ((start + len as isize).max(0) as usize).min(limit);
        (lo, hi.saturating_sub(lo))
    };
    let (row0, rows) = clip(r0, geom.size, spec.input[1]);
    let (col0, cols) = clip(c0, geom.size, spec.input[2]);
    Ok(Rect { row0, col0, rows, cols })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Appends the mandatory fc6-fc8 block to a conv/pool trunk.
    fn spec(mut layers: Vec<Layer>, input: [usize; 3]) -> NetworkSpec {
        let mut shape = input.to_vec();
        for l in &layers {
            shape = match *l {
                Layer::Conv { out_channels, kernel, stride, pad, .. } => vec![
                    out_channels,
                    (shape[1] + 2 * pad - kernel) / stride + 1,
                    (shape[2] + 2 * pad - kernel) / stride + 1,
                ],
                Layer::MaxPool { window, stride } => {
                    vec![shape[0], (shape[1] - window) / stride + 1, (shape[2] - window) / stride + 1]
                }
                _ => shape,
            };
        }
        layers.extend([
            Layer::FullyConnected { in_dim: shape.iter().product(), out_dim: 2 },
            Layer::Relu,
            Layer::FullyConnected { in_dim: 2, out_dim: 2 },
            Layer::Relu,
            Layer::FullyConnected { in_dim: 2, out_dim: 2 },
        ]);
        NetworkSpec { input, layers, class_count: 2 }
    }

    #[test]
    fn conv3_pool2_gives_4x4_field() {
        let s = spec(
            vec![
                Layer::Conv { in_channels: 1, out_channels: 1, kernel: 3, stride: 1, pad: 0 },
                Layer::MaxPool { window: 2, stride: 2 },
            ],
            [1, 10, 10],
        );
        let r = receptive_field(&s, 1, (1, 1)).unwrap();
        assert_eq!(r, Rect { row0: 2, col0: 2, rows: 4, cols: 4 });
    }

    #[test]
    fn single_conv_center_unit_sees_own_neighborhood() {
        let s = spec(
            vec![
                Layer::Conv { in_channels: 1, out_channels: 1, kernel: 3, stride: 1, pad: 1 },
                Layer::MaxPool { window: 1, stride: 1 },
            ],
            [1, 5, 5],
        );
        assert_eq!(receptive_field(&s, 0, (2, 2)).unwrap(), Rect { row0: 1, col0: 1, rows: 3, cols: 3 });
        // corner unit with padding is clipped at 0
        assert_eq!(receptive_field(&s, 0, (0, 0)).unwrap(), Rect { row0: 0, col0: 0, rows: 2, cols: 2 });
        assert!(receptive_field(&s, 0, (5, 0)).is_err());
    }

    #[test]
    fn toy_net_pool5_field() {
        let g = NetworkSpec::toy(3).rf_geometry(8).unwrap();
        assert_eq!(g, RfGeometry { size: 35, jump: 8, start: -8 });
    }
}
