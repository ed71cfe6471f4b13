//! Mask ensembles over the fully-connected chain: spatial windows on the
//! last pool grid, dropout-sampled fc masks, topic masks on fc7 and binary
//! hash codes with masked weight substitution.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::net::{Layout, Mask, MaskSet, MaskSlot, Network};
use crate::tensor::Tensor;

pub const HASH_MAGIC: &[u8; 4] = b"NPHC";
pub const HASH_VERSION: u16 = 1;

/// Default relative threshold for topic masks.
pub const TOPIC_TAU: f64 = 0.1;

/// A `rows x cols` window on the last-pool grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialMask {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl SpatialMask {
    pub fn new(grid: (usize, usize), row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Self> {
        let sm = SpatialMask { grid_rows: grid.0, grid_cols: grid.1, row0, col0, rows, cols };
        if rows == 0 || cols == 0 || row0 + rows > grid.0 || col0 + cols > grid.1 {
            return Err(Error::InvalidArgument(format!(
                "window {rows}x{cols} at ({row0},{col0}) outside the {}x{} grid",
                grid.0, grid.1
            )));
        }
        Ok(sm)
    }

    /// Parses the inline form `r0,c0,k` (a `k x k` window).
    pub fn parse(spec: &str, grid: (usize, usize)) -> Result<Self> {
        let parts: Vec<usize> = spec
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad window spec {spec:?}"))))
            .collect::<Result<_>>()?;
        match parts[..] {
            [r, c, k] => SpatialMask::new(grid, r, c, k, k),
            _ => Err(Error::InvalidArgument(format!("window spec {spec:?} must be r0,c0,k"))),
        }
    }

    /// m5 set on the window across all `channels`; m6 and m7 left free.
    pub fn to_maskset(&self, channels: usize) -> MaskSet {
        let (h, w) = (self.grid_rows, self.grid_cols);
        let mut bits = vec![false; channels * h * w];
        for c in 0..channels {
            for r in self.row0..self.row0 + self.rows {
                for col in self.col0..self.col0 + self.cols {
                    bits[(c * h + r) * w + col] = true;
                }
            }
        }
        let m5 = Mask::new(vec![channels, h, w], bits).expect("consistent length");
        MaskSet::none().with(MaskSlot::M5, m5)
    }
}

/// Window mask for `net`'s last-pool grid.
pub fn spatial_mask_for(net: &Network, sm: &SpatialMask) -> Result<MaskSet> {
    let shape = net.layout().pool5_shape();
    if (shape[1], shape[2]) != (sm.grid_rows, sm.grid_cols) {
        return Err(Error::shape("spatial mask", format!("grid {}x{} vs pool {:?}", sm.grid_rows, sm.grid_cols, shape)));
    }
    Ok(sm.to_maskset(shape[0]))
}

/// i.i.d. Bernoulli(1 - rate) masks for m6 and m7.
pub fn sample_dropout_maskset(layout: &Layout, seed: u64, rate: f64) -> Result<MaskSet> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidArgument(format!("dropout rate must be in (0, 1), got {rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| {
        let bits = (0..n).map(|_| rng.gen::<f64>() >= rate).collect();
        Mask::new(vec![n], bits).expect("1-d mask")
    };
    let m6 = draw(layout.fc6_dim());
    let m7 = draw(layout.fc7_dim());
    Ok(MaskSet::none().with(MaskSlot::M6, m6).with(MaskSlot::M7, m7))
}

/// m7 = 1 where the basis component exceeds `tau * max`.
pub fn topic_mask(basis: &[f64], tau: f64) -> Result<MaskSet> {
    if basis.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("topic basis must be finite and non-negative".into()));
    }
    let max = basis.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::InvalidArgument("topic basis vector is all zero".into()));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must be in [0, 1), got {tau}")));
    }
    let bits = basis.iter().map(|&v| v > tau * max).collect();
    Ok(MaskSet::none().with(MaskSlot::M7, Mask::new(vec![basis.len()], bits)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HashLevel {
    M7,
    M6To7,
    M5To7,
}

impl HashLevel {
    pub const ALL: [HashLevel; 3] = [HashLevel::M7, HashLevel::M6To7, HashLevel::M5To7];

    pub fn slots(self) -> &'static [MaskSlot] {
        match self {
            HashLevel::M7 => &[MaskSlot::M7],
            HashLevel::M6To7 => &[MaskSlot::M6, MaskSlot::M7],
            HashLevel::M5To7 => &[MaskSlot::M5, MaskSlot::M6, MaskSlot::M7],
        }
    }

    fn tag(self) -> u8 {
        match self {
            HashLevel::M7 => 7,
            HashLevel::M6To7 => 6,
            HashLevel::M5To7 => 5,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            7 => Ok(HashLevel::M7),
            6 => Ok(HashLevel::M6To7),
            5 => Ok(HashLevel::M5To7),
            _ => Err(Error::Format(format!("hash code: unknown level tag {t}"))),
        }
    }
}

impl fmt::Display for HashLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HashLevel::M7 => "m7",
            HashLevel::M6To7 => "m6-7",
            HashLevel::M5To7 => "m5-7",
        })
    }
}

impl FromStr for HashLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m7" => Ok(HashLevel::M7),
            "m6-7" => Ok(HashLevel::M6To7),
            "m5-7" => Ok(HashLevel::M5To7),
            _ => Err(Error::InvalidArgument(format!("unknown hash level {s:?} (m7, m6-7, m5-7)"))),
        }
    }
}

/// Captured ReLU masks of one image, restricted to a level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashCode {
    pub level: HashLevel,
    pub masks: MaskSet,
}

pub fn capture_hash(net: &Network, image: &Tensor, level: HashLevel) -> Result<HashCode> {
    let trace = net.forward(image, None)?;
    Ok(HashCode { level, masks: trace.masks.restricted(level.slots()) })
}

impl HashCode {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::header(HASH_MAGIC, HASH_VERSION);
        w.u8(self.level.tag());
        for &slot in self.level.slots() {
            let m = self
                .masks
                .get(slot)
                .ok_or_else(|| Error::InvalidArgument(format!("hash code is missing {}", slot.name())))?;
            w.u8(m.shape().len() as u8);
            for &d in m.shape() {
                w.usize32(d)?;
            }
            w.bytes(&pack_bits(m.bits()));
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, HASH_MAGIC, HASH_VERSION, "hash code")?;
        let level = HashLevel::from_tag(r.u8()?)?;
        let mut masks = MaskSet::none();
        for &slot in level.slots() {
            let ndim = r.u8()? as usize;
            if ndim == 0 || ndim > 3 {
                return Err(Error::Format(format!("hash code: {} has {ndim} dims", slot.name())));
            }
            let shape: Vec<usize> = (0..ndim).map(|_| r.usize32()).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let packed = r.take(n.div_ceil(8))?;
            masks.set(slot, Some(Mask::new(shape, unpack_bits(packed, n))?));
        }
        r.finish()?;
        Ok(HashCode { level, masks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// LSB-first within each byte.
fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Dense fc6-fc8 parameters after mask substitution.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutedWeights {
    pub level: HashLevel,
    pub w6: Tensor,
    pub b6: Tensor,
    pub w7: Tensor,
    pub b7: Tensor,
    pub w8: Tensor,
    pub b8: Tensor,
}

fn row_mask(w: &mut Tensor, rows: &Mask) {
    let cols = w.shape()[1];
    for (r, &keep) in rows.bits().iter().enumerate() {
        if !keep {
            w.data_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v *= 0.0);
        }
    }
}

fn col_mask(w: &mut Tensor, cols_mask: &Mask) {
    let cols = w.shape()[1];
    for row in w.data_mut().chunks_mut(cols) {
        for (v, &keep) in row.iter_mut().zip(cols_mask.bits()) {
            if !keep {
                *v *= 0.0;
            }
        }
    }
}

fn vec_mask(b: &mut Tensor, m: &Mask) {
    for (v, &keep) in b.data_mut().iter_mut().zip(m.bits()) {
        if !keep {
            *v *= 0.0;
        }
    }
}

/// Applies the level's substitution to the fc weights:
/// `{m7}: (m7 W7, W6)`, `{m6-7}: (m7 W7 m6, W6)`, `{m5-7}: (m7 W7 m6, m6 W6 m5)`.
/// Biases are scaled by the output-side mask of their layer.
pub fn substituted_weights(net: &Network, hash: &HashCode) -> Result<SubstitutedWeights> {
    let lay = net.layout();
    let expect = |slot: MaskSlot, shape: &[usize]| -> Result<&Mask> {
        let m = hash
            .masks
            .get(slot)
            .ok_or_else(|| Error::InvalidArgument(format!("level {} needs {}", hash.level, slot.name())))?;
        if m.shape() != shape {
            return Err(Error::shape(
                format!("{} substitution", slot.name()),
                format!("expected {shape:?}, got {:?}", m.shape()),
            ));
        }
        Ok(m)
    };
    let p6 = net.weights().params(lay.fc6);
    let p7 = net.weights().params(lay.fc7);
    let p8 = net.weights().params(lay.fc8);
    let (mut w6, mut b6) = (p6.weight.clone(), p6.bias.clone());
    let (mut w7, mut b7) = (p7.weight.clone(), p7.bias.clone());

    let m7 = expect(MaskSlot::M7, &[lay.fc7_dim()])?;
    row_mask(&mut w7, m7);
    vec_mask(&mut b7, m7);
    if hash.level >= HashLevel::M6To7 {
        let m6 = expect(MaskSlot::M6, &[lay.fc6_dim()])?;
        col_mask(&mut w7, m6);
        if hash.level == HashLevel::M5To7 {
            let m5 = expect(MaskSlot::M5, lay.pool5_shape())?;
            row_mask(&mut w6, m6);
            vec_mask(&mut b6, m6);
            col_mask(&mut w6, m5);
        }
    }
    Ok(SubstitutedWeights {
        level: hash.level,
        w6,
        b6,
        w7,
        b7,
        w8: p8.weight.clone(),
        b8: p8.bias.clone(),
    })
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    w.data()
        .chunks(cols)
        .zip(b.data())
        .map(|(row, &bias)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bias)
        .collect()
}

impl SubstitutedWeights {
    /// Logits from a last-pool activation. Layers whose mask the level imposes
    /// are linear; the others keep their ReLU.
    pub fn logits_from_pool(&self, pool: &Tensor) -> Result<Tensor> {
        if pool.len() != self.w6.shape()[1] {
            return Err(Error::shape("substituted forward", format!("pool has {} values", pool.len())));
        }
        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let mut h6 = affine(&self.w6, &self.b6, pool.data());
        if self.level == HashLevel::M7 {
            h6 = relu(h6);
        }
        let h7 = affine(&self.w7, &self.b7, &h6);
        Ok(Tensor::from_vec(affine(&self.w8, &self.b8, &h7)))
    }

    /// Full forward: conv stack of `net`, then the substituted fc chain.
    pub fn logits(&self, net: &Network, image: &Tensor) -> Result<Tensor> {
        let trace = net.forward_to(image, net.last_pool(), None)?;
        self.logits_from_pool(trace.activation(net.last_pool()))
    }

    /// True when every substituted matrix equals the original bit for bit.
    pub fn bit_eq_original(&self, net: &Network) -> bool {
        let lay = net.layout();
        let w = net.weights();
        self.w6.bit_eq(&w.params(lay.fc6).weight)
            && self.b6.bit_eq(&w.params(lay.fc6).bias)
            && self.w7.bit_eq(&w.params(lay.fc7).weight)
            && self.b7.bit_eq(&w.params(lay.fc7).bias)
    }
}

/// Overrides equivalent to a hash code at its level.
pub fn hash_overrides(hash: &HashCode) -> MaskSet {
    hash.masks.restricted(hash.level.slots())
}
