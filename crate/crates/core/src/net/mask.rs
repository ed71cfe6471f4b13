//! Binary ReLU masks on the pool5 -> fc6 -> fc7 chain.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which gate of the fully-connected chain a mask controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskSlot {
    /// Last pool output (spatial x channel).
    M5,
    /// fc6 ReLU.
    M6,
    /// fc7 ReLU.
    M7,
}

impl MaskSlot {
    pub const ALL: [MaskSlot; 3] = [MaskSlot::M5, MaskSlot::M6, MaskSlot::M7];

    pub fn index(self) -> usize {
        match self {
            MaskSlot::M5 => 0,
            MaskSlot::M6 => 1,
            MaskSlot::M7 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskSlot::M5 => "m5",
            MaskSlot::M6 => "m6",
            MaskSlot::M7 => "m7",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != bits.len() || n == 0 {
            return Err(Error::shape("mask", format!("shape {shape:?} vs {} bits", bits.len())));
        }
        Ok(Mask { shape, bits })
    }

    pub fn ones(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            bits: vec![true; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            bits: vec![false; shape.iter().product()],
        }
    }

    /// 1 where `values > 0`.
    pub fn positive(values: &Tensor) -> Self {
        Mask {
            shape: values.shape().to_vec(),
            bits: values.data().iter().map(|&v| v > 0.0).collect(),
        }
    }

    /// Accepts only exact 0/1 entries.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let bits = t
            .data()
            .iter()
            .map(|&v| {
                if v == 1.0 {
                    Ok(true)
                } else if v == 0.0 {
                    Ok(false)
                } else {
                    Err(Error::InvalidArgument(format!("mask entry {v} is not 0 or 1")))
                }
            })
            .collect::<Result<_>>()?;
        Mask::new(t.shape().to_vec(), bits)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask shape is valid")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape != other.shape {
            return Err(Error::shape("mask and", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Mask {
            shape: self.shape.clone(),
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        })
    }
}

/// Masks m5, m6, m7. When passed to `forward` as overrides, a present mask
/// replaces the ReLU gate of its layer; an absent one is computed from the input.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskSet {
    pub m5: Option<Mask>,
    pub m6: Option<Mask>,
    pub m7: Option<Mask>,
}

impl MaskSet {
    pub fn none() -> Self {
        MaskSet::default()
    }

    pub fn get(&self, slot: MaskSlot) -> Option<&Mask> {
        match slot {
            MaskSlot::M5 => self.m5.as_ref(),
            MaskSlot::M6 => self.m6.as_ref(),
            MaskSlot::M7 => self.m7.as_ref(),
        }
    }

    pub fn set(&mut self, slot: MaskSlot, mask: Option<Mask>) {
        match slot {
            MaskSlot::M5 => self.m5 = mask,
            MaskSlot::M6 => self.m6 = mask,
            MaskSlot::M7 => self.m7 = mask,
        }
    }

    pub fn with(mut self, slot: MaskSlot, mask: Mask) -> Self {
        self.set(slot, Some(mask));
        self
    }

    pub fn is_overridden(&self, slot: MaskSlot) -> bool {
        self.get(slot).is_some()
    }

    pub fn is_empty(&self) -> bool {
        MaskSlot::ALL.iter().all(|&s| !self.is_overridden(s))
    }

    /// Keeps only the listed slots.
    pub fn restricted(&self, slots: &[MaskSlot]) -> MaskSet {
        let mut out = MaskSet::none();
        for &s in slots {
            out.set(s, self.get(s).cloned());
        }
        out
    }

    /// Overlays `other` on top of `self`: slots set in `other` win.
    pub fn merged(&self, other: &MaskSet) -> MaskSet {
        let mut out = self.clone();
        for s in MaskSlot::ALL {
            if let Some(m) = other.get(s) {
                out.set(s, Some(m.clone()));
            }
        }
        out
    }
}

/// Per-slot flag recording whether the mask in a trace was imposed or captured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OverrideFlags(pub [bool; 3]);

impl OverrideFlags {
    pub fn get(&self, slot: MaskSlot) -> bool {
        self.0[slot.index()]
    }
}
