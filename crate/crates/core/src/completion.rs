//! Masked image completion under the class objective, and gradient-saliency
//! masks for locating the parts to modify.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, ChannelStats};
use crate::error::{Error, Result};
use crate::inversion::{data_score_class, invert, unwhiten, whiten, InitMode, InversionConfig, InversionSetup, Objective};
use crate::net::{MaskSet, Network};
use crate::patch::PatchDatabase;
use crate::tensor::Tensor;

pub const DEFAULT_PERCENTILE: f64 = 95.0;
pub const DEFAULT_MIN_REGION_FRACTION: f64 = 0.01;

/// Binary `h x w` map, true = editable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("pixel mask", format!("{} bits for {height}x{width}", bits.len())));
        }
        Ok(PixelMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        PixelMask { height, width, bits: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        PixelMask { height, width, bits: vec![true; height * width] }
    }

    /// Editable rectangle, clipped to the image.
    pub fn rect(height: usize, width: usize, top: usize, left: usize, rows: usize, cols: usize) -> Self {
        let mut m = PixelMask::empty(height, width);
        for y in top.min(height)..(top + rows).min(height) {
            for x in left.min(width)..(left + cols).min(width) {
                m.bits[y * width + x] = true;
            }
        }
        m
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn density(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (_, h, w) = image.chw()?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(
                "pixel mask",
                format!("{}x{} mask for {h}x{w} image", self.height, self.width),
            ));
        }
        Ok(())
    }

    /// Pixels above one half are editable.
    pub fn from_plane(plane: &Tensor) -> Result<Self> {
        match plane.shape() {
            &[h, w] => PixelMask::new(h, w, plane.data().iter().map(|&v| v > 0.5).collect()),
            s => Err(Error::shape("pixel mask", format!("expected [h, w], got {s:?}"))),
        }
    }

    pub fn to_plane(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dims")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        PixelMask::from_plane(&data::read_pgm(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        data::write_pgm(path, &self.to_plane())
    }
}

/// The whitened image with masked pixels at the dataset mean.
fn mean_filled(image: &Tensor, mask: &PixelMask, stats: &ChannelStats) -> Result<Tensor> {
    mask.check_image(image)?;
    let mut x = whiten(image, stats)?;
    let hw = mask.bits.len();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if mask.bits[i % hw] {
            *v = 0.0;
        }
    }
    Ok(x)
}

/// Classes ranked by logit (ties by index) for the image with its masked
/// pixels replaced by the dataset mean.
pub fn predict_context_class(net: &Network, image: &Tensor, mask: &PixelMask, stats: &ChannelStats) -> Result<Vec<(usize, f64)>> {
    let x = mean_filled(image, mask, stats)?;
    let logits = net.logits(&x, None)?;
    let mut ranked: Vec<(usize, f64)> = logits.data().iter().cloned().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

#[derive(Debug, Clone)]
pub struct Completion {
    /// Raw image; pixels outside the mask are copied from the input.
    pub image: Tensor,
    /// Class score of the mean-filled input.
    pub baseline_score: f64,
    /// Class score of `image`.
    pub final_score: f64,
    /// Class score after each iteration.
    pub score_trace: Vec<f64>,
}

/// Class score of a raw image, with the given overrides.
pub fn class_score(net: &Network, image: &Tensor, class: usize, overrides: Option<&MaskSet>, stats: &ChannelStats) -> Result<f64> {
    Ok(data_score_class(net, &whiten(image, stats)?, class, overrides)?.0)
}

/// Fills the masked region by maximizing the class score (under `topic`
/// overrides if given). Only masked pixels are updated. The region starts at
/// the dataset mean plus `config.noise` uniform noise; zero iterations leave
/// the image as it was. With `r_gamma > 0`, `db` must hold class patches of
/// the same whitened space.
pub fn complete(
    net: &Network,
    image: &Tensor,
    mask: &PixelMask,
    class: usize,
    topic: Option<&MaskSet>,
    config: &InversionConfig,
    stats: &ChannelStats,
    db: Option<&PatchDatabase>,
) -> Result<Completion> {
    mask.check_image(image)?;
    if mask.is_empty() {
        return Err(Error::Empty("completion mask has no editable pixels".into()));
    }
    if class >= net.class_count() {
        return Err(Error::InvalidArgument(format!("class {class} >= {}", net.class_count())));
    }
    config.validate()?;
    let baseline = mean_filled(image, mask, stats)?;
    let baseline_score = data_score_class(net, &baseline, class, topic)?.0;
    if config.iterations == 0 {
        let final_score = class_score(net, image, class, topic, stats)?;
        return Ok(Completion { image: image.clone(), baseline_score, final_score, score_trace: Vec::new() });
    }

    let mut init = baseline;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let hw = mask.bits.len();
    if config.noise > 0.0 {
        for (i, v) in init.data_mut().iter_mut().enumerate() {
            if mask.bits[i % hw] {
                *v = rng.gen_range(-config.noise..=config.noise);
            }
        }
    }
    let init_raw = unwhiten(&init, stats)?;
    let cfg = InversionConfig { init_mode: InitMode::Given, ..config.clone() };
    let setup = InversionSetup { source: Some(&init_raw), database: db, editable: Some(&mask.bits), ..InversionSetup::new(stats) };
    let result = invert(net, &Objective::Class { class, overrides: topic }, &cfg, &setup)?;

    let mut out = image.clone();
    for (i, (o, &r)) in out.data_mut().iter_mut().zip(result.image.data()).enumerate() {
        if mask.bits[i % hw] {
            *o = r;
        }
    }
    let final_score = class_score(net, &out, class, topic, stats)?;
    Ok(Completion {
        image: out,
        baseline_score,
        final_score,
        score_trace: result.energy_trace.iter().map(|r| r.data_energy).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Saliency {
    pub mask: PixelMask,
    /// Set when the gradient vanishes everywhere; the mask is then empty.
    pub zero_gradient: bool,
}

/// Max over channels of `|grad|`, one value per pixel.
pub fn saliency_map(gradient: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = gradient.chw()?;
    let mut s = vec![0.0f64; h * w];
    for ch in 0..c {
        for (o, &g) in s.iter_mut().zip(gradient.plane(ch)) {
            *o = o.max(g.abs());
        }
    }
    Ok(s)
}

/// Pixels strictly above the `percentile` value of `values`; zeros never pass.
pub fn threshold_percentile(values: &[f64], percentile: f64) -> Result<Vec<bool>> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::InvalidArgument(format!("percentile must be in (0, 100), got {percentile}")));
    }
    if values.is_empty() {
        return Err(Error::Empty("no saliency values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((percentile / 100.0 * values.len() as f64).floor() as usize).min(values.len() - 1);
    let t = sorted[idx];
    Ok(values.iter().map(|&v| v > t && v > 0.0).collect())
}

fn neighbors(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (i / w, i % w);
    [
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
    ]
    .into_iter()
    .flatten()
}

/// Zero regions not 4-connected to the border become ones.
pub fn fill_holes(bits: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for i in 0..h * w {
        let (y, x) = (i / w, i % w);
        if (y == 0 || x == 0 || y + 1 == h || x + 1 == w) && !bits[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbors(i, h, w) {
            if !bits[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    outside.iter().map(|&o| !o).collect()
}

/// Drops 4-connected components with fewer than `min_region` pixels.
pub fn drop_small_components(bits: &[bool], h: usize, w: usize, min_region: usize) -> Vec<bool> {
    let mut out = bits.to_vec();
    let mut seen = vec![false; h * w];
    for start in 0..h * w {
        if !bits[start] || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut k = 0;
        while k < comp.len() {
            let i = comp[k];
            k += 1;
            for j in neighbors(i, h, w) {
                if bits[j] && !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                }
            }
        }
        if comp.len() < min_region {
            comp.into_iter().for_each(|i| out[i] = false);
        }
    }
    out
}

/// Threshold, hole filling and small-region removal on a gradient field.
pub fn saliency_from_gradient(gradient: &Tensor, percentile: f64, min_region: usize) -> Result<Saliency> {
    let (_, h, w) = gradient.chw()?;
    let s = saliency_map(gradient)?;
    if s.iter().all(|&v| v == 0.0) {
        threshold_percentile(&s, percentile)?;
        return Ok(Saliency { mask: PixelMask::empty(h, w), zero_gradient: true });
    }
    let bits = threshold_percentile(&s, percentile)?;
    let bits = drop_small_components(&fill_holes(&bits, h, w), h, w, min_region);
    Ok(Saliency { mask: PixelMask::new(h, w, bits)?, zero_gradient: false })
}

/// Default `min_region`: 1% of the image area.
pub fn default_min_region(h: usize, w: usize) -> usize {
    ((h * w) as f64 * DEFAULT_MIN_REGION_FRACTION).round() as usize
}

/// Saliency of `d logit_class / d image` for a raw image.
pub fn saliency_mask(
    net: &Network,
    image: &Tensor,
    class: usize,
    stats: &ChannelStats,
    percentile: f64,
    min_region: usize,
) -> Result<Saliency> {
    if class >= net.class_count() {
        return Err(Error::InvalidArgument(format!("class {class} >= {}", net.class_count())));
    }
    let (_, g) = data_score_class(net, &whiten(image, stats)?, class, None)?;
    // chain rule through the whitening
    let mut grad = g;
    for (c, &sd) in stats.std.iter().enumerate() {
        grad.plane_mut(c).iter_mut().for_each(|v| *v /= sd);
    }
    saliency_from_gradient(&grad, percentile, min_region)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkSpec;

    fn setup() -> (Network, Tensor, ChannelStats) {
        let net = Network::init(NetworkSpec::toy(4), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::new(vec![3, 64, 64], (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let stats = ChannelStats::new(vec![0.5, 0.45, 0.4], vec![0.25, 0.3, 0.2]).unwrap();
        (net, img, stats)
    }

    #[test]
    fn context_prediction_trivial_masks() {
        let (net, img, stats) = setup();
        let plain = net.logits(&whiten(&img, &stats).unwrap(), None).unwrap();
        let ranked = predict_context_class(&net, &img, &PixelMask::empty(64, 64), &stats).unwrap();
        assert_eq!(ranked[0].0, plain.argmax());
        assert!(ranked.iter().all(|&(c, l)| l == plain.data()[c]));
        let mean = data::mean_image(&stats, 64, 64);
        let a = predict_context_class(&net, &img, &PixelMask::full(64, 64), &stats).unwrap();
        let b = predict_context_class(&net, &mean, &PixelMask::empty(64, 64), &stats).unwrap();
        assert_eq!(a.iter().map(|x| x.0).collect::<Vec<_>>(), b.iter().map(|x| x.0).collect::<Vec<_>>());
    }

    #[test]
    fn zero_iterations_return_the_input() {
        let (net, img, stats) = setup();
        let cfg = InversionConfig { iterations: 0, r_gamma: 0.0, ..Default::default() };
        let c = complete(&net, &img, &PixelMask::rect(64, 64, 20, 20, 16, 16), 1, None, &cfg, &stats, None).unwrap();
        assert!(c.image.bit_eq(&img));
        assert!(c.score_trace.is_empty());
    }

    #[test]
    fn outside_pixels_untouched_and_score_rises() {
        let (net, img, stats) = setup();
        let mask = PixelMask::rect(64, 64, 10, 30, 24, 20);
        let cfg = InversionConfig { iterations: 30, step_size: 0.5, ..Default::default() };
        let c = complete(&net, &img, &mask, 2, None, &cfg, &stats, None).unwrap();
        let hw = 64 * 64;
        for (i, (a, b)) in c.image.data().iter().zip(img.data()).enumerate() {
            if !mask.bits()[i % hw] {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert!(c.final_score > c.baseline_score, "{} vs {}", c.final_score, c.baseline_score);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let (net, img, stats) = setup();
        let r = complete(&net, &img, &PixelMask::empty(64, 64), 0, None, &InversionConfig::default(), &stats, None);
        assert!(matches!(r, Err(Error::Empty(_))));
    }

    #[test]
    fn zero_gradient_gives_empty_flagged_mask() {
        let s = saliency_from_gradient(&Tensor::zeros(&[3, 8, 8]), 95.0, 1).unwrap();
        assert!(s.zero_gradient && s.mask.is_empty());
        assert!(saliency_from_gradient(&Tensor::zeros(&[3, 8, 8]), 100.0, 1).is_err());
    }

    #[test]
    fn interior_hole_is_filled() {
        let mut g = Tensor::zeros(&[3, 10, 10]);
        for y in 3..8 {
            for x in 3..8 {
                if (y, x) != (5, 5) {
                    g.data_mut()[100 + y * 10 + x] = -2.0;
                }
            }
        }
        let s = saliency_from_gradient(&g, 50.0, 1).unwrap();
        assert!(s.mask.get(5, 5));
        assert_eq!(s.mask.count(), 25);
    }

    #[test]
    fn small_components_are_dropped() {
        let mut bits = vec![false; 100];
        bits[0] = true;
        for i in [44, 45, 54, 55] {
            bits[i] = true;
        }
        let out = drop_small_components(&bits, 10, 10, 2);
        assert!(!out[0] && out[44] && out[55]);
    }

    #[test]
    fn percentile_99_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..128 * 128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = threshold_percentile(&v.iter().map(|x: &f64| x.abs()).collect::<Vec<_>>(), 99.0).unwrap();
        let density = d.iter().filter(|&&b| b).count() as f64 / d.len() as f64;
        assert!((density - 0.01).abs() < 0.005, "{density}");
    }

    #[test]
    fn saliency_on_the_net_is_well_formed() {
        let (net, img, stats) = setup();
        let s = saliency_mask(&net, &img, 0, &stats, DEFAULT_PERCENTILE, default_min_region(64, 64)).unwrap();
        assert!(!s.zero_gradient);
        assert_eq!((s.mask.height, s.mask.width), (64, 64));
    }

    #[test]
    fn mask_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = PixelMask::rect(7, 9, 2, 3, 3, 10);
        m.save(dir.path().join("m.pgm")).unwrap();
        assert_eq!(PixelMask::load(dir.path().join("m.pgm")).unwrap(), m);
    }
}
