//! Images on disk and in memory.
//!
//! Pixel values live in `[0, 1]`. RGB images use binary PPM (`P6`), masks use
//! binary PGM (`P5`). A dataset directory holds the images plus `labels.txt`
//! with one `<file> <label>` line per image.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest standard deviation used for normalization.
pub const STD_EPSILON: f64 = 1e-6;

pub const LABEL_INDEX: &str = "labels.txt";

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, image: Tensor, label: usize) {
        self.names.push(name.into());
        self.images.push(image);
        self.labels.push(label);
    }

    /// Images carrying label `class`.
    pub fn of_class(&self, class: usize) -> Vec<&Tensor> {
        self.images
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::default();
        for &i in indices {
            out.push(self.names[i].clone(), self.images[i].clone(), self.labels[i]);
        }
        out
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let index = fs::read_to_string(dir.join(LABEL_INDEX))?;
        let mut out = Dataset::default();
        for (lineno, line) in index.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(file), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format(format!("{LABEL_INDEX}:{}: expected '<file> <label>'", lineno + 1)));
            };
            let label: usize = label
                .parse()
                .map_err(|_| Error::Format(format!("{LABEL_INDEX}:{}: bad label {label:?}", lineno + 1)))?;
            out.push(file, read_ppm(dir.join(file))?, label);
        }
        Ok(out)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut index = String::new();
        for ((name, img), label) in self.names.iter().zip(&self.images).zip(&self.labels) {
            write_ppm(dir.join(name), img)?;
            index.push_str(&format!("{name} {label}\n"));
        }
        fs::write(dir.join(LABEL_INDEX), index)?;
        Ok(())
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose std was below [`STD_EPSILON`] and got clamped.
    pub clamped: Vec<bool>,
}

impl ChannelStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::shape("channel stats", format!("{} means vs {} stds", mean.len(), std.len())));
        }
        let clamped = std.iter().map(|&s| !(s >= STD_EPSILON)).collect::<Vec<_>>();
        let std = std.into_iter().map(|s| if s >= STD_EPSILON { s } else { STD_EPSILON }).collect();
        Ok(ChannelStats { mean, std, clamped })
    }

    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            clamped: vec![false; channels],
        }
    }

    /// Whole-image statistics of a `[c, h, w]` tensor (population std).
    pub fn of_image(image: &Tensor) -> Result<Self> {
        Self::of_images(std::slice::from_ref(image))
    }

    /// Pooled statistics over every pixel of every image.
    pub fn of_images(images: &[Tensor]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Empty("no images for statistics".into()))?;
        let (c, _, _) = first.chw()?;
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for img in images {
            img.ensure_shape(first.shape(), "statistics image")?;
            for (ch, s) in sum.iter_mut().enumerate() {
                *s += img.plane(ch).iter().sum::<f64>();
            }
            count += img.plane(0).len();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c];
        for img in images {
            for (ch, s) in sq.iter_mut().enumerate() {
                *s += img.plane(ch).iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        ChannelStats::new(mean, std)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|&c| c)
    }

    /// `mean=` and `std=` lines with comma-separated values.
    pub fn to_key_values(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        format!("mean={}\nstd={}\n", join(&self.mean), join(&self.std))
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let (mut mean, mut std) = (None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("stats: expected key=value, got {line:?}")))?;
            let vals = v
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Format(format!("stats: bad number {x:?}"))))
                .collect::<Result<Vec<_>>>()?;
            match k.trim() {
                "mean" => mean = Some(vals),
                "std" => std = Some(vals),
                other => return Err(Error::Format(format!("stats: unknown key {other:?}"))),
            }
        }
        match (mean, std) {
            (Some(m), Some(s)) => ChannelStats::new(m, s),
            _ => Err(Error::Format("stats: need both mean and std".into())),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_key_values())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(&fs::read_to_string(path)?)
    }
}

/// Constant image whose channels hold `stats.mean`.
pub fn mean_image(stats: &ChannelStats, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(&[stats.channels(), h, w]);
    for (c, &m) in stats.mean.iter().enumerate() {
        t.plane_mut(c).fill(m);
    }
    t
}

fn parse_pnm_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    // magic, width, height, maxval separated by whitespace, comments allowed
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("pnm: truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != magic {
        return Err(Error::Format(format!("pnm: expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Format(format!("pnm: bad header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(Error::Format(format!("pnm: unsupported {w}x{h} maxval {maxval}")));
    }
    // exactly one whitespace byte before the raster
    Ok((w, h, i + 1))
}

/// Decodes a binary P6 image into `[3, h, w]` with values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, off) = parse_pnm_header(bytes, "P6")?;
    let raster = bytes.get(off..).unwrap_or(&[]);
    if raster.len() != w * h * 3 {
        return Err(Error::Format(format!("ppm: expected {} raster bytes, got {}", w * h * 3, raster.len())));
    }
    let mut t = Tensor::zeros(&[3, h, w]);
    let d = t.data_mut();
    for (p, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            d[c * h * w + p] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(t)
}

/// Encodes `[3, h, w]` as P6, clipping to `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape("ppm", format!("expected 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for ch in 0..3 {
            out.push(to_byte(image.data()[ch * h * w + p]));
        }
    }
    Ok(out)
}

/// Decodes a binary P5 image into `[h, w]` values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, off) = parse_pnm_header(bytes, "P5")?;
    let raster = bytes.get(off..).unwrap_or(&[]);
    if raster.len() != w * h {
        return Err(Error::Format(format!("pgm: expected {} raster bytes, got {}", w * h, raster.len())));
    }
    Tensor::new(vec![h, w], raster.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn encode_pgm(plane: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match plane.shape() {
        &[h, w] => (h, w),
        s => return Err(Error::shape("pgm", format!("expected [h, w], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, plane: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(plane)?)?;
    Ok(())
}

/// Synthetic outdoor scenes: a class-specific object shape standing on a
/// class-correlated ground/sky context. Each class has [`STYLES_PER_CLASS`]
/// styles (object scale and palette variant).
pub mod synth {
    use super::*;

    pub const STYLES_PER_CLASS: usize = 3;
    pub const MAX_CLASSES: usize = 6;
    pub const SIZE: usize = 64;

    #[derive(Debug, Clone)]
    pub struct SceneSet {
        pub dataset: Dataset,
        pub styles: Vec<usize>,
    }

    // ground colors carry the context signal
    const GROUND: [[f64; 3]; MAX_CLASSES] = [
        [0.30, 0.55, 0.20],
        [0.80, 0.70, 0.45],
        [0.85, 0.88, 0.92],
        [0.35, 0.25, 0.18],
        [0.20, 0.40, 0.65],
        [0.70, 0.35, 0.25],
    ];
    const SKY: [[f64; 3]; 3] = [[0.55, 0.75, 0.95], [0.85, 0.80, 0.70], [0.60, 0.62, 0.68]];
    const OBJECT: [[[f64; 3]; 2]; MAX_CLASSES] = [
        [[0.90, 0.50, 0.10], [0.95, 0.75, 0.20]],
        [[0.60, 0.20, 0.20], [0.45, 0.10, 0.35]],
        [[0.15, 0.15, 0.20], [0.30, 0.30, 0.45]],
        [[0.95, 0.90, 0.30], [0.85, 0.95, 0.55]],
        [[0.90, 0.90, 0.85], [0.75, 0.80, 0.70]],
        [[0.20, 0.60, 0.30], [0.10, 0.45, 0.45]],
    ];

    fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match class {
            0 => dx * dx + dy * dy <= r * r,
            1 => ax <= r * 0.85 && ay <= r * 0.85,
            2 => dy <= r * 0.8 && dy >= -r && ax <= (dy + r) * 0.6,
            3 => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
            }
            4 => (ax <= r * 0.3 && ay <= r) || (ay <= r * 0.3 && ax <= r),
            _ => ax + ay <= r,
        }
    }

    /// Renders one scene. Style selects object radius and palette variant.
    pub fn render(class: usize, style: usize, rng: &mut ChaCha8Rng) -> Tensor {
        assert!(class < MAX_CLASSES && style < STYLES_PER_CLASS);
        let n = SIZE;
        let horizon: f64 = rng.gen_range(26.0..38.0);
        let sky = SKY[rng.gen_range(0..SKY.len())];
        let ground = GROUND[class];
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.06..0.06));
        let light = rng.gen_range(0.85..1.1);
        // low-frequency ground texture
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.05..0.4),
                    rng.gen_range(0.05..0.4),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.02..0.06),
                )
            })
            .collect();
        let radius = [7.0, 11.0, 15.0][style] + rng.gen_range(-1.0..1.0);
        let palette = OBJECT[class][style % 2];
        let cx = rng.gen_range(24.0..40.0);
        let cy = (horizon + rng.gen_range(-4.0..6.0)).clamp(radius, n as f64 - radius);
        let shade_dir = rng.gen_range(-1.0..1.0);

        let mut img = Tensor::zeros(&[3, n, n]);
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = (x as f64, y as f64);
                let mut px = if fy < horizon {
                    let t = fy / horizon;
                    std::array::from_fn::<f64, 3, _>(|c| sky[c] * (1.05 - 0.25 * t))
                } else {
                    let tex: f64 = waves
                        .iter()
                        .map(|&(a, b, ph, amp)| amp * (a * fx + b * fy + ph).sin())
                        .sum();
                    std::array::from_fn::<f64, 3, _>(|c| ground[c] + jitter[c] + tex)
                };
                let (dx, dy) = (fx - cx, fy - cy);
                if inside(class, dx, dy, radius) {
                    let shade = 1.0 + 0.25 * shade_dir * dx / radius - 0.15 * dy / radius;
                    px = std::array::from_fn(|c| palette[c] * shade);
                } else if inside(class, dx, dy, radius + 1.2) {
                    px = std::array::from_fn(|c| palette[c] * 0.45);
                }
                for (c, v) in px.iter().enumerate() {
                    let noise = rng.gen_range(-0.02..0.02);
                    img.data_mut()[(c * n + y) * n + x] = (v * light + noise).clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    /// `per_class` scenes for each of `classes` classes, styles cycling.
    pub fn scenes(classes: usize, per_class: usize, seed: u64) -> Result<SceneSet> {
        if classes == 0 || classes > MAX_CLASSES {
            return Err(Error::InvalidArgument(format!("classes must be in 1..={MAX_CLASSES}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dataset = Dataset::default();
        let mut styles = Vec::new();
        for i in 0..per_class {
            for class in 0..classes {
                let style = (i + class) % STYLES_PER_CLASS;
                let img = render(class, style, &mut rng);
                dataset.push(format!("img_{:05}.ppm", dataset.len()), img, class);
                styles.push(style);
            }
        }
        Ok(SceneSet { dataset, styles })
    }
}
