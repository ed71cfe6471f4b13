//! Natural-patch database and exact nearest-neighbor patch matching.
//!
//! Patches are compared after *global* normalization: each channel of a patch
//! is standardized with the mean and standard deviation of the whole image it
//! came from. Distances are squared Euclidean on normalized patches, ties go
//! to the lowest database index.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{Reader, Writer};
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Tensor;

pub const DB_MAGIC: &[u8; 4] = b"NPPD";
pub const DB_VERSION: u16 = 1;

/// Ratio of the stored center crop to the receptive field (67 / 195).
pub const CENTER_CROP_RATIO: f64 = 67.0 / 195.0;

/// `(patch - mean) / std` per channel. The flag reports whether any channel
/// std was clamped to [`crate::data::STD_EPSILON`].
pub fn normalize_patch(patch: &Tensor, stats: &ChannelStats) -> Result<(Tensor, bool)> {
    let (c, _, _) = patch.chw()?;
    if c != stats.channels() {
        return Err(Error::shape("normalize_patch", format!("{c} channels vs {} stats", stats.channels())));
    }
    let was_clamped = stats.any_clamped();
    let stats = ChannelStats::new(stats.mean.clone(), stats.std.clone())?;
    let mut out = patch.clone();
    for ch in 0..c {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        for v in out.plane_mut(ch) {
            *v = (*v - m) / s;
        }
    }
    Ok((out, was_clamped || stats.any_clamped()))
}

/// Normalizes a whole image by its own statistics.
pub fn normalize_image(image: &Tensor) -> Result<(Tensor, ChannelStats)> {
    let stats = ChannelStats::of_image(image)?;
    let (n, _) = normalize_patch(image, &stats)?;
    Ok((n, stats))
}

/// Top-left corners of a dense patch grid. Positions step by `stride`; the
/// last row/column is added when the stride does not land on the border, so
/// every pixel is covered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

fn positions(len: usize, patch: usize, stride: usize, cover: bool) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=len - patch).step_by(stride).collect();
    if cover && *v.last().expect("len >= patch") != len - patch {
        v.push(len - patch);
    }
    v
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize, stride: usize) -> Result<Self> {
        Self::build(height, width, patch, stride, true)
    }

    /// Plain strided grid without the extra border row/column.
    pub fn strided(height: usize, width: usize, patch: usize, stride: usize) -> Result<Self> {
        Self::build(height, width, patch, stride, false)
    }

    fn build(height: usize, width: usize, patch: usize, stride: usize, cover: bool) -> Result<Self> {
        if patch == 0 || stride == 0 || patch > height || patch > width {
            return Err(Error::InvalidArgument(format!(
                "patch {patch} / stride {stride} invalid for {height}x{width}"
            )));
        }
        Ok(PatchGrid {
            height,
            width,
            patch,
            rows: positions(height, patch, stride, cover),
            cols: positions(width, patch, stride, cover),
        })
    }

    /// Dense grid with 50% overlap used by the patch regularizer.
    pub fn half_overlap(height: usize, width: usize, patch: usize) -> Result<Self> {
        Self::new(height, width, patch, (patch / 2).max(1))
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().flat_map(move |&r| self.cols.iter().map(move |&c| (r, c)))
    }
}

/// Copies the `[c, patch, patch]` block at `(row, col)` into `out`, channel-major.
pub fn extract_patch(image: &[f64], (c, h, w): (usize, usize, usize), row: usize, col: usize, patch: usize, out: &mut [f64]) {
    debug_assert!(row + patch <= h && col + patch <= w);
    let mut k = 0;
    for ch in 0..c {
        for dy in 0..patch {
            let base = (ch * h + row + dy) * w + col;
            out[k..k + patch].copy_from_slice(&image[base..base + patch]);
            k += patch;
        }
    }
}

/// All grid patches of an already-normalized image, flattened.
pub fn grid_patches(normalized: &Tensor, grid: &PatchGrid) -> Result<Vec<f64>> {
    let dims = normalized.chw()?;
    if dims.1 != grid.height || dims.2 != grid.width {
        return Err(Error::shape("patch grid", format!("grid for {}x{}, image {:?}", grid.height, grid.width, dims)));
    }
    let pd = dims.0 * grid.patch * grid.patch;
    let mut out = vec![0.0; grid.len() * pd];
    for (i, (r, c)) in grid.iter().enumerate() {
        extract_patch(normalized.data(), dims, r, c, grid.patch, &mut out[i * pd..(i + 1) * pd]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub image_id: u32,
    pub row: u16,
    pub col: u16,
}

/// Pairs of (last-pool feature, normalized center patch). Class databases
/// built from raw patches have `feature_dim == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDatabase {
    channels: usize,
    patch_size: usize,
    feature_dim: usize,
    features: Vec<f64>,
    patches: Vec<f64>,
    provenance: Vec<Provenance>,
}

impl PatchDatabase {
    pub fn empty(channels: usize, patch_size: usize, feature_dim: usize) -> Self {
        PatchDatabase {
            channels,
            patch_size,
            feature_dim,
            features: Vec::new(),
            patches: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn push(&mut self, feature: &[f64], patch: &[f64], provenance: Provenance) -> Result<()> {
        if feature.len() != self.feature_dim || patch.len() != self.patch_dim() {
            return Err(Error::shape(
                "patch database entry",
                format!(
                    "feature {} / patch {} vs database {} / {}",
                    feature.len(),
                    patch.len(),
                    self.feature_dim,
                    self.patch_dim()
                ),
            ));
        }
        self.features.extend_from_slice(feature);
        self.patches.extend_from_slice(patch);
        self.provenance.push(provenance);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let d = self.patch_dim();
        &self.patches[i * d..(i + 1) * d]
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn provenance(&self, i: usize) -> Provenance {
        self.provenance[i]
    }

    /// Entries `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PatchDatabase {
        let mut out = PatchDatabase::empty(self.channels, self.patch_size, self.feature_dim);
        for &i in indices {
            out.push(self.feature(i), self.patch(i), self.provenance(i))
                .expect("same layout");
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::header(DB_MAGIC, DB_VERSION);
        w.usize32(self.len())?;
        w.usize32(self.channels)?;
        w.usize32(self.feature_dim)?;
        w.usize32(self.patch_size)?;
        for i in 0..self.len() {
            w.f64s(self.feature(i));
            w.f64s(self.patch(i));
            let p = self.provenance[i];
            w.u32(p.image_id);
            w.u16(p.row);
            w.u16(p.col);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, DB_MAGIC, DB_VERSION, "patch database")?;
        let count = r.usize32()?;
        let channels = r.usize32()?;
        let feature_dim = r.usize32()?;
        let patch_size = r.usize32()?;
        if channels == 0 || patch_size == 0 {
            return Err(Error::Format("patch database: zero channels or patch size".into()));
        }
        let mut db = PatchDatabase::empty(channels, patch_size, feature_dim);
        for _ in 0..count {
            let f = r.f64s(feature_dim)?;
            let p = r.f64s(db.patch_dim())?;
            let prov = Provenance { image_id: r.u32()?, row: r.u16()?, col: r.u16()? };
            db.push(&f, &p, prov)?;
        }
        r.finish()?;
        Ok(db)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Default center-crop side for a receptive field of `rf` pixels.
pub fn default_patch_size(rf: usize) -> usize {
    ((rf as f64 * CENTER_CROP_RATIO).round() as usize).max(1)
}

/// Top-left pixel of the center crop for pool unit `(i, j)`, shifted inside the image.
fn crop_origin(net: &Network, i: usize, j: usize, patch: usize) -> Result<(usize, usize)> {
    let geom = net.spec().rf_geometry(net.last_pool())?;
    let (r, c) = geom.center_crop(i, j, patch);
    let [_, h, w] = net.spec().input;
    let clampi = |v: isize, len: usize| v.clamp(0, (len - patch) as isize) as usize;
    Ok((clampi(r, h), clampi(c, w)))
}

/// Pairs every last-pool feature of every image with the normalized center
/// crop of its receptive field, then subsamples uniformly to `capacity`.
/// `images` are network inputs.
pub fn build_database(
    images: &[Tensor],
    net: &Network,
    patch_size: usize,
    capacity: usize,
    seed: u64,
) -> Result<PatchDatabase> {
    if images.is_empty() {
        return Err(Error::Empty("no images for the patch database".into()));
    }
    if capacity == 0 {
        return Err(Error::InvalidArgument("database capacity must be positive".into()));
    }
    let geom = net.spec().rf_geometry(net.last_pool())?;
    let [channels, h, w] = net.spec().input;
    if patch_size == 0 || patch_size >= geom.size || patch_size > h || patch_size > w {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} must be smaller than the receptive field {}",
            geom.size
        )));
    }
    let pool = net.layout().pool5_shape().to_vec();
    let (fc, gh, gw) = (pool[0], pool[1], pool[2]);

    let per_image: Vec<PatchDatabase> = images
        .par_iter()
        .enumerate()
        .map(|(id, img)| {
            let trace = net.forward_to(img, net.last_pool(), None)?;
            let p5 = trace.activation(net.last_pool());
            let (norm, _) = normalize_image(img)?;
            let mut db = PatchDatabase::empty(channels, patch_size, fc);
            let mut feat = vec![0.0; fc];
            let mut patch = vec![0.0; db.patch_dim()];
            for i in 0..gh {
                for j in 0..gw {
                    for (k, f) in feat.iter_mut().enumerate() {
                        *f = p5.data()[(k * gh + i) * gw + j];
                    }
                    let (r, c) = crop_origin(net, i, j, patch_size)?;
                    extract_patch(norm.data(), (channels, h, w), r, c, patch_size, &mut patch);
                    db.push(&feat, &patch, Provenance {
                        image_id: id as u32,
                        row: r as u16,
                        col: c as u16,
                    })?;
                }
            }
            Ok(db)
        })
        .collect::<Result<_>>()?;

    let mut all = PatchDatabase::empty(channels, patch_size, fc);
    for db in &per_image {
        for i in 0..db.len() {
            all.push(db.feature(i), db.patch(i), db.provenance(i))?;
        }
    }
    if all.len() <= capacity {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, all.len(), capacity).into_vec();
    keep.sort_unstable();
    Ok(all.select(&keep))
}

/// Densely samples normalized patches from images of one class (no features).
pub fn build_class_database(images: &[&Tensor], patch_size: usize, stride: usize) -> Result<PatchDatabase> {
    let first = images.first().ok_or_else(|| Error::Empty("no images for the class database".into()))?;
    let (c, h, w) = first.chw()?;
    let grid = PatchGrid::strided(h, w, patch_size, stride)?;
    let mut db = PatchDatabase::empty(c, patch_size, 0);
    let pd = db.patch_dim();
    for (id, img) in images.iter().enumerate() {
        img.ensure_shape(first.shape(), "class database image")?;
        let (norm, _) = normalize_image(img)?;
        let patches = grid_patches(&norm, &grid)?;
        for (k, (r, col)) in grid.iter().enumerate() {
            db.push(&[], &patches[k * pd..(k + 1) * pd], Provenance {
                image_id: id as u32,
                row: r as u16,
                col: col as u16,
            })?;
        }
    }
    Ok(db)
}

/// Matched database entry (and squared distance) for every grid location.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestNeighborField {
    pub grid: PatchGrid,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NearestNeighborField {
    pub fn total_distance(&self) -> f64 {
        self.distances.iter().sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Same summation order as [`sq_dist`]; gives up once the partial sum exceeds
/// `bound`. Partial sums of non-negative terms never decrease, so an abandoned
/// candidate is strictly worse than `bound`.
fn sq_dist_bounded(a: &[f64], b: &[f64], bound: f64) -> Option<f64> {
    const CHUNK: usize = 16;
    let mut acc = 0.0;
    for (ca, cb) in a.chunks(CHUNK).zip(b.chunks(CHUNK)) {
        for (x, y) in ca.iter().zip(cb) {
            acc += (x - y) * (x - y);
        }
        if acc > bound {
            return None;
        }
    }
    Some(acc)
}

fn query_patches(db: &PatchDatabase, estimate: &Tensor, stats: &ChannelStats, grid: &PatchGrid) -> Result<Vec<f64>> {
    let (c, _, _) = estimate.chw()?;
    if c != db.channels() {
        return Err(Error::shape("match", format!("estimate has {c} channels, database {}", db.channels())));
    }
    let (norm, _) = normalize_patch(estimate, stats)?;
    grid_patches(&norm, grid)
}

fn check_match_args(db: &PatchDatabase, grid: &PatchGrid) -> Result<()> {
    if db.is_empty() {
        return Err(Error::Empty("patch database has no entries".into()));
    }
    if grid.patch != db.patch_size() {
        return Err(Error::shape("match", format!("grid patch {} vs database {}", grid.patch, db.patch_size())));
    }
    Ok(())
}

/// Reference exhaustive search.
pub fn match_brute_force(
    db: &PatchDatabase,
    estimate: &Tensor,
    stats: &ChannelStats,
    grid: &PatchGrid,
) -> Result<NearestNeighborField> {
    check_match_args(db, grid)?;
    let q = query_patches(db, estimate, stats, grid)?;
    let pd = db.patch_dim();
    let mut indices = Vec::with_capacity(grid.len());
    let mut distances = Vec::with_capacity(grid.len());
    for qp in q.chunks_exact(pd) {
        let mut best = (f64::INFINITY, 0);
        for i in 0..db.len() {
            let d = sq_dist(qp, db.patch(i));
            if d < best.0 {
                best = (d, i);
            }
        }
        distances.push(best.0);
        indices.push(best.1);
    }
    Ok(NearestNeighborField { grid: grid.clone(), indices, distances })
}

/// Database entries sorted by patch norm, for norm-bound pruning.
pub struct MatchIndex<'a> {
    db: &'a PatchDatabase,
    order: Vec<usize>,
    norms: Vec<f64>,
}

impl<'a> MatchIndex<'a> {
    pub fn new(db: &'a PatchDatabase) -> Self {
        let raw: Vec<f64> = (0..db.len()).map(|i| db.patch(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let mut order: Vec<usize> = (0..db.len()).collect();
        order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]).then(a.cmp(&b)));
        let norms = order.iter().map(|&i| raw[i]).collect();
        MatchIndex { db, order, norms }
    }

    /// Exact nearest entry: `(||a|| - ||b||)^2` lower-bounds the distance, so
    /// the scan walks outward from the query norm and stops once the bound
    /// passes the best distance.
    fn nearest(&self, q: &[f64]) -> (usize, f64) {
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let start = self.norms.partition_point(|&n| n < qn);
        let mut best = (f64::INFINITY, usize::MAX);
        let (mut lo, mut hi) = (start, start);
        let slack = |b: f64| b * (1.0 + 1e-9) + 1e-12;
        let consider = |k: usize, best: &mut (f64, usize)| {
            let idx = self.order[k];
            if let Some(d) = sq_dist_bounded(q, self.db.patch(idx), best.0) {
                if d < best.0 || (d == best.0 && idx < best.1) {
                    *best = (d, idx);
                }
            }
        };
        loop {
            let down = if lo > 0 { Some((qn - self.norms[lo - 1]).powi(2)) } else { None };
            let up = if hi < self.norms.len() { Some((self.norms[hi] - qn).powi(2)) } else { None };
            let bound = slack(best.0);
            match (down, up) {
                (Some(d), Some(u)) if d <= u && d <= bound => {
                    lo -= 1;
                    consider(lo, &mut best);
                }
                (Some(d), _) if d <= bound && up.is_none_or(|u| u > bound) => {
                    lo -= 1;
                    consider(lo, &mut best);
                }
                (_, Some(u)) if u <= bound => {
                    consider(hi, &mut best);
                    hi += 1;
                }
                _ => break,
            }
        }
        (best.1, best.0)
    }

    pub fn match_image(&self, estimate: &Tensor, stats: &ChannelStats, grid: &PatchGrid) -> Result<NearestNeighborField> {
        check_match_args(self.db, grid)?;
        let q = query_patches(self.db, estimate, stats, grid)?;
        let pd = self.db.patch_dim();
        let found: Vec<(usize, f64)> = q.par_chunks_exact(pd).map(|qp| self.nearest(qp)).collect();
        Ok(NearestNeighborField {
            grid: grid.clone(),
            indices: found.iter().map(|f| f.0).collect(),
            distances: found.iter().map(|f| f.1).collect(),
        })
    }
}

/// Nearest normalized database patch for every grid location of `estimate`.
pub fn match_patches(
    db: &PatchDatabase,
    estimate: &Tensor,
    stats: &ChannelStats,
    grid: &PatchGrid,
) -> Result<NearestNeighborField> {
    MatchIndex::new(db).match_image(estimate, stats, grid)
}

/// Averages the matched patches, de-normalized with `stats`, into an image.
/// Pixels not covered by any patch take the channel mean.
pub fn warp_visualization(field: &NearestNeighborField, db: &PatchDatabase, stats: &ChannelStats) -> Result<Tensor> {
    let g = &field.grid;
    if field.indices.len() != g.len() {
        return Err(Error::shape("warp", format!("{} matches for {} grid locations", field.indices.len(), g.len())));
    }
    if g.patch != db.patch_size() || stats.channels() != db.channels() {
        return Err(Error::shape("warp", "field, database and stats disagree on patch layout"));
    }
    let placed: Vec<((usize, usize), &[f64])> = g.iter().zip(&field.indices).map(|(pos, &i)| (pos, db.patch(i))).collect();
    average_patches(&placed, db.channels(), g.height, g.width, g.patch, stats)
}

fn average_patches(
    placed: &[((usize, usize), &[f64])],
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    stats: &ChannelStats,
) -> Result<Tensor> {
    let mut acc = vec![0.0; c * h * w];
    let mut count = vec![0u32; h * w];
    for &((r, col), patch) in placed {
        for dy in 0..p {
            for dx in 0..p {
                count[(r + dy) * w + col + dx] += 1;
            }
        }
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    acc[(ch * h + r + dy) * w + col + dx] += patch[(ch * p + dy) * p + dx];
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        let plane = out.plane_mut(ch);
        for (k, v) in plane.iter_mut().enumerate() {
            let n = count[k];
            *v = if n == 0 { m } else { m + s * acc[ch * h * w + k] / f64::from(n) };
        }
    }
    Ok(out)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Patches retrieved for a target last-pool feature map.
#[derive(Debug, Clone)]
pub struct FeatureRetrieval {
    /// Union of retrieved entries (the per-target patch prior database).
    pub database: PatchDatabase,
    /// Average of the k retrieved patches at every pool location.
    pub warped: Tensor,
}

/// For each pool location of `target` (shape `[channels, gh, gw]`), finds the
/// `k` database entries with the closest cosine-normalized features.
pub fn retrieve_for_feature(
    db: &PatchDatabase,
    net: &Network,
    target: &Tensor,
    k: usize,
    stats: &ChannelStats,
) -> Result<FeatureRetrieval> {
    if db.is_empty() {
        return Err(Error::Empty("patch database has no entries".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    target.ensure_shape(net.layout().pool5_shape(), "retrieval target")?;
    let (fc, gh, gw) = target.chw()?;
    if db.feature_dim() != fc {
        return Err(Error::shape("retrieval", format!("database features {} vs target {fc}", db.feature_dim())));
    }
    let keys: Vec<Vec<f64>> = (0..db.len()).map(|i| unit(db.feature(i))).collect();
    let [_, h, w] = net.spec().input;
    let p = db.patch_size();
    let locations: Vec<(usize, usize)> = (0..gh).flat_map(|i| (0..gw).map(move |j| (i, j))).collect();
    let hits: Vec<Vec<usize>> = locations
        .par_iter()
        .map(|&(i, j)| {
            let q: Vec<f64> = (0..fc).map(|c| target.data()[(c * gh + i) * gw + j]).collect();
            let q = unit(&q);
            let mut scored: Vec<(f64, usize)> = keys.iter().enumerate().map(|(e, key)| (sq_dist(&q, key), e)).collect();
            let kk = k.min(scored.len());
            scored.select_nth_unstable_by(kk - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut top: Vec<(f64, usize)> = scored[..kk].to_vec();
            top.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            top.into_iter().map(|t| t.1).collect()
        })
        .collect();

    let pd = db.patch_dim();
    let mut averaged: Vec<((usize, usize), Vec<f64>)> = Vec::with_capacity(locations.len());
    for (&(i, j), idx) in locations.iter().zip(&hits) {
        let mut mean = vec![0.0; pd];
        for &e in idx {
            for (m, v) in mean.iter_mut().zip(db.patch(e)) {
                *m += v / idx.len() as f64;
            }
        }
        averaged.push((crop_origin(net, i, j, p)?, mean));
    }
    let placed: Vec<((usize, usize), &[f64])> = averaged.iter().map(|(pos, v)| (*pos, v.as_slice())).collect();
    let warped = average_patches(&placed, db.channels(), h, w, p, stats)?;

    let mut used: Vec<usize> = hits.into_iter().flatten().collect();
    used.sort_unstable();
    used.dedup();
    Ok(FeatureRetrieval { database: db.select(&used), warped })
}
