//! Feature inversion and class visualization by gradient descent.
//!
//! The optimization variable is the *whitened* network input `x`. Energies:
//!
//! * feature objective: `||phi_k(x) - phi0||^2 / ||phi0||^2 + R(x)`
//! * class objective: `-logit_t(x) + R(x)` (score ascent, penalty descent)
//!
//! with `R(x) = a ||x||^2 + b ||grad x||^2 + g sum_p ||norm(x)_p - D_p||^2`.
//! `D_p` are nearest database patches, re-matched every few iterations and
//! held fixed in between.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ChannelStats, STD_EPSILON};
use crate::error::{Error, Result};
use crate::net::{MaskSet, Network};
use crate::patch::{match_patches, NearestNeighborField, PatchDatabase, PatchGrid};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Mean,
    MeanNoise,
    Given,
    ChannelShuffled,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(InitMode::Mean),
            "mean+noise" => Ok(InitMode::MeanNoise),
            "given" | "given-image" => Ok(InitMode::Given),
            "shuffled" | "channel-shuffled" => Ok(InitMode::ChannelShuffled),
            _ => Err(Error::InvalidArgument(format!(
                "unknown init mode {s:?} (mean, mean+noise, given, channel-shuffled)"
            ))),
        }
    }
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::Mean => "mean",
            InitMode::MeanNoise => "mean+noise",
            InitMode::Given => "given",
            InitMode::ChannelShuffled => "channel-shuffled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub r_alpha: f64,
    pub r_beta: f64,
    pub r_gamma: f64,
    pub step_size: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub rematch_interval: usize,
    pub seed: u64,
    pub init_mode: InitMode,
    /// Half-width of the uniform init noise, in whitened units.
    pub noise: f64,
    /// Source channel feeding each output channel for `ChannelShuffled`.
    pub shuffle: Vec<usize>,
    /// Patch side for the prior; 0 means the database's patch size.
    pub patch_stride: usize,
    pub divergence_limit: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            r_alpha: 1e-4,
            r_beta: 1e-3,
            r_gamma: 0.0,
            step_size: 5.0,
            momentum: 0.9,
            iterations: 500,
            rematch_interval: 20,
            seed: 0,
            init_mode: InitMode::MeanNoise,
            noise: 0.1,
            shuffle: vec![2, 0, 1],
            patch_stride: 0,
            divergence_limit: 1e12,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {v:?}")))
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("r_alpha", self.r_alpha), ("r_beta", self.r_beta), ("r_gamma", self.r_gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidArgument(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.rematch_interval == 0 {
            return Err(Error::InvalidArgument("rematch_interval must be >= 1".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(self.divergence_limit > 0.0) {
            return Err(Error::InvalidArgument("divergence_limit must be positive".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "r_alpha" => self.r_alpha = parse_num(key, v)?,
            "r_beta" => self.r_beta = parse_num(key, v)?,
            "r_gamma" => self.r_gamma = parse_num(key, v)?,
            "step_size" => self.step_size = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "rematch_interval" => self.rematch_interval = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "init_mode" => self.init_mode = v.parse()?,
            "noise" => self.noise = parse_num(key, v)?,
            "shuffle" => {
                self.shuffle = v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?;
            }
            "patch_stride" => self.patch_stride = parse_num(key, v)?,
            "divergence_limit" => self.divergence_limit = parse_num(key, v)?,
            other => return Err(Error::InvalidArgument(format!("unknown inversion setting {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    /// Keys outside this config are returned untouched for the caller.
    pub fn parse_with_extra(text: &str) -> Result<(Self, BTreeMap<String, String>)> {
        let mut cfg = InversionConfig::default();
        let mut extra = BTreeMap::new();
        for (key, value) in parse_key_values(text)? {
            match cfg.set(&key, &value) {
                Err(Error::InvalidArgument(msg)) if msg.starts_with("unknown inversion setting") => {
                    extra.insert(key, value);
                }
                r => r?,
            }
        }
        cfg.validate()?;
        Ok((cfg, extra))
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let shuffle: Vec<String> = self.shuffle.iter().map(|c| c.to_string()).collect();
        for (k, v) in [
            ("r_alpha", self.r_alpha.to_string()),
            ("r_beta", self.r_beta.to_string()),
            ("r_gamma", self.r_gamma.to_string()),
            ("step_size", self.step_size.to_string()),
            ("momentum", self.momentum.to_string()),
            ("iterations", self.iterations.to_string()),
            ("rematch_interval", self.rematch_interval.to_string()),
            ("seed", self.seed.to_string()),
            ("init_mode", self.init_mode.name().to_string()),
            ("noise", self.noise.to_string()),
            ("shuffle", shuffle.join(",")),
            ("patch_stride", self.patch_stride.to_string()),
            ("divergence_limit", self.divergence_limit.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

impl FromStr for InversionConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = InversionConfig::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits a `key=value` document into ordered pairs.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn whiten(image: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let (c, _, _) = image.chw()?;
    if c != stats.channels() {
        return Err(Error::shape("whiten", format!("{c} channels vs {} stats", stats.channels())));
    }
    let mut out = image.clone();
    for ch in 0..c {
        let (m, s) = (stats.mean[ch], stats.std[ch].max(STD_EPSILON));
        out.plane_mut(ch).iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

pub fn unwhiten(image: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let (c, _, _) = image.chw()?;
    if c != stats.channels() {
        return Err(Error::shape("unwhiten", format!("{c} channels vs {} stats", stats.channels())));
    }
    let mut out = image.clone();
    for ch in 0..c {
        let (m, s) = (stats.mean[ch], stats.std[ch].max(STD_EPSILON));
        out.plane_mut(ch).iter_mut().for_each(|v| *v = *v * s + m);
    }
    Ok(out)
}

/// `||a - b|| / ||a||`.
pub fn relative_l2(original: &Tensor, estimate: &Tensor) -> Result<f64> {
    if !original.same_shape(estimate) {
        return Err(Error::shape("relative_l2", format!("{:?} vs {:?}", original.shape(), estimate.shape())));
    }
    let n = original.norm();
    if n == 0.0 {
        return Err(Error::InvalidArgument("relative_l2: original image is zero".into()));
    }
    Ok(original.sub(estimate)?.norm() / n)
}

/// Relative feature reconstruction energy at `layer`, with its input gradient.
pub fn data_energy_inversion(net: &Network, image: &Tensor, layer: usize, phi0: &Tensor) -> Result<(f64, Tensor)> {
    if layer >= net.spec().layers.len() {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
    }
    let denom = phi0.norm_sq();
    if denom == 0.0 {
        return Err(Error::InvalidArgument("target feature is zero".into()));
    }
    let trace = net.forward_to(image, layer, None)?;
    let diff = trace.activation(layer).sub(phi0)?;
    let energy = diff.norm_sq() / denom;
    let grad = net.backward_from(&trace, layer, &diff.scale(2.0 / denom), None)?;
    Ok((energy, grad))
}

/// Logit `t` and its input gradient under optional mask overrides.
pub fn data_score_class(net: &Network, image: &Tensor, class: usize, overrides: Option<&MaskSet>) -> Result<(f64, Tensor)> {
    if class >= net.class_count() {
        return Err(Error::InvalidArgument(format!("class {class} >= class count {}", net.class_count())));
    }
    let trace = net.forward(image, overrides)?;
    let logits = trace.logits().expect("full pass");
    let score = logits.data()[class];
    let mut onehot = Tensor::zeros(logits.shape());
    onehot.data_mut()[class] = 1.0;
    let grad = net.backward_to_input(&trace, &onehot)?;
    Ok((score, grad))
}

/// Per-term regularizer energies.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RegTerms {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl RegTerms {
    pub fn total(&self) -> f64 {
        self.alpha + self.beta + self.gamma
    }
}

/// Patch-prior term `sum_p ||norm(x)_p - D_p||^2` and its gradient through
/// the whole-image per-channel normalization.
pub fn patch_term(image: &Tensor, db: &PatchDatabase, field: &NearestNeighborField) -> Result<(f64, Tensor)> {
    let (c, h, w) = image.chw()?;
    let g = &field.grid;
    if g.height != h || g.width != w || g.patch != db.patch_size() || c != db.channels() {
        return Err(Error::shape("patch term", "field, database and image disagree"));
    }
    if field.indices.len() != g.len() {
        return Err(Error::shape("patch term", "field size does not match its grid"));
    }
    let stats = ChannelStats::of_image(image)?;
    let mut z = image.clone();
    for ch in 0..c {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        z.plane_mut(ch).iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    let p = g.patch;
    let mut energy = 0.0;
    let mut gz = vec![0.0; c * h * w];
    for ((r, col), &idx) in g.iter().zip(&field.indices) {
        let d = db.patch(idx);
        let mut k = 0;
        for ch in 0..c {
            for dy in 0..p {
                let base = (ch * h + r + dy) * w + col;
                for dx in 0..p {
                    let e = z.data()[base + dx] - d[k];
                    energy += e * e;
                    gz[base + dx] += 2.0 * e;
                    k += 1;
                }
            }
        }
    }
    let n = (h * w) as f64;
    let mut grad = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let plane = ch * h * w..(ch + 1) * h * w;
        let gzc = &gz[plane.clone()];
        let zc = &z.data()[plane];
        let s = stats.std[ch];
        let out = grad.plane_mut(ch);
        if stats.clamped[ch] {
            // std is the constant floor; only the mean moves
            let mg = gzc.iter().sum::<f64>() / n;
            for (o, &gv) in out.iter_mut().zip(gzc) {
                *o = (gv - mg) / s;
            }
            continue;
        }
        let mg = gzc.iter().sum::<f64>() / n;
        let mgz = gzc.iter().zip(zc).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((o, &gv), &zv) in out.iter_mut().zip(gzc).zip(zc) {
            *o = (gv - mg - zv * mgz) / s;
        }
    }
    Ok((energy, grad))
}

/// `R(x)` and its gradient. `prior` is required when `r_gamma > 0`.
pub fn regularizer(
    image: &Tensor,
    config: &InversionConfig,
    prior: Option<(&PatchDatabase, &NearestNeighborField)>,
) -> Result<(RegTerms, Tensor)> {
    let (c, h, w) = image.chw()?;
    let x = image.data();
    let mut grad = image.scale(2.0 * config.r_alpha);
    let mut terms = RegTerms { alpha: config.r_alpha * image.norm_sq(), ..Default::default() };

    if config.r_beta > 0.0 {
        let gd = grad.data_mut();
        let b = config.r_beta;
        let mut e = 0.0;
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let i = (ch * h + y) * w + xx;
                    if xx + 1 < w {
                        let d = x[i + 1] - x[i];
                        e += d * d;
                        gd[i + 1] += 2.0 * b * d;
                        gd[i] -= 2.0 * b * d;
                    }
                    if y + 1 < h {
                        let d = x[i + w] - x[i];
                        e += d * d;
                        gd[i + w] += 2.0 * b * d;
                        gd[i] -= 2.0 * b * d;
                    }
                }
            }
        }
        terms.beta = b * e;
    }

    if config.r_gamma > 0.0 {
        let (db, field) = prior.ok_or_else(|| Error::InvalidArgument("r_gamma > 0 needs a patch database and field".into()))?;
        let (e, g) = patch_term(image, db, field)?;
        terms.gamma = config.r_gamma * e;
        grad.axpy(config.r_gamma, &g)?;
    }
    Ok((terms, grad))
}

#[derive(Debug, Clone)]
pub enum Objective<'a> {
    Feature { layer: usize, target: &'a Tensor },
    Class { class: usize, overrides: Option<&'a MaskSet> },
}

impl Objective<'_> {
    /// (energy to minimize, its gradient, reported data value).
    fn evaluate(&self, net: &Network, x: &Tensor) -> Result<(f64, Tensor, f64)> {
        match self {
            Objective::Feature { layer, target } => {
                let (e, g) = data_energy_inversion(net, x, *layer, target)?;
                Ok((e, g, e))
            }
            Objective::Class { class, overrides } => {
                let (s, g) = data_score_class(net, x, *class, *overrides)?;
                Ok((-s, g.scale(-1.0), s))
            }
        }
    }
}

/// Inputs of one run besides the objective and config.
#[derive(Debug, Clone, Copy)]
pub struct InversionSetup<'a> {
    /// Dataset statistics defining the whitened space.
    pub whitening: &'a ChannelStats,
    /// Raw image for the `Given` and `ChannelShuffled` init modes.
    pub source: Option<&'a Tensor>,
    pub database: Option<&'a PatchDatabase>,
    /// Per-pixel editable flags (`h * w`); other pixels stay at their initial value.
    pub editable: Option<&'a [bool]>,
}

impl<'a> InversionSetup<'a> {
    pub fn new(whitening: &'a ChannelStats) -> Self {
        InversionSetup { whitening, source: None, database: None, editable: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRecord {
    /// Relative feature energy, or the class logit for class objectives.
    pub data_energy: f64,
    pub reg_energy: f64,
    /// Relative feature energy (0 for class objectives).
    pub feature_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RematchRecord {
    pub iteration: usize,
    pub patch_before: f64,
    pub patch_after: f64,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    /// Unwhitened output clipped to [0, 1].
    pub image: Tensor,
    /// Final optimization variable (whitened space, unclipped).
    pub whitened: Tensor,
    pub energy_trace: Vec<EnergyRecord>,
    pub final_feature_error: f64,
    pub final_score: Option<f64>,
    pub nn_field: Option<NearestNeighborField>,
    pub rematches: Vec<RematchRecord>,
    pub final_step: f64,
}

/// Initial whitened estimate for `config.init_mode`.
pub fn initial_estimate(net: &Network, config: &InversionConfig, setup: &InversionSetup) -> Result<Tensor> {
    let shape = net.spec().input;
    let need_source = || {
        setup
            .source
            .ok_or_else(|| Error::InvalidArgument(format!("init mode {} needs a source image", config.init_mode.name())))
    };
    match config.init_mode {
        InitMode::Mean => Ok(Tensor::zeros(&shape)),
        InitMode::MeanNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut t = Tensor::zeros(&shape);
            if config.noise > 0.0 {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-config.noise..=config.noise));
            }
            Ok(t)
        }
        InitMode::Given => {
            let src = need_source()?;
            src.ensure_shape(&shape, "source image")?;
            whiten(src, setup.whitening)
        }
        InitMode::ChannelShuffled => {
            let src = need_source()?;
            src.ensure_shape(&shape, "source image")?;
            let shuffled = shuffle_channels(src, &config.shuffle)?;
            whiten(&shuffled, setup.whitening)
        }
    }
}

/// Output channel `i` takes input channel `perm[i]`.
pub fn shuffle_channels(image: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (c, _, _) = image.chw()?;
    let mut seen = vec![false; c];
    if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation of {c} channels")));
    }
    let mut out = image.clone();
    for (dst, &src) in perm.iter().enumerate() {
        out.plane_mut(dst).copy_from_slice(image.plane(src));
    }
    Ok(out)
}

fn patch_grid(x: &Tensor, db: &PatchDatabase, config: &InversionConfig) -> Result<PatchGrid> {
    let (_, h, w) = x.chw()?;
    if config.patch_stride == 0 {
        PatchGrid::half_overlap(h, w, db.patch_size())
    } else {
        PatchGrid::new(h, w, db.patch_size(), config.patch_stride)
    }
}

struct State {
    x: Tensor,
    energy: f64,
    grad: Tensor,
    record: EnergyRecord,
    patch: f64,
}

fn evaluate(
    net: &Network,
    objective: &Objective,
    config: &InversionConfig,
    prior: Option<(&PatchDatabase, &NearestNeighborField)>,
    x: Tensor,
) -> Result<State> {
    let (data, mut grad, reported) = objective.evaluate(net, &x)?;
    let (terms, rgrad) = regularizer(&x, config, prior)?;
    grad.axpy(1.0, &rgrad)?;
    let feature_error = if matches!(objective, Objective::Feature { .. }) { data } else { 0.0 };
    Ok(State {
        energy: data + terms.total(),
        grad,
        record: EnergyRecord { data_energy: reported, reg_energy: terms.total(), feature_error },
        patch: terms.gamma,
        x,
    })
}

fn project(v: &mut Tensor, editable: Option<&[bool]>) {
    if let Some(mask) = editable {
        let hw = mask.len();
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            if !mask[i % hw] {
                *val = 0.0;
            }
        }
    }
}

/// Momentum descent on the total energy. A step that raises the energy is
/// rejected: the step size halves and the velocity resets. With the patch
/// prior on, `D_p` is re-matched every `rematch_interval` iterations.
pub fn invert(net: &Network, objective: &Objective, config: &InversionConfig, setup: &InversionSetup) -> Result<InversionResult> {
    config.validate()?;
    if let Objective::Feature { layer, target } = objective {
        if *layer >= net.spec().layers.len() {
            return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
        }
        target.ensure_shape(&net.layout().output_shapes[*layer], "target feature")?;
    }
    let [_, h, w] = net.spec().input;
    if let Some(m) = setup.editable {
        if m.len() != h * w {
            return Err(Error::shape("editable mask", format!("{} flags for {h}x{w} image", m.len())));
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::Empty("editable mask has no pixels".into()));
        }
    }
    let db = if config.r_gamma > 0.0 {
        let db = setup
            .database
            .ok_or_else(|| Error::InvalidArgument("r_gamma > 0 needs a patch database".into()))?;
        if db.is_empty() {
            return Err(Error::Empty("patch database has no entries".into()));
        }
        Some(db)
    } else {
        None
    };

    let x0 = initial_estimate(net, config, setup)?;
    let grid = match db {
        Some(db) => Some(patch_grid(&x0, db, config)?),
        None => None,
    };
    let rematch = |x: &Tensor| -> Result<Option<NearestNeighborField>> {
        match (db, &grid) {
            (Some(db), Some(g)) => Ok(Some(match_patches(db, x, &ChannelStats::of_image(x)?, g)?)),
            _ => Ok(None),
        }
    };
    let mut field = rematch(&x0)?;
    let mut state = evaluate(net, objective, config, db.zip(field.as_ref()), x0)?;
    check_divergence(config, 0, state.energy)?;

    let mut velocity = Tensor::zeros(state.x.shape());
    let mut step = config.step_size;
    let mut trace = Vec::with_capacity(config.iterations);
    let mut rematches = Vec::new();

    for it in 0..config.iterations {
        if it > 0 && it % config.rematch_interval == 0 && db.is_some() {
            let before = state.patch;
            field = rematch(&state.x)?;
            state = evaluate(net, objective, config, db.zip(field.as_ref()), state.x)?;
            rematches.push(RematchRecord { iteration: it, patch_before: before, patch_after: state.patch });
        }
        let mut v = velocity.scale(config.momentum);
        v.axpy(-step, &state.grad)?;
        project(&mut v, setup.editable);
        let candidate = state.x.add(&v)?;
        let next = evaluate(net, objective, config, db.zip(field.as_ref()), candidate)?;
        check_divergence(config, it + 1, next.energy)?;
        if next.energy <= state.energy {
            state = next;
            velocity = v;
        } else {
            step *= 0.5;
            velocity = Tensor::zeros(state.x.shape());
        }
        trace.push(state.record);
    }

    let image = unwhiten(&state.x, setup.whitening)?.map(|v| v.clamp(0.0, 1.0));
    let final_score = match objective {
        Objective::Class { .. } => Some(state.record.data_energy),
        Objective::Feature { .. } => None,
    };
    Ok(InversionResult {
        image,
        whitened: state.x,
        energy_trace: trace,
        final_feature_error: state.record.feature_error,
        final_score,
        nn_field: field,
        rematches,
        final_step: step,
    })
}

fn check_divergence(config: &InversionConfig, iteration: usize, energy: f64) -> Result<()> {
    if !energy.is_finite() || energy.abs() > config.divergence_limit {
        return Err(Error::Divergence { iteration, energy });
    }
    Ok(())
}

/// Writes `iteration,data_energy,reg_energy,feature_error` rows.
pub fn write_trace_csv(trace: &[EnergyRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "iteration,data_energy,reg_energy,feature_error")?;
    for (i, r) in trace.iter().enumerate() {
        writeln!(out, "{},{:e},{:e},{:e}", i + 1, r.data_energy, r.reg_energy, r.feature_error)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Mask, MaskSlot, NetworkSpec};
    use crate::patch::build_class_database;

    fn small_net(seed: u64) -> Network {
        Network::init(NetworkSpec::small([3, 10, 10], 4, 3, 2, 12, 3).unwrap(), seed).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences on a handful of coordinates.
    fn fd_check(f: impl Fn(&Tensor) -> f64, x: &Tensor, grad: &Tensor, coords: &[usize]) {
        let h = 1e-5;
        for &i in coords {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = grad.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "coord {i}: analytic {an}, numeric {fd}, rel {rel}");
        }
    }

    #[test]
    fn whiten_round_trip_and_examples() {
        let stats = ChannelStats::new(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(whiten(&Tensor::full(&[1, 2, 2], 2.0), &stats).unwrap().data(), &[1.0; 4]);
        assert_eq!(whiten(&Tensor::full(&[1, 2, 2], 1.0), &stats).unwrap().max_abs(), 0.0);
        let img = random(&[3, 5, 5], 1);
        let st = ChannelStats::new(vec![0.3, -0.2, 0.5], vec![0.7, 1.3, 0.01]).unwrap();
        let back = unwhiten(&whiten(&img, &st).unwrap(), &st).unwrap();
        assert!(back.sub(&img).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn relative_l2_examples() {
        let a = random(&[3, 4, 4], 2);
        assert_eq!(relative_l2(&a, &a).unwrap(), 0.0);
        assert!((relative_l2(&a, &Tensor::zeros(a.shape())).unwrap() - 1.0).abs() < 1e-15);
        assert!(relative_l2(&Tensor::zeros(a.shape()), &a).is_err());
    }

    #[test]
    fn feature_energy_examples_and_gradient() {
        let net = small_net(3);
        let x = random(&[3, 10, 10], 4);
        let layer = net.last_pool();
        let phi = net.forward_to(&x, layer, None).unwrap().activation(layer).clone();
        let (e, g) = data_energy_inversion(&net, &x, layer, &phi).unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        assert!(data_energy_inversion(&net, &x, layer, &Tensor::zeros(phi.shape())).is_err());

        let target = random(phi.shape(), 5).map(f64::abs);
        let (_, g) = data_energy_inversion(&net, &x, layer, &target).unwrap();
        let f = |t: &Tensor| data_energy_inversion(&net, t, layer, &target).unwrap().0;
        fd_check(f, &x, &g, &[0, 17, 55, 120, 299]);
    }

    #[test]
    fn zero_feature_gives_unit_energy() {
        // all-zero weights make every activation zero
        let net = small_net(0);
        let zero = net.with_weights(crate::net::NetworkWeights::zeros_like(net.spec())).unwrap();
        let target = Tensor::full(&zero.layout().output_shapes[zero.last_pool()], 0.5);
        let (e, _) = data_energy_inversion(&zero, &random(&[3, 10, 10], 1), zero.last_pool(), &target).unwrap();
        assert_eq!(e, 1.0);
    }

    #[test]
    fn class_score_gradient_and_blocked_pathway() {
        let net = small_net(6);
        let x = random(&[3, 10, 10], 7);
        let (_, g) = data_score_class(&net, &x, 1, None).unwrap();
        fd_check(|t| data_score_class(&net, t, 1, None).unwrap().0, &x, &g, &[3, 40, 99, 200]);

        let m7 = Mask::zeros(&[net.layout().fc7_dim()]);
        let blocked = MaskSet::none().with(MaskSlot::M7, m7);
        let (_, g) = data_score_class(&net, &x, 1, Some(&blocked)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(data_score_class(&net, &x, 3, None).is_err());
    }

    #[test]
    fn regularizer_examples() {
        let cfg = InversionConfig { r_alpha: 0.3, r_beta: 0.7, r_gamma: 0.0, ..Default::default() };
        let (t, g) = regularizer(&Tensor::zeros(&[3, 6, 6]), &cfg, None).unwrap();
        assert_eq!(t.total(), 0.0);
        assert_eq!(g.max_abs(), 0.0);
        let (t, _) = regularizer(&Tensor::full(&[3, 6, 6], 0.4), &cfg, None).unwrap();
        assert_eq!(t.beta, 0.0);
        let needs_db = InversionConfig { r_gamma: 1.0, ..cfg };
        assert!(regularizer(&Tensor::zeros(&[3, 6, 6]), &needs_db, None).is_err());
    }

    #[test]
    fn regularizer_gradient_includes_normalization_chain() {
        let src = random(&[3, 12, 12], 8);
        let db = build_class_database(&[&src], 4, 2).unwrap();
        let x = random(&[3, 12, 12], 9);
        let grid = PatchGrid::half_overlap(12, 12, 4).unwrap();
        let field = match_patches(&db, &x, &ChannelStats::of_image(&x).unwrap(), &grid).unwrap();
        let cfg = InversionConfig { r_alpha: 0.2, r_beta: 0.5, r_gamma: 1.5, ..Default::default() };
        let (_, g) = regularizer(&x, &cfg, Some((&db, &field))).unwrap();
        let f = |t: &Tensor| regularizer(t, &cfg, Some((&db, &field))).unwrap().0.total();
        fd_check(f, &x, &g, &[0, 11, 12, 77, 143, 200, 300, 431]);
    }

    #[test]
    fn zero_iterations_keep_the_source() {
        let net = small_net(10);
        let src = random(&[3, 10, 10], 11).map(|v| 0.5 + 0.4 * v);
        let stats = ChannelStats::of_image(&src).unwrap();
        let phi = net.forward_to(&whiten(&src, &stats).unwrap(), net.last_pool(), None).unwrap();
        let target = phi.activation(net.last_pool()).clone();
        let cfg = InversionConfig {
            r_alpha: 0.0,
            r_beta: 0.0,
            iterations: 0,
            init_mode: InitMode::Given,
            ..Default::default()
        };
        let setup = InversionSetup { source: Some(&src), ..InversionSetup::new(&stats) };
        let obj = Objective::Feature { layer: net.last_pool(), target: &target };
        let r = invert(&net, &obj, &cfg, &setup).unwrap();
        assert_eq!(r.final_feature_error, 0.0);
        assert!(r.image.sub(&src).unwrap().max_abs() < 1e-12);
        assert!(r.energy_trace.is_empty());
    }

    #[test]
    fn blocked_class_objective_never_moves() {
        let net = small_net(12);
        let stats = ChannelStats::identity(3);
        let blocked = MaskSet::none().with(MaskSlot::M7, Mask::zeros(&[net.layout().fc7_dim()]));
        let cfg = InversionConfig { r_alpha: 0.0, r_beta: 0.0, iterations: 15, ..Default::default() };
        let obj = Objective::Class { class: 0, overrides: Some(&blocked) };
        let setup = InversionSetup::new(&stats);
        let r = invert(&net, &obj, &cfg, &setup).unwrap();
        assert!(r.whitened.bit_eq(&initial_estimate(&net, &cfg, &setup).unwrap()));
    }

    #[test]
    fn energy_never_increases_between_rematches() {
        let net = small_net(13);
        let src = random(&[3, 10, 10], 14).map(|v| 0.5 + 0.3 * v);
        let stats = ChannelStats::of_image(&src).unwrap();
        let db = build_class_database(&[&src], 4, 1).unwrap();
        let cfg = InversionConfig { r_gamma: 0.05, iterations: 40, rematch_interval: 5, ..Default::default() };
        let setup = InversionSetup { database: Some(&db), ..InversionSetup::new(&stats) };
        let r = invert(&net, &Objective::Class { class: 2, overrides: None }, &cfg, &setup).unwrap();
        assert_eq!(r.energy_trace.len(), 40);
        assert_eq!(r.rematches.len(), 7);
        for m in &r.rematches {
            assert!(m.patch_after <= m.patch_before + 1e-12, "{m:?}");
        }
        let total = |e: &EnergyRecord| -e.data_energy + e.reg_energy;
        for (k, pair) in r.energy_trace.windows(2).enumerate() {
            if (k + 1) % 5 != 0 {
                assert!(total(&pair[1]) <= total(&pair[0]) + 1e-12);
            }
        }
    }

    #[test]
    fn editable_mask_freezes_other_pixels() {
        let net = small_net(15);
        let src = random(&[3, 10, 10], 16).map(|v| 0.5 + 0.3 * v);
        let stats = ChannelStats::of_image(&src).unwrap();
        let editable: Vec<bool> = (0..100).map(|i| i % 10 < 4).collect();
        let cfg = InversionConfig { iterations: 20, init_mode: InitMode::Given, ..Default::default() };
        let setup = InversionSetup { source: Some(&src), editable: Some(&editable), ..InversionSetup::new(&stats) };
        let r = invert(&net, &Objective::Class { class: 0, overrides: None }, &cfg, &setup).unwrap();
        let x0 = whiten(&src, &stats).unwrap();
        for (i, (a, b)) in r.whitened.data().iter().zip(x0.data()).enumerate() {
            if !editable[i % 100] {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn config_parsing() {
        let cfg: InversionConfig = "# comment\nr_alpha = 0.5\ninit_mode=channel-shuffled\nshuffle=1,2,0\n\niterations=7"
            .parse()
            .unwrap();
        assert_eq!(cfg.r_alpha, 0.5);
        assert_eq!(cfg.init_mode, InitMode::ChannelShuffled);
        assert_eq!(cfg.shuffle, vec![1, 2, 0]);
        assert_eq!(cfg.iterations, 7);
        let back: InversionConfig = cfg.to_key_values().parse().unwrap();
        assert_eq!(back, cfg);
        assert!("r_alpha=-1".parse::<InversionConfig>().is_err());
        assert!("bogus=1".parse::<InversionConfig>().is_err());
        assert!("no equals sign".parse::<InversionConfig>().is_err());
        let (_, extra) = InversionConfig::parse_with_extra("layer=3\nr_beta=0").unwrap();
        assert_eq!(extra.get("layer").map(String::as_str), Some("3"));
    }

    #[test]
    fn shuffle_rejects_non_permutations() {
        let img = random(&[3, 2, 2], 1);
        assert!(shuffle_channels(&img, &[0, 0, 1]).is_err());
        let s = shuffle_channels(&img, &[2, 0, 1]).unwrap();
        assert_eq!(s.plane(0), img.plane(2));
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let rec = EnergyRecord { data_energy: 0.5, reg_energy: 0.25, feature_error: 0.5 };
        let mut buf = Vec::new();
        write_trace_csv(&[rec, rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("iteration,data_energy,reg_energy,feature_error\n1,5e-1,"));
    }
}
