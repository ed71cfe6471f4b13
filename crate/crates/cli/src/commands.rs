use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use log::info;

use neupath::completion::{self, PixelMask};
use neupath::data::{self, synth, ChannelStats, Dataset};
use neupath::inversion::{self, whiten, InitMode, InversionSetup, Objective};
use neupath::net::{self, load_weights, save_weights, TrainConfig};
use neupath::pathways::{self, HashCode, HashLevel, SpatialMask};
use neupath::patch::{self, PatchDatabase};
use neupath::topics::{self, RetrievalMode, TopicModel};
use neupath::{Error, MaskSet, Network, NetworkSpec, Result, Tensor};

use crate::manifest::{sidecar, RunManifest};
use crate::settings::{defaults, inversion_defaults, Settings};
use crate::{Globals, ModelArgs};

fn resolve(g: &Globals, mut defs: Vec<(String, String)>, mut flags: Vec<(String, String)>) -> Result<Settings> {
    if !defs.iter().any(|(k, _)| k == "seed") {
        defs.push(("seed".into(), "0".into()));
    }
    flags.extend(g.set.iter().cloned());
    if let Some(seed) = g.seed {
        flags.push(("seed".into(), seed.to_string()));
    }
    Settings::resolve(defs, g.config.as_deref(), flags)
}

/// Collects `Some` typed flags as settings.
macro_rules! flags {
    ($($key:literal => $val:expr),* $(,)?) => {{
        let mut v: Vec<(String, String)> = Vec::new();
        $(if let Some(x) = &$val { v.push(($key.to_string(), x.to_string())); })*
        v
    }};
}

impl ModelArgs {
    fn stats_path(&self) -> PathBuf {
        self.stats.clone().unwrap_or_else(|| sidecar(&self.weights, ".stats"))
    }

    fn load(&self) -> Result<(Network, ChannelStats)> {
        let net = at(&self.weights, load_weights(&self.weights))?;
        let stats = at(&self.stats_path(), ChannelStats::load(self.stats_path()))?;
        if stats.channels() != net.spec().input[0] {
            return Err(Error::shape("stats", format!("{} channels for a {}-channel network", stats.channels(), net.spec().input[0])));
        }
        Ok((net, stats))
    }

    fn record(&self, m: &mut RunManifest) {
        m.input("weights", &self.weights);
        m.input("stats", &self.stats_path());
    }
}

/// Names the file in IO errors.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::InvalidArgument(format!("{}: {io}", path.display())),
        e => e,
    })
}

fn read_input_image(net: &Network, path: &Path) -> Result<Tensor> {
    let img = at(path, data::read_ppm(path))?;
    img.ensure_shape(&net.spec().input, "input image")?;
    Ok(img)
}

/// Layer by index or by name (`pool5`, `fc6`, `relu6`, `fc7`, `relu7`, `fc8`).
fn parse_layer(net: &Network, s: &str) -> Result<usize> {
    let l = net.layout();
    let idx = match s {
        "pool5" => l.last_pool,
        "fc6" => l.fc6,
        "relu6" => l.relu6,
        "fc7" => l.fc7,
        "relu7" => l.relu7,
        "fc8" => l.fc8,
        _ => s.parse().map_err(|_| Error::InvalidArgument(format!("unknown layer {s:?}")))?,
    };
    if idx >= net.spec().layers.len() {
        return Err(Error::InvalidArgument(format!("layer {idx} out of range")));
    }
    Ok(idx)
}

fn class_arg(s: &Settings, net: &Network) -> Result<Option<usize>> {
    match s.optional("class")? {
        Some(c) if c >= net.class_count() => Err(Error::InvalidArgument(format!("class {c} >= {}", net.class_count()))),
        c => Ok(c),
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_trace(path: &Path, trace: &[inversion::EnergyRecord]) -> Result<()> {
    let mut buf = Vec::new();
    inversion::write_trace_csv(trace, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn whiten_all(images: &[Tensor], stats: &ChannelStats) -> Result<Vec<Tensor>> {
    images.iter().map(|i| whiten(i, stats)).collect()
}

fn load_topic_mask(model: Option<&PathBuf>, s: &Settings, m: &mut RunManifest) -> Result<Option<MaskSet>> {
    let Some(topic) = s.optional("topic_index")? else { return Ok(None) };
    let path = model.ok_or_else(|| Error::InvalidArgument("topic_index needs --topic-model".into()))?;
    m.input("topic_model", path);
    let tm = at(path, TopicModel::load(path))?;
    if topic >= tm.rank() {
        return Err(Error::InvalidArgument(format!("topic {topic} >= rank {}", tm.rank())));
    }
    Ok(Some(pathways::topic_mask(tm.basis.row(topic), s.get("tau")?)?))
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory (PPM images plus labels.txt).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
}

pub fn synth(g: &Globals, a: SynthArgs) -> Result<()> {
    let s = resolve(
        g,
        defaults(&[("classes", "6"), ("per_class", "60")]),
        flags!("classes" => a.classes, "per_class" => a.per_class),
    )?;
    let set = synth::scenes(s.get("classes")?, s.get("per_class")?, s.get("seed")?)?;
    set.dataset.save_dir(&a.out)?;
    let mut m = RunManifest::new("synth", &s);
    m.output("dataset", &a.out);
    m.write(&a.out.join("manifest.txt"))?;
    println!("wrote {} images to {}", set.dataset.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory with labels.txt.
    #[arg(long)]
    data: PathBuf,
    /// Weight file to write; statistics go to `<out>.stats`.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch mean loss as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Random RGB permutation per image (true/false).
    #[arg(long)]
    augment: Option<bool>,
}

pub fn train(g: &Globals, a: TrainArgs) -> Result<()> {
    let d = TrainConfig::default();
    let s = resolve(
        g,
        vec![
            ("epochs".into(), d.epochs.to_string()),
            ("learning_rate".into(), d.learning_rate.to_string()),
            ("batch_size".into(), d.batch_size.to_string()),
            ("momentum".into(), d.momentum.to_string()),
            ("weight_decay".into(), d.weight_decay.to_string()),
            ("augment".into(), "true".into()),
        ],
        flags!("epochs" => a.epochs, "learning_rate" => a.learning_rate, "augment" => a.augment),
    )?;
    let cfg = TrainConfig {
        learning_rate: s.get("learning_rate")?,
        epochs: s.get("epochs")?,
        batch_size: s.get("batch_size")?,
        momentum: s.get("momentum")?,
        weight_decay: s.get("weight_decay")?,
        seed: s.get("seed")?,
    };
    let ds = at(&a.data, Dataset::load_dir(&a.data))?;
    if ds.is_empty() {
        return Err(Error::Empty("training set has no images".into()));
    }
    let classes = ds.labels.iter().max().map_or(0, |&l| l + 1);
    let spec = NetworkSpec::toy(classes);
    let stats = ChannelStats::of_images(&ds.images)?;
    let images = if s.bool("augment")? { net::permute_colors(&ds.images)? } else { ds.images.clone() };
    let images = whiten_all(&images, &stats)?;
    info!("training on {} images, {} classes", images.len(), classes);
    let (w, report) = net::train_toy(&spec, &images, &ds.labels, &cfg)?;
    let network = Network::new(spec, w)?;
    let acc = net::accuracy(&network, &whiten_all(&ds.images, &stats)?, &ds.labels)?;

    save_weights(&network, &a.out)?;
    let stats_path = sidecar(&a.out, ".stats");
    stats.save(&stats_path)?;
    let mut m = RunManifest::new("train", &s);
    m.input("data", &a.data).output("weights", &a.out).output("stats", &stats_path);
    if let Some(p) = &a.loss_csv {
        let rows: Vec<String> = report.epoch_loss.iter().enumerate().map(|(e, l)| format!("{},{l:e}", e + 1)).collect();
        write_csv(p, "epoch,loss", &rows)?;
        m.output("loss", p);
    }
    m.write(&sidecar(&a.out, ".manifest"))?;
    println!("training accuracy {acc:.4}");
    Ok(())
}

// ---------------------------------------------------------------- build-db

#[derive(Args, Debug)]
pub struct BuildDbArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Build a class database from this class's images instead.
    #[arg(long)]
    class: Option<i64>,
    #[arg(long)]
    capacity: Option<usize>,
    /// Patch side; 0 picks the receptive-field center crop.
    #[arg(long)]
    patch_size: Option<usize>,
}

pub fn build_db(g: &Globals, a: BuildDbArgs) -> Result<()> {
    let s = resolve(
        g,
        defaults(&[("capacity", "20000"), ("patch_size", "0"), ("class", "-1"), ("stride", "4")]),
        flags!("class" => a.class, "capacity" => a.capacity, "patch_size" => a.patch_size),
    )?;
    let (net, stats) = a.model.load()?;
    let ds = at(&a.data, Dataset::load_dir(&a.data))?;
    let mut patch_size: usize = s.get("patch_size")?;
    if patch_size == 0 {
        patch_size = patch::default_patch_size(net.spec().rf_geometry(net.last_pool())?.size);
    }
    let db = match class_arg(&s, &net)? {
        None => patch::build_database(&whiten_all(&ds.images, &stats)?, &net, patch_size, s.get("capacity")?, s.get("seed")?)?,
        Some(c) => {
            let imgs = whiten_all(&ds.of_class(c).into_iter().cloned().collect::<Vec<_>>(), &stats)?;
            if imgs.is_empty() {
                return Err(Error::Empty(format!("no images of class {c}")));
            }
            patch::build_class_database(&imgs.iter().collect::<Vec<_>>(), patch_size, s.get("stride")?)?
        }
    };
    db.save(&a.out)?;
    let mut m = RunManifest::new("build-db", &s);
    a.model.record(&mut m);
    m.input("data", &a.data).output("database", &a.out);
    m.write(&sidecar(&a.out, ".manifest"))?;
    println!("{} entries, patch {patch_size}", db.len());
    Ok(())
}

// ---------------------------------------------------------------- invert

#[derive(Args, Debug)]
pub struct InvertArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Image whose feature is inverted.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Energy trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Final metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Patch database for the prior or retrieval init.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Initial image for init_mode=given.
    #[arg(long)]
    init_image: Option<PathBuf>,
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    r_gamma: Option<f64>,
}

pub fn invert(g: &Globals, a: InvertArgs) -> Result<()> {
    let mut defs = inversion_defaults();
    defs.extend(defaults(&[("layer", "pool5"), ("retrieval_k", "0")]));
    let s = resolve(
        g,
        defs,
        flags!("layer" => a.layer, "iterations" => a.iterations, "step_size" => a.step_size,
               "init_mode" => a.init, "r_gamma" => a.r_gamma),
    )?;
    let mut cfg = s.inversion()?;
    let (net, stats) = a.model.load()?;
    let src = read_input_image(&net, &a.image)?;
    let layer = parse_layer(&net, s.str("layer"))?;
    let target = net.forward_to(&whiten(&src, &stats)?, layer, None)?.activation(layer).clone();
    let mut m = RunManifest::new("invert", &s);
    a.model.record(&mut m);
    m.input("image", &a.image);

    let db = match &a.db {
        Some(p) => {
            m.input("database", p);
            Some(at(p, PatchDatabase::load(p))?)
        }
        None => None,
    };
    let init_image = match (&a.init_image, cfg.init_mode) {
        (Some(p), _) => {
            m.input("init_image", p);
            Some(read_input_image(&net, p)?)
        }
        (None, InitMode::ChannelShuffled) => Some(src.clone()),
        _ => None,
    };
    let retrieval_k: usize = s.get("retrieval_k")?;
    let retrieved = if retrieval_k > 0 {
        if layer != net.last_pool() {
            return Err(Error::InvalidArgument("retrieval init needs layer pool5".into()));
        }
        let db = db.as_ref().ok_or_else(|| Error::InvalidArgument("retrieval_k needs --db".into()))?;
        let r = patch::retrieve_for_feature(db, &net, &target, retrieval_k, &ChannelStats::identity(stats.channels()))?;
        cfg.init_mode = InitMode::Given;
        Some((r.database, inversion::unwhiten(&r.warped, &stats)?))
    } else {
        None
    };
    let setup = InversionSetup {
        source: retrieved.as_ref().map(|r| &r.1).or(init_image.as_ref()),
        database: retrieved.as_ref().map(|r| &r.0).or(db.as_ref()),
        ..InversionSetup::new(&stats)
    };
    let result = inversion::invert(&net, &Objective::Feature { layer, target: &target }, &cfg, &setup)?;
    data::write_ppm(&a.out, &result.image)?;
    m.output("image", &a.out);
    let l2 = inversion::relative_l2(&src, &result.image)?;
    if let Some(p) = &a.trace {
        write_trace(p, &result.energy_trace)?;
        m.output("trace", p);
    }
    if let Some(p) = &a.metrics {
        let rows = vec![
            format!("feature_error,{:e}", result.final_feature_error),
            format!("relative_l2,{l2:e}"),
            format!("final_step,{:e}", result.final_step),
        ];
        write_csv(p, "metric,value", &rows)?;
        m.output("metrics", p);
    }
    m.write(&sidecar(&a.out, ".manifest"))?;
    println!("feature_error {:.6} relative_l2 {l2:.4}", result.final_feature_error);
    Ok(())
}

// ---------------------------------------------------------------- classviz

#[derive(Args, Debug)]
pub struct ClassvizArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    class: Option<i64>,
    /// Visualization output; may be omitted when only capturing a hash.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Class patch database for the prior.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Spatial window on the pool5 grid as r0,c0,k.
    #[arg(long)]
    spatial: Option<String>,
    #[arg(long)]
    topic_model: Option<PathBuf>,
    #[arg(long)]
    topic_index: Option<i64>,
    /// Random m6/m7 pathway with this drop rate.
    #[arg(long)]
    dropout_rate: Option<f64>,
    /// Hash code file to visualize.
    #[arg(long)]
    hash: Option<PathBuf>,
    /// Capture the hash code of this image.
    #[arg(long)]
    hash_image: Option<PathBuf>,
    /// m7, m6-7 or m5-7.
    #[arg(long)]
    hash_level: Option<String>,
    /// Where to save a captured hash code.
    #[arg(long)]
    hash_out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
}

pub fn classviz(g: &Globals, a: ClassvizArgs) -> Result<()> {
    let mut defs = inversion_defaults();
    defs.extend(defaults(&[
        ("class", "-1"),
        ("spatial", ""),
        ("topic_index", "-1"),
        ("tau", &topics_tau()),
        ("dropout_rate", "0"),
        ("hash_level", "m7"),
    ]));
    let s = resolve(
        g,
        defs,
        flags!("class" => a.class, "spatial" => a.spatial, "topic_index" => a.topic_index,
               "dropout_rate" => a.dropout_rate, "hash_level" => a.hash_level,
               "iterations" => a.iterations, "step_size" => a.step_size),
    )?;
    let cfg = s.inversion()?;
    let (net, stats) = a.model.load()?;
    let mut m = RunManifest::new("classviz", &s);
    a.model.record(&mut m);
    if a.out.is_none() && a.hash_out.is_none() {
        return Err(Error::InvalidArgument("nothing to do: give --out and/or --hash-out".into()));
    }

    let mut overrides = MaskSet::none();
    if !s.str("spatial").is_empty() {
        let shape = net.layout().pool5_shape();
        let sm = SpatialMask::parse(s.str("spatial"), (shape[1], shape[2]))?;
        overrides = overrides.merged(&pathways::spatial_mask_for(&net, &sm)?);
    }
    let rate: f64 = s.get("dropout_rate")?;
    if rate > 0.0 {
        overrides = overrides.merged(&pathways::sample_dropout_maskset(net.layout(), s.get("seed")?, rate)?);
    }
    if let Some(t) = load_topic_mask(a.topic_model.as_ref(), &s, &mut m)? {
        overrides = overrides.merged(&t);
    }
    let level: HashLevel = s.str("hash_level").parse()?;
    let mut hash = None;
    if let Some(p) = &a.hash_image {
        let img = read_input_image(&net, p)?;
        m.input("hash_image", p);
        hash = Some(pathways::capture_hash(&net, &whiten(&img, &stats)?, level)?);
    } else if let Some(p) = &a.hash {
        m.input("hash", p);
        hash = Some(at(p, HashCode::load(p))?);
    }
    if let Some(h) = &hash {
        if let Some(p) = &a.hash_out {
            h.save(p)?;
            m.output("hash", p);
        }
        overrides = overrides.merged(&pathways::hash_overrides(h));
    } else if a.hash_out.is_some() {
        return Err(Error::InvalidArgument("--hash-out needs --hash-image".into()));
    }

    let mut summary = String::new();
    if let Some(out) = &a.out {
        let class = class_arg(&s, &net)?.ok_or_else(|| Error::InvalidArgument("classviz needs --class".into()))?;
        let db = match &a.db {
            Some(p) => {
                m.input("database", p);
                Some(at(p, PatchDatabase::load(p))?)
            }
            None => None,
        };
        let ov = (!overrides.is_empty()).then_some(&overrides);
        let setup = InversionSetup { database: db.as_ref(), ..InversionSetup::new(&stats) };
        let result = inversion::invert(&net, &Objective::Class { class, overrides: ov }, &cfg, &setup)?;
        data::write_ppm(out, &result.image)?;
        m.output("image", out);
        if let Some(p) = &a.trace {
            write_trace(p, &result.energy_trace)?;
            m.output("trace", p);
        }
        let _ = write!(summary, "class {class} score {:.4}", result.final_score.unwrap_or(f64::NAN));
    }
    let primary = a.out.as_ref().or(a.hash_out.as_ref()).expect("checked above");
    m.write(&sidecar(primary, ".manifest"))?;
    if !summary.is_empty() {
        println!("{summary}");
    }
    Ok(())
}

fn topics_tau() -> String {
    pathways::TOPIC_TAU.to_string()
}

// ---------------------------------------------------------------- topics

#[derive(Args, Debug)]
pub struct TopicsArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    /// Topic model to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-image topic probabilities CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Lines `<file> <attribute-id>` for attribute scoring.
    #[arg(long)]
    attributes: Option<PathBuf>,
    /// Topic-by-attribute scores CSV.
    #[arg(long)]
    attribute_scores: Option<PathBuf>,
    /// Query image for style retrieval.
    #[arg(long)]
    query: Option<PathBuf>,
    /// Ranked retrieval results CSV.
    #[arg(long)]
    retrieval_out: Option<PathBuf>,
    /// Restrict to one class (-1 = all images).
    #[arg(long)]
    class: Option<i64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// knn or topic.
    #[arg(long)]
    retrieval: Option<String>,
    #[arg(long)]
    topic_index: Option<usize>,
}

pub fn topics(g: &Globals, a: TopicsArgs) -> Result<()> {
    let rank = topics::DEFAULT_RANK.to_string();
    let its = topics::DEFAULT_ITERATIONS.to_string();
    let s = resolve(
        g,
        defaults(&[
            ("class", "-1"),
            ("rank", &rank),
            ("iterations", &its),
            ("retrieval", "knn"),
            ("topic_index", "0"),
            ("top_k", "10"),
        ]),
        flags!("class" => a.class, "rank" => a.rank, "iterations" => a.iterations,
               "retrieval" => a.retrieval, "topic_index" => a.topic_index),
    )?;
    let (net, stats) = a.model.load()?;
    let ds = at(&a.data, Dataset::load_dir(&a.data))?;
    let class = class_arg(&s, &net)?;
    let ids: Vec<usize> = (0..ds.len()).filter(|&i| class.is_none_or(|c| ds.labels[i] == c)).collect();
    if ids.is_empty() {
        return Err(Error::Empty("no images selected for topics".into()));
    }
    let images = whiten_all(&ids.iter().map(|&i| ds.images[i].clone()).collect::<Vec<_>>(), &stats)?;
    let feats = topics::extract_fc7(&net, &images)?;
    let mut model = topics::nmf(&feats, s.get("rank")?, s.get("iterations")?, s.get("seed")?)?;
    model.class_id = class.map(|c| c as u32);
    model.save(&a.out)?;
    let mut m = RunManifest::new("topics", &s);
    a.model.record(&mut m);
    m.input("data", &a.data).output("model", &a.out);

    let labels = match &a.attributes {
        Some(p) => {
            m.input("attributes", p);
            Some(read_attributes(p, &ids.iter().map(|&i| ds.names[i].as_str()).collect::<Vec<_>>())?)
        }
        None => None,
    };
    let scores = topics::score_topics(&model, labels.as_ref().map(|(l, n)| (l.as_slice(), *n)))?;
    if let Some(p) = &a.scores {
        let k = model.rank();
        let header = std::iter::once("image".to_string()).chain((0..k).map(|t| format!("topic_{t}"))).collect::<Vec<_>>().join(",");
        let rows: Vec<String> = ids
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                let probs: Vec<String> = scores.probabilities.row(r).iter().map(|v| format!("{v:e}")).collect();
                format!("{},{}", ds.names[i], probs.join(","))
            })
            .collect();
        write_csv(p, &header, &rows)?;
        m.output("scores", p);
    }
    if let Some(p) = &a.attribute_scores {
        if labels.is_none() {
            return Err(Error::InvalidArgument("--attribute-scores needs --attributes".into()));
        }
        let sc = &scores.attribute_scores;
        let rows: Vec<String> = (0..sc.rows)
            .flat_map(|t| (0..sc.cols).map(move |at| format!("{t},{at},{:e}", sc.get(t, at))))
            .collect();
        write_csv(p, "topic,attribute,score", &rows)?;
        m.output("attribute_scores", p);
    }
    if let Some(q) = &a.query {
        let out = a
            .retrieval_out
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("--query needs --retrieval-out".into()))?;
        let qimg = read_input_image(&net, q)?;
        m.input("query", q);
        let qf = topics::extract_fc7(&net, &[whiten(&qimg, &stats)?])?;
        let mode = match s.str("retrieval") {
            "knn" => RetrievalMode::KnnFc7,
            "topic" => RetrievalMode::TopicProjection(s.get("topic_index")?),
            other => return Err(Error::InvalidArgument(format!("retrieval must be knn or topic, got {other:?}"))),
        };
        let ranked = topics::retrieve(qf.row(0), &feats, mode, Some(&model))?;
        let top_k: usize = s.get("top_k")?;
        let rows: Vec<String> = ranked
            .iter()
            .take(top_k)
            .enumerate()
            .map(|(r, &(row, d))| format!("{},{},{d:e}", r + 1, ds.names[ids[row]]))
            .collect();
        write_csv(out, "rank,image,distance", &rows)?;
        m.output("retrieval", out);
    }
    m.write(&sidecar(&a.out, ".manifest"))?;
    println!("{} images, rank {}, reconstruction error {:.6}", ids.len(), model.rank(), model.reconstruction_error);
    Ok(())
}

fn read_attributes(path: &Path, names: &[&str]) -> Result<(Vec<Option<usize>>, usize)> {
    let text = fs::read_to_string(path)?;
    let mut by_name = std::collections::HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(f), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format(format!("attributes:{}: expected '<file> <id>'", n + 1)));
        };
        let v: usize = v.parse().map_err(|_| Error::Format(format!("attributes:{}: bad id {v:?}", n + 1)))?;
        by_name.insert(f.to_string(), v);
    }
    let labels: Vec<Option<usize>> = names.iter().map(|n| by_name.get(*n).copied()).collect();
    let count = labels.iter().flatten().max().map_or(0, |&m| m + 1);
    Ok((labels, count))
}

// ---------------------------------------------------------------- complete

#[derive(Args, Debug)]
pub struct CompleteArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// P5 mask, nonzero = editable.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Where to write the mask used (useful with saliency).
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Score trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Class patch database for the prior.
    #[arg(long)]
    db: Option<PathBuf>,
    #[arg(long)]
    topic_model: Option<PathBuf>,
    /// Class to insert; -1 predicts it from the context.
    #[arg(long)]
    class: Option<i64>,
    #[arg(long)]
    topic_index: Option<i64>,
    /// Derive the mask from gradient saliency.
    #[arg(long)]
    saliency: bool,
    #[arg(long)]
    percentile: Option<f64>,
    /// Smallest kept region in pixels; -1 = 1% of the image.
    #[arg(long)]
    min_region: Option<i64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
}

pub fn complete(g: &Globals, a: CompleteArgs) -> Result<()> {
    let mut defs = inversion_defaults();
    let pct = completion::DEFAULT_PERCENTILE.to_string();
    defs.extend(defaults(&[
        ("class", "-1"),
        ("topic_index", "-1"),
        ("tau", &topics_tau()),
        ("saliency", "false"),
        ("percentile", &pct),
        ("min_region", "-1"),
    ]));
    let saliency_flag = a.saliency.then_some(true);
    let s = resolve(
        g,
        defs,
        flags!("class" => a.class, "topic_index" => a.topic_index, "saliency" => saliency_flag,
               "percentile" => a.percentile, "min_region" => a.min_region,
               "iterations" => a.iterations, "step_size" => a.step_size),
    )?;
    let cfg = s.inversion()?;
    let (net, stats) = a.model.load()?;
    let img = read_input_image(&net, &a.image)?;
    let [_, h, w] = net.spec().input;
    let mut m = RunManifest::new("complete", &s);
    a.model.record(&mut m);
    m.input("image", &a.image);
    let mut class = class_arg(&s, &net)?;

    let mask = if let Some(p) = &a.mask {
        m.input("mask", p);
        at(p, PixelMask::load(p))?
    } else if s.bool("saliency")? {
        let c = match class {
            Some(c) => c,
            None => completion::predict_context_class(&net, &img, &PixelMask::empty(h, w), &stats)?[0].0,
        };
        let min_region = s.optional("min_region")?.unwrap_or_else(|| completion::default_min_region(h, w));
        let sal = completion::saliency_mask(&net, &img, c, &stats, s.get("percentile")?, min_region)?;
        if sal.zero_gradient {
            log::warn!("saliency gradient is zero everywhere; mask is empty");
        }
        sal.mask
    } else {
        return Err(Error::InvalidArgument("complete needs --mask or --saliency".into()));
    };
    if let Some(p) = &a.mask_out {
        mask.save(p)?;
        m.output("mask", p);
    }
    if class.is_none() {
        let ranked = completion::predict_context_class(&net, &img, &mask, &stats)?;
        info!("context ranking {:?}", ranked);
        class = Some(ranked[0].0);
    }
    let class = class.expect("set above");
    let topic = load_topic_mask(a.topic_model.as_ref(), &s, &mut m)?;
    let db = match &a.db {
        Some(p) => {
            m.input("database", p);
            Some(at(p, PatchDatabase::load(p))?)
        }
        None => None,
    };
    let c = completion::complete(&net, &img, &mask, class, topic.as_ref(), &cfg, &stats, db.as_ref())?;
    data::write_ppm(&a.out, &c.image)?;
    m.output("image", &a.out);
    if let Some(p) = &a.trace {
        let rows: Vec<String> = c.score_trace.iter().enumerate().map(|(i, v)| format!("{},{v:e}", i + 1)).collect();
        write_csv(p, "iteration,score", &rows)?;
        m.output("trace", p);
    }
    m.write(&sidecar(&a.out, ".manifest"))?;
    println!("class {class} baseline {:.4} completed {:.4}", c.baseline_score, c.final_score);
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    /// Metrics CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Adds the feature error at `layer` when given.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    layer: Option<String>,
}

pub fn eval(g: &Globals, a: EvalArgs) -> Result<()> {
    let s = resolve(g, defaults(&[("layer", "pool5")]), flags!("layer" => a.layer))?;
    let reference = at(&a.reference, data::read_ppm(&a.reference))?;
    let estimate = at(&a.estimate, data::read_ppm(&a.estimate))?;
    let mut m = RunManifest::new("eval", &s);
    m.input("reference", &a.reference).input("estimate", &a.estimate);
    let mut rows = vec![format!("relative_l2,{:e}", inversion::relative_l2(&reference, &estimate)?)];
    if let Some(wp) = &a.weights {
        let model = ModelArgs { weights: wp.clone(), stats: a.stats.clone() };
        let (net, stats) = model.load()?;
        model.record(&mut m);
        let layer = parse_layer(&net, s.str("layer"))?;
        reference.ensure_shape(&net.spec().input, "reference image")?;
        let target = net.forward_to(&whiten(&reference, &stats)?, layer, None)?.activation(layer).clone();
        let (fe, _) = inversion::data_energy_inversion(&net, &whiten(&estimate, &stats)?, layer, &target)?;
        rows.push(format!("feature_error,{fe:e}"));
    }
    match &a.out {
        Some(p) => {
            write_csv(p, "metric,value", &rows)?;
            m.output("metrics", p);
            m.write(&sidecar(p, ".manifest"))?;
        }
        None => {
            println!("metric,value");
            rows.iter().for_each(|r| println!("{r}"));
        }
    }
    Ok(())
}

