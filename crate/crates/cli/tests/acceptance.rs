//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails the
//! target if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neupath::completion::{complete, PixelMask};
use neupath::data::{synth, ChannelStats, Dataset};
use neupath::inversion::{
    data_energy_inversion, data_score_class, invert, regularizer, relative_l2, unwhiten, whiten,
    InitMode, InversionConfig, InversionSetup, Objective,
};
use neupath::net::{permute_colors, train_toy, TrainConfig};
use neupath::pathways::{capture_hash, hash_overrides, sample_dropout_maskset, spatial_mask_for, substituted_weights, topic_mask, HashLevel, SpatialMask};
use neupath::patch::{build_class_database, build_database, match_brute_force, match_patches, retrieve_for_feature, PatchGrid};
use neupath::topics::{cone_membership, extract_fc7, nmf, ConeReading, Head, Matrix};
use neupath::{Network, NetworkSpec, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_image(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Trained toy network and the data around it.
struct Toy {
    net: Network,
    stats: ChannelStats,
    train: Dataset,
    /// Whitened, color-permuted training inputs.
    train_inputs: Vec<Tensor>,
    val: Dataset,
}

fn train_toy_net() -> Toy {
    let classes = 6;
    let train = synth::scenes(classes, 60, 1).unwrap().dataset;
    let val = synth::scenes(classes, 20, 2).unwrap().dataset;
    let stats = ChannelStats::of_images(&train.images).unwrap();
    let train_inputs: Vec<Tensor> =
        permute_colors(&train.images).unwrap().iter().map(|i| whiten(i, &stats).unwrap()).collect();
    let spec = NetworkSpec::toy(classes);
    let cfg = TrainConfig { learning_rate: 0.003, epochs: 24, ..Default::default() };
    let (w, _) = train_toy(&spec, &train_inputs, &train.labels, &cfg).unwrap();
    Toy { net: Network::new(spec, w).unwrap(), stats, train, train_inputs, val }
}

// ---------------------------------------------------------------- 1

/// Central-difference probes of one scalar function.
struct Probe<'a> {
    f: &'a dyn Fn(&Tensor) -> f64,
    /// Forward pass at a point; a probe whose two stencil points lie in
    /// different linear regions of the network is redrawn.
    region: Option<&'a dyn Fn(&Tensor) -> neupath::ForwardTrace>,
    step: f64,
}

/// Small enough to rarely straddle a ReLU/pool switch.
const NET_STEP: f64 = 1e-5;
/// The regularizer is smooth but large; a small step drowns in cancellation.
const REG_STEP: f64 = 1e-3;

impl Probe<'_> {
    fn smooth_between(&self, p: &Tensor, m: &Tensor) -> bool {
        self.region.is_none_or(|r| r(p).same_region(&r(m)))
    }

    /// Worst relative error over `n` coordinates and one random direction,
    /// plus the number of redrawn probes.
    fn check(&self, x: &Tensor, grad: &Tensor, n: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
        let h = self.step;
        let rel = |an: f64, fd: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        let (mut worst, mut redrawn, mut done) = (0.0f64, 0, 0);
        while done < n {
            let i = rng.gen_range(0..x.len());
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            if !self.smooth_between(&p, &m) {
                redrawn += 1;
                continue;
            }
            worst = worst.max(rel(grad.data()[i], ((self.f)(&p) - (self.f)(&m)) / (2.0 * h)));
            done += 1;
        }
        loop {
            let dir = random_image(x.shape(), -1.0, 1.0, rng);
            let mut p = x.clone();
            p.axpy(h, &dir).unwrap();
            let mut m = x.clone();
            m.axpy(-h, &dir).unwrap();
            if !self.smooth_between(&p, &m) {
                redrawn += 1;
                continue;
            }
            return (worst.max(rel(grad.dot(&dir), ((self.f)(&p) - (self.f)(&m)) / (2.0 * h))), redrawn);
        }
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let (mut checks, mut redrawn) = (0, 0);
    for seed in 0..20u64 {
        let net = Network::init(NetworkSpec::toy(6), 100 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = net.spec().input;
        let x = random_image(&shape, -1.0, 1.0, &mut rng);
        let l = net.layout().clone();
        let layer = [l.last_pool, l.fc6, l.relu6, l.fc7][seed as usize % 4];
        let mut run = |probe: Probe, g: &Tensor, rng: &mut ChaCha8Rng| {
            let (w, r) = probe.check(&x, g, 4, rng);
            worst = worst.max(w);
            redrawn += r;
            checks += 5;
        };
        let plain = |t: &Tensor| net.forward(t, None).unwrap();

        let other = random_image(&shape, -1.0, 1.0, &mut rng);
        let target = net.forward_to(&other, layer, None).unwrap().activation(layer).clone();
        let (_, g) = data_energy_inversion(&net, &x, layer, &target).unwrap();
        let f = |t: &Tensor| data_energy_inversion(&net, t, layer, &target).unwrap().0;
        run(Probe { f: &f, region: Some(&plain), step: NET_STEP }, &g, &mut rng);

        let class = seed as usize % 6;
        let (_, g) = data_score_class(&net, &x, class, None).unwrap();
        let f = |t: &Tensor| data_score_class(&net, t, class, None).unwrap().0;
        run(Probe { f: &f, region: Some(&plain), step: NET_STEP }, &g, &mut rng);

        let grid = net.layout().pool5_shape().to_vec();
        let sm = SpatialMask::parse(&format!("{},{},3", seed % 4, (seed / 4) % 4), (grid[1], grid[2])).unwrap();
        let masks = spatial_mask_for(&net, &sm).unwrap().merged(&sample_dropout_maskset(&l, seed, 0.5).unwrap());
        let (_, g) = data_score_class(&net, &x, class, Some(&masks)).unwrap();
        let f = |t: &Tensor| data_score_class(&net, t, class, Some(&masks)).unwrap().0;
        let masked = |t: &Tensor| net.forward(t, Some(&masks)).unwrap();
        run(Probe { f: &f, region: Some(&masked), step: NET_STEP }, &g, &mut rng);

        let srcs: Vec<Tensor> = (0..2).map(|_| random_image(&shape, -1.0, 1.0, &mut rng)).collect();
        let db = build_class_database(&srcs.iter().collect::<Vec<_>>(), 12, 8).unwrap();
        let grid = PatchGrid::half_overlap(shape[1], shape[2], 12).unwrap();
        let field = match_patches(&db, &x, &ChannelStats::of_image(&x).unwrap(), &grid).unwrap();
        let cfg = InversionConfig { r_alpha: 1e-3, r_beta: 1e-2, r_gamma: 1.0, ..Default::default() };
        let (_, g) = regularizer(&x, &cfg, Some((&db, &field))).unwrap();
        let f = |t: &Tensor| regularizer(t, &cfg, Some((&db, &field))).unwrap().0.total();
        run(Probe { f: &f, region: None, step: REG_STEP }, &g, &mut rng);
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 120.0,
        format!("20 nets, {checks} checks (h {NET_STEP:e} net / {REG_STEP:e} regularizer, {redrawn} probes redrawn for crossing a ReLU/pool switch), max relative error {worst:.2e}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2(toy: &Toy) -> Outcome {
    let t = Instant::now();
    let net = &toy.net;
    let db = build_database(&toy.train_inputs, net, 12, 20000, 0).unwrap();
    let layer = net.last_pool();
    let base = InversionConfig { step_size: 0.05, iterations: 300, ..Default::default() };
    let n = 20;
    let mut sums = [0.0; 3];
    for i in 0..n {
        let src = &toy.val.images[i * 3];
        let target = net.forward_to(&whiten(src, &toy.stats).unwrap(), layer, None).unwrap().activation(layer).clone();
        let obj = Objective::Feature { layer, target: &target };
        let random = invert(net, &obj, &base, &InversionSetup::new(&toy.stats)).unwrap();

        let ret = retrieve_for_feature(&db, net, &target, 10, &ChannelStats::identity(3)).unwrap();
        let init = unwhiten(&ret.warped, &toy.stats).unwrap();
        let given = InversionConfig { init_mode: InitMode::Given, ..base.clone() };
        let setup = InversionSetup { source: Some(&init), ..InversionSetup::new(&toy.stats) };
        let retrieval = invert(net, &obj, &given, &setup).unwrap();

        let prior_cfg = InversionConfig { r_gamma: 1e-3, ..given };
        let prior = invert(net, &obj, &prior_cfg, &InversionSetup { database: Some(&ret.database), ..setup }).unwrap();
        for (s, r) in sums.iter_mut().zip([&prior, &retrieval, &random]) {
            *s += relative_l2(src, &r.image).unwrap();
        }
    }
    let [p, r, q] = sums.map(|s| s / n as f64);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        p < r && r < q && p <= 0.95 * r.min(q) && secs < 1800.0,
        format!("{n} images: patch prior {p:.4} < retrieval init {r:.4} < random init {q:.4}, margin {:.1}%, {secs:.0}s", 100.0 * (1.0 - p / r.min(q))),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3(toy: &Toy) -> Outcome {
    let net = &toy.net;
    let src = &toy.val.images[0];
    let layer = net.layout().fc6;
    let target = net.forward_to(&whiten(src, &toy.stats).unwrap(), layer, None).unwrap().activation(layer).clone();
    let obj = Objective::Feature { layer, target: &target };
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut good = 0;
    let mut parts = Vec::new();
    for p in perms {
        let cfg = InversionConfig {
            r_alpha: 0.0,
            r_beta: 0.0,
            step_size: 5.0,
            iterations: 1000,
            init_mode: InitMode::ChannelShuffled,
            shuffle: p.to_vec(),
            ..Default::default()
        };
        let r = invert(net, &obj, &cfg, &InversionSetup { source: Some(src), ..InversionSetup::new(&toy.stats) }).unwrap();
        let l2 = relative_l2(src, &r.image).unwrap();
        let ok = r.final_feature_error < 0.01 && l2 > 0.2;
        good += usize::from(ok);
        parts.push(format!("{p:?} fe {:.4} l2 {l2:.3}", r.final_feature_error));
    }
    outcome(good >= 4, format!("{good}/6 shuffles with feature error < 1% and l2 > 0.2 [{}]", parts.join("; ")))
}

// ---------------------------------------------------------------- 4

fn criterion_4(toy: &Toy) -> Outcome {
    let net = &toy.net;
    let inputs: Vec<Tensor> = toy.val.images.iter().map(|i| whiten(i, &toy.stats).unwrap()).collect();
    let feats = extract_fc7(net, &inputs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut run = |head: &Head, unit_lambda: bool| -> (usize, usize, usize) {
        let preds: Vec<usize> = (0..feats.rows).map(|i| head.predict(feats.row(i)).unwrap()).collect();
        let (mut pairs, mut total, mut kept) = (0, 0, 0);
        while pairs < 50 {
            let (i, j) = (rng.gen_range(0..feats.rows), rng.gen_range(0..feats.rows));
            if i == j || preds[i] != preds[j] {
                continue;
            }
            pairs += 1;
            for _ in 0..1000 {
                let lambda = if unit_lambda { 1.0 } else { 10f64.powf(rng.gen_range(-3.0..3.0)) };
                let alpha = rng.gen_range(0.0..=1.0);
                let (_, c) = cone_membership(feats.row(i), feats.row(j), lambda, alpha, head, ConeReading::ScaledCombination).unwrap();
                total += 1;
                kept += usize::from(c == preds[i]);
            }
        }
        (pairs, total, kept)
    };
    let head = Head::of(net);
    let (p1, t1, k1) = run(&head.without_bias(), false);
    let (p2, t2, k2) = run(&head, true);
    outcome(
        k1 == t1 && k2 == t2,
        format!("bias-free cone {k1}/{t1} over {p1} pairs; biased convex combinations {k2}/{t2} over {p2} pairs"),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for fit in 0..100u64 {
        let (n, d) = (rng.gen_range(5..40), rng.gen_range(5..40));
        let rank = rng.gen_range(1..=n.min(d).min(8));
        let v = Matrix::new(n, d, (0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let m = nmf(&v, rank, 200, fit).unwrap();
        violations += m.objective.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-12)).count();
    }
    let mut worst = 0.0f64;
    let mut exact = vec![
        Matrix::new(2, 2, vec![4.0, 0.0, 0.0, 9.0]).unwrap(),
        Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap(),
    ];
    let mut ranks = vec![2, 1];
    for _ in 0..10 {
        let (n, d, k) = (rng.gen_range(3..12), rng.gen_range(3..12), rng.gen_range(1..4));
        let w = Matrix::new(n, k, (0..n * k).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let h = Matrix::new(k, d, (0..k * d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        exact.push(w.matmul(&h));
        ranks.push(k);
    }
    for (i, (v, k)) in exact.iter().zip(&ranks).enumerate() {
        worst = worst.max(nmf(v, *k, 20000, i as u64).unwrap().reconstruction_error);
    }
    outcome(
        violations == 0 && worst < 1e-6,
        format!("100 fits, {violations} objective increases; {} exact-rank matrices, max error {worst:.2e}", exact.len()),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut identical = true;
    for case in 0..100u64 {
        let net = Network::init(NetworkSpec::toy(5), 1000 + case).unwrap();
        let shape = net.spec().input;
        let level = HashLevel::ALL[case as usize % 3];
        let code = capture_hash(&net, &random_image(&shape, -1.0, 1.0, &mut rng), level).unwrap();
        let x = random_image(&shape, -1.0, 1.0, &mut rng);
        let sub = substituted_weights(&net, &code).unwrap().logits(&net, &x).unwrap();
        let over = net.logits(&x, Some(&hash_overrides(&code))).unwrap();
        worst = worst.max(sub.sub(&over).unwrap().max_abs());

        let mut ones = code.clone();
        for slot in level.slots() {
            let shape = ones.masks.get(*slot).unwrap().shape().to_vec();
            ones.masks.set(*slot, Some(neupath::Mask::ones(&shape)));
        }
        identical &= substituted_weights(&net, &ones).unwrap().bit_eq_original(&net);
    }
    outcome(
        worst < 1e-9 && identical,
        format!("100 cases, max |substituted - override| {worst:.2e}; all-ones substitution bit-identical: {identical}"),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7(toy: &Toy) -> Outcome {
    let net = &toy.net;
    let mut raised = 0;
    let mut intact = true;
    let mut worst_margin = f64::INFINITY;
    let mask = PixelMask::rect(64, 64, 22, 22, 20, 20);
    let hw = 64 * 64;
    let mut topic_models = std::collections::HashMap::new();
    for run in 0..20usize {
        let idx = run * 6;
        let image = &toy.val.images[idx];
        let class = toy.val.labels[idx];
        let model = topic_models.entry(class).or_insert_with(|| {
            let imgs: Vec<Tensor> = toy.train.of_class(class).into_iter().map(|i| whiten(i, &toy.stats).unwrap()).collect();
            let feats = extract_fc7(net, &imgs).unwrap();
            let db = build_class_database(&imgs.iter().collect::<Vec<_>>(), 12, 8).unwrap();
            (nmf(&feats, 6, 500, 0).unwrap(), db)
        });
        let topic = topic_mask(model.0.basis.row(run % 6), 0.1).unwrap();
        let cfg = InversionConfig { iterations: 100, r_gamma: 1e-3, seed: run as u64, ..Default::default() };
        let c = complete(net, image, &mask, class, Some(&topic), &cfg, &toy.stats, Some(&model.1)).unwrap();
        for (i, (a, b)) in c.image.data().iter().zip(image.data()).enumerate() {
            if !mask.bits()[i % hw] && a.to_bits() != b.to_bits() {
                intact = false;
            }
        }
        raised += usize::from(c.final_score > c.baseline_score);
        worst_margin = worst_margin.min(c.final_score - c.baseline_score);
    }
    outcome(
        intact && raised >= 18,
        format!("complement bit-identical: {intact}; score above mean-filled baseline in {raised}/20 runs (smallest gain {worst_margin:.3})"),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let scenes = synth::scenes(6, 9, 8).unwrap().dataset;
    let stats = ChannelStats::of_images(&scenes.images).unwrap();
    let inputs: Vec<Tensor> = scenes.images.iter().map(|i| whiten(i, &stats).unwrap()).collect();
    let full = build_class_database(&inputs.iter().collect::<Vec<_>>(), 12, 4).unwrap();
    let db = full.select(&(0..10_000).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let queries = synth::scenes(5, 20, 88).unwrap().dataset;
    let grid = PatchGrid::half_overlap(32, 32, 12).unwrap();
    let (mut agree, mut total) = (0usize, 0usize);
    for img in &queries.images {
        let (r0, c0) = (rng.gen_range(0..=32), rng.gen_range(0..=32));
        let mut q = Tensor::zeros(&[3, 32, 32]);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    q.data_mut()[(c * 32 + y) * 32 + x] = img.at3(c, r0 + y, c0 + x) + rng.gen_range(-0.05..0.05);
                }
            }
        }
        let q = whiten(&q, &stats).unwrap();
        let qs = ChannelStats::of_image(&q).unwrap();
        let fast = match_patches(&db, &q, &qs, &grid).unwrap();
        let slow = match_brute_force(&db, &q, &qs, &grid).unwrap();
        total += fast.indices.len();
        agree += fast
            .indices
            .iter()
            .zip(&slow.indices)
            .zip(fast.distances.iter().zip(&slow.distances))
            .filter(|((a, b), (da, db))| a == b && da.to_bits() == db.to_bits())
            .count();
    }
    outcome(
        agree == total && db.len() == 10_000,
        format!("{} entries, {} queries, {agree}/{total} locations identical, {:.1}s", db.len(), queries.len(), t.elapsed().as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 9

fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_neupath")).current_dir(dir).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["synth", "--out", "ds", "--classes", "3", "--per-class", "4", "--seed", "9"]);
    run(&["train", "--data", "ds", "--out", "w.npsw", "--epochs", "2", "--loss-csv", "loss.csv"]);
    run(&["build-db", "--weights", "w.npsw", "--data", "ds", "--out", "db.nppd", "--capacity", "400"]);
    run(&[
        "invert", "--weights", "w.npsw", "--image", "ds/img_00004.ppm", "--out", "inv.ppm", "--db", "db.nppd",
        "-s", "retrieval_k=3", "--r-gamma", "1e-3", "--iterations", "25", "--trace", "inv.csv", "--metrics", "metrics.csv",
    ]);
    run(&["topics", "--weights", "w.npsw", "--data", "ds", "--out", "tm.nptm", "--rank", "2", "--scores", "scores.csv"]);
    run(&[
        "complete", "--weights", "w.npsw", "--image", "ds/img_00005.ppm", "--out", "c.ppm", "--saliency",
        "--min-region", "4", "--iterations", "10", "--trace", "complete.csv", "--topic-model", "tm.nptm", "--topic-index", "1",
    ]);
    let mut files: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv") || n.ends_with(".manifest"))
        .collect();
    files.sort();
    files.into_iter().map(|f| (f.clone(), fs::read(dir.join(&f)).unwrap())).collect()
}

fn criterion_9() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let csvs = first.iter().filter(|f| f.0.ends_with(".csv")).count();
    let manifests = first.len() - csvs;
    let same_manifests = first.iter().zip(&second).filter(|(x, _)| x.0.ends_with(".manifest")).all(|(x, y)| x == y);
    let same_csv = first.iter().zip(&second).filter(|(x, _)| x.0.ends_with(".csv")).all(|(x, y)| x == y);
    outcome(
        first.len() == second.len() && same_manifests && same_csv && csvs >= 5,
        format!("{manifests} manifests identical: {same_manifests}; {csvs} CSV files byte-identical: {same_csv}"),
    )
}

fn main() {
    // cargo passes harness flags such as --nocapture or a filter; a filter
    // that matches nothing here skips the suite
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    if filter.as_deref().is_some_and(|f| !"acceptance".contains(f)) {
        return;
    }
    let t = Instant::now();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, criterion_1());
    report(5, criterion_5());
    report(6, criterion_6());
    report(8, criterion_8());
    report(9, criterion_9());
    let toy = train_toy_net();
    let acc = neupath::net::accuracy(
        &toy.net,
        &toy.val.images.iter().map(|i| whiten(i, &toy.stats).unwrap()).collect::<Vec<_>>(),
        &toy.val.labels,
    )
    .unwrap();
    println!("toy network validation accuracy {acc:.3}");
    report(2, criterion_2(&toy));
    report(3, criterion_3(&toy));
    report(4, criterion_4(&toy));
    report(7, criterion_7(&toy));
    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} passed in {:.0}s", results.len() - failed.len(), results.len(), t.elapsed().as_secs_f64());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
