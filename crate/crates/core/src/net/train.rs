//! Minibatch SGD with momentum on softmax cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Network, NetworkSpec, NetworkWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.003,
            epochs: 24,
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains a fresh network from seeded initial weights.
///
/// Per-sample dropout streams are derived from `(seed, epoch, sample)`, so
/// the result does not depend on thread scheduling.
pub fn train_toy(
    spec: &NetworkSpec,
    images: &[Tensor],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<(NetworkWeights, TrainReport)> {
    if images.is_empty() {
        return Err(Error::Empty("training set has no images".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if !(config.learning_rate > 0.0) || !config.learning_rate.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            config.learning_rate
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.class_count) {
        return Err(Error::InvalidArgument(format!("label {bad} >= class count {}", spec.class_count)));
    }

    let mut net = Network::init(spec.clone(), config.seed)?;
    for img in images {
        img.ensure_shape(&spec.input, "training image")?;
    }
    let mut velocity = NetworkWeights::zeros_like(spec);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let per_sample: Vec<(NetworkWeights, f64)> = batch
                .par_iter()
                .map(|&idx| {
                    let seed = config
                        .seed
                        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                        .wrapping_add((epoch as u64) << 32)
                        .wrapping_add(idx as u64);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    sample_gradient(&net, &images[idx], labels[idx], &mut rng)
                })
                .collect::<Result<_>>()?;

            let mut grad = NetworkWeights::zeros_like(spec);
            for (g, loss) in &per_sample {
                epoch_loss += loss;
                for (acc, gl) in grad.layers.iter_mut().zip(&g.layers) {
                    if let (Some(acc), Some(gl)) = (acc.as_mut(), gl.as_ref()) {
                        acc.weight.axpy(1.0, &gl.weight)?;
                        acc.bias.axpy(1.0, &gl.bias)?;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let mut weights = net.weights().clone();
            for ((w, v), g) in weights.layers.iter_mut().zip(velocity.layers.iter_mut()).zip(&grad.layers) {
                if let (Some(w), Some(v), Some(g)) = (w.as_mut(), v.as_mut(), g.as_ref()) {
                    step(w.weight.data_mut(), v.weight.data_mut(), g.weight.data(), inv, config, true);
                    step(w.bias.data_mut(), v.bias.data_mut(), g.bias.data(), inv, config, false);
                }
            }
            net = net.with_weights(weights)?;
        }
        let mean = epoch_loss / images.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.4}");
        report.epoch_loss.push(mean);
    }
    Ok((net.into_parts().1, report))
}

fn step(w: &mut [f64], v: &mut [f64], g: &[f64], inv: f64, c: &TrainConfig, decay: bool) {
    let wd = if decay { c.weight_decay } else { 0.0 };
    for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        let grad = g * inv + wd * *w;
        *v = c.momentum * *v - c.learning_rate * grad;
        *w += *v;
    }
}

fn sample_gradient(net: &Network, image: &Tensor, label: usize, rng: &mut ChaCha8Rng) -> Result<(NetworkWeights, f64)> {
    let last = net.spec().layers.len() - 1;
    let trace = net.forward_impl(image, last, None, Some(rng))?;
    let logits = trace.activations[last].data();
    let (probs, loss) = softmax_xent(logits, label);
    let mut dlogits = probs;
    dlogits[label] -= 1.0;
    let mut grads = NetworkWeights::zeros_like(net.spec());
    net.backward_from(&trace, last, &Tensor::from_vec(dlogits), Some(&mut grads))?;
    Ok((grads, loss))
}

fn softmax_xent(logits: &[f64], label: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let loss = -(probs[label].max(1e-300)).ln();
    (probs, loss)
}

const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Reorders the RGB channels of image `k` by a permutation cycling through
/// all six, shifted every six images so it does not lock onto the class order.
pub fn permute_colors(images: &[Tensor]) -> Result<Vec<Tensor>> {
    images
        .iter()
        .enumerate()
        .map(|(k, img)| crate::inversion::shuffle_channels(img, &PERMUTATIONS[(k * 7 + k / 6) % 6]))
        .collect()
}

/// Fraction of images whose top-1 logit equals the label.
pub fn accuracy(net: &Network, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("no images to evaluate".into()));
    }
    let correct = images
        .par_iter()
        .zip(labels)
        .map(|(img, &l)| Ok(usize::from(net.logits(img, None)?.argmax() == l)))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Two classes: bright left half vs bright right half, with noise.
    fn halves(n: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let data = (0..64)
                .map(|p| {
                    let col = p % 8;
                    let on = (col < 4) == (label == 0);
                    (if on { 1.0 } else { -1.0 }) + rng.gen_range(-0.3..0.3)
                })
                .collect();
            images.push(Tensor::new(vec![1, 8, 8], data).unwrap());
            labels.push(label);
        }
        (images, labels)
    }

    fn small_spec() -> NetworkSpec {
        NetworkSpec::small([1, 8, 8], 4, 3, 2, 16, 2).unwrap()
    }

    #[test]
    fn separable_two_class_set_is_learned() {
        let (train, train_l) = halves(64, 1);
        let (val, val_l) = halves(40, 2);
        let cfg = TrainConfig { learning_rate: 0.02, epochs: 8, batch_size: 8, seed: 3, ..Default::default() };
        let (w, report) = train_toy(&small_spec(), &train, &train_l, &cfg).unwrap();
        let net = Network::new(small_spec(), w).unwrap();
        let acc = accuracy(&net, &val, &val_l).unwrap();
        assert!(acc >= 0.95, "validation accuracy {acc}, losses {:?}", report.epoch_loss);
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let (train, labels) = halves(4, 0);
        let cfg = TrainConfig { epochs: 0, seed: 11, ..Default::default() };
        let (w, _) = train_toy(&small_spec(), &train, &labels, &cfg).unwrap();
        assert!(w.bit_eq(&NetworkWeights::init(&small_spec(), 11)));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (train, labels) = halves(16, 5);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, seed: 9, ..Default::default() };
        let (a, _) = train_toy(&small_spec(), &train, &labels, &cfg).unwrap();
        let (b, _) = train_toy(&small_spec(), &train, &labels, &cfg).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (train, labels) = halves(4, 0);
        let bad_lr = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(train_toy(&small_spec(), &train, &labels, &bad_lr).is_err());
        assert!(matches!(
            train_toy(&small_spec(), &[], &[], &TrainConfig::default()),
            Err(Error::Empty(_))
        ));
    }
}
