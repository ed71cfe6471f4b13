//! fc7 topics: NMF over post-ReLU fc7 features, the convex-cone property of
//! the fc8 head, topic scoring and style retrieval.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Tensor;

pub const TOPIC_MAGIC: &[u8; 4] = b"NPTM";
pub const TOPIC_VERSION: u16 = 1;
pub const DEFAULT_RANK: usize = 6;
pub const DEFAULT_ITERATIONS: usize = 500;

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix", format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("matrix", "rows of different lengths"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out.data[i * other.cols..(i + 1) * other.cols].iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols);
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = self.row(i).iter().zip(other.row(j)).map(|(a, b)| a * b).sum();
            }
        }
        out
    }
}

/// Post-ReLU fc7 vectors, one row per image.
pub fn extract_fc7(net: &Network, images: &[Tensor]) -> Result<Matrix> {
    if images.is_empty() {
        return Err(Error::Empty("no images for fc7 extraction".into()));
    }
    let relu7 = net.layout().relu7;
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| Ok(net.forward_to(img, relu7, None)?.activation(relu7).data().to_vec()))
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

/// Non-negative factorization `V ~ coefficients * basis`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    /// `topics x dim`.
    pub basis: Matrix,
    /// `images x topics`.
    pub coefficients: Matrix,
    pub class_id: Option<u32>,
    /// Frobenius norm of the residual.
    pub reconstruction_error: f64,
    /// Squared residual after each update.
    pub objective: Vec<f64>,
}

fn sq_residual(v: &Matrix, c: &Matrix, b: &Matrix) -> f64 {
    let r = c.matmul(b);
    v.data.iter().zip(&r.data).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `x <- x * num / den` elementwise; a zero denominator leaves `x` alone.
fn mu_step(x: &mut Matrix, num: &Matrix, den: &Matrix) {
    for ((x, &n), &d) in x.data.iter_mut().zip(&num.data).zip(&den.data) {
        if d > 0.0 {
            *x *= n / d;
        }
    }
}

/// Lee-Seung multiplicative updates on `||V - C B||_F^2`.
pub fn nmf(v: &Matrix, rank: usize, iterations: usize, seed: u64) -> Result<TopicModel> {
    if v.rows == 0 || v.cols == 0 {
        return Err(Error::Empty("nmf input is empty".into()));
    }
    if v.data.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument("nmf input has negative or non-finite entries".into()));
    }
    if rank == 0 || rank > v.rows.min(v.cols) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} must be in 1..={} for a {}x{} matrix",
            v.rows.min(v.cols),
            v.rows,
            v.cols
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = v.data.iter().sum::<f64>() / v.data.len() as f64;
    let scale = (mean / rank as f64).sqrt().max(1e-3);
    let mut init = |r, c| Matrix {
        rows: r,
        cols: c,
        data: (0..r * c).map(|_| scale * rng.gen_range(0.5..1.5)).collect(),
    };
    let mut c = init(v.rows, rank);
    let mut b = init(rank, v.cols);
    let mut objective = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let num = c.t_matmul(v);
        let den = c.t_matmul(&c).matmul(&b);
        mu_step(&mut b, &num, &den);
        let num = v.matmul_t(&b);
        let den = c.matmul(&b.matmul_t(&b));
        mu_step(&mut c, &num, &den);
        objective.push(sq_residual(v, &c, &b));
    }
    let err = sq_residual(v, &c, &b).sqrt();
    Ok(TopicModel { basis: b, coefficients: c, class_id: None, reconstruction_error: err, objective })
}

impl TopicModel {
    pub fn rank(&self) -> usize {
        self.basis.rows
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::header(TOPIC_MAGIC, TOPIC_VERSION);
        w.u32(self.class_id.unwrap_or(u32::MAX));
        w.usize32(self.basis.rows)?;
        w.usize32(self.basis.cols)?;
        w.usize32(self.coefficients.rows)?;
        w.f64(self.reconstruction_error);
        w.f64s(&self.basis.data);
        w.f64s(&self.coefficients.data);
        Ok(w.finish())
    }

    /// The objective trace is not stored.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, TOPIC_MAGIC, TOPIC_VERSION, "topic model")?;
        let class = r.u32()?;
        let (k, dim, n) = (r.usize32()?, r.usize32()?, r.usize32()?);
        let reconstruction_error = r.f64()?;
        let basis = Matrix::new(k, dim, r.f64s(k.saturating_mul(dim))?)?;
        let coefficients = Matrix::new(n, k, r.f64s(n.saturating_mul(k))?)?;
        r.finish()?;
        if basis.data.iter().chain(&coefficients.data).any(|&x| !(x >= 0.0)) {
            return Err(Error::Format("topic model has negative entries".into()));
        }
        Ok(TopicModel {
            basis,
            coefficients,
            class_id: (class != u32::MAX).then_some(class),
            reconstruction_error,
            objective: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// How the cone formula's unbalanced parenthesis is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConeReading {
    /// `lambda * ((1 - alpha) f1 + alpha f2)`
    #[default]
    ScaledCombination,
    /// `lambda (1 - alpha) f1 + alpha f2`
    ScaledFirst,
}

/// Linear class head `w * f + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Head {
    pub fn of(net: &Network) -> Self {
        let p = net.weights().params(net.layout().fc8);
        let s = p.weight.shape();
        Head {
            weight: Matrix::new(s[0], s[1], p.weight.data().to_vec()).expect("fc weight is 2-d"),
            bias: p.bias.data().to_vec(),
        }
    }

    pub fn without_bias(&self) -> Self {
        Head { weight: self.weight.clone(), bias: vec![0.0; self.bias.len()] }
    }

    pub fn scores(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.weight.cols {
            return Err(Error::shape("class head", format!("feature of length {} for {} inputs", f.len(), self.weight.cols)));
        }
        Ok((0..self.weight.rows)
            .map(|r| self.weight.row(r).iter().zip(f).map(|(a, b)| a * b).sum::<f64>() + self.bias[r])
            .collect())
    }

    pub fn predict(&self, f: &[f64]) -> Result<usize> {
        Ok(argmax(&self.scores(f)?))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A point of the cone spanned by `f1` and `f2`, and its predicted class.
pub fn cone_membership(
    f1: &[f64],
    f2: &[f64],
    lambda: f64,
    alpha: f64,
    head: &Head,
    reading: ConeReading,
) -> Result<(Vec<f64>, usize)> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if f1.len() != f2.len() {
        return Err(Error::shape("cone", format!("{} vs {}", f1.len(), f2.len())));
    }
    let v: Vec<f64> = f1
        .iter()
        .zip(f2)
        .map(|(&a, &b)| match reading {
            ConeReading::ScaledCombination => lambda * ((1.0 - alpha) * a + alpha * b),
            ConeReading::ScaledFirst => lambda * (1.0 - alpha) * a + alpha * b,
        })
        .collect();
    let class = head.predict(&v)?;
    Ok((v, class))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicScores {
    /// Per image, normalized coefficients.
    pub probabilities: Matrix,
    /// `topics x attributes`; empty without labels.
    pub attribute_scores: Matrix,
}

/// Normalizes coefficient rows (zero rows become uniform) and sums the
/// probabilities of the images carrying each attribute.
pub fn score_topics(model: &TopicModel, labels: Option<(&[Option<usize>], usize)>) -> Result<TopicScores> {
    let c = &model.coefficients;
    let k = c.cols;
    let mut probabilities = Matrix::zeros(c.rows, k);
    for r in 0..c.rows {
        let row = c.row(r);
        let s: f64 = row.iter().sum();
        let out = &mut probabilities.data[r * k..(r + 1) * k];
        if s > 0.0 {
            out.iter_mut().zip(row).for_each(|(o, v)| *o = v / s);
        } else {
            out.iter_mut().for_each(|o| *o = 1.0 / k as f64);
        }
    }
    let attribute_scores = match labels {
        None => Matrix::zeros(k, 0),
        Some((labels, n_attr)) => {
            if labels.len() != c.rows {
                return Err(Error::shape("topic labels", format!("{} labels for {} images", labels.len(), c.rows)));
            }
            let mut m = Matrix::zeros(k, n_attr);
            for (img, label) in labels.iter().enumerate() {
                let Some(a) = *label else { continue };
                if a >= n_attr {
                    return Err(Error::InvalidArgument(format!("attribute {a} >= {n_attr}")));
                }
                for t in 0..k {
                    m.data[t * n_attr + a] += probabilities.get(img, t);
                }
            }
            m
        }
    };
    Ok(TopicScores { probabilities, attribute_scores })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalMode {
    KnnFc7,
    TopicProjection(usize),
}

/// Non-negative least-squares coefficient of `f` on the single vector `b`.
pub fn project_on_topic(f: &[f64], b: &[f64]) -> f64 {
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if bb == 0.0 {
        return 0.0;
    }
    (f.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / bb).max(0.0)
}

/// Collection rows ranked by distance to `query` (ascending, ties by id).
pub fn retrieve(query: &[f64], collection: &Matrix, mode: RetrievalMode, model: Option<&TopicModel>) -> Result<Vec<(usize, f64)>> {
    if collection.rows == 0 {
        return Err(Error::Empty("retrieval collection is empty".into()));
    }
    if query.len() != collection.cols {
        return Err(Error::shape("retrieval query", format!("{} vs {}", query.len(), collection.cols)));
    }
    let mut scored: Vec<(usize, f64)> = match mode {
        RetrievalMode::KnnFc7 => (0..collection.rows)
            .map(|i| {
                let d = collection.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                (i, d)
            })
            .collect(),
        RetrievalMode::TopicProjection(t) => {
            let model = model.ok_or_else(|| Error::InvalidArgument("topic retrieval needs a fitted model".into()))?;
            if t >= model.rank() {
                return Err(Error::InvalidArgument(format!("topic {t} >= rank {}", model.rank())));
            }
            if model.basis.cols != collection.cols {
                return Err(Error::shape("topic retrieval", "model dimension differs from the collection"));
            }
            let b = model.basis.row(t);
            let q = project_on_topic(query, b);
            (0..collection.rows).map(|i| (i, (project_on_topic(collection.row(i), b) - q).abs())).collect()
        }
    };
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}
