//! Local and global losses, stochastic gradients and data partitioning.
//!
//! A [`LocalObjective`] is the empirical mean of a per-sample loss over the
//! node's samples plus a ridge term `reg/2 ‖w‖²`:
//!
//! - quadratic: `f(w; x, y) = ½ (xᵀw − y)²`
//! - logistic:  `f(w; x, y) = log(1 + exp(xᵀw)) − y·xᵀw`, `y ∈ {0, 1}`
//!
//! The global objective weights node `i` by `D_i / D`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{seed_stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Quadratic,
    Logistic,
}

/// Samples stored row-wise: `features` is `samples × dim`, one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, targets: Vec<f64>) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::shape(
                format!("{} targets", features.nrows()),
                targets.len(),
            ));
        }
        Ok(Self { features, targets })
    }

    /// Loads a CSV file with one sample per row and the label in the last
    /// column. A non-numeric first row is treated as a header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            let parsed: std::result::Result<Vec<f64>, _> =
                record.iter().map(|f| f.parse::<f64>()).collect();
            match parsed {
                Ok(v) => rows.push(v),
                Err(_) if lineno == 0 => continue,
                Err(e) => {
                    return Err(Error::Parse(format!(
                        "{} line {}: {e}",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        let width = rows.first().map(Vec::len).unwrap_or(0);
        if width < 2 {
            return Err(Error::Parse(format!(
                "{}: need at least one feature and a label per row",
                path.display()
            )));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != width) {
            return Err(Error::Parse(format!(
                "{}: row {} has {} fields, expected {width}",
                path.display(),
                bad + 1,
                rows[bad].len()
            )));
        }
        let dim = width - 1;
        let features = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c]);
        let targets = rows.iter().map(|r| r[dim]).collect();
        Self::new(features, targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let features = self.features.select_rows(indices);
        let targets = indices.iter().map(|&i| self.targets[i]).collect();
        Dataset { features, targets }
    }
}

/// Minibatch policy for stochastic gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Batch {
    /// Exact local gradient over every sample.
    Full,
    /// `n` indices drawn uniformly with replacement.
    Size(usize),
}

impl Batch {
    /// Draws the sample indices for one gradient evaluation. `None` means the
    /// full local dataset.
    pub fn draw<R: Rng + ?Sized>(&self, samples: usize, rng: &mut R) -> Option<Vec<usize>> {
        match *self {
            Batch::Full => None,
            Batch::Size(b) => Some((0..b).map(|_| rng.random_range(0..samples)).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalObjective {
    kind: LossKind,
    features: DMatrix<f64>,
    targets: DVector<f64>,
    reg: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LocalObjective {
    pub fn new(kind: LossKind, data: Dataset, reg: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidPartition("node has no samples".into()));
        }
        if !(reg >= 0.0) {
            return Err(Error::config("reg", format!("must be >= 0, got {reg}")));
        }
        if kind == LossKind::Logistic {
            if let Some(y) = data.targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
                return Err(Error::Parse(format!("logistic label {y} is not 0 or 1")));
            }
        }
        Ok(Self {
            kind,
            targets: DVector::from_vec(data.targets),
            features: data.features,
            reg,
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn sample_count(&self) -> usize {
        self.targets.len()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    fn check_dim(&self, w: &DVector<f64>) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::shape(format!("dimension {}", self.dim()), w.len()));
        }
        Ok(())
    }

    fn margin(&self, j: usize, w: &DVector<f64>) -> f64 {
        self.features.row(j).transpose().dot(w)
    }

    // d f / d (xᵀw)
    fn residual(&self, j: usize, w: &DVector<f64>) -> f64 {
        let z = self.margin(j, w);
        match self.kind {
            LossKind::Quadratic => z - self.targets[j],
            LossKind::Logistic => sigmoid(z) - self.targets[j],
        }
    }

    fn sample_loss(&self, j: usize, w: &DVector<f64>) -> f64 {
        let z = self.margin(j, w);
        let y = self.targets[j];
        match self.kind {
            LossKind::Quadratic => 0.5 * (z - y).powi(2),
            LossKind::Logistic => softplus(z) - y * z,
        }
    }

    /// `F_i(w)`.
    pub fn loss(&self, w: &DVector<f64>) -> Result<f64> {
        self.check_dim(w)?;
        let m = self.sample_count();
        let data: f64 = (0..m).map(|j| self.sample_loss(j, w)).sum::<f64>() / m as f64;
        Ok(data + 0.5 * self.reg * w.norm_squared())
    }

    /// Gradient of the single-sample loss `f(w; x_j, y_j) + reg/2 ‖w‖²`.
    pub fn sample_gradient(&self, j: usize, w: &DVector<f64>) -> DVector<f64> {
        let r = self.residual(j, w);
        self.features.row(j).transpose() * r + w * self.reg
    }

    /// Exact `∇F_i(w)`.
    pub fn gradient(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(w)?;
        let m = self.sample_count();
        let residuals = DVector::from_fn(m, |j, _| self.residual(j, w));
        Ok(self.features.tr_mul(&residuals) / m as f64 + w * self.reg)
    }

    /// Minibatch gradient over `batch` (indices may repeat).
    pub fn stochastic_gradient(&self, w: &DVector<f64>, batch: &[usize]) -> Result<DVector<f64>> {
        self.check_dim(w)?;
        if batch.is_empty() {
            return Err(Error::InvalidBatch("empty batch".into()));
        }
        let m = self.sample_count();
        if let Some(&bad) = batch.iter().find(|&&j| j >= m) {
            return Err(Error::InvalidBatch(format!(
                "index {bad} out of range for {m} samples"
            )));
        }
        let mut acc = DVector::zeros(self.dim());
        for &j in batch {
            let r = self.residual(j, w);
            acc.axpy(r, &self.features.row(j).transpose(), 1.0);
        }
        Ok(acc / batch.len() as f64 + w * self.reg)
    }

    /// Draws a batch with `rng` and evaluates the minibatch gradient.
    pub fn sample_gradient_with<R: Rng + ?Sized>(
        &self,
        w: &DVector<f64>,
        batch: Batch,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        match batch.draw(self.sample_count(), rng) {
            None => self.gradient(w),
            Some(idx) => self.stochastic_gradient(w, &idx),
        }
    }

    fn gram_eigen_extremes(&self) -> (f64, f64) {
        let m = self.sample_count() as f64;
        let gram = self.features.tr_mul(&self.features) / m;
        let eig = gram.symmetric_eigen().eigenvalues;
        let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        (min.max(0.0), max.max(0.0))
    }

    /// Smoothness constant `L_i`.
    pub fn smoothness(&self) -> f64 {
        let (_, max) = self.gram_eigen_extremes();
        match self.kind {
            LossKind::Quadratic => max + self.reg,
            LossKind::Logistic => max / 4.0 + self.reg,
        }
    }

    /// Strong convexity constant `μ_i`.
    pub fn strong_convexity(&self) -> f64 {
        match self.kind {
            LossKind::Quadratic => self.gram_eigen_extremes().0 + self.reg,
            LossKind::Logistic => self.reg,
        }
    }

    /// Per-sample gradient variance `(1/m) Σ ‖g_j − ∇F_i‖²` at `w`, without
    /// the ridge part (which is identical for every sample).
    fn per_sample_variance(&self, w: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let m = self.sample_count();
        let data_mean = mean - w * self.reg;
        (0..m)
            .map(|j| {
                let g = self.features.row(j).transpose() * self.residual(j, w);
                (g - &data_mean).norm_squared()
            })
            .sum::<f64>()
            / m as f64
    }
}

/// Empirical gradient-noise constants, already inflated by
/// [`VARIANCE_SAFETY`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceEstimates {
    /// Largest pure sampling variance `E‖g_i − ∇F_i‖²` over nodes and probes.
    pub sigma_sq: f64,
    /// Largest `E‖g_i − ∇F‖²` (sampling noise plus heterogeneity) over nodes
    /// and probes. This is the quantity the DFL bound is stated in.
    pub sigma_sq_global: f64,
    /// Node average of the per-node worst-case sampling variance.
    pub sigma_bar_sq: f64,
    /// Largest second moment `E‖g_i‖²`.
    pub g_sq: f64,
}

pub const VARIANCE_SAFETY: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalObjective {
    locals: Vec<LocalObjective>,
    weights: Vec<f64>,
}

impl GlobalObjective {
    /// Weights each node by its share of the samples.
    pub fn new(locals: Vec<LocalObjective>) -> Result<Self> {
        let first = locals
            .first()
            .ok_or_else(|| Error::InvalidPartition("no nodes".into()))?;
        let (d, kind) = (first.dim(), first.kind());
        if let Some(bad) = locals.iter().find(|l| l.dim() != d) {
            return Err(Error::shape(format!("dimension {d}"), bad.dim()));
        }
        if locals.iter().any(|l| l.kind() != kind) {
            return Err(Error::UnsupportedObjective("mixed loss kinds".into()));
        }
        let total: usize = locals.iter().map(LocalObjective::sample_count).sum();
        let weights = locals
            .iter()
            .map(|l| l.sample_count() as f64 / total as f64)
            .collect();
        Ok(Self { locals, weights })
    }

    /// Splits `data` by `parts` (one index set per node).
    pub fn from_partition(
        kind: LossKind,
        data: &Dataset,
        parts: &[Vec<usize>],
        reg: f64,
    ) -> Result<Self> {
        let locals = parts
            .iter()
            .map(|idx| LocalObjective::new(kind, data.subset(idx), reg))
            .collect::<Result<Vec<_>>>()?;
        Self::new(locals)
    }

    pub fn locals(&self) -> &[LocalObjective] {
        &self.locals
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_nodes(&self) -> usize {
        self.locals.len()
    }

    pub fn dim(&self) -> usize {
        self.locals[0].dim()
    }

    pub fn kind(&self) -> LossKind {
        self.locals[0].kind()
    }

    /// `F(w) = Σ (D_i/D) F_i(w)`.
    pub fn loss(&self, w: &DVector<f64>) -> Result<f64> {
        let mut total = 0.0;
        for (l, &p) in self.locals.iter().zip(&self.weights) {
            total += p * l.loss(w)?;
        }
        Ok(total)
    }

    pub fn gradient(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(self.dim());
        for (l, &p) in self.locals.iter().zip(&self.weights) {
            g.axpy(p, &l.gradient(w)?, 1.0);
        }
        Ok(g)
    }

    /// `max_i L_i`.
    pub fn smoothness(&self) -> f64 {
        self.locals
            .iter()
            .map(LocalObjective::smoothness)
            .fold(0.0, f64::max)
    }

    /// `min_i μ_i`.
    pub fn strong_convexity(&self) -> f64 {
        self.locals
            .iter()
            .map(LocalObjective::strong_convexity)
            .fold(f64::INFINITY, f64::min)
    }

    fn hessian_at(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for (l, &p) in self.locals.iter().zip(&self.weights) {
            let m = l.sample_count() as f64;
            let curvature = DVector::from_fn(l.sample_count(), |j, _| match l.kind {
                LossKind::Quadratic => 1.0,
                LossKind::Logistic => {
                    let s = sigmoid(l.margin(j, w));
                    s * (1.0 - s)
                }
            });
            let weighted = DMatrix::from_fn(l.features.nrows(), d, |r, c| {
                l.features[(r, c)] * curvature[r]
            });
            h += (l.features.tr_mul(&weighted) / m + DMatrix::identity(d, d) * l.reg) * p;
        }
        h
    }

    /// Hessian of a quadratic global objective (constant in `w`).
    pub fn quadratic_hessian(&self) -> Option<DMatrix<f64>> {
        (self.kind() == LossKind::Quadratic).then(|| self.hessian_at(&DVector::zeros(self.dim())))
    }

    /// Closed-form minimiser of a quadratic global objective.
    pub fn quadratic_optimum(&self) -> Result<DVector<f64>> {
        let h = self
            .quadratic_hessian()
            .ok_or_else(|| Error::UnsupportedObjective("not quadratic".into()))?;
        let d = self.dim();
        let mut rhs = DVector::zeros(d);
        for (l, &p) in self.locals.iter().zip(&self.weights) {
            rhs += l.features.tr_mul(&l.targets) * (p / l.sample_count() as f64);
        }
        h.cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::Numeric("quadratic Hessian is not positive definite".into()))
    }

    /// Minimiser and minimum value. Quadratics are solved in closed form;
    /// logistic problems by damped Newton until `‖∇F‖ ≤ 1e-10`.
    pub fn minimum(&self) -> Result<(DVector<f64>, f64)> {
        let w = match self.kind() {
            LossKind::Quadratic => self.quadratic_optimum()?,
            LossKind::Logistic => self.newton_minimum()?,
        };
        let f = self.loss(&w)?;
        Ok((w, f))
    }

    fn newton_minimum(&self) -> Result<DVector<f64>> {
        let mut w = DVector::zeros(self.dim());
        for _ in 0..200 {
            let g = self.gradient(&w)?;
            if g.norm() <= 1e-10 {
                return Ok(w);
            }
            let step = self
                .hessian_at(&w)
                .cholesky()
                .map(|c| c.solve(&g))
                .ok_or_else(|| {
                    Error::UnsupportedObjective("logistic Hessian is singular; use reg > 0".into())
                })?;
            let f0 = self.loss(&w)?;
            let slope = g.dot(&step);
            let mut t = 1.0;
            loop {
                let cand = &w - &step * t;
                if self.loss(&cand)? <= f0 - 0.25 * t * slope || t < 1e-12 {
                    w = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        let g = self.gradient(&w)?.norm();
        if g <= 1e-9 {
            Ok(w)
        } else {
            Err(Error::Numeric(format!(
                "Newton did not converge (‖∇F‖ = {g:e})"
            )))
        }
    }

    /// Noise constants evaluated exactly over each node's empirical sample
    /// distribution at every probe point, then inflated by 1.5.
    pub fn variance_estimates(
        &self,
        probes: &[DVector<f64>],
        batch: Batch,
    ) -> Result<VarianceEstimates> {
        if probes.is_empty() {
            return Err(Error::config("probes", "need at least one probe point"));
        }
        let n = self.num_nodes();
        let mut sigma_sq: f64 = 0.0;
        let mut sigma_sq_global: f64 = 0.0;
        let mut g_sq: f64 = 0.0;
        let mut per_node = vec![0.0_f64; n];
        for w in probes {
            let global = self.gradient(w)?;
            for (i, l) in self.locals.iter().enumerate() {
                let local = l.gradient(w)?;
                let sampling = match batch {
                    Batch::Full => 0.0,
                    Batch::Size(b) => l.per_sample_variance(w, &local) / b as f64,
                };
                per_node[i] = per_node[i].max(sampling);
                sigma_sq = sigma_sq.max(sampling);
                sigma_sq_global = sigma_sq_global.max(sampling + (&local - &global).norm_squared());
                g_sq = g_sq.max(sampling + local.norm_squared());
            }
        }
        let sigma_bar_sq = per_node.iter().sum::<f64>() / n as f64;
        Ok(VarianceEstimates {
            sigma_sq: VARIANCE_SAFETY * sigma_sq,
            sigma_sq_global: VARIANCE_SAFETY * sigma_sq_global,
            sigma_bar_sq: VARIANCE_SAFETY * sigma_bar_sq,
            g_sq: VARIANCE_SAFETY * g_sq,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    LabelSorted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub shards_per_node: usize,
    pub seed: u64,
}

/// Splits `labels.len()` samples over `n` nodes. Leftover samples go to the
/// last node (iid) or the last shard (label-sorted).
pub fn partition(labels: &[f64], spec: &PartitionSpec, n: usize) -> Result<Vec<Vec<usize>>> {
    let len = labels.len();
    if n == 0 || n > len {
        return Err(Error::InvalidPartition(format!(
            "cannot split {len} samples over {n} nodes"
        )));
    }
    match spec.mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..len).collect();
            idx.shuffle(&mut seed_stream(spec.seed, 0, 0, Purpose::Partition));
            Ok(split_even(&idx, n))
        }
        PartitionMode::LabelSorted => {
            if spec.shards_per_node == 0 {
                return Err(Error::InvalidPartition(
                    "shards_per_node must be >= 1".into(),
                ));
            }
            let shards = n * spec.shards_per_node;
            if shards > len {
                return Err(Error::InvalidPartition(format!(
                    "{shards} shards requested for {len} samples"
                )));
            }
            let mut idx: Vec<usize> = (0..len).collect();
            idx.sort_by(|&a, &b| labels[a].total_cmp(&labels[b]).then(a.cmp(&b)));
            let mut parts = vec![Vec::new(); n];
            for (s, shard) in split_even(&idx, shards).into_iter().enumerate() {
                parts[s % n].extend(shard);
            }
            Ok(parts)
        }
    }
}

fn split_even(idx: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = idx.len() / parts;
    (0..parts)
        .map(|p| {
            let start = p * base;
            let end = if p + 1 == parts {
                idx.len()
            } else {
                start + base
            };
            idx[start..end].to_vec()
        })
        .collect()
}

/// Synthetic per-node least-squares problems with controllable conditioning
/// and non-i.i.d. drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticProblem {
    pub nodes: usize,
    pub dim: usize,
    pub samples_per_node: usize,
    /// Target condition number of each node's Gram matrix.
    pub cond: f64,
    /// Spread of the per-node generating parameters around a shared centre.
    pub heterogeneity: f64,
    /// Standard deviation of the target noise.
    pub noise: f64,
    pub reg: f64,
    pub seed: u64,
}

impl QuadraticProblem {
    pub fn build(&self) -> Result<GlobalObjective> {
        if self.nodes == 0 || self.dim == 0 || self.samples_per_node == 0 {
            return Err(Error::config(
                "objective",
                "nodes, dim and samples must be >= 1",
            ));
        }
        if !(self.cond >= 1.0) {
            return Err(Error::config(
                "cond",
                format!("must be >= 1, got {}", self.cond),
            ));
        }
        let d = self.dim;
        let scales: Vec<f64> = (0..d)
            .map(|k| {
                if d == 1 {
                    1.0
                } else {
                    self.cond.powf(-(k as f64) / (2.0 * (d - 1) as f64))
                }
            })
            .collect();
        let mut shared = seed_stream(self.seed, 0, 0, Purpose::Problem);
        let centre = DVector::from_fn(d, |_, _| shared.sample::<f64, _>(StandardNormal));
        let locals = (0..self.nodes)
            .map(|i| {
                let mut rng = seed_stream(self.seed, i, 1, Purpose::Problem);
                let a = DMatrix::from_fn(self.samples_per_node, d, |_, c| {
                    rng.sample::<f64, _>(StandardNormal) * scales[c]
                });
                let shift = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let w_local = &centre + shift * self.heterogeneity;
                let mut b = &a * w_local;
                for v in b.iter_mut() {
                    *v += self.noise * rng.sample::<f64, _>(StandardNormal);
                }
                let data = Dataset::new(a, b.iter().copied().collect())?;
                LocalObjective::new(LossKind::Quadratic, data, self.reg)
            })
            .collect::<Result<Vec<_>>>()?;
        GlobalObjective::new(locals)
    }
}

/// Two Gaussian classes separated along a random direction; labels are
/// balanced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticProblem {
    pub samples: usize,
    pub dim: usize,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    pub seed: u64,
}

impl LogisticProblem {
    pub fn dataset(&self) -> Result<Dataset> {
        if self.samples == 0 || self.dim == 0 {
            return Err(Error::config("objective", "samples and dim must be >= 1"));
        }
        let mut rng = seed_stream(self.seed, 0, 2, Purpose::Problem);
        let raw = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let direction = raw.normalize();
        let targets: Vec<f64> = (0..self.samples).map(|s| (s % 2) as f64).collect();
        let features = DMatrix::from_fn(self.samples, self.dim, |r, c| {
            let sign = 2.0 * targets[r] - 1.0;
            sign * self.separation * direction[c]
        }) + DMatrix::from_fn(self.samples, self.dim, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        Dataset::new(features, targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_quadratic(center: f64) -> LocalObjective {
        let data = Dataset::new(DMatrix::from_element(1, 1, 1.0), vec![center]).unwrap();
        LocalObjective::new(LossKind::Quadratic, data, 0.0).unwrap()
    }

    fn small_quadratic(seed: u64, heterogeneity: f64) -> GlobalObjective {
        QuadraticProblem {
            nodes: 4,
            dim: 3,
            samples_per_node: 20,
            cond: 5.0,
            heterogeneity,
            noise: 0.3,
            reg: 0.01,
            seed,
        }
        .build()
        .unwrap()
    }

    fn small_logistic(seed: u64) -> GlobalObjective {
        let data = LogisticProblem {
            samples: 80,
            dim: 3,
            separation: 1.0,
            seed,
        }
        .dataset()
        .unwrap();
        let spec = PartitionSpec {
            mode: PartitionMode::LabelSorted,
            shards_per_node: 1,
            seed,
        };
        let parts = partition(&data.targets, &spec, 4).unwrap();
        GlobalObjective::from_partition(LossKind::Logistic, &data, &parts, 0.01).unwrap()
    }

    #[test]
    fn two_node_scalar_loss() {
        let g = GlobalObjective::new(vec![scalar_quadratic(1.0), scalar_quadratic(-1.0)]).unwrap();
        let w = DVector::from_vec(vec![0.0]);
        assert!((g.loss(&w).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_quadratic_zero_loss() {
        let data = Dataset::new(DMatrix::identity(3, 3), vec![0.0; 3]).unwrap();
        let l = LocalObjective::new(LossKind::Quadratic, data, 0.0).unwrap();
        let g = GlobalObjective::new(vec![l.clone(), l]).unwrap();
        assert_eq!(g.loss(&DVector::zeros(3)).unwrap(), 0.0);
    }

    #[test]
    fn logistic_all_zero_labels_at_origin() {
        let data = Dataset::new(DMatrix::from_element(5, 2, 0.7), vec![0.0; 5]).unwrap();
        let l = LocalObjective::new(LossKind::Logistic, data, 0.0).unwrap();
        assert!((l.loss(&DVector::zeros(2)).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let g = small_quadratic(1, 1.0);
        assert!(matches!(
            g.loss(&DVector::zeros(5)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn full_batch_equals_exact_gradient() {
        let g = small_quadratic(2, 1.0);
        let l = &g.locals()[1];
        let w = DVector::from_vec(vec![0.3, -0.2, 0.9]);
        let all: Vec<usize> = (0..l.sample_count()).collect();
        let diff = l.stochastic_gradient(&w, &all).unwrap() - l.gradient(&w).unwrap();
        assert!(diff.amax() < 1e-12);
    }

    #[test]
    fn single_sample_quadratic_gradient() {
        let g = small_quadratic(3, 1.0);
        let l = &g.locals()[0];
        let w = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let row = l.features().row(4).transpose();
        let by_hand = &row * (row.dot(&w) - l.targets()[4]) + &w * l.reg();
        let got = l.stochastic_gradient(&w, &[4]).unwrap();
        assert!((got - by_hand).amax() < 1e-12);
    }

    #[test]
    fn empty_and_out_of_range_batches() {
        let g = small_quadratic(3, 1.0);
        let l = &g.locals()[0];
        let w = DVector::zeros(3);
        assert!(matches!(
            l.stochastic_gradient(&w, &[]),
            Err(Error::InvalidBatch(_))
        ));
        assert!(matches!(
            l.stochastic_gradient(&w, &[1000]),
            Err(Error::InvalidBatch(_))
        ));
    }

    #[test]
    fn quadratic_optimum_is_stationary() {
        for seed in 0..5 {
            let g = small_quadratic(seed, 2.0);
            let w = g.quadratic_optimum().unwrap();
            assert!(g.gradient(&w).unwrap().norm() < 1e-8);
        }
    }

    #[test]
    fn logistic_newton_minimum_is_stationary() {
        let g = small_logistic(4);
        let (w, f) = g.minimum().unwrap();
        assert!(g.gradient(&w).unwrap().norm() <= 1e-10);
        assert!(f < g.loss(&DVector::zeros(3)).unwrap());
    }

    fn finite_difference(g: &GlobalObjective, w: &DVector<f64>) -> DVector<f64> {
        let h = 1e-5;
        DVector::from_fn(w.len(), |k, _| {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[k] += h;
            minus[k] -= h;
            (g.loss(&plus).unwrap() - g.loss(&minus).unwrap()) / (2.0 * h)
        })
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for g in [small_quadratic(5, 1.0), small_logistic(5)] {
            for _ in 0..10 {
                let w = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
                let exact = g.gradient(&w).unwrap();
                let fd = finite_difference(&g, &w);
                let rel = (&exact - &fd).norm() / exact.norm().max(1e-8);
                assert!(rel < 1e-5, "relative error {rel}");
            }
        }
    }

    #[test]
    fn curvature_constants_bracket_hessian() {
        for seed in 0..5 {
            let g = small_quadratic(seed, 1.0);
            let eig = g.quadratic_hessian().unwrap().symmetric_eigen().eigenvalues;
            let (lo, hi) = (eig.min(), eig.max());
            assert!(g.strong_convexity() <= lo + 1e-12);
            assert!(hi <= g.smoothness() + 1e-12);
        }
        let lg = small_logistic(1);
        for l in lg.locals() {
            let max_row = (0..l.sample_count())
                .map(|j| l.features().row(j).norm_squared())
                .fold(0.0, f64::max);
            assert!(l.smoothness() <= max_row / 4.0 + l.reg() + 1e-12);
            assert_eq!(l.strong_convexity(), l.reg());
        }
    }

    #[test]
    fn stochastic_gradient_is_unbiased() {
        let g = small_quadratic(6, 1.0);
        let l = &g.locals()[2];
        let w = DVector::from_vec(vec![0.5, -0.5, 0.25]);
        let exact = l.gradient(&w).unwrap();
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut sum = DVector::zeros(3);
        let mut sum_sq = DVector::zeros(3);
        for _ in 0..draws {
            let gr = l
                .sample_gradient_with(&w, Batch::Size(1), &mut rng)
                .unwrap();
            sum_sq += gr.component_mul(&gr);
            sum += gr;
        }
        let mean = &sum / draws as f64;
        for k in 0..3 {
            let var = sum_sq[k] / draws as f64 - mean[k] * mean[k];
            let se = (var / draws as f64).sqrt();
            assert!((mean[k] - exact[k]).abs() <= 3.0 * se, "coordinate {k}");
        }
    }

    #[test]
    fn variance_estimates_match_monte_carlo() {
        let g = small_quadratic(7, 1.0);
        let w = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let full = g
            .variance_estimates(std::slice::from_ref(&w), Batch::Full)
            .unwrap();
        assert_eq!(full.sigma_sq, 0.0);
        assert_eq!(full.sigma_bar_sq, 0.0);
        let est = g
            .variance_estimates(std::slice::from_ref(&w), Batch::Size(1))
            .unwrap();
        assert!(est.sigma_sq > 0.0);
        assert!(est.g_sq >= est.sigma_bar_sq);
        assert!(est.sigma_sq_global >= est.sigma_sq);
        // Monte-Carlo sampling variance of the worst node.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let worst = g
            .locals()
            .iter()
            .map(|l| {
                let exact = l.gradient(&w).unwrap();
                (0..40_000)
                    .map(|_| {
                        (l.sample_gradient_with(&w, Batch::Size(1), &mut rng)
                            .unwrap()
                            - &exact)
                            .norm_squared()
                    })
                    .sum::<f64>()
                    / 40_000.0
            })
            .fold(0.0, f64::max);
        let rel = (est.sigma_sq / VARIANCE_SAFETY - worst).abs() / worst;
        assert!(rel < 0.05, "relative gap {rel}");
    }

    #[test]
    fn iid_partition_is_deterministic_and_complete() {
        let labels: Vec<f64> = (0..103).map(|i| (i % 3) as f64).collect();
        let spec = PartitionSpec {
            mode: PartitionMode::Iid,
            shards_per_node: 1,
            seed: 9,
        };
        let a = partition(&labels, &spec, 10).unwrap();
        assert_eq!(a, partition(&labels, &spec, 10).unwrap());
        let mut all: Vec<usize> = a.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(a[9].len(), 13);
    }

    #[test]
    fn label_sorted_two_nodes_are_pure() {
        let labels: Vec<f64> = (0..40).map(|i| (i % 2) as f64).collect();
        let spec = PartitionSpec {
            mode: PartitionMode::LabelSorted,
            shards_per_node: 1,
            seed: 0,
        };
        let p = partition(&labels, &spec, 2).unwrap();
        assert!(p[0].iter().all(|&i| labels[i] == 0.0));
        assert!(p[1].iter().all(|&i| labels[i] == 1.0));
        assert_eq!(p[0].len() + p[1].len(), 40);
    }

    #[test]
    fn too_many_nodes_rejected() {
        let spec = PartitionSpec {
            mode: PartitionMode::Iid,
            shards_per_node: 1,
            seed: 0,
        };
        assert!(matches!(
            partition(&[0.0; 3], &spec, 4),
            Err(Error::InvalidPartition(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x1,x2,label\n1.0,2.0,0\n-1.5,0.5,1\n").unwrap();
        let d = Dataset::from_csv(&path).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.targets, vec![0.0, 1.0]);
        assert_eq!(d.features[(1, 0)], -1.5);
        std::fs::write(&path, "1.0,2.0,0\n1.0,x,1\n").unwrap();
        assert!(Dataset::from_csv(&path).is_err());
    }
}
