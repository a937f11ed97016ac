//! Doubly stochastic mixing matrices and their spectral summary.
//!
//! Entry `(j, i)` of a [`MixingMatrix`] is the weight `c_ji` that node `j`
//! contributes to the average formed at node `i`. A gossip step maps the
//! parameter matrix `X` (one column per node) to `X * C`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for stochasticity, symmetry and sign checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Tolerance for spectral identities.
pub const SPECTRAL_TOL: f64 = 1e-10;

/// Symmetric, zero-diagonal boolean adjacency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    cells: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            cells: vec![false; n * n],
        }
    }

    /// Builds an undirected graph from an edge list. Self loops are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = Self::empty(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidTopology(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::InvalidTopology(format!("self loop at node {i}")));
            }
            adj.set(i, j, true);
            adj.set(j, i, true);
        }
        Ok(adj)
    }

    /// Builds from a raw boolean matrix; fails unless it is symmetric with a
    /// zero diagonal.
    pub fn from_matrix(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        let mut adj = Self::empty(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidTopology(format!(
                    "adjacency row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                adj.set(i, j, v);
            }
        }
        for i in 0..n {
            if adj.get(i, i) {
                return Err(Error::InvalidTopology(format!("self loop at node {i}")));
            }
            for j in 0..i {
                if adj.get(i, j) != adj.get(j, i) {
                    return Err(Error::InvalidTopology(format!(
                        "adjacency is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(adj)
    }

    /// Parses an edge-list file: one `i j` pair per line, 0-indexed. Blank
    /// lines and `#` comments are skipped. The node count is the largest
    /// index plus one unless `nodes` is given.
    pub fn parse_edge_list(text: &str, nodes: Option<usize>) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<usize> {
                tok.ok_or_else(|| Error::Parse(format!("line {}: expected `i j`", lineno + 1)))?
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
            };
            let i = parse(parts.next())?;
            let j = parse(parts.next())?;
            if parts.next().is_some() {
                return Err(Error::Parse(format!(
                    "line {}: trailing tokens after edge",
                    lineno + 1
                )));
            }
            edges.push((i, j));
        }
        let inferred = edges.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0);
        let n = match nodes {
            Some(n) if n < inferred => {
                return Err(Error::InvalidTopology(format!(
                    "edge list references node {} but only {n} nodes were declared",
                    inferred - 1
                )))
            }
            Some(n) => n,
            None => inferred,
        };
        Self::from_edges(n, &edges)
    }

    pub fn read_edge_list(path: &Path, nodes: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_edge_list(&text, nodes)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, v: bool) {
        self.cells[i * self.n + j] = v;
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.get(i, j)).count()
    }
}

/// Rule used to turn an adjacency into mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// Every edge gets `1/(deg_max + 1)`, the diagonal takes the remainder.
    UniformDegree,
    /// Edge `(j, i)` gets `1/(1 + max(deg_j, deg_i))`.
    Metropolis,
}

/// A validated symmetric doubly stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    entries: DMatrix<f64>,
}

impl MixingMatrix {
    /// Wraps `entries` after checking every invariant.
    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    /// Each node averages itself and its two ring neighbours with weight 1/3.
    pub fn ring(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidTopology(format!(
                "a ring needs at least 3 nodes, got {n}"
            )));
        }
        let mut c = DMatrix::zeros(n, n);
        for i in 0..n {
            for off in [n - 1, 0, 1] {
                c[((i + off) % n, i)] = 1.0 / 3.0;
            }
        }
        Self::from_entries(c)
    }

    /// The consensus matrix `J = 11ᵀ/n`.
    pub fn complete(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidTopology("complete graph needs n >= 1".into()));
        }
        Self::from_entries(DMatrix::from_element(n, n, 1.0 / n as f64))
    }

    pub fn identity(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidTopology("identity needs n >= 1".into()));
        }
        Self::from_entries(DMatrix::identity(n, n))
    }

    /// Ring plus one chord between node 0 and node `n/2`, uniform-degree
    /// weights.
    pub fn quasi_ring(n: usize) -> Result<Self> {
        if n < 4 {
            return Err(Error::InvalidTopology(format!(
                "a quasi-ring needs at least 4 nodes, got {n}"
            )));
        }
        let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        edges.push((0, n / 2));
        let adj = Adjacency::from_edges(n, &edges)?;
        Self::from_adjacency(&adj, WeightScheme::UniformDegree)
    }

    /// `groups` cliques of `group_size` nodes arranged in a ring; every node is
    /// linked to its clique and to all members of the two adjacent cliques.
    /// Uniform-degree weights.
    pub fn group_ring(groups: usize, group_size: usize) -> Result<Self> {
        if groups < 3 || group_size == 0 {
            return Err(Error::InvalidTopology(format!(
                "group ring needs >= 3 groups of >= 1 node, got {groups}x{group_size}"
            )));
        }
        let n = groups * group_size;
        let mut edges = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                let (ga, gb) = (a / group_size, b / group_size);
                let gap = (gb + groups - ga) % groups;
                if gap == 0 || gap == 1 || gap == groups - 1 {
                    edges.push((a, b));
                }
            }
        }
        let adj = Adjacency::from_edges(n, &edges)?;
        Self::from_adjacency(&adj, WeightScheme::UniformDegree)
    }

    pub fn from_adjacency(adj: &Adjacency, scheme: WeightScheme) -> Result<Self> {
        let n = adj.n();
        if n == 0 {
            return Err(Error::InvalidTopology("empty graph".into()));
        }
        let degrees: Vec<usize> = (0..n).map(|i| adj.degree(i)).collect();
        let deg_max = degrees.iter().copied().max().unwrap_or(0);
        let mut c = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if j != i && adj.get(j, i) {
                    c[(j, i)] = match scheme {
                        WeightScheme::UniformDegree => 1.0 / (deg_max as f64 + 1.0),
                        WeightScheme::Metropolis => 1.0 / (1.0 + degrees[j].max(degrees[i]) as f64),
                    };
                }
            }
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| c[(j, i)]).sum();
            c[(i, i)] = 1.0 - off;
        }
        Self::from_entries(c)
    }

    /// Checks double stochasticity, symmetry, non-negativity and a positive
    /// diagonal.
    pub fn validate(&self) -> Result<()> {
        let c = &self.entries;
        let n = c.nrows();
        if n == 0 || c.ncols() != n {
            return Err(Error::InvalidTopology(format!(
                "mixing matrix must be square and non-empty, got {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        for i in 0..n {
            let row: f64 = c.row(i).sum();
            let col: f64 = c.column(i).sum();
            if (row - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidTopology(format!("row {i} sums to {row}")));
            }
            if (col - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidTopology(format!("column {i} sums to {col}")));
            }
            if c[(i, i)] <= 0.0 {
                return Err(Error::InvalidTopology(format!(
                    "diagonal entry {i} is not positive"
                )));
            }
            for j in 0..n {
                let v = c[(j, i)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidTopology(format!(
                        "entry ({j}, {i}) = {v} is negative or non-finite"
                    )));
                }
                if (v - c[(i, j)]).abs() > STOCHASTIC_TOL {
                    return Err(Error::InvalidTopology(format!(
                        "matrix is not symmetric at ({j}, {i})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Weight `c_ji` of node `j` in the average formed at node `i`.
    pub fn weight(&self, j: usize, i: usize) -> f64 {
        self.entries[(j, i)]
    }

    /// Nodes `j != i` with `c_ji > 0`.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&j| j != i && self.entries[(j, i)] > 0.0)
            .collect()
    }

    /// Directed off-diagonal edges `(src, dst)` of the support.
    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for src in 0..n {
            for dst in 0..n {
                if src != dst && self.entries[(src, dst)] > 0.0 {
                    out.push((src, dst));
                }
            }
        }
        out
    }

    /// The consensus matrix of the same size.
    pub fn consensus(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_element(n, n, 1.0 / n as f64)
    }

    pub fn spectral(&self) -> Result<SpectralSummary> {
        SpectralSummary::of(self)
    }

    /// `‖C^j − J‖_op` by explicit matrix power and largest singular value.
    pub fn power_gap_norm(&self, j: u32) -> f64 {
        let n = self.n();
        let mut power = DMatrix::<f64>::identity(n, n);
        for _ in 0..j {
            power = &power * &self.entries;
        }
        let gap = power - self.consensus();
        gap.singular_values().max()
    }
}

/// Spectral quantities of a mixing matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralSummary {
    /// Largest magnitude over the non-principal eigenvalues.
    pub zeta: f64,
    /// `‖I − C‖₂`.
    pub beta: f64,
    /// Spectral gap `1 − zeta`.
    pub rho: f64,
    /// Eigenvalues sorted in descending order.
    pub eigenvalues: Vec<f64>,
}

impl SpectralSummary {
    fn of(c: &MixingMatrix) -> Result<Self> {
        let eig = c.entries.clone().symmetric_eigen();
        let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "eigensolver returned non-finite values".into(),
            ));
        }
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let lead = eigenvalues[0];
        if (lead - 1.0).abs() > SPECTRAL_TOL {
            return Err(Error::Numeric(format!(
                "leading eigenvalue is {lead}, expected 1"
            )));
        }
        if let Some(bad) = eigenvalues.iter().find(|v| v.abs() > 1.0 + SPECTRAL_TOL) {
            return Err(Error::Numeric(format!(
                "eigenvalue {bad} exceeds 1 in magnitude"
            )));
        }
        let zeta = eigenvalues[1..]
            .iter()
            .map(|v| v.abs())
            .fold(0.0_f64, f64::max)
            .min(1.0);
        let beta = eigenvalues
            .iter()
            .map(|v| (1.0 - v).abs())
            .fold(0.0_f64, f64::max);
        Ok(Self {
            zeta,
            beta,
            rho: 1.0 - zeta,
            eigenvalues,
        })
    }
}

/// Topology as named in configuration files and on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologySpec {
    Ring(usize),
    QuasiRing(usize),
    Complete(usize),
    Identity(usize),
    GroupRing { groups: usize, group_size: usize },
    Adjacency { path: PathBuf, nodes: Option<usize> },
}

impl TopologySpec {
    /// Parses `ring`, `quasi_ring`, `complete`, `identity` (node count from
    /// `nodes` or a `:<n>` suffix), `group_ring:<g>x<s>` and
    /// `adjacency:<path>`.
    pub fn parse(spec: &str, nodes: Option<usize>) -> Result<Self> {
        let (kind, arg) = match spec.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (spec.trim(), None),
        };
        let count = || -> Result<usize> {
            match (arg, nodes) {
                (Some(a), _) => a
                    .parse::<usize>()
                    .map_err(|e| Error::config("topology", format!("bad node count `{a}`: {e}"))),
                (None, Some(n)) => Ok(n),
                (None, None) => Err(Error::config(
                    "topology",
                    format!("`{kind}` needs a node count"),
                )),
            }
        };
        match kind {
            "ring" => Ok(Self::Ring(count()?)),
            "quasi_ring" | "quasi-ring" => Ok(Self::QuasiRing(count()?)),
            "complete" => Ok(Self::Complete(count()?)),
            "identity" => Ok(Self::Identity(count()?)),
            "group_ring" | "group-ring" => {
                let a = arg.ok_or_else(|| {
                    Error::config("topology", "group_ring needs `<groups>x<size>`")
                })?;
                let (g, s) = a
                    .split_once('x')
                    .ok_or_else(|| Error::config("topology", format!("bad group ring `{a}`")))?;
                let parse = |v: &str| {
                    v.parse::<usize>().map_err(|e| {
                        Error::config("topology", format!("bad group ring `{a}`: {e}"))
                    })
                };
                Ok(Self::GroupRing {
                    groups: parse(g)?,
                    group_size: parse(s)?,
                })
            }
            "adjacency" => {
                let path = arg
                    .filter(|a| !a.is_empty())
                    .ok_or_else(|| Error::config("topology", "adjacency needs a file path"))?;
                Ok(Self::Adjacency {
                    path: PathBuf::from(path),
                    nodes,
                })
            }
            other => Err(Error::config(
                "topology",
                format!("unknown topology `{other}`"),
            )),
        }
    }

    pub fn build(&self) -> Result<MixingMatrix> {
        match self {
            Self::Ring(n) => MixingMatrix::ring(*n),
            Self::QuasiRing(n) => MixingMatrix::quasi_ring(*n),
            Self::Complete(n) => MixingMatrix::complete(*n),
            Self::Identity(n) => MixingMatrix::identity(*n),
            Self::GroupRing { groups, group_size } => {
                MixingMatrix::group_ring(*groups, *group_size)
            }
            Self::Adjacency { path, nodes } => {
                let adj = Adjacency::read_edge_list(path, *nodes)?;
                MixingMatrix::from_adjacency(&adj, WeightScheme::UniformDegree)
            }
        }
    }
}

impl fmt::Display for TopologySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ring(n) => write!(f, "ring:{n}"),
            Self::QuasiRing(n) => write!(f, "quasi_ring:{n}"),
            Self::Complete(n) => write!(f, "complete:{n}"),
            Self::Identity(n) => write!(f, "identity:{n}"),
            Self::GroupRing { groups, group_size } => write!(f, "group_ring:{groups}x{group_size}"),
            Self::Adjacency { path, .. } => write!(f, "adjacency:{}", path.display()),
        }
    }
}

impl FromStr for TopologySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, None)
    }
}
