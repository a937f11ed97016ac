//! Compression operators, CHOCO-G compressed gossip and the C-DFL loop.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::engine::{
    local_update_step, LrLaw, Phase, Recorder, RunConfig, Schedule, TrajectoryMetrics,
};
use crate::error::{Error, Result};
use crate::objective::GlobalObjective;
use crate::seed::{seed_stream, Purpose};
use crate::topology::MixingMatrix;

/// An operator `Q` with `E‖Q(x) − x‖² ≤ (1 − δ)‖x‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompressionOp {
    /// No compression (`δ = 1`).
    Identity,
    /// Keep the `k` largest magnitudes; ties go to the lower index.
    TopK(usize),
    /// Keep `k` coordinates chosen uniformly without replacement.
    RandK(usize),
    /// Send everything with probability `p`, otherwise nothing.
    Gossip(f64),
    /// Scaled stochastic quantisation with `s` levels.
    Qsgd(u32),
}

/// Output of one compression: the decoded vector and its wire size.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub value: DVector<f64>,
    pub bytes: u64,
}

impl CompressionOp {
    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::InvalidOperator("dimension must be >= 1".into()));
        }
        match *self {
            CompressionOp::TopK(k) | CompressionOp::RandK(k) if k == 0 || k > d => {
                Err(Error::InvalidOperator(format!("k = {k} outside 1..={d}")))
            }
            CompressionOp::Gossip(p) if !(p > 0.0 && p <= 1.0) => Err(Error::InvalidOperator(
                format!("probability {p} outside (0, 1]"),
            )),
            CompressionOp::Qsgd(0) => Err(Error::InvalidOperator("qsgd needs s >= 1".into())),
            _ => Ok(()),
        }
    }

    fn qsgd_c(s: u32, d: usize) -> f64 {
        let (s, d) = (s as f64, d as f64);
        1.0 + (d / (s * s)).min(d.sqrt() / s)
    }

    /// Nominal compression ratio `δ` in dimension `d`.
    pub fn delta(&self, d: usize) -> f64 {
        match *self {
            CompressionOp::Identity => 1.0,
            CompressionOp::TopK(k) | CompressionOp::RandK(k) => k as f64 / d as f64,
            CompressionOp::Gossip(p) => p,
            CompressionOp::Qsgd(s) => 1.0 / Self::qsgd_c(s, d),
        }
    }

    pub fn compress(&self, x: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<Compressed> {
        let d = x.len();
        self.validate(d)?;
        let dense = (d * 8) as u64;
        Ok(match *self {
            CompressionOp::Identity => Compressed {
                value: x.clone(),
                bytes: dense,
            },
            CompressionOp::TopK(k) => {
                let mut order: Vec<usize> = (0..d).collect();
                // stable sort keeps lower indices first among equal magnitudes
                order.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()));
                let mut value = DVector::zeros(d);
                for &i in &order[..k] {
                    value[i] = x[i];
                }
                Compressed {
                    value,
                    bytes: (k * 12) as u64,
                }
            }
            CompressionOp::RandK(k) => {
                let mut value = DVector::zeros(d);
                for i in sample(rng, d, k) {
                    value[i] = x[i];
                }
                Compressed {
                    value,
                    bytes: (k * 8 + 8) as u64,
                }
            }
            CompressionOp::Gossip(p) => {
                if rng.random::<f64>() < p {
                    Compressed {
                        value: x.clone(),
                        bytes: dense,
                    }
                } else {
                    Compressed {
                        value: DVector::zeros(d),
                        bytes: 1,
                    }
                }
            }
            CompressionOp::Qsgd(s) => {
                let bits = (2.0 * s as f64 + 1.0).log2().ceil() as usize;
                let bytes = (d * bits).div_ceil(8) as u64 + 8;
                let norm = x.norm();
                let mut value = DVector::zeros(d);
                if norm > 0.0 {
                    let s = s as f64;
                    let scale = norm / (s * Self::qsgd_c(s as u32, d));
                    for i in 0..d {
                        let xi: f64 = rng.random();
                        let level = (s * x[i].abs() / norm + xi).floor();
                        value[i] = x[i].signum() * scale * level;
                    }
                }
                Compressed { value, bytes }
            }
        })
    }
}

impl fmt::Display for CompressionOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressionOp::Identity => f.write_str("none"),
            CompressionOp::TopK(k) => write!(f, "topk:{k}"),
            CompressionOp::RandK(k) => write!(f, "randk:{k}"),
            CompressionOp::Gossip(p) => write!(f, "gossip:{p}"),
            CompressionOp::Qsgd(s) => write!(f, "qsgd:{s}"),
        }
    }
}

impl FromStr for CompressionOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(CompressionOp::Identity);
        }
        let bad = |why: String| Error::config("compression", why);
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| bad(format!("expected `<kind>:<arg>`, got `{s}`")))?;
        let int = || {
            arg.trim()
                .parse::<usize>()
                .map_err(|e| bad(format!("bad argument `{arg}`: {e}")))
        };
        match kind.trim() {
            "topk" => Ok(CompressionOp::TopK(int()?)),
            "randk" => Ok(CompressionOp::RandK(int()?)),
            "qsgd" => Ok(CompressionOp::Qsgd(int()? as u32)),
            "gossip" => arg
                .trim()
                .parse::<f64>()
                .map(CompressionOp::Gossip)
                .map_err(|e| bad(format!("bad probability `{arg}`: {e}"))),
            other => Err(bad(format!("unknown operator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeContraction {
    pub label: String,
    /// Monte-Carlo mean of `‖Q(x) − x‖² / ‖x‖²`.
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub delta: f64,
    pub probes: Vec<ProbeContraction>,
}

impl ContractionReport {
    /// Largest probe mean.
    pub fn ratio(&self) -> f64 {
        self.probes.iter().map(|p| p.mean).fold(0.0, f64::max)
    }

    /// Every probe satisfies `mean ≤ (1 − δ) + 3·stderr`.
    pub fn holds(&self) -> bool {
        self.probes
            .iter()
            .all(|p| p.mean <= (1.0 - self.delta) + 3.0 * p.stderr + 1e-12)
    }
}

/// Fixed probe vectors: a few Gaussian draws plus flat, one-hot, spiked,
/// geometrically decaying and sign-alternating vectors.
pub fn probe_vectors(d: usize, seed: u64) -> Vec<(String, DVector<f64>)> {
    let mut out = Vec::new();
    for g in 0..4 {
        let mut rng = seed_stream(seed, g, 0, Purpose::Probe);
        out.push((
            format!("gaussian{g}"),
            DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)),
        ));
    }
    out.push(("ones".into(), DVector::from_element(d, 1.0)));
    let mut one_hot = DVector::zeros(d);
    one_hot[d - 1] = 1.0;
    out.push(("one_hot".into(), one_hot));
    let mut spike = DVector::from_element(d, 1.0);
    spike[0] = 3.0;
    out.push(("spike".into(), spike));
    out.push((
        "geometric".into(),
        DVector::from_fn(d, |i, _| 0.5f64.powi(i as i32)),
    ));
    out.push((
        "alternating".into(),
        DVector::from_fn(d, |i, _| if i % 2 == 0 { 1.0 } else { -2.0 }),
    ));
    out
}

/// Measures `E‖Q(x) − x‖² / ‖x‖²` on every probe vector.
pub fn empirical_contraction(
    op: &CompressionOp,
    d: usize,
    trials: usize,
    seed: u64,
) -> Result<ContractionReport> {
    op.validate(d)?;
    if trials < 2 {
        return Err(Error::config("trials", "need at least 2 trials"));
    }
    let probes = probe_vectors(d, seed)
        .into_iter()
        .enumerate()
        .map(|(p, (label, x))| {
            let norm_sq = x.norm_squared();
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for trial in 0..trials {
                let mut rng = seed_stream(seed, p, trial + 1, Purpose::Compression);
                let r = (op.compress(&x, &mut rng)?.value - &x).norm_squared() / norm_sq;
                sum += r;
                sum_sq += r * r;
            }
            let n = trials as f64;
            let mean = sum / n;
            let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
            Ok(ProbeContraction {
                label,
                mean,
                stderr: (var / n).sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ContractionReport {
        delta: op.delta(d),
        probes,
    })
}

/// Consensus step size `γ = ρ²δ / (16ρ + ρ² + 4β² + 2ρβ² − 8ρδ)`.
pub fn choco_gamma(rho: f64, beta: f64, delta: f64) -> Result<f64> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InfeasibleTopology);
    }
    let den =
        16.0 * rho + rho * rho + 4.0 * beta * beta + 2.0 * rho * beta * beta - 8.0 * rho * delta;
    if !(den > 0.0) {
        return Err(Error::Numeric(format!(
            "gamma denominator {den} is not positive"
        )));
    }
    Ok(rho * rho * delta / den)
}

/// Linear consensus rate `p = ρ²δ / 82`.
pub fn choco_rate(rho: f64, delta: f64) -> f64 {
    rho * rho * delta / 82.0
}

/// One transmitted `q` message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Message {
    pub step: usize,
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
}

pub const TRACE_HEADER: &str = "step,src,dst,bytes";

pub fn write_trace(messages: &[Message], path: &Path) -> Result<()> {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for m in messages {
        out.push_str(&format!("{},{},{},{}\n", m.step, m.src, m.dst, m.bytes));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Node parameters plus every node's copies of the public estimates `ŵ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChocoState {
    /// `d × N`, column `i` is `w⁽ⁱ⁾`.
    pub x: DMatrix<f64>,
    /// `replicas[h]` lists `(j, ŵ⁽ʲ⁾)` as held by node `h`: its own estimate
    /// and one per neighbour, in ascending `j`.
    replicas: Vec<Vec<(usize, DVector<f64>)>>,
}

impl ChocoState {
    /// Starts from `x` with every `ŵ` at zero.
    pub fn new(x: DMatrix<f64>, c: &MixingMatrix) -> Result<Self> {
        if x.ncols() != c.n() {
            return Err(Error::shape(format!("{} nodes", c.n()), x.ncols()));
        }
        let d = x.nrows();
        let replicas = (0..c.n())
            .map(|h| {
                let mut held = c.neighbors(h);
                held.push(h);
                held.sort_unstable();
                held.into_iter().map(|j| (j, DVector::zeros(d))).collect()
            })
            .collect();
        Ok(Self { x, replicas })
    }

    pub fn nodes(&self) -> usize {
        self.x.ncols()
    }

    pub fn average(&self) -> DVector<f64> {
        self.x.column_mean()
    }

    fn replica(&self, holder: usize, j: usize) -> &DVector<f64> {
        let held = &self.replicas[holder];
        let pos = held
            .binary_search_by_key(&j, |(k, _)| *k)
            .unwrap_or_else(|_| panic!("node {holder} holds no replica of {j}"));
        &held[pos].1
    }

    /// Node `i`'s own `ŵ⁽ⁱ⁾`.
    pub fn estimate(&self, i: usize) -> &DVector<f64> {
        self.replica(i, i)
    }

    /// Every holder of `ŵ⁽ʲ⁾` stores exactly the same vector.
    pub fn replicas_consistent(&self) -> bool {
        (0..self.nodes()).all(|j| {
            let own = self.estimate(j);
            self.replicas
                .iter()
                .flatten()
                .filter(|(k, _)| *k == j)
                .all(|(_, v)| v == own)
        })
    }

    /// `e = Σᵢ ‖wᵢ − u‖² + ‖wᵢ − ŵᵢ‖²`.
    pub fn consensus_error(&self) -> f64 {
        let u = self.average();
        (0..self.nodes())
            .map(|i| {
                let w = self.x.column(i);
                (w - &u).norm_squared() + (w - self.estimate(i)).norm_squared()
            })
            .sum()
    }

    pub fn consensus_distance(&self) -> f64 {
        let u = self.average();
        self.x.column_iter().map(|c| (c - &u).norm_squared()).sum()
    }
}

/// One synchronous CHOCO-G round. All corrections and messages are computed
/// from the pre-step snapshot, then every holder applies the messages.
/// Node `i` compresses with the `(seed, i, step, Compression)` stream.
pub fn choco_gossip_step(
    state: &mut ChocoState,
    c: &MixingMatrix,
    gamma: f64,
    op: &CompressionOp,
    seed: u64,
    step: usize,
) -> Result<Vec<Message>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::config(
            "gamma",
            format!("must lie in (0, 1], got {gamma}"),
        ));
    }
    if state.nodes() != c.n() {
        return Err(Error::shape(format!("{} nodes", c.n()), state.nodes()));
    }
    let n = state.nodes();
    let mut qs = Vec::with_capacity(n);
    let mut messages = Vec::new();
    for i in 0..n {
        let own = state.estimate(i).clone();
        let mut correction = DVector::zeros(state.x.nrows());
        for (j, hat) in &state.replicas[i] {
            if *j != i {
                correction.axpy(c.weight(*j, i), &(hat - &own), 1.0);
            }
        }
        let w_new = state.x.column(i) + correction * gamma;
        let mut rng = seed_stream(seed, i, step, Purpose::Compression);
        let q = op.compress(&(&w_new - &own), &mut rng)?;
        for dst in c.neighbors(i) {
            messages.push(Message {
                step,
                src: i,
                dst,
                bytes: q.bytes,
            });
        }
        state.x.set_column(i, &w_new);
        qs.push(q.value);
    }
    for held in &mut state.replicas {
        for (j, hat) in held.iter_mut() {
            *hat += &qs[*j];
        }
    }
    Ok(messages)
}

/// Gradient-free CHOCO-G from `x0`. Returns `e_t` for `t = 0..=steps`.
pub fn run_choco_consensus(
    c: &MixingMatrix,
    x0: DMatrix<f64>,
    gamma: f64,
    op: &CompressionOp,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut state = ChocoState::new(x0, c)?;
    let mut errors = Vec::with_capacity(steps + 1);
    errors.push(state.consensus_error());
    for t in 1..=steps {
        choco_gossip_step(&mut state, c, gamma, op, seed, t)?;
        debug_assert!(state.replicas_consistent());
        errors.push(state.consensus_error());
    }
    Ok(errors)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    /// From `(ρ, β, δ)`.
    Auto,
    Fixed(f64),
}

impl fmt::Display for Gamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gamma::Auto => f.write_str("auto"),
            Gamma::Fixed(g) => write!(f, "{g}"),
        }
    }
}

impl FromStr for Gamma {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(Gamma::Auto),
            v => v
                .parse::<f64>()
                .map(Gamma::Fixed)
                .map_err(|e| Error::config("gamma", format!("bad value `{v}`: {e}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdflConfig {
    /// Must satisfy `T = Kτ`.
    pub schedule: Schedule,
    pub op: CompressionOp,
    pub gamma: Gamma,
    /// Record every message.
    pub trace: bool,
}

#[derive(Debug, Clone)]
pub struct CdflOutput {
    pub metrics: TrajectoryMetrics,
    pub state: ChocoState,
    /// `Σ (a+k)² u⁽ᵏ⁾ / S_K` over round-start averages `u⁽ᵏ⁾`, `k < K`.
    pub w_avg: DVector<f64>,
    pub gamma: f64,
    pub messages: Vec<Message>,
}

/// Shift `a` used for the averaging weights: the prop2 shift, or `16κ` for a
/// constant step size.
pub fn averaging_shift(lr: &LrLaw, kappa: f64) -> f64 {
    match *lr {
        LrLaw::Prop2 { a } => a,
        LrLaw::Constant(_) => 16.0 * kappa,
    }
}

/// C-DFL: per round `k`, `τ₁` local steps with `η_k` then `τ₂` CHOCO-G steps.
pub fn run_cdfl(
    obj: &GlobalObjective,
    c: &MixingMatrix,
    cfg: &CdflConfig,
    run: &RunConfig,
) -> Result<CdflOutput> {
    if obj.num_nodes() != c.n() {
        return Err(Error::shape(
            format!("mixing matrix for {} nodes", obj.num_nodes()),
            c.n(),
        ));
    }
    let mu = obj.strong_convexity();
    if !(mu > 0.0) {
        return Err(Error::UnsupportedObjective(
            "C-DFL needs a strongly convex objective (mu > 0)".into(),
        ));
    }
    let sched = cfg.schedule;
    if !sched.total_steps.is_multiple_of(sched.tau()) {
        return Err(Error::InvalidSchedule(format!(
            "C-DFL needs T to be a multiple of tau = {}",
            sched.tau()
        )));
    }
    let d = obj.dim();
    cfg.op.validate(d)?;
    let spectral = c.spectral()?;
    if spectral.rho <= 1e-12 {
        return Err(Error::InfeasibleTopology);
    }
    let gamma = match cfg.gamma {
        Gamma::Auto => choco_gamma(spectral.rho, spectral.beta, cfg.op.delta(d))?,
        Gamma::Fixed(g) => g,
    };
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::config(
            "gamma",
            format!("must lie in (0, 1], got {gamma}"),
        ));
    }
    let a = averaging_shift(&run.lr, obj.smoothness() / mu);
    let start = run.initial_state(obj)?;
    let mut gstate = start.clone();
    let mut choco = ChocoState::new(start.x, c)?;
    let mut rec = Recorder::new(obj);
    rec.record(0, Phase::Init, &gstate)?;
    let mut messages = Vec::new();
    let mut w_sum = DVector::zeros(d);
    let mut s_k = 0.0;
    let mut t = 0;
    for k in 0..sched.rounds() {
        let weight = (a + k as f64).powi(2);
        w_sum.axpy(weight, &choco.average(), 1.0);
        s_k += weight;
        let eta = run.lr.rate(k, mu);
        for _ in 0..sched.tau1 {
            t += 1;
            gstate.x = choco.x.clone();
            let evals = rec.attach(local_update_step(
                &mut gstate,
                obj,
                eta,
                run.batch,
                run.seed,
                t,
            ))?;
            choco.x = gstate.x.clone();
            rec.grad_evals += evals;
            rec.record(t, Phase::Local, &gstate)?;
        }
        for _ in 0..sched.tau2 {
            t += 1;
            let sent = choco_gossip_step(&mut choco, c, gamma, &cfg.op, run.seed, t)?;
            debug_assert!(choco.replicas_consistent());
            rec.bytes += sent.iter().map(|m| m.bytes).sum::<u64>();
            if cfg.trace {
                messages.extend(sent);
            }
            gstate.x = choco.x.clone();
            gstate.t = t;
            rec.record(t, Phase::Gossip, &gstate)?;
        }
    }
    Ok(CdflOutput {
        metrics: rec.metrics,
        state: choco,
        w_avg: w_sum / s_k,
        gamma,
        messages,
    })
}
