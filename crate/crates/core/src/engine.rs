//! The DFL schedule and its D-SGD and C-SGD special cases.
//!
//! Node parameters are the columns of a `d × N` matrix `X`. A local step
//! replaces `X` by `X − η G` with one stochastic gradient per column, a
//! gossip step by `X C`.
//!
//! Steps are numbered from 1. Step `t ≤ Kτ` is local when
//! `(t − 1) mod τ < τ₁` and gossip otherwise; the `T − Kτ` trailing steps
//! are local.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{Batch, GlobalObjective};
use crate::seed::{seed_stream, Purpose};
use crate::topology::MixingMatrix;

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Local,
    Gossip,
    /// A D-SGD step: gossip and a local update in one.
    Mixed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Local => "local",
            Phase::Gossip => "gossip",
            Phase::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Phase::Init),
            "local" => Ok(Phase::Local),
            "gossip" => Ok(Phase::Gossip),
            "mixed" => Ok(Phase::Mixed),
            other => Err(Error::Parse(format!("unknown phase `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub tau1: usize,
    pub tau2: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(tau1: usize, tau2: usize, total_steps: usize) -> Result<Self> {
        if tau1 == 0 || tau2 == 0 {
            return Err(Error::InvalidSchedule(format!(
                "tau1 and tau2 must be >= 1 (got {tau1}, {tau2})"
            )));
        }
        let tau = tau1 + tau2;
        if total_steps < tau {
            return Err(Error::InvalidSchedule(format!(
                "T = {total_steps} is shorter than one round ({tau})"
            )));
        }
        let tail = total_steps % tau;
        if tail > tau1 {
            return Err(Error::InvalidSchedule(format!(
                "T - K*tau = {tail} exceeds tau1 = {tau1}"
            )));
        }
        Ok(Self {
            tau1,
            tau2,
            total_steps,
        })
    }

    pub fn tau(&self) -> usize {
        self.tau1 + self.tau2
    }

    /// Number of complete rounds `K`.
    pub fn rounds(&self) -> usize {
        self.total_steps / self.tau()
    }

    /// Phase of 1-based step `t`.
    pub fn phase(&self, t: usize) -> Phase {
        assert!(t >= 1 && t <= self.total_steps, "step {t} out of range");
        if t > self.rounds() * self.tau() || (t - 1) % self.tau() < self.tau1 {
            Phase::Local
        } else {
            Phase::Gossip
        }
    }

    /// 0-based round index of step `t`; trailing steps belong to round `K`.
    pub fn round_of(&self, t: usize) -> usize {
        (t - 1) / self.tau()
    }
}

/// Step-size law. `Prop2 { a }` gives `η_k = 4 / (μ (a + k))` in round `k`
/// (0-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrLaw {
    Constant(f64),
    Prop2 { a: f64 },
}

impl LrLaw {
    pub fn rate(&self, round: usize, mu: f64) -> f64 {
        match *self {
            LrLaw::Constant(eta) => eta,
            LrLaw::Prop2 { a } => 4.0 / (mu * (a + round as f64)),
        }
    }

    fn validate(&self, mu: f64) -> Result<()> {
        match *self {
            LrLaw::Constant(eta) if !(eta > 0.0 && eta.is_finite()) => Err(Error::config(
                "lr_law",
                format!("learning rate must be > 0, got {eta}"),
            )),
            LrLaw::Prop2 { a } if !(a > 0.0) => Err(Error::config(
                "lr_law",
                format!("shift a must be > 0, got {a}"),
            )),
            LrLaw::Prop2 { .. } if !(mu > 0.0) => Err(Error::UnsupportedObjective(
                "prop2 learning rate needs a strongly convex objective".into(),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LrLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrLaw::Constant(eta) => write!(f, "constant:{eta}"),
            LrLaw::Prop2 { a } => write!(f, "prop2:{a}"),
        }
    }
}

impl FromStr for LrLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').ok_or_else(|| {
            Error::config("lr_law", format!("expected `<kind>:<value>`, got `{s}`"))
        })?;
        let value: f64 = arg
            .trim()
            .parse()
            .map_err(|e| Error::config("lr_law", format!("bad value `{arg}`: {e}")))?;
        match kind.trim() {
            "constant" => Ok(LrLaw::Constant(value)),
            "prop2" => Ok(LrLaw::Prop2 { a: value }),
            other => Err(Error::config("lr_law", format!("unknown law `{other}`"))),
        }
    }
}

/// Stacked node parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub x: DMatrix<f64>,
    pub t: usize,
}

impl GlobalState {
    /// Every node starts from `w0`.
    pub fn uniform(w0: &DVector<f64>, n: usize) -> Self {
        let x = DMatrix::from_fn(w0.len(), n, |r, _| w0[r]);
        Self { x, t: 0 }
    }

    pub fn nodes(&self) -> usize {
        self.x.ncols()
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    /// `u = X 1 / N`.
    pub fn average(&self) -> DVector<f64> {
        self.x.column_mean()
    }

    /// `‖X (I − J)‖²_F`.
    pub fn consensus_distance(&self) -> f64 {
        let u = self.average();
        self.x.column_iter().map(|c| (c - &u).norm_squared()).sum()
    }
}

/// The shared starting point: `0.1 · N(0, I)` from the init stream.
pub fn default_init(seed: u64, dim: usize) -> DVector<f64> {
    let mut rng = seed_stream(seed, 0, 0, Purpose::Init);
    DVector::from_fn(dim, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub consensus_dist: f64,
    pub bytes: u64,
    pub grad_evals: u64,
}

pub const METRICS_HEADER: &str = "step,phase,loss,grad_norm_sq,consensus_dist,bytes,grad_evals";

/// One row per step. Row 0 is the initial state; row `t` is the state after
/// step `t` with byte and gradient-evaluation counters cumulative through
/// that step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub rows: Vec<MetricRow>,
}

impl TrajectoryMetrics {
    /// Rows for executed steps (everything after the initial row).
    pub fn step_rows(&self) -> &[MetricRow] {
        match self.rows.first() {
            Some(r) if r.phase == Phase::Init => &self.rows[1..],
            _ => &self.rows,
        }
    }

    /// Mean of `grad_norm_sq` over the step rows.
    pub fn summary_grad_norm_sq(&self) -> f64 {
        let rows = self.step_rows();
        if rows.is_empty() {
            return f64::NAN;
        }
        rows.iter().map(|r| r.grad_norm_sq).sum::<f64>() / rows.len() as f64
    }

    /// `(1/T) Σ_{t=1..T} ‖∇F(u_t)‖²` with `u_1` the initial point, i.e. the
    /// mean over every row except the last.
    pub fn running_grad_norm_sq(&self) -> f64 {
        let n = self.rows.len().saturating_sub(1);
        if n == 0 {
            return f64::NAN;
        }
        self.rows[..n].iter().map(|r| r.grad_norm_sq).sum::<f64>() / n as f64
    }

    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn total_bytes(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.bytes)
    }

    pub fn total_grad_evals(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.grad_evals)
    }

    /// Loss of the last row whose cumulative bytes do not exceed `budget`.
    pub fn loss_at_bytes(&self, budget: u64) -> Option<f64> {
        self.rows
            .iter()
            .take_while(|r| r.bytes <= budget)
            .last()
            .map(|r| r.loss)
    }

    /// Loss after `step` steps (clamped to the run length).
    pub fn loss_at_step(&self, step: usize) -> Option<f64> {
        self.rows
            .iter()
            .take_while(|r| r.step <= step)
            .last()
            .map(|r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{},{}\n",
                r.step, r.phase, r.loss, r.grad_norm_sq, r.consensus_dist, r.bytes, r.grad_evals
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if headers != METRICS_HEADER {
            return Err(Error::Parse(format!(
                "{}: unexpected header `{headers}`",
                path.display()
            )));
        }
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<MetricRow>, _>>()
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Ok(Self { rows })
    }
}

/// Settings shared by every runner.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub lr: LrLaw,
    pub batch: Batch,
    pub seed: u64,
    /// Common starting point; [`default_init`] when `None`.
    pub init: Option<DVector<f64>>,
}

impl RunConfig {
    pub fn new(lr: LrLaw, batch: Batch, seed: u64) -> Self {
        Self {
            lr,
            batch,
            seed,
            init: None,
        }
    }

    pub(crate) fn initial_state(&self, obj: &GlobalObjective) -> Result<GlobalState> {
        let w0 = match &self.init {
            Some(w) if w.len() != obj.dim() => {
                return Err(Error::shape(
                    format!("init of dimension {}", obj.dim()),
                    w.len(),
                ))
            }
            Some(w) => w.clone(),
            None => default_init(self.seed, obj.dim()),
        };
        Ok(GlobalState::uniform(&w0, obj.num_nodes()))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: TrajectoryMetrics,
    pub state: GlobalState,
}

/// Bytes sent by one uncompressed gossip step: a `d`-vector of doubles on
/// every directed edge.
pub fn dense_gossip_bytes(c: &MixingMatrix, dim: usize) -> u64 {
    (c.directed_edges().len() * dim * 8) as u64
}

/// `X ← X − η G`, with node `i` drawing its batch from the
/// `(seed, i, step, Batch)` stream. Returns the number of gradient
/// evaluations (one per node).
pub fn local_update_step(
    state: &mut GlobalState,
    obj: &GlobalObjective,
    eta: f64,
    batch: Batch,
    seed: u64,
    step: usize,
) -> Result<u64> {
    let grads = node_gradients(&state.x, obj, batch, seed, step)?;
    state.x -= grads * eta;
    state.t = step;
    Ok(obj.num_nodes() as u64)
}

pub(crate) fn node_gradients(
    x: &DMatrix<f64>,
    obj: &GlobalObjective,
    batch: Batch,
    seed: u64,
    step: usize,
) -> Result<DMatrix<f64>> {
    if x.ncols() != obj.num_nodes() {
        return Err(Error::shape(
            format!("{} nodes", obj.num_nodes()),
            x.ncols(),
        ));
    }
    let mut grads = DMatrix::zeros(x.nrows(), x.ncols());
    for (i, local) in obj.locals().iter().enumerate() {
        let mut rng = seed_stream(seed, i, step, Purpose::Batch);
        let w = x.column(i).into_owned();
        let g = local.sample_gradient_with(&w, batch, &mut rng)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step,
                metrics: Box::default(),
            });
        }
        grads.set_column(i, &g);
    }
    Ok(grads)
}

/// `X ← X C`.
pub fn gossip_step(state: &mut GlobalState, c: &MixingMatrix) -> Result<()> {
    if state.nodes() != c.n() {
        return Err(Error::shape(format!("{} nodes", c.n()), state.nodes()));
    }
    state.x = &state.x * c.entries();
    Ok(())
}

pub(crate) struct Recorder<'a> {
    obj: &'a GlobalObjective,
    pub metrics: TrajectoryMetrics,
    pub bytes: u64,
    pub grad_evals: u64,
}

impl<'a> Recorder<'a> {
    pub fn new(obj: &'a GlobalObjective) -> Self {
        Self {
            obj,
            metrics: TrajectoryMetrics::default(),
            bytes: 0,
            grad_evals: 0,
        }
    }

    /// Appends a row for `u = avg`, failing with the partial trajectory if
    /// the loss is non-finite or above [`DIVERGENCE_LOSS`].
    pub fn record(&mut self, step: usize, phase: Phase, state: &GlobalState) -> Result<()> {
        let u = state.average();
        let loss = self.obj.loss(&u)?;
        let grad_norm_sq = self.obj.gradient(&u)?.norm_squared();
        self.metrics.rows.push(MetricRow {
            step,
            phase,
            loss,
            grad_norm_sq,
            consensus_dist: state.consensus_distance(),
            bytes: self.bytes,
            grad_evals: self.grad_evals,
        });
        if !loss.is_finite() || loss > DIVERGENCE_LOSS || !grad_norm_sq.is_finite() {
            return Err(self.diverged(step));
        }
        Ok(())
    }

    pub fn diverged(&self, step: usize) -> Error {
        Error::Diverged {
            step,
            metrics: Box::new(self.metrics.clone()),
        }
    }

    /// Replaces the empty metrics of a divergence raised below the recorder.
    pub fn attach<T>(&self, r: Result<T>) -> Result<T> {
        match r {
            Err(Error::Diverged { step, .. }) => Err(self.diverged(step)),
            other => other,
        }
    }
}

/// DFL: `τ₁` local steps then `τ₂` gossip steps per round, then the
/// trailing local steps.
pub fn run_dfl(
    obj: &GlobalObjective,
    c: &MixingMatrix,
    schedule: &Schedule,
    cfg: &RunConfig,
) -> Result<RunOutput> {
    check_nodes(obj, c)?;
    let mu = obj.strong_convexity();
    cfg.lr.validate(mu)?;
    let gossip_bytes = dense_gossip_bytes(c, obj.dim());
    let mut state = cfg.initial_state(obj)?;
    let mut rec = Recorder::new(obj);
    rec.record(0, Phase::Init, &state)?;
    for t in 1..=schedule.total_steps {
        let phase = schedule.phase(t);
        match phase {
            Phase::Local => {
                let eta = cfg.lr.rate(schedule.round_of(t), mu);
                let evals = rec.attach(local_update_step(
                    &mut state, obj, eta, cfg.batch, cfg.seed, t,
                ))?;
                rec.grad_evals += evals;
            }
            _ => {
                gossip_step(&mut state, c)?;
                state.t = t;
                rec.bytes += gossip_bytes;
            }
        }
        rec.record(t, phase, &state)?;
    }
    Ok(RunOutput {
        metrics: rec.metrics,
        state,
    })
}

/// D-SGD: `X_{t+1} = X_t C − η G_t` with `G_t` evaluated at `X_t`.
pub fn run_dsgd(
    obj: &GlobalObjective,
    c: &MixingMatrix,
    total_steps: usize,
    cfg: &RunConfig,
) -> Result<RunOutput> {
    check_nodes(obj, c)?;
    let mu = obj.strong_convexity();
    cfg.lr.validate(mu)?;
    let gossip_bytes = dense_gossip_bytes(c, obj.dim());
    let mut state = cfg.initial_state(obj)?;
    let mut rec = Recorder::new(obj);
    rec.record(0, Phase::Init, &state)?;
    for t in 1..=total_steps {
        let eta = cfg.lr.rate(t - 1, mu);
        let grads = rec.attach(node_gradients(&state.x, obj, cfg.batch, cfg.seed, t))?;
        state.x = &state.x * c.entries() - grads * eta;
        state.t = t;
        rec.bytes += gossip_bytes;
        rec.grad_evals += obj.num_nodes() as u64;
        rec.record(t, Phase::Mixed, &state)?;
    }
    Ok(RunOutput {
        metrics: rec.metrics,
        state,
    })
}

/// C-SGD: rounds of `τ` local steps followed by one gossip step. The gossip
/// counts as a step of its own, so `total_steps` and the step numbering match
/// `run_dfl` with `τ₁ = τ, τ₂ = 1`.
pub fn run_csgd(
    obj: &GlobalObjective,
    c: &MixingMatrix,
    tau: usize,
    total_steps: usize,
    cfg: &RunConfig,
) -> Result<RunOutput> {
    check_nodes(obj, c)?;
    let schedule = Schedule::new(tau, 1, total_steps)?;
    let mu = obj.strong_convexity();
    cfg.lr.validate(mu)?;
    let gossip_bytes = dense_gossip_bytes(c, obj.dim());
    let mut state = cfg.initial_state(obj)?;
    let mut rec = Recorder::new(obj);
    rec.record(0, Phase::Init, &state)?;
    let mut t = 0;
    let local = |state: &mut GlobalState, rec: &mut Recorder, t: usize, round: usize| {
        let eta = cfg.lr.rate(round, mu);
        let evals = rec.attach(local_update_step(state, obj, eta, cfg.batch, cfg.seed, t))?;
        rec.grad_evals += evals;
        rec.record(t, Phase::Local, state)
    };
    for round in 0..schedule.rounds() {
        for _ in 0..tau {
            t += 1;
            local(&mut state, &mut rec, t, round)?;
        }
        t += 1;
        state.x = &state.x * c.entries();
        state.t = t;
        rec.bytes += gossip_bytes;
        rec.record(t, Phase::Gossip, &state)?;
    }
    while t < total_steps {
        t += 1;
        local(&mut state, &mut rec, t, schedule.rounds())?;
    }
    Ok(RunOutput {
        metrics: rec.metrics,
        state,
    })
}

fn check_nodes(obj: &GlobalObjective, c: &MixingMatrix) -> Result<()> {
    if obj.num_nodes() != c.n() {
        return Err(Error::shape(
            format!("mixing matrix for {} nodes", obj.num_nodes()),
            c.n(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderDiscrepancy {
    /// `max_t ‖u_t^{comm-first} − u_t^{comp-first}‖_∞`.
    pub average: f64,
    /// Same over individual node parameters.
    pub per_node: f64,
}

/// Runs communicate-then-compute (`X C − η G`) and compute-then-communicate
/// (`(X − η G) C`) side by side from `x0`. `oracle(step, node, w)` supplies
/// the gradient.
pub fn order_equivalence_check<F>(
    c: &MixingMatrix,
    x0: &DMatrix<f64>,
    total_steps: usize,
    eta: f64,
    mut oracle: F,
) -> Result<OrderDiscrepancy>
where
    F: FnMut(usize, usize, &DVector<f64>) -> DVector<f64>,
{
    if x0.ncols() != c.n() {
        return Err(Error::shape(format!("{} nodes", c.n()), x0.ncols()));
    }
    let mut comm = x0.clone();
    let mut comp = x0.clone();
    let mut out = OrderDiscrepancy {
        average: 0.0,
        per_node: 0.0,
    };
    let mut grads = |x: &DMatrix<f64>, t: usize| {
        let mut g = DMatrix::zeros(x.nrows(), x.ncols());
        for i in 0..x.ncols() {
            g.set_column(i, &oracle(t, i, &x.column(i).into_owned()));
        }
        g
    };
    for t in 1..=total_steps {
        let g_comm = grads(&comm, t);
        let g_comp = grads(&comp, t);
        comm = &comm * c.entries() - g_comm * eta;
        comp = (&comp - g_comp * eta) * c.entries();
        let du = (comm.column_mean() - comp.column_mean()).amax();
        out.average = out.average.max(du);
        out.per_node = out.per_node.max((&comm - &comp).amax());
    }
    Ok(out)
}
